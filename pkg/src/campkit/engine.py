"""End-to-end fitting: adapt the base measure and concentration over several
sampling rounds, then estimate per-user transition kernels from the final
round of assignment samples.

The fitted model also supports an exact expansion of each user's kernel
estimate as an affine combination of all users' empirical kernels.  That
expansion enumerates cluster chains across rounds and is exponential in the
number of rounds; it is intended for verification and similarity analysis at
small depth, while :func:`estimate_theta` is the production path.  The two
agree exactly as long as component pruning never triggered during fitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .dirichlet import (KernelEstimate, MixtureBase, condition, log_xi,
                        merge_duplicates, posterior_mean, prune)
from .gibbs import ClusterAssignment, GibbsConfig, draw_batch
from .traces import TraceSet, TransitionCounts

ALPHA_LOWER = 1e-6
ALPHA_UPPER = 1e6


class CampError(ValueError):
    """Invalid fitting configuration or request."""


@dataclass(frozen=True)
class CampConfig:
    """Fitting parameters: rounds, chains per round, sweeps per chain, seed."""

    iterations: int = 3           # rounds of sampling (base/alpha update after all but the last)
    samples_per_iteration: int = 8
    sweeps: int = 30
    seed: int = 0
    max_components: int = 512
    min_weight: float = 1e-10
    chain_budget: int = 10 ** 6

    def __post_init__(self):
        if self.iterations < 1 or self.samples_per_iteration < 1 or self.sweeps < 1:
            raise CampError("iterations, samples_per_iteration and sweeps must be >= 1")


@dataclass
class CampModel:
    """Fitted state: adapted base, concentration, all sampling rounds, kernels."""

    base: MixtureBase
    alpha: float
    rounds: list
    thetas: dict
    counts: dict
    user_ids: tuple
    n_locations: int
    config: CampConfig

    _prefix_cache: list | None = None

    @property
    def final_samples(self) -> list:
        return self.rounds[-1]

    def theta(self, user) -> KernelEstimate:
        if user not in self.thetas:
            raise CampError(f"unknown user {user!r}")
        return self.thetas[user]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "n_locations": self.n_locations,
            "user_ids": list(self.user_ids),
            "base": self.base.to_dict(),
            "final_samples": [s.to_dict() for s in self.final_samples],
            "theta": {u: k.theta.tolist() for u, k in self.thetas.items()},
            "config": {
                "iterations": self.config.iterations,
                "samples_per_iteration": self.config.samples_per_iteration,
                "sweeps": self.config.sweeps,
                "seed": self.config.seed,
                "max_components": self.config.max_components,
                "min_weight": self.config.min_weight,
            },
        }


def update_base(base: MixtureBase, samples: list) -> MixtureBase:
    """Average the base conditioned on every sampled cluster, weighted by size.

    Weights n_c / (B * U) sum to one across all clusters of all samples, so
    the flattened mixture is normalized by construction.  Duplicate components
    (identical accumulated counts) are merged; no pruning happens here.
    """
    if not samples:
        raise CampError("need at least one assignment sample")
    n_users = len(samples[0].assignment)
    denom = len(samples) * n_users
    weights, mats = [], []
    for sample in samples:
        for cluster in sample.clusters.values():
            conditioned = condition(base, cluster.counts)
            share = len(cluster.members) / denom
            weights.extend(share * conditioned.weights)
            mats.append(conditioned.pseudo)
    flat = MixtureBase(np.array(weights), np.concatenate(mats, axis=0))
    return merge_duplicates(flat)


def expected_cluster_count(alpha: float, n_users: int) -> float:
    """Mean number of clusters the partition prior induces on n_users users."""
    i = np.arange(1, n_users + 1, dtype=np.float64)
    return float((alpha / (alpha + i - 1)).sum())


def solve_alpha(mean_clusters: float, n_users: int, tol: float = 1e-9) -> float:
    """Concentration whose expected cluster count matches ``mean_clusters``.

    The objective is continuous and strictly increasing from 1 to n_users, so
    bisection on [ALPHA_LOWER, ALPHA_UPPER] is exact; out-of-range targets
    clamp to the interval ends.
    """
    if mean_clusters <= 1.0:
        return ALPHA_LOWER
    if mean_clusters >= n_users:
        return ALPHA_UPPER
    lo, hi = ALPHA_LOWER, ALPHA_UPPER
    if expected_cluster_count(lo, n_users) >= mean_clusters:
        return lo
    if expected_cluster_count(hi, n_users) <= mean_clusters:
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if expected_cluster_count(mid, n_users) < mean_clusters:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def update_alpha(samples: list, n_users: int) -> float:
    """Refit the concentration to the mean cluster count of ``samples``."""
    if not samples:
        raise CampError("need at least one assignment sample")
    if n_users < 1:
        raise CampError("n_users must be positive")
    mean_clusters = sum(s.n_clusters for s in samples) / len(samples)
    return solve_alpha(mean_clusters, n_users)


def theta_from_samples(base: MixtureBase, samples: list, user) -> KernelEstimate:
    """Average posterior-mean kernel of the user's cluster across samples."""
    if not samples:
        raise CampError("need at least one assignment sample")
    cache: dict[frozenset, np.ndarray] = {}
    total = None
    for sample in samples:
        cluster = sample.cluster_of(user)
        key = cluster.members
        if key not in cache:
            cache[key] = posterior_mean(cluster.counts, base).theta
        total = cache[key] if total is None else total + cache[key]
    return KernelEstimate(total / len(samples))


def fit(traces: TraceSet, cfg: CampConfig) -> CampModel:
    """Run the full pipeline and estimate every user's transition kernel.

    Starts from the flat base and concentration 1; each of the first
    iterations-1 rounds draws a batch of assignment samples and refits the
    base and the concentration; the last round's samples feed the kernel
    estimates.  Chain seeds are cfg.seed + round * batch + chain.
    """
    L = traces.alphabet.size
    n_batch = cfg.samples_per_iteration
    base = MixtureBase.uniform(L)
    alpha = 1.0
    rounds = []
    for k in range(cfg.iterations):
        gcfg = GibbsConfig(alpha=alpha, base=base, sweeps=cfg.sweeps,
                           seed=cfg.seed + k * n_batch)
        samples = draw_batch(traces, gcfg, n_batch)
        rounds.append(samples)
        if k + 1 < cfg.iterations:
            base = prune(update_base(base, samples), cfg.max_components, cfg.min_weight)
            alpha = update_alpha(samples, traces.n_users)

    counts = traces.counts_by_user()
    thetas = {u: theta_from_samples(base, rounds[-1], u) for u in traces.user_ids}
    return CampModel(base=base, alpha=alpha, rounds=rounds, thetas=thetas,
                     counts=counts, user_ids=traces.user_ids,
                     n_locations=L, config=cfg)


def estimate_theta(model: CampModel, user) -> KernelEstimate:
    """The fitted kernel estimate for ``user``."""
    return model.theta(user)


def _round_inventory(samples: list) -> list:
    """Distinct clusters of one round keyed by member set, with pooled counts
    and the membership-weighted multiplicity n_c across the round's samples."""
    seen: dict[frozenset, list] = {}
    for sample in samples:
        for cluster in sample.clusters.values():
            entry = seen.get(cluster.members)
            if entry is None:
                seen[cluster.members] = [cluster.counts.counts, len(cluster.members)]
            else:
                entry[1] += len(cluster.members)
    return [(members, counts, n) for members, (counts, n) in seen.items()]


def lemma1_weights(model: CampModel, user) -> tuple[np.ndarray, dict]:
    """Exact affine expansion of the user's kernel estimate.

    Returns (offset, weights): offset is a per-row constant and weights maps
    every user v to a per-row coefficient on v's empirical kernel row, such
    that theta_hat[i, j] == offset[i] + sum_v weights[v][i] * n^v_ij / n^v_i
    (rows with n^v_i == 0 drop out since their coefficient is zero).

    Enumerates cluster chains across all rounds; raises once the chain count
    passes the configured budget — reduce the iteration depth or tighten
    pruning to get under it.
    """
    if user not in model.thetas:
        raise CampError(f"unknown user {user!r}")
    L = model.n_locations
    n_users = len(model.user_ids)
    n_batch = model.config.samples_per_iteration
    user_index = {u: k for k, u in enumerate(model.user_ids)}
    row_counts = np.stack([model.counts[u].row_sums for u in model.user_ids]).astype(np.float64)

    acc, lw, mem = _chain_prefixes(model, user_index)

    eta = np.zeros(L)
    gamma = np.zeros((n_users, L))
    final_cache: dict[frozenset, tuple] = {}
    for sample in model.final_samples:
        cluster = sample.cluster_of(user)
        if cluster.members not in final_cache:
            chained = acc + cluster.counts.counts[None, :, :]
            lxi = _log_xi_stack(chained, L)
            indicator = np.zeros(n_users)
            indicator[[user_index[v] for v in cluster.members]] = 1.0
            final_cache[cluster.members] = (lxi, chained.sum(axis=2), indicator)
        lxi, rows, indicator = final_cache[cluster.members]
        weights = np.exp(lw + lxi - logsumexp(lw + lxi) - math.log(n_batch))
        per_row = weights[:, None] / (L + rows)          # (prefixes, L)
        eta += per_row.sum(axis=0)
        mult = mem + indicator[None, :]                  # membership count per chain
        gamma += (mult.T @ per_row) * row_counts
    return eta, {u: gamma[k] for k, u in enumerate(model.user_ids)}


def _log_xi_stack(stack: np.ndarray, L: int) -> np.ndarray:
    from scipy.special import gammaln

    return gammaln(1.0 + stack).sum(axis=(1, 2)) - gammaln(L + stack.sum(axis=2)).sum(axis=1)


def _chain_prefixes(model: CampModel, user_index: dict):
    """Stacked cluster-chain prefixes over the adaptation rounds: accumulated
    counts (P, L, L), log chain weights (P,), membership multiplicities (P, U)."""
    if model._prefix_cache is not None:
        return model._prefix_cache
    L = model.n_locations
    n_users = len(model.user_ids)
    n_batch = model.config.samples_per_iteration
    acc = np.zeros((1, L, L))
    lw = np.zeros(1)
    mem = np.zeros((1, n_users))
    for samples in model.rounds[:-1]:
        inventory = _round_inventory(samples)
        if acc.shape[0] * len(inventory) > model.config.chain_budget:
            raise CampError(
                "cluster-chain budget exceeded; reduce iterations or tighten pruning")
        counts_stack = np.stack([c for _, c, _ in inventory]).astype(np.float64)
        indicator = np.zeros((len(inventory), n_users))
        for ci, (members, _, _) in enumerate(inventory):
            indicator[ci, [user_index[v] for v in members]] = 1.0
        log_omega = np.empty(len(inventory))
        for ci, (_, counts, n_c) in enumerate(inventory):
            lxi = _log_xi_stack(acc + counts[None, :, :], L)
            log_omega[ci] = math.log(n_c) - math.log(n_batch * n_users) \
                - logsumexp(lw + lxi)
        acc = (acc[:, None, :, :] + counts_stack[None, :, :, :]).reshape(-1, L, L)
        lw = (lw[:, None] + log_omega[None, :]).reshape(-1)
        mem = (mem[:, None, :] + indicator[None, :, :]).reshape(-1, n_users)
    model._prefix_cache = (acc, lw, mem)
    return model._prefix_cache


def estimate_staying_time(model: CampModel, user, traces: TraceSet) -> float | None:
    """Similarity-weighted mean stay at the user's current location.

    Users contribute their mean observed stay there, weighted by their
    expansion coefficient for that row; users without an observed stay are
    dropped before normalizing.  Returns None when nobody has a stay there.
    """
    traj = traces[user]
    if len(traj) == 0:
        raise CampError(f"user {user!r} has an empty trajectory")
    current = int(traj.locations[-1])
    _, gamma = lemma1_weights(model, user)

    total_weight = 0.0
    estimate = 0.0
    for v in model.user_ids:
        w = float(gamma[v][current])
        if w <= 0.0:
            continue
        other = traces[v]
        if other.staying_times is None or len(other) < 2:
            continue
        at = other.locations[:-1] == current
        if not at.any():
            continue
        mean_stay = float(other.staying_times[at].mean())
        total_weight += w
        estimate += w * mean_stay
    if total_weight <= 0.0:
        return None
    return estimate / total_weight
