"""Synthetic clustered traces and the exact small-instance Bayesian oracle.

Generation follows the hierarchical story: each user gets a transition kernel
drawn from a configurable population prior, then walks a Markov chain from a
uniform initial location.  Since observed trajectories never repeat a
location, steps are drawn from the current row with the diagonal removed and
the rest renormalized.

The oracle enumerates every set partition of a small user set, scores each by
the partition prior times the product of per-cluster marginal likelihoods
under the flat base, and yields exact posterior quantities (partition
probabilities, pairwise co-clustering, posterior-mean kernels) that ground
the sampler and the fitted estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .dirichlet import MixtureBase, log_marginal, posterior_mean
from .gibbs import ClusterAssignment
from .traces import LocationAlphabet, TraceSet, Trajectory, TransitionCounts

BELL_GUARD_USERS = 8


class SynthError(ValueError):
    """Invalid generator or oracle input."""


@dataclass(frozen=True)
class SyntheticPrior:
    """Population prior over transition kernels plus trajectory-shape knobs.

    Modes: ``perfect`` draws each user's kernel uniformly from a fixed list of
    cluster kernels; ``noise`` perturbs those cluster kernels per user with
    Dirichlet noise of the given spread; ``dp`` draws a random discrete prior
    by stick breaking over uniformly drawn atoms, then samples kernels from it.
    """

    mode: str
    n_locations: int
    kernels: np.ndarray | None = None
    alpha: float = 1.0
    truncation: int = 50
    spread: float = 0.0
    lengths: tuple = ("fixed", 20)
    stay_means: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("perfect", "noise", "dp"):
            raise SynthError(f"unknown mode {self.mode!r}")
        if self.mode in ("perfect", "noise"):
            k = np.asarray(self.kernels, dtype=np.float64)
            if k.ndim != 3 or k.shape[1] != k.shape[2] or k.shape[1] != self.n_locations:
                raise SynthError("kernels must be stacked (C, L, L)")
            if np.any(np.abs(k.sum(axis=2) - 1.0) > 1e-9) or k.min() < 0:
                raise SynthError("cluster kernels must be row-stochastic")
            object.__setattr__(self, "kernels", k)
        if self.mode == "noise" and self.spread <= 0:
            raise SynthError("noise mode needs spread > 0")
        if self.mode == "dp" and (self.alpha <= 0 or self.truncation < 1):
            raise SynthError("dp mode needs alpha > 0 and truncation >= 1")
        kind = self.lengths[0]
        if kind == "fixed":
            if self.lengths[1] < 1:
                raise SynthError("fixed length must be >= 1")
        elif kind == "uniform":
            lo, hi = self.lengths[1], self.lengths[2]
            if not 1 <= lo <= hi:
                raise SynthError("uniform length range must satisfy 1 <= lo <= hi")
        else:
            raise SynthError(f"unknown length distribution {kind!r}")

    @classmethod
    def perfect_clusters(cls, kernels, lengths=("fixed", 20), stay_means=None):
        k = np.asarray(kernels, dtype=np.float64)
        return cls("perfect", k.shape[1], kernels=k, lengths=lengths, stay_means=stay_means)

    @classmethod
    def dirichlet_noise(cls, kernels, spread, lengths=("fixed", 20), stay_means=None):
        k = np.asarray(kernels, dtype=np.float64)
        return cls("noise", k.shape[1], kernels=k, spread=spread,
                   lengths=lengths, stay_means=stay_means)

    @classmethod
    def dp_draw(cls, n_locations, alpha=1.0, truncation=50,
                lengths=("fixed", 20), stay_means=None):
        return cls("dp", n_locations, alpha=alpha, truncation=truncation,
                   lengths=lengths, stay_means=stay_means)


def random_kernels(n_kernels: int, n_locations: int, rng: np.random.Generator,
                   zero_diagonal: bool = True) -> np.ndarray:
    """Stack of kernels with rows drawn flat on the simplex (optionally with a
    zeroed diagonal, matching the no-self-transition observation model)."""
    g = rng.gamma(1.0, size=(n_kernels, n_locations, n_locations))
    if zero_diagonal:
        idx = np.arange(n_locations)
        g[:, idx, idx] = 0.0
    return g / g.sum(axis=2, keepdims=True)


def _dirichlet_rows(center: np.ndarray, concentration: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Per-row Dirichlet(concentration * center) draw; zero coordinates stay zero."""
    out = np.zeros_like(center)
    for i in range(center.shape[0]):
        alpha = concentration * center[i]
        mask = alpha > 0
        g = rng.gamma(alpha[mask])
        if g.sum() <= 0:
            g = np.ones(mask.sum())
        out[i, mask] = g / g.sum()
    return out


def _draw_user_kernels(prior: SyntheticPrior, n_users: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if prior.mode in ("perfect", "noise"):
        n_clusters = prior.kernels.shape[0]
        labels = rng.integers(0, n_clusters, size=n_users)
        if prior.mode == "perfect":
            thetas = prior.kernels[labels].copy()
        else:
            thetas = np.stack([
                _dirichlet_rows(prior.kernels[lab], 1.0 / prior.spread, rng)
                for lab in labels
            ])
        return thetas, labels
    # stick-breaking draw of a discrete prior, truncated with the last stick = 1
    sticks = rng.beta(1.0, prior.alpha, size=prior.truncation)
    sticks[-1] = 1.0
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - sticks[:-1])])
    weights = sticks * remaining
    atoms = random_kernels(prior.truncation, prior.n_locations, rng)
    labels = rng.choice(prior.truncation, size=n_users, p=weights / weights.sum())
    return atoms[labels].copy(), labels


def generate(prior: SyntheticPrior, n_users: int,
             seed: int) -> tuple[TraceSet, np.ndarray, np.ndarray]:
    """Draw a synthetic trace set; returns (traces, true kernels, cluster labels)."""
    if n_users < 1:
        raise SynthError("need at least one user")
    rng = np.random.default_rng(seed)
    L = prior.n_locations
    thetas, labels = _draw_user_kernels(prior, n_users, rng)

    width = max(2, len(str(n_users - 1)))
    trajectories = []
    for u in range(n_users):
        if prior.lengths[0] == "fixed":
            n = prior.lengths[1]
        else:
            n = int(rng.integers(prior.lengths[1], prior.lengths[2] + 1))
        locs = np.empty(n, dtype=np.int64)
        locs[0] = rng.integers(L)
        for t in range(1, n):
            row = thetas[u, locs[t - 1]].copy()
            row[locs[t - 1]] = 0.0
            total = row.sum()
            if total <= 1e-12:
                raise SynthError(
                    f"kernel row {locs[t - 1]} of user {u} has no off-diagonal mass")
            locs[t] = rng.choice(L, p=row / total)
        if prior.stay_means is not None:
            means = np.broadcast_to(np.asarray(prior.stay_means, dtype=np.float64), (L,))
            stays = np.ceil(rng.exponential(means[locs[:-1]])).astype(np.float64) \
                if n > 1 else np.zeros(0)
            stays = np.maximum(stays, 1.0)
            arrivals = np.zeros(n, dtype=np.int64)
            if n > 1:
                arrivals[1:] = np.cumsum(stays).astype(np.int64)
        else:
            stays = None
            arrivals = np.arange(n, dtype=np.int64)
        trajectories.append(Trajectory(f"u{u:0{width}d}", locs, arrivals, stays))

    alphabet = LocationAlphabet(tuple(f"L{i:03d}" for i in range(L)))
    return TraceSet(alphabet, tuple(trajectories)), thetas, labels


# ---------------------------------------------------------------------------
# exact posterior by partition enumeration


def _set_partitions(items: list):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [part[i] + [first]] + part[i + 1:]
        yield part + [[first]]


@dataclass
class ExactPosterior:
    """All set partitions of the users with exact posterior probabilities."""

    user_ids: tuple
    partitions: list
    probs: np.ndarray
    _block_theta: dict

    def co_cluster(self, u, v) -> float:
        ui, vi = self.user_ids.index(u), self.user_ids.index(v)
        if ui == vi:
            return 1.0
        total = 0.0
        for part, p in zip(self.partitions, self.probs):
            for block in part:
                if u in block:
                    total += p if v in block else 0.0
                    break
        return total

    def co_cluster_matrix(self) -> np.ndarray:
        n = len(self.user_ids)
        out = np.eye(n)
        for a in range(n):
            for b in range(a + 1, n):
                out[a, b] = out[b, a] = self.co_cluster(self.user_ids[a], self.user_ids[b])
        return out

    def expected_theta(self, user) -> np.ndarray:
        total = None
        for part, p in zip(self.partitions, self.probs):
            block = next(b for b in part if user in b)
            contrib = p * self._block_theta[block]
            total = contrib if total is None else total + contrib
        return total


def enumerate_posterior(traces: TraceSet, alpha: float,
                        max_users: int = BELL_GUARD_USERS) -> ExactPosterior:
    """Exact partition posterior under the flat base; guarded to small user sets."""
    if traces.n_users > max_users:
        raise SynthError(f"{traces.n_users} users exceeds the enumeration guard of {max_users}")
    if alpha <= 0:
        raise SynthError("alpha must be positive")
    users = list(traces.user_ids)
    counts = traces.counts_by_user()
    L = traces.alphabet.size
    flat = np.zeros((L, L))

    pooled_cache: dict[frozenset, TransitionCounts] = {}
    marginal_cache: dict[frozenset, float] = {}

    def pooled(block: frozenset) -> TransitionCounts:
        if block not in pooled_cache:
            total = TransitionCounts.zeros(L)
            for u in block:
                total = total + counts[u]
            pooled_cache[block] = total
        return pooled_cache[block]

    def block_marginal(block: frozenset) -> float:
        if block not in marginal_cache:
            marginal_cache[block] = log_marginal(pooled(block), flat)
        return marginal_cache[block]

    partitions = []
    log_weights = []
    for part in _set_partitions(users):
        blocks = tuple(frozenset(b) for b in part)
        lw = len(blocks) * np.log(alpha)
        for block in blocks:
            lw += gammaln(len(block)) + block_marginal(block)
        partitions.append(blocks)
        log_weights.append(lw)
    log_weights = np.array(log_weights)
    probs = np.exp(log_weights - logsumexp(log_weights))
    probs /= probs.sum()

    base = MixtureBase.uniform(L)
    block_theta = {}
    for part in partitions:
        for block in part:
            if block not in block_theta:
                block_theta[block] = posterior_mean(pooled(block), base).theta
    return ExactPosterior(tuple(users), partitions, probs, block_theta)


def co_cluster_matrix(samples: list, user_ids) -> np.ndarray:
    """Fraction of samples in which each user pair shares a cluster."""
    if not samples:
        raise SynthError("need at least one assignment sample")
    users = list(user_ids)
    n = len(users)
    out = np.zeros((n, n))
    for sample in samples:
        labels = np.array([sample.assignment[u] for u in users])
        out += (labels[:, None] == labels[None, :])
    out /= len(samples)
    return out
