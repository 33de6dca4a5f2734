"""Collapsed Gibbs sampling of user-to-cluster assignments under the DP mixture.

One sample is the final state of a fresh chain: all users start in a single
cluster, then ``sweeps`` full passes revisit every user in ingestion order,
re-drawing its cluster from the conditional that weighs existing clusters by
size times predictive likelihood and a new cluster by the concentration
parameter times the prior predictive.  Deterministic given (seed, input).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.special import gammaln

from . import _chain
from .dirichlet import MixtureBase, log_mixture_marginal
from .traces import TraceSet, TransitionCounts


class GibbsError(ValueError):
    """Invalid sampler configuration or state."""


class Cluster(NamedTuple):
    members: frozenset
    counts: TransitionCounts


@dataclass(frozen=True)
class GibbsConfig:
    """Concentration, base measure, sweep count and seed for one chain."""

    alpha: float
    base: MixtureBase
    sweeps: int
    seed: int

    def __post_init__(self):
        if not self.alpha > 0:
            raise GibbsError("alpha must be positive")
        if self.sweeps < 1:
            raise GibbsError("need at least one sweep")


@dataclass(frozen=True)
class ClusterAssignment:
    """A partition of users with pooled per-cluster transition counts."""

    assignment: dict
    clusters: dict

    def __post_init__(self):
        for cid, cluster in self.clusters.items():
            if not cluster.members:
                raise GibbsError(f"cluster {cid} is empty")
            for u in cluster.members:
                if self.assignment.get(u) != cid:
                    raise GibbsError(f"user {u!r} not assigned to its cluster")
        if len(self.assignment) != sum(len(c.members) for c in self.clusters.values()):
            raise GibbsError("assignment and clusters disagree")

    @classmethod
    def from_labels(cls, user_ids, labels, counts_by_user) -> "ClusterAssignment":
        groups: dict[int, list] = {}
        for u, lab in zip(user_ids, labels):
            groups.setdefault(int(lab), []).append(u)
        clusters = {}
        for cid, members in groups.items():
            pooled = counts_by_user[members[0]]
            for u in members[1:]:
                pooled = pooled + counts_by_user[u]
            clusters[cid] = Cluster(frozenset(members), pooled)
        assignment = {u: int(lab) for u, lab in zip(user_ids, labels)}
        return cls(assignment, clusters)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def cluster_of(self, user) -> Cluster:
        return self.clusters[self.assignment[user]]

    def partition(self) -> frozenset:
        return frozenset(c.members for c in self.clusters.values())

    def to_dict(self) -> dict:
        return {u: int(c) for u, c in self.assignment.items()}


def crp_step_weights(user, counts_u: TransitionCounts, others: ClusterAssignment,
                     cfg: GibbsConfig) -> tuple[float, dict]:
    """Normalized draw weights for re-inserting ``user``: (new-cluster, per-cluster).

    ``others`` must not contain ``user``.  Existing clusters weigh in with
    size times the predictive likelihood of the user's counts given the
    cluster's pooled data; a fresh cluster weighs in with alpha times the
    prior predictive.
    """
    if user in others.assignment:
        raise GibbsError(f"user {user!r} must be detached before scoring")
    cids = sorted(others.clusters)
    logs = np.empty(len(cids) + 1)
    for k, cid in enumerate(cids):
        cluster = others.clusters[cid]
        joint = log_mixture_marginal(counts_u + cluster.counts, cfg.base)
        alone = log_mixture_marginal(cluster.counts, cfg.base)
        logs[k] = math.log(len(cluster.members)) + joint - alone
    logs[-1] = math.log(cfg.alpha) + log_mixture_marginal(counts_u, cfg.base)
    logs -= logs.max()
    w = np.exp(logs)
    w /= w.sum()
    return float(w[-1]), {cid: float(w[k]) for k, cid in enumerate(cids)}


class _Prepared(NamedTuple):
    """Kernel-ready arrays for one (trace set, base) pair."""

    user_ids: tuple
    L: int
    supp_i: np.ndarray
    supp_j: np.ndarray
    supp_c: np.ndarray
    supp_off: np.ndarray
    rsupp_i: np.ndarray
    rsupp_c: np.ndarray
    rsupp_off: np.ndarray
    total_pool: np.ndarray
    A: np.ndarray
    Arow: np.ndarray
    logw: np.ndarray
    vnew: np.ndarray
    lnew: np.ndarray
    table: np.ndarray
    counts_by_user: dict


def _prepare(traces: TraceSet, base: MixtureBase) -> _Prepared:
    L = traces.alphabet.size
    if base.n_locations != L:
        raise GibbsError("mixture base and trace set disagree on alphabet size")
    pseudo_rounded = np.rint(base.pseudo)
    if not np.allclose(base.pseudo, pseudo_rounded, atol=1e-9):
        raise GibbsError("sampling requires integer-valued base pseudo-counts")
    A = pseudo_rounded.astype(np.int64)
    Arow = A.sum(axis=2)

    counts_by_user = traces.counts_by_user()
    user_ids = traces.user_ids
    si, sj, sc, soff = [], [], [], [0]
    ri, rc, roff = [], [], [0]
    total_pool = np.zeros((L, L), dtype=np.int64)
    for u in user_ids:
        c = counts_by_user[u].counts
        total_pool += c
        ii, jj = np.nonzero(c)
        si.extend(ii)
        sj.extend(jj)
        sc.extend(c[ii, jj])
        soff.append(len(si))
        rows = np.nonzero(counts_by_user[u].row_sums)[0]
        ri.extend(rows)
        rc.extend(counts_by_user[u].row_sums[rows])
        roff.append(len(ri))

    total = int(total_pool.sum())
    max_idx = max(1 + int(A.max(initial=0)) + total,
                  L + int(Arow.max(initial=0)) + total) + 1
    table = gammaln(np.arange(max_idx + 1, dtype=np.float64))
    table[0] = 0.0

    # per-user singleton caches: log-mass of each component for the user alone
    logw = np.log(base.weights)
    base_lxi = base.component_log_xi()
    vnew = np.empty((len(user_ids), base.n_components))
    for k, u in enumerate(user_ids):
        n = counts_by_user[u].counts
        stacked = A + n[None, :, :]
        lxi = gammaln(1.0 + stacked).sum(axis=(1, 2)) \
            - gammaln(L + stacked.sum(axis=2)).sum(axis=1)
        vnew[k] = logw + lxi - base_lxi
    mx = vnew.max(axis=1)
    lnew = mx + np.log(np.exp(vnew - mx[:, None]).sum(axis=1))

    as_arr = lambda x, dt: np.asarray(x, dtype=dt)
    return _Prepared(user_ids, L,
                     as_arr(si, np.int64), as_arr(sj, np.int64), as_arr(sc, np.int64),
                     as_arr(soff, np.int64),
                     as_arr(ri, np.int64), as_arr(rc, np.int64), as_arr(roff, np.int64),
                     total_pool, A, Arow, logw, vnew, lnew, table, counts_by_user)


def _run_prepared(prep: _Prepared, alpha: float, sweeps: int, seed: int) -> ClusterAssignment:
    n_users = len(prep.user_ids)
    uniforms = np.random.default_rng(seed).random(sweeps * n_users)
    labels = _chain.run_chain(prep.L, prep.supp_i, prep.supp_j, prep.supp_c, prep.supp_off,
                              prep.rsupp_i, prep.rsupp_c, prep.rsupp_off,
                              prep.total_pool, prep.A, prep.Arow, prep.logw,
                              prep.vnew, prep.lnew,
                              math.log(alpha), sweeps, uniforms, prep.table)
    return ClusterAssignment.from_labels(prep.user_ids, labels, prep.counts_by_user)


def gibbs_sample(traces: TraceSet, cfg: GibbsConfig) -> ClusterAssignment:
    """Draw one assignment sample (the state after ``cfg.sweeps`` sweeps)."""
    prep = _prepare(traces, cfg.base)
    return _run_prepared(prep, cfg.alpha, cfg.sweeps, cfg.seed)


def draw_batch(traces: TraceSet, cfg: GibbsConfig, n_samples: int = 8) -> list[ClusterAssignment]:
    """Draw ``n_samples`` independent chains with seeds cfg.seed + 0..n_samples-1."""
    if n_samples < 1:
        raise GibbsError("need at least one sample")
    prep = _prepare(traces, cfg.base)
    return [_run_prepared(prep, cfg.alpha, cfg.sweeps, cfg.seed + b)
            for b in range(n_samples)]
