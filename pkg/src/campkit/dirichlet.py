"""Closed-form Dirichlet/Markov-kernel math in the log domain.

Everything rides on one primitive: for an L x L matrix X of accumulated
transition counts,

    log_xi(X) = sum_ij lgamma(1 + X_ij) - sum_i lgamma(L + X_i.)

which is the log of the Lebesgue integral of prod_t theta_{x_t, x_{t+1}}
over row-stochastic matrices.  The marginal likelihood of counts n under a
Dirichlet component with pseudo-counts A (on top of the flat prior) is then
log_xi(A + n) - log_xi(A), a true log-probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .traces import TransitionCounts


class MixtureError(ValueError):
    """Inconsistent mixture-base construction."""


def log_xi(matrix: np.ndarray) -> float:
    """log of the flat-measure integral for accumulated counts ``matrix``."""
    m = np.asarray(matrix, dtype=np.float64)
    L = m.shape[0]
    return float(gammaln(1.0 + m).sum() - gammaln(L + m.sum(axis=1)).sum())


def _counts_matrix(counts) -> np.ndarray:
    if isinstance(counts, TransitionCounts):
        return counts.counts
    return np.asarray(counts)


@dataclass(frozen=True)
class PseudoCounts:
    """Transition pseudo-counts accumulated on top of the flat per-row prior."""

    counts: np.ndarray
    row_sums: np.ndarray = field(init=False)

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise MixtureError("pseudo-counts must be a square matrix")
        if c.size and c.min() < 0:
            raise MixtureError("pseudo-counts must be non-negative")
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)
        rs = c.sum(axis=1)
        rs.flags.writeable = False
        object.__setattr__(self, "row_sums", rs)

    @classmethod
    def zeros(cls, n_locations: int) -> "PseudoCounts":
        return cls(np.zeros((n_locations, n_locations)))


class MixtureBase:
    """A finite mixture of Dirichlet-product components over transition kernels.

    Stored as stacked arrays: ``weights`` (M,), ``pseudo`` (M, L, L).  Weights
    are kept normalized to 1.
    """

    __slots__ = ("weights", "pseudo", "_log_xi")

    def __init__(self, weights: np.ndarray, pseudo: np.ndarray):
        w = np.asarray(weights, dtype=np.float64)
        p = np.asarray(pseudo, dtype=np.float64)
        if w.ndim != 1 or p.ndim != 3 or p.shape[0] != w.size:
            raise MixtureError("need one (L, L) pseudo-count matrix per weight")
        if p.shape[1] != p.shape[2]:
            raise MixtureError("pseudo-count matrices must be square")
        if w.size == 0:
            raise MixtureError("mixture needs at least one component")
        if w.min() <= 0:
            raise MixtureError("component weights must be positive")
        total = w.sum()
        if abs(total - 1.0) > 1e-9:
            raise MixtureError(f"weights sum to {total}, not 1")
        self.weights = w / total
        self.weights.flags.writeable = False
        self.pseudo = p.copy()
        self.pseudo.flags.writeable = False
        self._log_xi = gammaln(1.0 + self.pseudo).sum(axis=(1, 2)) \
            - gammaln(self.n_locations + self.pseudo.sum(axis=2)).sum(axis=1)

    @classmethod
    def uniform(cls, n_locations: int) -> "MixtureBase":
        return cls(np.ones(1), np.zeros((1, n_locations, n_locations)))

    @classmethod
    def from_components(cls, components) -> "MixtureBase":
        ws, ps = zip(*((w, _counts_matrix(p)) for w, p in components))
        return cls(np.array(ws), np.stack([np.asarray(p, dtype=np.float64) for p in ps]))

    @property
    def n_locations(self) -> int:
        return self.pseudo.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def components(self) -> list[tuple[float, PseudoCounts]]:
        return [(float(w), PseudoCounts(p)) for w, p in zip(self.weights, self.pseudo)]

    def component_log_xi(self) -> np.ndarray:
        return self._log_xi

    def to_dict(self) -> dict:
        return {
            "n_locations": self.n_locations,
            "components": [
                {"weight": float(w), "pseudo_counts": p.tolist()}
                for w, p in zip(self.weights, self.pseudo)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureBase":
        comps = data["components"]
        return cls(np.array([c["weight"] for c in comps]),
                   np.stack([np.array(c["pseudo_counts"], dtype=np.float64) for c in comps]))


@dataclass(frozen=True)
class KernelEstimate:
    """A row-stochastic transition-kernel estimate."""

    theta: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64)
        if th.ndim != 2 or th.shape[0] != th.shape[1]:
            raise MixtureError("kernel must be square")
        if np.any(np.abs(th.sum(axis=1) - 1.0) > 1e-9):
            raise MixtureError("kernel rows must sum to 1")
        th = th.copy()
        th.flags.writeable = False
        object.__setattr__(self, "theta", th)

    def row_argmax(self) -> np.ndarray:
        """Per-row predicted next location (ties -> smallest index)."""
        return self.theta.argmax(axis=1)


def log_marginal(counts, pseudo: PseudoCounts | np.ndarray) -> float:
    """Log-probability of ``counts`` under one Dirichlet-product component."""
    n = _counts_matrix(counts)
    a = pseudo.counts if isinstance(pseudo, PseudoCounts) else np.asarray(pseudo)
    if n.shape != a.shape:
        raise MixtureError("counts and pseudo-counts differ in shape")
    return log_xi(a + n) - log_xi(a)


def _component_log_marginals(counts, base: MixtureBase) -> np.ndarray:
    n = _counts_matrix(counts)
    if n.shape != base.pseudo.shape[1:]:
        raise MixtureError("counts and mixture base differ in alphabet size")
    stacked = base.pseudo + n[None, :, :]
    lxi = gammaln(1.0 + stacked).sum(axis=(1, 2)) \
        - gammaln(base.n_locations + stacked.sum(axis=2)).sum(axis=1)
    return lxi - base.component_log_xi()


def log_mixture_marginal(counts, base: MixtureBase) -> float:
    """Log-probability of ``counts`` under the whole mixture base."""
    return float(logsumexp(np.log(base.weights) + _component_log_marginals(counts, base)))


def _responsibilities(counts, base: MixtureBase) -> np.ndarray:
    scores = np.log(base.weights) + _component_log_marginals(counts, base)
    scores -= scores.max()
    r = np.exp(scores)
    return r / r.sum()


def posterior_mean(counts, base: MixtureBase) -> KernelEstimate:
    """Posterior-mean transition kernel given ``counts`` under ``base``."""
    n = _counts_matrix(counts)
    r = _responsibilities(counts, base)
    L = base.n_locations
    stacked = base.pseudo + n[None, :, :]
    per_comp = (1.0 + stacked) / (L + stacked.sum(axis=2))[:, :, None]
    return KernelEstimate(np.einsum("m,mij->ij", r, per_comp))


def condition(base: MixtureBase, counts) -> MixtureBase:
    """Condition the mixture base on observed ``counts`` (conjugate update)."""
    n = _counts_matrix(counts)
    r = _responsibilities(counts, base)
    return MixtureBase(r, base.pseudo + n[None, :, :])


def prune(base: MixtureBase, max_components: int = 512,
          min_weight: float = 1e-10) -> MixtureBase:
    """Keep the heaviest components (at least one), renormalizing weights."""
    if max_components < 1:
        raise MixtureError("max_components must be at least 1")
    order = np.argsort(-base.weights, kind="stable")[:max_components]
    keep = order[base.weights[order] >= min_weight]
    if keep.size == 0:
        keep = order[:1]
    keep = np.sort(keep)
    w = base.weights[keep]
    return MixtureBase(w / w.sum(), base.pseudo[keep])


def merge_duplicates(base: MixtureBase) -> MixtureBase:
    """Merge components with identical pseudo-count matrices, summing weights."""
    seen: dict[bytes, int] = {}
    weights: list[float] = []
    mats: list[np.ndarray] = []
    for w, p in zip(base.weights, base.pseudo):
        key = p.tobytes()
        if key in seen:
            weights[seen[key]] += w
        else:
            seen[key] = len(mats)
            weights.append(float(w))
            mats.append(p)
    if len(mats) == base.n_components:
        return base
    return MixtureBase(np.array(weights), np.stack(mats))
