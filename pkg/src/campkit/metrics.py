"""Evaluation metrics over streamed prediction logs and raw traces.

Ratio metrics over empty populations report None (emitted as explicit nulls,
never zeros).  The instantaneous ratio deliberately scores predictions
against full-trajectory counts, as defined; users whose full-trace row count
is zero at the scoring step are excluded and tallied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import CampModel, lemma1_weights
from .traces import TraceSet, TransitionCounts


class MetricError(ValueError):
    """Invalid metric input."""


# ---------------------------------------------------------------------------
# per-kernel empirical accuracy and user similarity


def row_predictions_from_kernel(theta: np.ndarray) -> np.ndarray:
    """Predicted next location per current location (ties -> smallest index)."""
    return np.asarray(theta).argmax(axis=1)


def row_predictions_from_counts(counts: TransitionCounts,
                                frequencies: np.ndarray | None = None) -> np.ndarray:
    """Per-row argmax of observed counts with the standard fallback: zero rows
    predict the most visited location (or 0 when nothing was visited)."""
    c = counts.counts
    pred = c.argmax(axis=1)
    if frequencies is not None and np.sum(frequencies) > 0:
        fallback = int(np.argmax(frequencies))
    else:
        fallback = 0
    pred[counts.row_sums == 0] = fallback
    return pred


def empirical_accuracy(locations: np.ndarray, row_predictions: np.ndarray) -> float:
    """Fraction of steps where the per-row prediction hits the next location."""
    loc = np.asarray(locations)
    if loc.size < 2:
        raise MetricError("empirical accuracy needs at least one transition")
    return float(np.mean(row_predictions[loc[:-1]] == loc[1:]))


def _mle_predictions(traces: TraceSet, user: str, counts=None) -> np.ndarray:
    from .traces import count_transitions

    traj = traces[user]
    if counts is None:
        counts = count_transitions(traj, traces.alphabet.size)
    freq = np.bincount(traj.locations, minlength=traces.alphabet.size)
    return row_predictions_from_counts(counts, freq)


def similarity(traces: TraceSet, u: str, v: str) -> float | None:
    """How well v's maximum-likelihood kernel predicts u's trajectory,
    relative to u's own kernel; clamped into [0, 1].  None when u's own
    kernel never predicts u correctly."""
    traj = traces[u]
    if len(traj) < 2:
        return None
    own = empirical_accuracy(traj.locations, _mle_predictions(traces, u))
    if own == 0.0:
        return None
    other = empirical_accuracy(traj.locations, _mle_predictions(traces, v))
    return min(other / own, 1.0)


@dataclass
class SimilarityMatrix:
    """Pairwise similarity values; NaN marks undefined entries."""

    user_ids: tuple
    values: np.ndarray
    clamp_count: int


def similarity_matrix(traces: TraceSet) -> SimilarityMatrix:
    users = traces.user_ids
    n = len(users)
    values = np.full((n, n), np.nan)
    clamps = 0
    by_user = traces.counts_by_user()
    preds = {u: _mle_predictions(traces, u, by_user[u]) for u in users}
    for a, u in enumerate(users):
        traj = traces[u]
        if len(traj) < 2:
            continue
        own = empirical_accuracy(traj.locations, preds[u])
        if own == 0.0:
            continue
        for b, v in enumerate(users):
            raw = empirical_accuracy(traj.locations, preds[v]) / own
            if raw > 1.0:
                clamps += 1
            values[a, b] = min(raw, 1.0)
    return SimilarityMatrix(users, values, clamps)


def mf_users(sim: SimilarityMatrix, threshold: float = 0.5) -> set:
    """Users with at least one other user of similarity strictly above the
    threshold."""
    out = set()
    for a, u in enumerate(sim.user_ids):
        for b in range(len(sim.user_ids)):
            if b != a and not np.isnan(sim.values[a, b]) and sim.values[a, b] > threshold:
                out.add(u)
                break
    return out


# ---------------------------------------------------------------------------
# prediction-ratio metrics over a streamed log


def _picked(events, kind, users):
    for e in events:
        if users is not None and e.user not in users:
            continue
        if kind not in e.predictions:
            raise MetricError(f"log does not carry predictor {kind!r}")
        yield e


def capr_time(events, d: float, kind: str, users=None) -> tuple[float | None, int]:
    """Fraction of accurate predictions among events strictly before time d."""
    hits = total = 0
    for e in _picked(events, kind, users):
        if e.time < d:
            total += 1
            hits += e.predictions[kind] == e.actual
    return (hits / total if total else None), total


def capr(events, traces: TraceSet, t: int, kind: str,
         users=None) -> tuple[float | None, int]:
    """Cumulative accuracy over steps 2..t for users with at least t visits."""
    if t < 2:
        raise MetricError("t must be at least 2")
    qualifying = {u for u in traces.user_ids if len(traces[u]) >= t
                  and (users is None or u in users)}
    if not qualifying:
        return None, 0
    hits = 0
    for e in _picked(events, kind, qualifying):
        if 2 <= e.index <= t:
            hits += e.predictions[kind] == e.actual
    return hits / ((t - 1) * len(qualifying)), len(qualifying)


def iapr(events, traces: TraceSet, t: int, kind: str,
         users=None) -> tuple[float | None, int]:
    """Mean full-count transition share of the step-t prediction over users
    with at least t visits (zero full-count rows excluded)."""
    if t < 2:
        raise MetricError("t must be at least 2")
    full = traces.counts_by_user()
    values = []
    for e in _picked(events, kind, users):
        if e.index != t or len(traces[e.user]) < t:
            continue
        row = full[e.user].counts[e.previous]
        denom = row.sum()
        if denom == 0:
            continue
        values.append(row[e.predictions[kind]] / denom)
    return (float(np.mean(values)) if values else None), len(values)


# ---------------------------------------------------------------------------
# similarity footprint of the fitted model


def u_similar_count(model: CampModel, user: str) -> int:
    """Number of users whose aggregate expansion weight toward ``user``
    strictly exceeds the uniform share 1/|users|."""
    _, gamma = lemma1_weights(model, user)
    aggregates = np.array([gamma[v].sum() for v in model.user_ids])
    total = aggregates.sum()
    if total <= 0:
        return 0
    return int(np.sum(aggregates / total > 1.0 / len(model.user_ids)))


# ---------------------------------------------------------------------------
# staying-time estimation error


@dataclass
class StayErrorSummary:
    """Absolute estimation errors (sorted) plus the failure tally."""

    errors: np.ndarray
    failures: int

    @property
    def n_events(self) -> int:
        return self.errors.size + self.failures

    def quantile(self, q: float) -> float:
        if self.errors.size == 0:
            raise MetricError("no successful estimates")
        return float(np.quantile(self.errors, q))

    def cdf_points(self) -> list[tuple[float, float]]:
        n = self.errors.size
        return [(float(v), (k + 1) / n) for k, v in enumerate(self.errors)]


def staying_time_error(pairs) -> StayErrorSummary:
    """Summarize |estimate - actual| over (estimate, actual) pairs; estimates
    of None count as failures, not as error values."""
    errors = []
    failures = 0
    for est, actual in pairs:
        if est is None:
            failures += 1
        else:
            errors.append(abs(est - actual))
    return StayErrorSummary(np.sort(np.array(errors, dtype=np.float64)), failures)


def stay_pairs_from_events(events, kind: str) -> list:
    return [(e.stay_estimates.get(kind), e.stay_actual)
            for e in events if e.stay_actual is not None]


# ---------------------------------------------------------------------------
# CSV-ready series

CSV_COLUMNS = ("metric", "predictor", "population", "x", "value", "n")


def _row(metric, kind, population, x, value, n):
    return {"metric": metric, "predictor": kind, "population": population,
            "x": x, "value": "" if value is None else value, "n": n}


def metric_rows(events, traces: TraceSet, kinds, metrics,
                population: str = "all", users=None) -> list[dict]:
    """Flatten the requested metric series into plottable rows.

    Time series evaluate after each distinct event time (inclusive); index
    series run over t = 2..max trajectory length.
    """
    rows = []
    times = sorted({e.time for e in events
                    if users is None or e.user in users})
    max_len = max((len(traces[u]) for u in traces.user_ids
                   if users is None or u in users), default=0)
    for kind in kinds:
        if "capr_time" in metrics:
            for d in times:
                value, n = capr_time(events, d + 1, kind, users)
                rows.append(_row("capr_time", kind, population, d, value, n))
        if "capr" in metrics:
            for t in range(2, max_len + 1):
                value, n = capr(events, traces, t, kind, users)
                rows.append(_row("capr", kind, population, t, value, n))
        if "iapr" in metrics:
            for t in range(2, max_len + 1):
                value, n = iapr(events, traces, t, kind, users)
                rows.append(_row("iapr", kind, population, t, value, n))
        if "stay" in metrics:
            summary = staying_time_error(stay_pairs_from_events(
                [e for e in events if users is None or e.user in users], kind))
            for x, frac in summary.cdf_points():
                rows.append(_row("stay_error_cdf", kind, population, x, frac,
                                 summary.errors.size))
            if summary.n_events:
                rows.append(_row("stay_failure_rate", kind, population, 0,
                                 summary.failures / summary.n_events, summary.n_events))
    return rows


def write_metrics_csv(rows, path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
