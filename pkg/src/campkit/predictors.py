"""Next-location predictors behind one streaming protocol.

Six kinds: ``markov`` (order-1 on the user's own visible prefix), ``markov2``
(order-2 with fallback to order-1), ``agg`` (one pooled kernel over all
users' visible prefixes), ``camp`` (the cluster-aided estimate fitted on all
visible prefixes), and the ``aggc``/``campc`` variants that additionally see
other users' complete trajectories.

The streaming protocol predicts the t-th location of a user from everything
that arrived strictly before that visit's timestamp.  Cluster-aided models
are refitted on a configurable epoch schedule (exact per-event refitting is
the epoch-1 special case); count-based predictors always use exact per-event
counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .engine import CampConfig, CampModel, fit, lemma1_weights
from .traces import TraceSet, Trajectory, TransitionCounts, count_transitions

KINDS = ("markov", "markov2", "agg", "aggc", "camp", "campc")
_CAMP_KINDS = ("camp", "campc")


class PredictorError(ValueError):
    """Invalid predictor configuration or request."""


@dataclass(frozen=True)
class PredictionRequest:
    """Predict the user's t-th location given data before the cutoff time."""

    user: str
    index: int
    cutoff: float

    def __post_init__(self):
        if self.index < 2:
            raise PredictorError("prediction index must be at least 2")


@dataclass(frozen=True)
class RefitSchedule:
    """How often cluster-aided models are refitted while streaming.

    ``epoch`` events between refits; None means a single fit up front.
    """

    epoch: int | None = 25

    def __post_init__(self):
        if self.epoch is not None and self.epoch < 1:
            raise PredictorError("refit epoch must be at least 1")

    @classmethod
    def per_event(cls) -> "RefitSchedule":
        return cls(epoch=1)

    @classmethod
    def fit_once(cls) -> "RefitSchedule":
        return cls(epoch=None)

    @classmethod
    def parse(cls, text: str) -> "RefitSchedule":
        if text in ("inf", "none", "static"):
            return cls.fit_once()
        return cls(epoch=int(text))


def _arrivals(traj: Trajectory) -> np.ndarray:
    if traj.arrival_times is not None:
        return traj.arrival_times
    return np.arange(len(traj), dtype=np.int64)


def visible_length(traj: Trajectory, cutoff: float) -> int:
    """Number of visits that arrived strictly before the cutoff."""
    return int(np.searchsorted(_arrivals(traj), cutoff, side="left"))


def prefix_traces(traces: TraceSet, cutoff: float,
                  full_users: frozenset = frozenset()) -> TraceSet:
    """Trace set truncated to what is visible at ``cutoff`` (strictly before);
    users in ``full_users`` keep their complete trajectories."""
    out = []
    for traj in traces.trajectories:
        if traj.user_id in full_users:
            out.append(traj)
            continue
        k = visible_length(traj, cutoff)
        stays = traj.staying_times[:max(k - 1, 0)] if traj.staying_times is not None else None
        arrivals = traj.arrival_times[:k] if traj.arrival_times is not None else None
        out.append(Trajectory(traj.user_id, traj.locations[:k], arrivals, stays))
    return TraceSet(traces.alphabet, tuple(out))


def visible_counts(traces: TraceSet, req: PredictionRequest, kind: str) -> dict:
    """Per-user transition counts each predictor kind is allowed to see."""
    if kind not in KINDS:
        raise PredictorError(f"unknown predictor kind {kind!r}")
    L = traces.alphabet.size
    out = {}
    for traj in traces.trajectories:
        if kind in ("markov", "markov2") and traj.user_id != req.user:
            out[traj.user_id] = TransitionCounts.zeros(L)
        elif kind in ("aggc", "campc") and traj.user_id != req.user:
            out[traj.user_id] = count_transitions(traj, L)
        else:
            out[traj.user_id] = count_transitions(traj, L,
                                                  upto=visible_length(traj, req.cutoff))
    return out


def predict_markov(counts: TransitionCounts, current: int,
                   frequencies: np.ndarray | None = None) -> int:
    """Most-frequent observed successor; falls back to the most visited
    location, then to location 0 on a cold start.  Ties pick the smallest
    index throughout."""
    row = counts.counts[current]
    if row.sum() > 0:
        return int(row.argmax())
    if frequencies is not None and np.sum(frequencies) > 0:
        return int(np.argmax(frequencies))
    return 0


def predict_markov2(prefix: np.ndarray, n_locations: int) -> int:
    """Order-2 prediction from the visible prefix, falling back to order-1
    when the trailing location pair was never seen before."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.size >= 2:
        a, b = prefix[-2], prefix[-1]
        tally = np.zeros(n_locations, dtype=np.int64)
        for s in range(prefix.size - 2):
            if prefix[s] == a and prefix[s + 1] == b:
                tally[prefix[s + 2]] += 1
        if tally.sum() > 0:
            return int(tally.argmax())
    counts = np.zeros((n_locations, n_locations), dtype=np.int64)
    if prefix.size >= 2:
        np.add.at(counts, (prefix[:-1], prefix[1:]), 1)
    freq = np.bincount(prefix, minlength=n_locations) if prefix.size else None
    return predict_markov(TransitionCounts(counts), int(prefix[-1]) if prefix.size else 0, freq)


def predict_agg(counts_by_user: dict, current: int,
                frequencies: np.ndarray | None = None) -> int:
    """Order-1 prediction from all users' counts pooled into one kernel."""
    pooled = None
    for c in counts_by_user.values():
        pooled = c if pooled is None else pooled + c
    if pooled is None:
        raise PredictorError("no users to pool")
    return predict_markov(pooled, current, frequencies)


def predict_camp(model: CampModel, user: str, current: int) -> int:
    """Argmax row of the fitted kernel estimate (entries are strictly positive,
    so no fallback is ever needed)."""
    return int(model.theta(user).theta[current].argmax())


@dataclass
class PredictionEvent:
    """One streamed prediction: the t-th visit of a user, every kind's guess,
    and (optionally) staying-time estimates made on arrival."""

    user: str
    index: int
    time: int
    previous: int
    actual: int
    predictions: dict
    stay_actual: float | None = None
    stay_estimates: dict = field(default_factory=dict)


class _StreamState:
    """Visible-data accumulators shared by the count-based predictors."""

    def __init__(self, traces: TraceSet):
        L = traces.alphabet.size
        self.L = L
        self.users = traces.user_ids
        self.cnt = {u: np.zeros((L, L), dtype=np.int64) for u in self.users}
        self.freq = {u: np.zeros(L, dtype=np.int64) for u in self.users}
        self.pooled_cnt = np.zeros((L, L), dtype=np.int64)
        self.pooled_freq = np.zeros(L, dtype=np.int64)
        self.vis_len = {u: 0 for u in self.users}
        self.stay_sum = {u: np.zeros(L) for u in self.users}
        self.stay_n = {u: np.zeros(L, dtype=np.int64) for u in self.users}

        self.full_cnt = {t.user_id: count_transitions(t, L).counts
                         for t in traces.trajectories}
        self.full_freq = {t.user_id: np.bincount(t.locations, minlength=L)
                          for t in traces.trajectories}
        self.pooled_full_cnt = sum(self.full_cnt.values())
        self.pooled_full_freq = sum(self.full_freq.values())
        self.full_stay_sum = {u: np.zeros(L) for u in self.users}
        self.full_stay_n = {u: np.zeros(L, dtype=np.int64) for u in self.users}
        for t in traces.trajectories:
            if t.staying_times is not None:
                np.add.at(self.full_stay_sum[t.user_id], t.locations[:-1], t.staying_times)
                np.add.at(self.full_stay_n[t.user_id], t.locations[:-1], 1)

    def ingest(self, traj: Trajectory, t: int):
        """Make the user's t-th visit (1-based) visible."""
        u = traj.user_id
        loc = int(traj.locations[t - 1])
        self.vis_len[u] = t
        self.freq[u][loc] += 1
        self.pooled_freq[loc] += 1
        if t >= 2:
            prev = int(traj.locations[t - 2])
            self.cnt[u][prev, loc] += 1
            self.pooled_cnt[prev, loc] += 1
            if traj.staying_times is not None:
                self.stay_sum[u][prev] += traj.staying_times[t - 2]
                self.stay_n[u][prev] += 1


def _mean_stay(total: np.ndarray, n: np.ndarray, loc: int) -> float | None:
    return float(total[loc] / n[loc]) if n[loc] > 0 else None


def _camp_stay(gamma: dict, loc: int, stay_sum: dict, stay_n: dict) -> float | None:
    """Coefficient-weighted mean stay at ``loc`` over users with both a
    positive coefficient and at least one observed stay there."""
    weight = 0.0
    total = 0.0
    for v, g in gamma.items():
        w = float(g[loc])
        if w <= 0.0 or stay_n[v][loc] == 0:
            continue
        weight += w
        total += w * stay_sum[v][loc] / stay_n[v][loc]
    return float(total / weight) if weight > 0 else None


class _CampRunner:
    """Fit-and-cache wrapper around one streamed cluster-aided model."""

    def __init__(self, traces, camp_config, schedule, full_users=frozenset()):
        self.traces = traces
        self.config = camp_config
        self.schedule = schedule
        self.full_users = full_users
        self.model: CampModel | None = None
        self.events_seen = 0
        self.refits = 0
        self._gamma_cache: dict = {}

    def model_for(self, cutoff: float) -> CampModel:
        due = self.model is None or (
            self.schedule.epoch is not None
            and self.events_seen % self.schedule.epoch == 0)
        if due:
            stride = self.config.iterations * self.config.samples_per_iteration
            cfg = replace(self.config, seed=self.config.seed + self.refits * stride)
            visible = prefix_traces(self.traces, cutoff, self.full_users)
            self.model = fit(visible, cfg)
            self.refits += 1
            self._gamma_cache.clear()
        self.events_seen += 1
        return self.model

    def gamma(self, user) -> dict:
        if user not in self._gamma_cache:
            _, g = lemma1_weights(self.model, user)
            self._gamma_cache[user] = g
        return self._gamma_cache[user]


def run_streaming(traces: TraceSet, kinds, camp_config: CampConfig | None = None,
                  schedule: RefitSchedule = RefitSchedule(),
                  with_stays: bool = False) -> list[PredictionEvent]:
    """Stream every (user, t>=2) visit in arrival order and log predictions.

    Staying-time estimates (when requested and the trace carries stays) are
    made on arrival at the t-th location for t <= n-1, using data visible at
    that moment.
    """
    kinds = list(kinds)
    for kind in kinds:
        if kind not in KINDS:
            raise PredictorError(f"unknown predictor kind {kind!r}")
    if any(k in _CAMP_KINDS for k in kinds) and camp_config is None:
        raise PredictorError("cluster-aided predictors need a CampConfig")

    L = traces.alphabet.size
    order = {u: k for k, u in enumerate(traces.user_ids)}
    arrivals = []
    for traj in traces.trajectories:
        times = _arrivals(traj)
        for t in range(1, len(traj) + 1):
            arrivals.append((int(times[t - 1]), order[traj.user_id], t, traj))
    arrivals.sort(key=lambda a: (a[0], a[1], a[2]))

    state = _StreamState(traces)
    camp = _CampRunner(traces, camp_config, schedule) if "camp" in kinds else None
    campc = {u: _CampRunner(traces, camp_config, schedule, frozenset(set(traces.user_ids) - {u}))
             for u in traces.user_ids} if "campc" in kinds else None

    events: list[PredictionEvent] = []
    ingest_ptr = 0
    for time, _, t, traj in arrivals:
        if t < 2:
            continue
        while ingest_ptr < len(arrivals) and arrivals[ingest_ptr][0] < time:
            _, _, s, prior_traj = arrivals[ingest_ptr]
            state.ingest(prior_traj, s)
            ingest_ptr += 1
        u = traj.user_id
        prev = int(traj.locations[t - 2])
        actual = int(traj.locations[t - 1])

        predictions = {}
        camp_model = camp.model_for(time) if camp is not None else None
        campc_model = campc[u].model_for(time) if campc is not None else None
        for kind in kinds:
            if kind == "markov":
                predictions[kind] = predict_markov(
                    TransitionCounts(state.cnt[u]), prev, state.freq[u])
            elif kind == "markov2":
                predictions[kind] = predict_markov2(traj.locations[:t - 1], L)
            elif kind == "agg":
                predictions[kind] = predict_markov(
                    TransitionCounts(state.pooled_cnt), prev, state.pooled_freq)
            elif kind == "aggc":
                cnt = state.pooled_full_cnt - state.full_cnt[u] + state.cnt[u]
                freq = state.pooled_full_freq - state.full_freq[u] + state.freq[u]
                predictions[kind] = predict_markov(TransitionCounts(cnt), prev, freq)
            elif kind == "camp":
                predictions[kind] = predict_camp(camp_model, u, prev)
            elif kind == "campc":
                predictions[kind] = predict_camp(campc_model, u, prev)

        event = PredictionEvent(u, t, time, prev, actual, predictions)
        if with_stays and traj.staying_times is not None and t <= len(traj) - 1:
            event.stay_actual = float(traj.staying_times[t - 1])
            loc = actual
            for kind in kinds:
                if kind in ("markov", "markov2"):
                    est = _mean_stay(state.stay_sum[u], state.stay_n[u], loc)
                elif kind == "agg":
                    total = sum(state.stay_sum.values())
                    n = sum(state.stay_n.values())
                    est = _mean_stay(total, n, loc)
                elif kind == "aggc":
                    total = sum(state.full_stay_sum[v] for v in state.users if v != u) \
                        + state.stay_sum[u]
                    n = sum(state.full_stay_n[v] for v in state.users if v != u) \
                        + state.stay_n[u]
                    est = _mean_stay(total, n, loc)
                elif kind == "camp":
                    est = _camp_stay(camp.gamma(u), loc, state.stay_sum, state.stay_n)
                else:  # campc
                    stay_sum = {v: (state.stay_sum[u] if v == u else state.full_stay_sum[v])
                                for v in state.users}
                    stay_n = {v: (state.stay_n[u] if v == u else state.full_stay_n[v])
                              for v in state.users}
                    est = _camp_stay(campc[u].gamma(u), loc, stay_sum, stay_n)
                event.stay_estimates[kind] = est
        events.append(event)
    return events
