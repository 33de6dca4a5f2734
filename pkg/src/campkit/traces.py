"""Location alphabets, trajectories, transition counts and trace-file ingestion.

Trace CSV format: header ``user_id,location,arrival_ts,stay_s``; one row per
visit, ``arrival_ts`` integer seconds, ``stay_s`` optional (empty allowed).
Rows need not be sorted.  AP-scan files (for :func:`jaccard_location_map`)
carry ``user_id,arrival_ts,ap_list`` with a ``;``-separated AP id list.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class TraceError(ValueError):
    """Malformed or inconsistent trace data."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LocationAlphabet:
    """Bijection between external location labels and indices 0..L-1."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 1:
            raise TraceError("alphabet needs at least one location")
        if len(set(self.labels)) != len(self.labels):
            raise TraceError("alphabet labels must be unique")
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self._index[label]

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Trajectory:
    """One user's visit sequence (location indices) with optional timing."""

    user_id: str
    locations: np.ndarray
    arrival_times: np.ndarray | None = None
    staying_times: np.ndarray | None = None

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=np.int64)
        object.__setattr__(self, "locations", _frozen(loc))
        if loc.ndim != 1:
            raise TraceError("locations must be a 1-d sequence")
        if loc.size and loc.min() < 0:
            raise TraceError("negative location index")
        if np.any(loc[1:] == loc[:-1]):
            raise TraceError(f"user {self.user_id!r}: consecutive locations must differ")
        if self.arrival_times is not None:
            at = np.asarray(self.arrival_times, dtype=np.int64)
            if at.shape != loc.shape:
                raise TraceError(f"user {self.user_id!r}: arrival_times length mismatch")
            if np.any(np.diff(at) <= 0):
                raise TraceError(f"user {self.user_id!r}: arrival times must strictly increase")
            object.__setattr__(self, "arrival_times", _frozen(at))
        if self.staying_times is not None:
            st = np.asarray(self.staying_times, dtype=np.float64)
            if st.shape != (max(loc.size - 1, 0),):
                raise TraceError(f"user {self.user_id!r}: need one staying time per visit but the last")
            if st.size and st.min() < 0:
                raise TraceError(f"user {self.user_id!r}: negative staying time")
            object.__setattr__(self, "staying_times", _frozen(st))

    def __len__(self) -> int:
        return int(self.locations.size)


@dataclass(frozen=True)
class TransitionCounts:
    """L x L transition counts; the sufficient statistic for all kernel math."""

    counts: np.ndarray
    row_sums: np.ndarray = field(init=False)

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise TraceError("counts must be a square matrix")
        if c.size and c.min() < 0:
            raise TraceError("negative transition count")
        object.__setattr__(self, "counts", _frozen(c))
        object.__setattr__(self, "row_sums", _frozen(c.sum(axis=1)))

    @classmethod
    def zeros(cls, n_locations: int) -> "TransitionCounts":
        return cls(np.zeros((n_locations, n_locations), dtype=np.int64))

    @property
    def n_locations(self) -> int:
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "TransitionCounts") -> "TransitionCounts":
        return TransitionCounts(self.counts + other.counts)


@dataclass(frozen=True)
class TraceSet:
    """An alphabet plus one trajectory per user."""

    alphabet: LocationAlphabet
    trajectories: tuple[Trajectory, ...]

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        ids = [t.user_id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            raise TraceError("duplicate user ids")
        L = self.alphabet.size
        for t in self.trajectories:
            if t.locations.size and t.locations.max() >= L:
                raise TraceError(f"user {t.user_id!r}: location index out of alphabet range")
        object.__setattr__(self, "_by_user", {t.user_id: t for t in self.trajectories})

    @property
    def user_ids(self) -> tuple[str, ...]:
        return tuple(t.user_id for t in self.trajectories)

    @property
    def n_users(self) -> int:
        return len(self.trajectories)

    def __getitem__(self, user_id: str) -> Trajectory:
        return self._by_user[user_id]

    def __contains__(self, user_id: str) -> bool:
        return user_id in self._by_user

    def counts_by_user(self) -> dict[str, TransitionCounts]:
        L = self.alphabet.size
        return {t.user_id: count_transitions(t, L) for t in self.trajectories}


def count_transitions(traj: Trajectory, n_locations: int,
                      upto: int | None = None) -> TransitionCounts:
    """Count observed i->j transitions in ``traj`` (or its length-``upto`` prefix)."""
    loc = traj.locations
    if upto is not None:
        if upto > loc.size:
            raise TraceError("upto exceeds trajectory length")
        loc = loc[:upto]
    counts = np.zeros((n_locations, n_locations), dtype=np.int64)
    if loc.size >= 2:
        np.add.at(counts, (loc[:-1], loc[1:]), 1)
    return TransitionCounts(counts)


def top_locations(labels: Iterable[str], k: int) -> LocationAlphabet:
    """Alphabet of the ``k`` most visited labels; ties broken lexicographically."""
    visits = Counter(labels)
    if k < 1:
        raise TraceError("k must be positive")
    if k > len(visits):
        raise TraceError(f"k={k} exceeds the {len(visits)} distinct locations")
    ranked = sorted(visits.items(), key=lambda it: (-it[1], it[0]))
    return LocationAlphabet(tuple(lab for lab, _ in ranked[:k]))


def jaccard_location_map(scans: Sequence[frozenset | set], threshold: float = 0.5) -> list[int]:
    """Greedily map AP-id scan sets to location indices.

    Each scan is compared against the representative (first-seen) set of every
    existing location; the best Jaccard match wins if it reaches ``threshold``,
    otherwise the scan opens a new location.  Order-dependent by construction.
    """
    if not 0.0 < threshold <= 1.0:
        raise TraceError("threshold must lie in (0, 1]")
    representatives: list[frozenset] = []
    out: list[int] = []
    for scan in scans:
        s = frozenset(scan)
        if not s:
            raise TraceError("empty AP scan set")
        best, best_val = -1, -1.0
        for idx, rep in enumerate(representatives):
            val = len(s & rep) / len(s | rep)
            if val > best_val:
                best, best_val = idx, val
        if best >= 0 and best_val >= threshold:
            out.append(best)
        else:
            representatives.append(s)
            out.append(len(representatives) - 1)
    return out


# ---------------------------------------------------------------------------
# CSV ingestion / export

_HEADER = ["user_id", "location", "arrival_ts", "stay_s"]


def _read_rows(path) -> list[tuple[str, str, int, float | None]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != _HEADER:
            raise TraceError(f"{path}: expected header {','.join(_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise TraceError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            user, loc, ts_s, stay_s = (f.strip() for f in row)
            if not user or not loc:
                raise TraceError(f"{path}:{lineno}: empty user_id or location")
            try:
                ts = int(ts_s)
            except ValueError:
                raise TraceError(f"{path}:{lineno}: bad arrival_ts {ts_s!r}") from None
            stay: float | None = None
            if stay_s:
                try:
                    stay = float(stay_s)
                except ValueError:
                    raise TraceError(f"{path}:{lineno}: bad stay_s {stay_s!r}") from None
                if stay < 0:
                    raise TraceError(f"{path}:{lineno}: negative stay_s")
            rows.append((user, loc, ts, stay))
    return rows


def _collapse(visits: list[tuple[str, int, float | None]]) -> list[tuple[str, int, float | None]]:
    """Merge runs of equal consecutive locations, summing stays within a run."""
    out: list[tuple[str, int, float | None]] = []
    for loc, ts, stay in visits:
        if out and out[-1][0] == loc:
            prev_loc, prev_ts, prev_stay = out[-1]
            merged = None if (prev_stay is None or stay is None) else prev_stay + stay
            out[-1] = (prev_loc, prev_ts, merged)
        else:
            out.append((loc, ts, stay))
    return out


def resolve_alphabet(rows, policy) -> LocationAlphabet:
    """Turn an alphabet policy into a concrete alphabet.

    ``policy`` is ``"all"`` (every distinct label, sorted), ``("top", K)``
    (the K most visited labels), an explicit sequence of labels, or an
    existing :class:`LocationAlphabet`.
    """
    if isinstance(policy, LocationAlphabet):
        return policy
    if policy == "all":
        return LocationAlphabet(tuple(sorted({r[1] for r in rows})))
    if isinstance(policy, tuple) and len(policy) == 2 and policy[0] == "top":
        return top_locations((r[1] for r in rows), int(policy[1]))
    if isinstance(policy, (list, tuple)):
        return LocationAlphabet(tuple(policy))
    raise TraceError(f"unknown alphabet policy {policy!r}")


def ingest_csv(path, alphabet_policy="all") -> TraceSet:
    """Read a trace CSV into a :class:`TraceSet`.

    Per user: rows are sorted by timestamp, consecutive duplicate locations
    collapsed (stays summed), locations outside the alphabet dropped, and the
    survivors re-collapsed.  A user's staying times are kept only when every
    retained visit (but possibly the last) carries one.
    """
    rows = _read_rows(path)
    alphabet = resolve_alphabet(rows, alphabet_policy)

    per_user: dict[str, list[tuple[str, int, float | None]]] = {}
    for user, loc, ts, stay in rows:
        per_user.setdefault(user, []).append((loc, ts, stay))

    trajectories = []
    for user, visits in per_user.items():
        visits.sort(key=lambda v: v[1])
        times = [v[1] for v in visits]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise TraceError(f"user {user!r}: arrival timestamps are not strictly increasing")
        visits = _collapse(visits)
        visits = [v for v in visits if v[0] in alphabet]
        visits = _collapse(visits)
        if not visits:
            continue
        locs = np.array([alphabet.index(v[0]) for v in visits], dtype=np.int64)
        arrivals = np.array([v[1] for v in visits], dtype=np.int64)
        stays = [v[2] for v in visits[:-1]]
        staying = np.array(stays, dtype=np.float64) if all(s is not None for s in stays) else None
        trajectories.append(Trajectory(user, locs, arrivals, staying))
    return TraceSet(alphabet, tuple(trajectories))


def write_csv(traces: TraceSet, path) -> None:
    """Export a TraceSet in the ingestion CSV format (one row per visit)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HEADER)
        for traj in traces.trajectories:
            n = len(traj)
            arrivals = traj.arrival_times if traj.arrival_times is not None \
                else np.arange(n, dtype=np.int64)
            for t in range(n):
                stay = ""
                if traj.staying_times is not None and t < n - 1:
                    stay = format(traj.staying_times[t], "g")
                writer.writerow([traj.user_id, traces.alphabet.labels[traj.locations[t]],
                                 int(arrivals[t]), stay])


def read_ap_scans(path) -> list[tuple[str, int, frozenset]]:
    """Read an AP-scan file: rows of (user_id, arrival_ts, frozenset of AP ids)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["user_id", "arrival_ts", "ap_list"]:
            raise TraceError(f"{path}: expected header user_id,arrival_ts,ap_list")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise TraceError(f"{path}:{lineno}: expected 3 fields")
            user, ts_s, aps = (f.strip() for f in row)
            try:
                ts = int(ts_s)
            except ValueError:
                raise TraceError(f"{path}:{lineno}: bad arrival_ts {ts_s!r}") from None
            ids = frozenset(a for a in aps.split(";") if a)
            if not ids:
                raise TraceError(f"{path}:{lineno}: empty ap_list")
            out.append((user, ts, ids))
    return out
