import numpy as np
import pytest

from campkit.traces import LocationAlphabet, TraceSet, Trajectory


def make_traces(seqs, n_locations, arrivals=None, stays=None) -> TraceSet:
    """Build a TraceSet from {user: [location indices]} with optional timing."""
    labels = tuple(f"L{i}" for i in range(n_locations))
    trajectories = []
    for user, locs in seqs.items():
        arr = None if arrivals is None else np.asarray(arrivals[user])
        st = None if stays is None else np.asarray(stays[user], dtype=float)
        trajectories.append(Trajectory(user, np.asarray(locs, dtype=np.int64), arr, st))
    return TraceSet(LocationAlphabet(labels), tuple(trajectories))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
