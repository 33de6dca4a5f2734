import math

import numpy as np
import pytest

from campkit.dirichlet import MixtureBase, log_marginal
from campkit.gibbs import (ClusterAssignment, GibbsConfig, GibbsError,
                           crp_step_weights, draw_batch, gibbs_sample)
from campkit.synthetic import SyntheticPrior, generate, random_kernels
from campkit.traces import TransitionCounts

from conftest import make_traces


def uniform_cfg(n_locations, alpha=1.0, sweeps=10, seed=0):
    return GibbsConfig(alpha=alpha, base=MixtureBase.uniform(n_locations),
                       sweeps=sweeps, seed=seed)


def assignment_of(traces, labels):
    return ClusterAssignment.from_labels(traces.user_ids, labels, traces.counts_by_user())


class TestCrpStepWeights:
    def test_two_empty_users_split_evenly(self):
        from campkit.gibbs import Cluster

        traces = make_traces({"u": [0], "v": [1]}, 2)
        counts = traces.counts_by_user()
        detached = ClusterAssignment({"v": 0}, {0: Cluster(frozenset({"v"}), counts["v"])})
        w_new, w_by = crp_step_weights("u", counts["u"], detached, uniform_cfg(2))
        assert w_new == pytest.approx(0.5)
        assert w_by[0] == pytest.approx(0.5)

    def test_tiny_alpha_kills_new_cluster(self):
        traces = make_traces({"u": [0, 1], "v": [1, 0]}, 2)
        detached = assignment_of(
            make_traces({"v": [1, 0]}, 2), [0])
        w_new, _ = crp_step_weights("u", traces.counts_by_user()["u"],
                                    detached, uniform_cfg(2, alpha=1e-12))
        assert w_new < 1e-10

    def test_matching_cluster_beats_its_prior_share(self):
        # u repeats the 0->1 transition 3 times; a 3-member cluster pooled 9 of
        # them.  With alpha=1 the prior odds are 3:1; the data must push the
        # posterior odds strictly higher, i.e. the likelihood ratio exceeds 1.
        from campkit.gibbs import Cluster

        L = 2
        u_counts = TransitionCounts(np.array([[0, 3], [0, 0]]))
        pooled = TransitionCounts(np.array([[0, 9], [0, 0]]))
        members = frozenset({"a", "b", "c"})
        detached = ClusterAssignment({m: 0 for m in members}, {0: Cluster(members, pooled)})
        w_new, w_by = crp_step_weights("u", u_counts, detached, uniform_cfg(L))
        assert w_by[0] / w_new > 3.0
        flat = np.zeros((L, L))
        ratio = log_marginal(u_counts + pooled, flat) - log_marginal(pooled, flat) \
            - log_marginal(u_counts, flat)
        assert ratio > 0

    def test_weights_normalize(self, rng):
        kernels = random_kernels(2, 3, rng)
        traces, _, _ = generate(SyntheticPrior.perfect_clusters(kernels, ("fixed", 4)), 5, 3)
        counts = traces.counts_by_user()
        others = ClusterAssignment.from_labels(
            traces.user_ids[1:], [0, 0, 1, 1], counts)
        w_new, w_by = crp_step_weights(traces.user_ids[0], counts[traces.user_ids[0]],
                                       others, uniform_cfg(3))
        assert w_new >= 0 and all(w >= 0 for w in w_by.values())
        assert w_new + sum(w_by.values()) == pytest.approx(1.0, abs=1e-12)

    def test_detached_precondition(self):
        traces = make_traces({"u": [0, 1]}, 2)
        others = assignment_of(traces, [0])
        with pytest.raises(GibbsError):
            crp_step_weights("u", traces.counts_by_user()["u"], others, uniform_cfg(2))


def python_reference_chain(traces, cfg):
    """Step-by-step replay of the sweep using crp_step_weights: the
    independent semantics oracle for the compiled kernel."""
    from campkit.gibbs import Cluster

    counts = traces.counts_by_user()
    users = list(traces.user_ids)
    uniforms = np.random.default_rng(cfg.seed).random(cfg.sweeps * len(users))
    assignment = {u: 0 for u in users}
    members = {0: set(users)}
    next_id = 1
    step = 0
    for _ in range(cfg.sweeps):
        for u in users:
            r = uniforms[step]
            step += 1
            cid = assignment.pop(u)
            members[cid].discard(u)
            if not members[cid]:
                del members[cid]
            clusters = {}
            for c, ms in members.items():
                pooled = counts[next(iter(ms))]
                for v in list(ms)[1:]:
                    pooled = pooled + counts[v]
                clusters[c] = Cluster(frozenset(ms), pooled)
            others = ClusterAssignment(dict(assignment), clusters)
            w_new, w_by = crp_step_weights(u, counts[u], others, cfg)
            picked = None
            cum = 0.0
            for c in sorted(w_by):
                cum += w_by[c]
                if r < cum:
                    picked = c
                    break
            if picked is None:
                picked = next_id
                next_id += 1
                members[picked] = set()
            members[picked].add(u)
            assignment[u] = picked
    return frozenset(frozenset(ms) for ms in members.values())


class TestGibbsSample:
    def test_single_user_single_cluster(self):
        traces = make_traces({"u": [0, 1, 0]}, 2)
        sample = gibbs_sample(traces, uniform_cfg(2, sweeps=5, seed=3))
        assert sample.n_clusters == 1
        assert sample.cluster_of("u").members == frozenset({"u"})

    def test_zero_sweeps_rejected(self):
        with pytest.raises(GibbsError):
            GibbsConfig(alpha=1.0, base=MixtureBase.uniform(2), sweeps=0, seed=0)

    def test_deterministic_given_seed(self, rng):
        kernels = random_kernels(2, 3, rng)
        traces, _, _ = generate(SyntheticPrior.perfect_clusters(kernels, ("fixed", 5)), 6, 9)
        cfg = uniform_cfg(3, sweeps=1, seed=77)
        assert gibbs_sample(traces, cfg).assignment == gibbs_sample(traces, cfg).assignment

    def test_kernel_matches_python_replay(self, rng):
        for inst in range(4):
            kernels = random_kernels(2, 3, rng)
            traces, _, _ = generate(
                SyntheticPrior.perfect_clusters(kernels, ("uniform", 2, 5)), 5, 200 + inst)
            cfg = uniform_cfg(3, sweeps=8, seed=500 + inst)
            got = gibbs_sample(traces, cfg).partition()
            want = python_reference_chain(traces, cfg)
            assert got == want

    def test_kernel_matches_replay_with_mixture_base(self, rng):
        kernels = random_kernels(2, 3, rng)
        traces, _, _ = generate(SyntheticPrior.perfect_clusters(kernels, ("fixed", 4)), 4, 31)
        pseudo = np.stack([np.zeros((3, 3)), rng.integers(0, 3, (3, 3)).astype(float)])
        base = MixtureBase(np.array([0.6, 0.4]), pseudo)
        cfg = GibbsConfig(alpha=0.7, base=base, sweeps=6, seed=11)
        assert gibbs_sample(traces, cfg).partition() == python_reference_chain(traces, cfg)

    def test_partition_valid_and_pooled_counts_consistent(self, rng):
        kernels = random_kernels(3, 4, rng)
        traces, _, _ = generate(SyntheticPrior.perfect_clusters(kernels, ("fixed", 6)), 8, 5)
        counts = traces.counts_by_user()
        sample = gibbs_sample(traces, uniform_cfg(4, sweeps=7, seed=2))
        seen = set()
        for cluster in sample.clusters.values():
            assert not (cluster.members & seen)
            seen |= cluster.members
            pooled = np.zeros((4, 4), dtype=np.int64)
            for u in cluster.members:
                pooled += counts[u].counts
            assert np.array_equal(pooled, cluster.counts.counts)
        assert seen == set(traces.user_ids)

    def test_two_empty_users_cocluster_half_the_time(self):
        traces = make_traces({"u": [0], "v": [1]}, 2)
        together = 0
        n = 10_000
        cfg = uniform_cfg(2, sweeps=50, seed=0)
        samples = draw_batch(traces, cfg, n)
        for s in samples:
            together += s.assignment["u"] == s.assignment["v"]
        assert together / n == pytest.approx(0.5, abs=0.02)

    def test_non_integer_base_rejected(self):
        traces = make_traces({"u": [0, 1]}, 2)
        base = MixtureBase(np.ones(1), np.full((1, 2, 2), 0.5))
        with pytest.raises(GibbsError):
            gibbs_sample(traces, GibbsConfig(1.0, base, 5, 0))


class TestDrawBatch:
    def test_single_sample_equals_gibbs_sample(self):
        traces = make_traces({"u": [0, 1], "v": [1, 0]}, 2)
        cfg = uniform_cfg(2, sweeps=4, seed=13)
        assert draw_batch(traces, cfg, 1)[0].assignment == gibbs_sample(traces, cfg).assignment

    def test_identical_configs_identical_batches(self):
        traces = make_traces({"u": [0, 1], "v": [1, 0], "w": [0, 1]}, 2)
        cfg = uniform_cfg(2, sweeps=4, seed=21)
        a = draw_batch(traces, cfg, 3)
        b = draw_batch(traces, cfg, 3)
        assert [s.assignment for s in a] == [s.assignment for s in b]

    def test_default_batch_size_is_eight(self):
        traces = make_traces({"u": [0, 1], "v": [1, 0]}, 2)
        assert len(draw_batch(traces, uniform_cfg(2, sweeps=2, seed=1))) == 8

    def test_larger_alpha_means_more_clusters(self, rng):
        kernels = random_kernels(2, 3, rng)
        traces, _, _ = generate(SyntheticPrior.perfect_clusters(kernels, ("fixed", 4)), 6, 17)
        means = []
        for alpha in (0.1, 10.0):
            samples = draw_batch(traces, uniform_cfg(3, alpha=alpha, sweeps=20, seed=4), 200)
            means.append(np.mean([s.n_clusters for s in samples]))
        assert means[1] > means[0]
