import numpy as np
import pytest

from campkit.dirichlet import MixtureBase, posterior_mean
from campkit.engine import (ALPHA_LOWER, ALPHA_UPPER, CampConfig, CampError,
                            CampModel, estimate_staying_time, estimate_theta,
                            expected_cluster_count, fit, lemma1_weights,
                            solve_alpha, theta_from_samples, update_alpha,
                            update_base)
from campkit.gibbs import Cluster, ClusterAssignment
from campkit.synthetic import SyntheticPrior, generate, random_kernels
from campkit.traces import TransitionCounts, count_transitions

from conftest import make_traces


def assignment(traces, labels):
    return ClusterAssignment.from_labels(traces.user_ids, labels, traces.counts_by_user())


def rebuild_from_expansion(model, user):
    """Reassemble the kernel estimate from (offset, weights): the dual path."""
    L = model.n_locations
    out = np.tile(lemma1_weights(model, user)[0][:, None], (1, L))
    _, gamma = lemma1_weights(model, user)
    for v in model.user_ids:
        c = model.counts[v]
        safe = np.where(c.row_sums > 0, c.row_sums, 1)
        out += gamma[v][:, None] * c.counts / safe[:, None]
    return out


class TestUpdateBase:
    def test_single_sample_single_cluster(self):
        traces = make_traces({"u": [0, 1], "v": [1, 0]}, 2)
        base = update_base(MixtureBase.uniform(2), [assignment(traces, [0, 0])])
        assert base.n_components == 1
        np.testing.assert_allclose(base.weights, [1.0])
        pooled = sum(c.counts for c in traces.counts_by_user().values())
        np.testing.assert_allclose(base.pseudo[0], pooled)

    def test_duplicate_partitions_collapse(self):
        traces = make_traces({"u": [0, 1], "v": [1, 0]}, 2)
        one = update_base(MixtureBase.uniform(2), [assignment(traces, [0, 0])])
        two = update_base(MixtureBase.uniform(2),
                          [assignment(traces, [0, 0]), assignment(traces, [1, 1])])
        np.testing.assert_allclose(one.weights, two.weights)
        np.testing.assert_allclose(one.pseudo, two.pseudo)

    def test_component_count_multiplies(self):
        traces = make_traces({"u": [0, 1, 2], "v": [2, 0, 1]}, 3)
        start = MixtureBase(np.array([0.5, 0.5]),
                            np.stack([np.zeros((3, 3)), np.eye(3)[[1, 2, 0]] * 2.0]))
        grown = update_base(start, [assignment(traces, [0, 1])])
        # 2 input components x 2 distinct clusters, no coincidental duplicates
        assert grown.n_components == 4

    def test_weights_sum_to_one(self, rng):
        kernels = random_kernels(2, 3, rng)
        traces, _, _ = generate(SyntheticPrior.perfect_clusters(kernels, ("fixed", 5)), 6, 2)
        from campkit.gibbs import GibbsConfig, draw_batch
        samples = draw_batch(traces, GibbsConfig(1.0, MixtureBase.uniform(3), 5, 0), 4)
        base = update_base(MixtureBase.uniform(3), samples)
        assert base.weights.sum() == pytest.approx(1.0, abs=1e-12)


class TestUpdateAlpha:
    def test_closed_form_case(self):
        # two users: one sample together, one apart -> mean cluster count 1.5
        traces = make_traces({"u": [0, 1], "v": [1, 0]}, 2)
        samples = [assignment(traces, [0, 0]), assignment(traces, [0, 1])]
        assert update_alpha(samples, 2) == pytest.approx(1.0, abs=1e-6)

    def test_lower_clamp(self):
        traces = make_traces({"u": [0, 1], "v": [1, 0]}, 2)
        assert update_alpha([assignment(traces, [0, 0])], 2) == ALPHA_LOWER

    def test_upper_clamp(self):
        traces = make_traces({"u": [0, 1], "v": [1, 0], "w": [0, 2]}, 3)
        assert update_alpha([assignment(traces, [0, 1, 2])], 3) == ALPHA_UPPER

    def test_objective_met_within_tolerance(self, rng):
        for _ in range(20):
            n_users = int(rng.integers(2, 40))
            target = float(rng.uniform(1.0, n_users))
            alpha = solve_alpha(target, n_users)
            if ALPHA_LOWER < alpha < ALPHA_UPPER:
                assert expected_cluster_count(alpha, n_users) == pytest.approx(target, abs=1e-6)


class TestFit:
    def test_single_round_single_user(self):
        traces = make_traces({"u": [0, 1, 0, 1]}, 2)
        model = fit(traces, CampConfig(iterations=1, samples_per_iteration=1, sweeps=3, seed=5))
        want = posterior_mean(traces.counts_by_user()["u"], MixtureBase.uniform(2))
        np.testing.assert_allclose(model.theta("u").theta, want.theta, atol=1e-12)
        assert model.alpha == 1.0

    def test_rows_sum_to_one(self, rng):
        kernels = random_kernels(2, 4, rng)
        traces, _, _ = generate(SyntheticPrior.perfect_clusters(kernels, ("fixed", 8)), 6, 4)
        model = fit(traces, CampConfig(iterations=2, samples_per_iteration=3, sweeps=5, seed=1))
        for u in traces.user_ids:
            np.testing.assert_allclose(model.theta(u).theta.sum(axis=1), 1.0, atol=1e-9)

    def test_all_empty_trajectories_give_uniform(self):
        traces = make_traces({"u": [0], "v": [1], "w": [2]}, 3)
        model = fit(traces, CampConfig(iterations=3, samples_per_iteration=2, sweeps=4, seed=8))
        for u in traces.user_ids:
            np.testing.assert_allclose(model.theta(u).theta, 1 / 3, atol=1e-12)

    def test_deterministic(self, rng):
        kernels = random_kernels(2, 3, rng)
        traces, _, _ = generate(SyntheticPrior.perfect_clusters(kernels, ("fixed", 5)), 5, 6)
        cfg = CampConfig(iterations=2, samples_per_iteration=2, sweeps=4, seed=3)
        a, b = fit(traces, cfg), fit(traces, cfg)
        for u in traces.user_ids:
            np.testing.assert_array_equal(a.theta(u).theta, b.theta(u).theta)

    def test_permutation_equivariance(self, rng):
        kernels = random_kernels(2, 4, rng)
        traces, _, _ = generate(SyntheticPrior.perfect_clusters(kernels, ("fixed", 6)), 5, 12)
        perm = np.array([2, 0, 3, 1])
        permuted = make_traces(
            {u: perm[traces[u].locations] for u in traces.user_ids}, 4)
        cfg = CampConfig(iterations=2, samples_per_iteration=2, sweeps=5, seed=9)
        base_model = fit(traces, cfg)
        perm_model = fit(permuted, cfg)
        for u in traces.user_ids:
            original = base_model.theta(u).theta
            relabeled = perm_model.theta(u).theta
            np.testing.assert_allclose(relabeled[np.ix_(perm, perm)], original, atol=1e-9)

    def test_unknown_user(self):
        traces = make_traces({"u": [0, 1]}, 2)
        model = fit(traces, CampConfig(iterations=1, samples_per_iteration=1, sweeps=2, seed=0))
        with pytest.raises(CampError):
            estimate_theta(model, "nobody")


class TestThetaFromSamples:
    def test_repeated_partition_equals_single(self):
        traces = make_traces({"u": [0, 1, 0], "v": [1, 0, 1]}, 2)
        base = MixtureBase.uniform(2)
        asg = assignment(traces, [0, 0])
        single = theta_from_samples(base, [asg], "u")
        triple = theta_from_samples(base, [asg, asg, asg], "u")
        np.testing.assert_allclose(triple.theta, single.theta)

    def test_pooled_laplace_smoothing(self):
        traces = make_traces({"u": [0, 1, 0], "v": [0, 1]}, 2)
        asg = assignment(traces, [0, 0])
        got = theta_from_samples(MixtureBase.uniform(2), [asg], "u")
        pooled = sum(c.counts for c in traces.counts_by_user().values())
        want = (1.0 + pooled) / (2 + pooled.sum(axis=1))[:, None]
        np.testing.assert_allclose(got.theta, want)


def manual_model(traces, samples_rounds, cfg=None):
    cfg = cfg or CampConfig(iterations=len(samples_rounds),
                            samples_per_iteration=len(samples_rounds[0]),
                            sweeps=1, seed=0)
    base = MixtureBase.uniform(traces.alphabet.size)
    counts = traces.counts_by_user()
    thetas = {u: theta_from_samples(base, samples_rounds[-1], u) for u in traces.user_ids}
    return CampModel(base=base, alpha=1.0, rounds=samples_rounds, thetas=thetas,
                     counts=counts, user_ids=traces.user_ids,
                     n_locations=traces.alphabet.size, config=cfg)


class TestExpansionWeights:
    def test_single_user_closed_form(self):
        traces = make_traces({"u": [0, 1, 0, 1]}, 2)
        model = fit(traces, CampConfig(iterations=1, samples_per_iteration=1, sweeps=2, seed=1))
        eta, gamma = lemma1_weights(model, "u")
        rows = traces.counts_by_user()["u"].row_sums
        np.testing.assert_allclose(eta, 1.0 / (2 + rows))
        np.testing.assert_allclose(gamma["u"], rows / (2 + rows))

    def test_identity_against_estimate_on_random_instances(self, rng):
        for inst in range(4):
            kernels = random_kernels(2, 3, rng)
            traces, _, _ = generate(
                SyntheticPrior.perfect_clusters(kernels, ("uniform", 2, 5)), 4, 400 + inst)
            for depth in (1, 2):
                model = fit(traces, CampConfig(iterations=depth, samples_per_iteration=2,
                                               sweeps=4, seed=40 + inst))
                for u in traces.user_ids:
                    np.testing.assert_allclose(rebuild_from_expansion(model, u),
                                               model.theta(u).theta, atol=1e-8)

    def test_never_co_clustered_user_gets_zero_weight(self):
        traces = make_traces({"u": [0, 1, 0], "v": [1, 2, 1]}, 3)
        model = manual_model(traces, [[assignment(traces, [0, 1])]])
        _, gamma = lemma1_weights(model, "u")
        np.testing.assert_array_equal(gamma["v"], 0.0)
        assert gamma["u"].sum() > 0

    def test_budget_guard(self):
        traces = make_traces({"u": [0, 1], "v": [1, 0]}, 2)
        cfg = CampConfig(iterations=2, samples_per_iteration=1, sweeps=1, seed=0,
                         chain_budget=0)
        model = fit(traces, cfg)
        with pytest.raises(CampError, match="budget"):
            lemma1_weights(model, "u")


class TestStayingTime:
    def test_single_user_average(self):
        traces = make_traces({"u": [0, 1, 0, 1, 0]}, 2,
                             stays={"u": [100.0, 7.0, 200.0, 9.0]})
        model = fit(traces, CampConfig(iterations=1, samples_per_iteration=1, sweeps=2, seed=0))
        assert estimate_staying_time(model, "u", traces) == pytest.approx(150.0)

    def test_equal_weight_mix(self):
        traces = make_traces({"u": [0, 1, 0], "v": [0, 1, 0]}, 2,
                             stays={"u": [100.0, 5.0], "v": [300.0, 5.0]})
        model = manual_model(traces, [[assignment(traces, [0, 0])]])
        assert estimate_staying_time(model, "u", traces) == pytest.approx(200.0)

    def test_fallback_to_co_clustered_user(self):
        traces = make_traces({"u": [1, 0], "v": [0, 1, 0]}, 2,
                             stays={"u": [50.0], "v": [120.0, 8.0]})
        model = manual_model(traces, [[assignment(traces, [0, 0])]])
        assert estimate_staying_time(model, "u", traces) == pytest.approx(120.0)

    def test_no_estimate_when_nobody_stayed_there(self):
        traces = make_traces({"u": [1, 0], "v": [1, 2]}, 3,
                             stays={"u": [50.0], "v": [60.0]})
        model = manual_model(traces, [[assignment(traces, [0, 0])]])
        assert estimate_staying_time(model, "u", traces) is None
