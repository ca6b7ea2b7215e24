import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crtmethods.simulate import (ScenarioSpec, compute_truth, generate, generate_sim1,
                                 generate_sim2, min_cost_matching, pair_match)


def brute_force_matching(values):
    idx = list(range(len(values)))

    def matchings(items):
        if not items:
            yield []
            return
        first, rest = items[0], items[1:]
        for k, other in enumerate(rest):
            for m in matchings(rest[:k] + rest[k + 1:]):
                yield [(first, other)] + m

    return min(sum(abs(values[i] - values[j]) for i, j in m) for m in matchings(idx))


def cost(values, pairs):
    return sum(abs(values[i] - values[j]) for i, j in pairs)


class TestPairMatch:
    def test_small_example(self):
        values = [0.0, 0.1, 5.0, 5.2]
        pairs = pair_match(values)
        assert pairs == [(0, 1), (2, 3)]
        assert cost(values, pairs) == pytest.approx(0.3)

    def test_two_clusters(self):
        assert pair_match([3.0, -1.0]) == [(0, 1)]

    def test_ties(self):
        assert pair_match([1.0, 1.0, 1.0, 1.0]) == [(0, 1), (2, 3)]

    def test_odd_count(self):
        with pytest.raises(ValueError):
            pair_match([1.0, 2.0, 3.0])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=10).filter(
        lambda v: len(v) % 2 == 0))
    def test_optimal_against_brute_force(self, values):
        pairs = pair_match(values)
        assert sorted(i for p in pairs for i in p) == list(range(len(values)))
        assert cost(values, pairs) == pytest.approx(brute_force_matching(values), abs=1e-9)

    def test_agrees_with_exact_dp(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            v = rng.normal(size=14)
            _, total = min_cost_matching(np.abs(v[:, None] - v[None, :]))
            assert cost(v, pair_match(v)) == pytest.approx(total)

    def test_dp_general_cost(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(8, 2))
        c = np.linalg.norm(pts[:, None] - pts[None], axis=2)
        _, total = min_cost_matching(c)
        idx = list(range(8))
        best = np.inf
        for perm in itertools.permutations(idx):
            if all(perm[2 * k] < perm[2 * k + 1] for k in range(4)):
                best = min(best, sum(c[perm[2 * k], perm[2 * k + 1]] for k in range(4)))
        assert total == pytest.approx(best)


class TestGenerators:
    @pytest.mark.parametrize("scenario", ["sim1", "sim2"])
    def test_consistency(self, scenario):
        spec = ScenarioSpec(scenario)
        trial, store = generate(spec, 3)
        a = trial.arm[trial.cluster_index]
        assert np.array_equal(trial.y, np.where(a == 1, store.y1, store.y0))

    @pytest.mark.parametrize("scenario", ["sim1", "sim2"])
    def test_reproducible(self, scenario):
        spec = ScenarioSpec(scenario, seed=11)
        t1, _ = generate(spec, 5)
        t2, _ = generate(spec, 5)
        for name in ("arm", "sizes", "y", "cluster_covariates", "individual_covariates", "pair_ids"):
            assert np.array_equal(getattr(t1, name), getattr(t2, name))

    def test_streams_differ(self):
        spec = ScenarioSpec("sim1")
        assert not np.array_equal(generate(spec, 0)[0].sizes, generate(spec, 1)[0].sizes)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(1, 60))
    def test_size_floor(self, stream, floor):
        trial, _ = generate(ScenarioSpec("sim1", size_mean=40, size_sd=60, size_floor=floor), stream)
        assert trial.sizes.min() >= floor

    def test_pairs_are_matched_on_E2(self):
        trial, _ = generate(ScenarioSpec("sim1"), 2)
        e2 = trial.cluster_design(("E2",))[:, 0]
        pairs = [tuple(np.flatnonzero(trial.pair_ids == p)) for p in np.unique(trial.pair_ids)]
        assert cost(e2, pairs) == pytest.approx(cost(e2, pair_match(e2)))
        assert trial.arm.sum() == trial.n_clusters // 2

    def test_scenario_covariates(self):
        t1, _ = generate_sim1(ScenarioSpec(), 0)
        assert t1.cluster_covariate_names == ("E1", "E2")
        assert t1.individual_covariate_names == ("W1", "W2", "W3", "W4")
        t2, _ = generate_sim2(ScenarioSpec(), 0)
        assert t2.cluster_covariate_names == ("E1", "E2", "Nscaled")
        assert t2.cluster_design(("Nscaled",))[:, 0] == pytest.approx(t2.sizes / 150)

    def test_null_flag_removes_effect(self):
        _, store = generate(ScenarioSpec("sim2", null=True), 0)
        assert np.array_equal(store.y1, store.y0)

    def test_odd_clusters_rejected(self):
        with pytest.raises(ValueError):
            ScenarioSpec(n_clusters=7)


class TestTruth:
    def test_null_truth_is_one(self):
        for scenario in ("sim1", "sim2"):
            truth = compute_truth(ScenarioSpec(scenario, null=True), 1000)
            assert truth.cluster_ratio == 1.0
            assert truth.individual_ratio == 1.0
            assert truth.geometric_ratio == 1.0

    def test_sim2_individual_below_cluster(self):
        truth = compute_truth(ScenarioSpec("sim2", size_mean=150, size_sd=90), 1000)
        assert truth.individual_ratio < truth.cluster_ratio

    def test_population_minimum(self):
        with pytest.raises(ValueError):
            compute_truth(ScenarioSpec("sim1"), 999)
