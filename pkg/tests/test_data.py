import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crtmethods.data import (ClusterRecord, EffectTarget, IndividualRecord, Level, TrialData,
                             TrialDataError, cluster_outcome, cluster_outcomes,
                             covariate_summaries, pooled_mean, weight_scheme)

from conftest import random_trial, toy_clusters


def _cluster(n, events, arm=0, cid=0):
    inds = tuple(IndividualRecord((), 1.0 if i < events else 0.0) for i in range(n))
    return ClusterRecord(cid, arm, (), inds)


class TestClusterOutcome:
    def test_two_of_ten(self):
        assert cluster_outcome(_cluster(10, 2)) == pytest.approx(0.2)

    def test_all_zero(self):
        assert cluster_outcome(_cluster(7, 0)) == 0.0

    def test_large_cluster(self):
        assert cluster_outcome(_cluster(10000, 7500)) == pytest.approx(0.75)

    def test_empty_cluster_errors(self):
        with pytest.raises(TrialDataError):
            cluster_outcome(ClusterRecord(3, 0, (), ()))


class TestPooledMean:
    def _toy_trial(self):
        # mirror the five toy clusters into a treated arm so allocation is equal
        control = toy_clusters()
        treated = [ClusterRecord(c.cluster_id + 10, 1, (), c.individuals) for c in control]
        return TrialData.from_clusters(control + treated)

    def test_toy_cluster_level(self):
        assert pooled_mean(self._toy_trial(), 0, "cluster") == pytest.approx(0.31)

    def test_toy_individual_level(self):
        value = pooled_mean(self._toy_trial(), 0, "individual")
        assert value == pytest.approx(7508 / 10040)
        assert round(value, 3) == 0.748

    def test_single_cluster_all_events(self):
        trial = TrialData.from_clusters([_cluster(4, 4, arm=1, cid=0), _cluster(3, 0, arm=0, cid=1)])
        assert pooled_mean(trial, 1, "cluster") == 1.0
        assert pooled_mean(trial, 1, "individual") == 1.0

    def test_missing_arm_errors(self):
        trial = TrialData.from_clusters([_cluster(4, 1, 0, 0), _cluster(3, 0, 0, 1)])
        with pytest.raises(TrialDataError):
            pooled_mean(trial, 1)

    def test_equal_sizes_levels_agree(self, rng):
        trial = random_trial(rng, equal_sizes=True, size_range=(12, 12))
        for a in (0, 1):
            assert pooled_mean(trial, a, "cluster") == pytest.approx(pooled_mean(trial, a, "individual"))


class TestWeights:
    def test_alpha_sums_to_one(self, small_trial):
        scheme = weight_scheme(small_trial, "cluster")
        assert np.allclose(small_trial.cluster_sum(scheme.alpha), 1.0)

    def test_gamma_sums_to_J(self, small_trial):
        for level in Level:
            assert weight_scheme(small_trial, level).gamma.sum() == pytest.approx(small_trial.n_clusters)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(2, 12))
    def test_weight_identity(self, seed, half):
        rng = np.random.default_rng(seed)
        trial = random_trial(rng, n_clusters=2 * half, binary=bool(seed % 2))
        scheme = weight_scheme(trial, Level.INDIVIDUAL)
        yc = cluster_outcomes(trial)
        lhs = (scheme.gamma * yc).mean()
        assert lhs == pytest.approx(trial.y.mean(), rel=1e-12, abs=1e-12)


class TestCovariateSummaries:
    def test_mean(self):
        inds = tuple(IndividualRecord((v,), 0.0) for v in (1.0, 2.0, 3.0))
        trial = TrialData.from_clusters(
            [ClusterRecord(0, 0, (), inds), ClusterRecord(1, 1, (), inds)],
            individual_covariate_names=("W1",))
        assert covariate_summaries(trial)[:, 0] == pytest.approx([2.0, 2.0])

    def test_no_covariates(self):
        trial = TrialData.from_clusters([_cluster(3, 1, 0, 0), _cluster(2, 1, 1, 1)])
        assert covariate_summaries(trial).shape == (2, 0)

    def test_sim1_summary_tracks_latent_mean(self):
        from crtmethods.simulate import ScenarioSpec, generate
        trial, _ = generate(ScenarioSpec("sim1", size_mean=4000, size_sd=1, n_clusters=4), 0)
        w1c = trial.cluster_design(("W1",))[:, 0]
        # W1 ~ N(2 U, 0.35): cluster means lie in 2 * [-0.2, 1.5]
        assert ((w1c > -0.45) & (w1c < 3.05)).all()


class TestValidation:
    def test_pair_with_same_arm(self):
        with pytest.raises(TrialDataError, match="opposite arms"):
            TrialData(arm=[0, 0, 1, 1], sizes=[1, 1, 1, 1], y=[0, 1, 0, 1], pair_ids=[0, 0, 1, 1])

    def test_too_few_clusters(self):
        with pytest.raises(TrialDataError):
            TrialData(arm=[1], sizes=[2], y=[0, 1])

    def test_bad_arm(self):
        with pytest.raises(TrialDataError):
            TrialData(arm=[0, 2], sizes=[1, 1], y=[0, 1])

    def test_unequal_allocation_flagged(self):
        trial = TrialData(arm=[0, 0, 1], sizes=[1, 1, 1], y=[0, 1, 0])
        with pytest.raises(TrialDataError, match="equal allocation"):
            trial.check_equal_allocation()

    def test_nonfinite_outcome(self):
        with pytest.raises(TrialDataError):
            TrialData(arm=[0, 1], sizes=[1, 1], y=[0, np.nan])

    def test_arrays_read_only(self, small_trial):
        with pytest.raises(ValueError):
            small_trial.y[0] = 5

    def test_record_round_trip(self, small_trial):
        again = TrialData.from_clusters(small_trial.clusters, small_trial.cluster_covariate_names,
                                        small_trial.individual_covariate_names)
        assert np.array_equal(again.y, small_trial.y)
        assert np.array_equal(again.individual_covariates, small_trial.individual_covariates)

    def test_effect_target_coerce(self):
        assert EffectTarget.coerce("individual").level is Level.INDIVIDUAL
        assert EffectTarget.coerce(("cluster", "difference")).scale.value == "difference"
