import io
import json
import random

import numpy as np
import pytest

from crtmethods import cli
from crtmethods.data import TrialData
from crtmethods.estimators import REGISTRY, ClusterTMLE, GEE, make_estimator
from crtmethods.harness import (ConfigError, CsvFormatError, MetricsRow, RunConfig, analyze_csv,
                                compute_metrics, emit_tables, read_trial_csv, run_replicate,
                                run_replicates, write_trial_csv)
from crtmethods.simulate import ScenarioSpec, generate

from conftest import random_trial
from test_classical import synthetic_real_data

SMALL = dict(scenario="sim2", reps=6, seed=3, n_clusters=10, truth_population=1000,
             estimators=[{"estimator": "unadj"},
                         {"estimator": "c-tmle", "outcome_candidates": ["W1", "W2"]},
                         {"estimator": "gee", "covariates": ["W1"]}],
             targets="both")


@pytest.fixture(scope="module")
def small_run():
    return run_replicates(RunConfig(**SMALL))


class TestCsv:
    def test_round_trip_bit_identical(self, tmp_path):
        trial, _ = generate(ScenarioSpec("sim1", seed=4), 0)
        path = tmp_path / "t.csv"
        write_trial_csv(trial, path)
        back = read_trial_csv(path)
        assert back.cluster_covariate_names == trial.cluster_covariate_names
        assert back.individual_covariate_names == trial.individual_covariate_names
        np.testing.assert_array_equal(back.y, trial.y)
        np.testing.assert_array_equal(back.individual_covariates, trial.individual_covariates)
        np.testing.assert_array_equal(back.cluster_covariates, trial.cluster_covariates)
        est = {"estimator": "h-tmle", "outcome_candidates": ["W1", "W2", "W3", "W4"],
               "propensity_candidates": ["W1", "W2", "W3", "W4"]}
        a = make_estimator(est).fit(trial)
        b = make_estimator(est).fit(back)
        assert a.estimate_ == b.estimate_ and a.se_ == b.se_

    def test_paired_round_trip(self, tmp_path, rng):
        trial = random_trial(rng, paired=True)
        path = tmp_path / "p.csv"
        write_trial_csv(trial, path)
        back = read_trial_csv(path)
        np.testing.assert_array_equal(back.pair_ids, trial.pair_ids)

    def _write(self, tmp_path, text):
        p = tmp_path / "bad.csv"
        p.write_text(text)
        return p

    def test_cluster_in_both_arms(self, tmp_path):
        p = self._write(tmp_path, "cluster_id,pair_id,arm,y\n1,,0,1\n1,,1,0\n2,,1,0\n")
        with pytest.raises(CsvFormatError) as err:
            read_trial_csv(p)
        assert err.value.line == 3

    def test_varying_cluster_covariate(self, tmp_path):
        p = self._write(tmp_path, "cluster_id,pair_id,arm,y,E1\n1,,0,1,0.5\n1,,0,0,0.7\n"
                                  "2,,1,0,0.1\n")
        with pytest.raises(CsvFormatError):
            read_trial_csv(p, cluster_covariates=["E1"])

    def test_bad_number_has_line(self, tmp_path):
        p = self._write(tmp_path, "cluster_id,pair_id,arm,y\n1,,0,1\n2,,1,abc\n")
        with pytest.raises(CsvFormatError) as err:
            read_trial_csv(p)
        assert err.value.line == 3 and "y" in str(err.value)

    def test_missing_column(self, tmp_path):
        p = self._write(tmp_path, "cluster_id,arm,y\n1,0,1\n2,1,0\n")
        with pytest.raises(CsvFormatError):
            read_trial_csv(p)

    def test_analyze_synthetic_real_data(self, tmp_path):
        path = tmp_path / "r.csv"
        write_trial_csv(synthetic_real_data(), path)
        ind = analyze_csv(path, {"estimator": "unadj"}, "individual")
        clu = analyze_csv(path, {"estimator": "unadj"}, "cluster")
        assert round(ind["estimate"], 2) == 0.66
        assert round(clu["estimate"], 2) == 0.81


class TestTables:
    def _row(self, **kw):
        base = dict(label="X", level="cluster", n=10, n_fail=0, pt=0.8, bias=0.01, sigma=0.2,
                    sigma_hat=0.21, covg=0.95, power=0.5, truth=0.79)
        base.update(kw)
        return MetricsRow(**base)

    @pytest.mark.parametrize("fmt", ["plain", "csv"])
    def test_empty_is_header_only(self, fmt):
        out = emit_tables([], fmt)
        assert len(out.strip().splitlines()) == 1

    def test_empty_json(self):
        assert json.loads(emit_tables([], "json")) == []

    @pytest.mark.parametrize("fmt", ["plain", "csv"])
    def test_one_row_one_line(self, fmt):
        assert len(emit_tables([self._row()], fmt).strip().splitlines()) == 2

    def test_plain_headers_and_rounding(self):
        out = emit_tables([self._row(pt=0.8123)], "plain")
        header = out.splitlines()[0].split()
        i = header.index("pt")
        assert header[i:i + 6] == ["pt", "bias", "σ", "σ̂", "covg", "power"]
        assert "0.81" in out and "0.8123" not in out
        assert "Type-I" in emit_tables([self._row()], "plain", null=True)

    def test_csv_full_precision(self):
        out = emit_tables([self._row(pt=0.8123456789)], "csv")
        assert "0.8123456789" in out


class TestRuns:
    def test_single_replicate_deterministic(self):
        cfg = RunConfig(**SMALL)
        assert run_replicate(cfg, 2) == run_replicate(cfg, 2)

    def test_workers_do_not_change_results(self, small_run):
        other = run_replicates(RunConfig(**SMALL), workers=2)
        assert other.records == small_run.records
        assert other.metrics == small_run.metrics

    def test_replicate_order_independent(self, small_run):
        recs = list(small_run.records)
        random.Random(1).shuffle(recs)
        assert compute_metrics(recs, small_run.truth) == small_run.metrics

    def test_rows_cover_estimators_and_targets(self, small_run):
        keys = {(m.label, m.level) for m in small_run.metrics}
        assert keys == {("Unadj", "cluster"), ("Unadj", "individual"), ("C-TMLE", "cluster"),
                        ("C-TMLE", "individual"), ("GEE", "individual")}

    def test_metrics_match_one_liners(self, small_run):
        for m in small_run.metrics:
            recs = [r for r in small_run.records if (r["label"], r["level"]) == (m.label, m.level)
                    and r["error"] is None]
            assert m.covg == np.mean([r["ci_lower"] <= m.truth <= r["ci_upper"] for r in recs])
            assert m.power == np.mean([r["p_value"] < 0.05 for r in recs])
            assert m.pt == np.mean([r["estimate"] for r in recs])
            assert 0 <= m.covg <= 1 and 0 <= m.power <= 1

    def test_truth_mapping(self, small_run):
        t = small_run.truth
        rows = {(m.label, m.level): m.truth for m in small_run.metrics}
        assert rows[("C-TMLE", "cluster")] == t.cluster_ratio
        assert rows[("C-TMLE", "individual")] == t.individual_ratio
        assert rows[("GEE", "individual")] == t.individual_ratio

    def test_failures_are_recorded(self):
        cfg = RunConfig(scenario="sim2", reps=2, n_clusters=4, truth_population=1000,
                        estimators=[{"estimator": "gee", "covariates": ["W1", "W2"]}])
        res = run_replicates(cfg)
        assert all(r["error"] for r in res.records)
        assert res.metrics[0].n_fail == 2 and res.metrics[0].n == 0

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            RunConfig(reps=0)
        with pytest.raises(ConfigError):
            RunConfig(estimators=[{"estimator": "unadj"}, {"estimator": "unadj"}])
        with pytest.raises(ConfigError):
            RunConfig(estimators=[{"estimator": "nope"}])
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"bogus": 1})

    def test_config_json_round_trip(self, tmp_path):
        cfg = RunConfig(**SMALL)
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert RunConfig.from_json(path) == cfg
        assert RunConfig.from_json(path, reps=2).reps == 2


class TestEstimatorApi:
    def test_registry_params_round_trip(self):
        from sklearn.base import clone
        for name, cls in REGISTRY.items():
            est = cls()
            assert clone(est).get_params() == est.get_params()

    def test_fit_attributes(self, small_trial):
        est = ClusterTMLE(outcome_candidates=["W1", "E1"]).fit(small_trial)
        lo, hi = est.ci_
        assert lo < est.estimate_ < hi and 0 <= est.p_value_ <= 1
        assert est.summary()["estimate"] == est.estimate_

    def test_rejects_non_trial(self):
        with pytest.raises(TypeError):
            GEE().fit(np.zeros((3, 3)))

    def test_unknown_parameter(self):
        with pytest.raises(ValueError):
            make_estimator({"estimator": "gee", "bogus": 1})


class TestCli:
    def run(self, *argv):
        out = io.StringIO()
        return cli.main(list(argv), out), out.getvalue()

    def test_truth(self):
        code, out = self.run("truth", "--scenario", "sim2", "--pop", "1000")
        assert code == 0 and "cluster_ratio" in json.loads(out)

    def test_export_and_analyze(self, tmp_path):
        path = str(tmp_path / "e.csv")
        assert self.run("export", "--scenario", "sim1", "--out", path)[0] == 0
        code, out = self.run("analyze", "--input", path, "--estimator", "c-tmle",
                             "--outcome", "W1,W2")
        assert code == 0
        assert json.loads(out[:out.rindex("}") + 1])["estimator"] == "C-TMLE"

    def test_simulate(self, tmp_path):
        out_json = tmp_path / "run.json"
        code, out = self.run("simulate", "--scenario", "sim2", "--reps", "2",
                             "--estimators", "unadj,c-tmle", "--target", "both",
                             "--n-clusters", "10", "--format", "csv", "--out", str(out_json))
        assert code == 0 and len(out.strip().splitlines()) == 5
        assert len(json.loads(out_json.read_text())["records"]) == 8

    def test_config_errors_exit_1(self, tmp_path):
        assert self.run("simulate", "--reps", "0")[0] == 1
        assert self.run("bogus")[0] == 1
        assert self.run("simulate", "--estimators", "nope", "--reps", "1")[0] == 1
        assert self.run("analyze", "--input", "x.csv", "--estimator", "nope")[0] == 1
        assert self.run("simulate", "--config", str(tmp_path / "absent.json"))[0] == 1

    def test_data_errors_exit_2(self, tmp_path):
        assert self.run("analyze", "--input", str(tmp_path / "absent.csv"))[0] == 2
        bad = tmp_path / "bad.csv"
        bad.write_text("cluster_id,pair_id,arm,y\n1,,0,1\n1,,1,0\n2,,1,0\n")
        assert self.run("analyze", "--input", str(bad), "--estimator", "unadj")[0] == 2
        zero = tmp_path / "zero.csv"
        write_trial_csv(TrialData(arm=[0, 1, 0, 1], sizes=[3] * 4,
                                  y=[0, 0, 0, 1, 0, 1, 0, 0, 0, 1, 1, 0]), zero)
        assert self.run("analyze", "--input", str(zero), "--estimator", "care")[0] == 2
