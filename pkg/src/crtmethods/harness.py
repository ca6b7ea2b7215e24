"""Replicate orchestration, metrics, CSV trial files and table output."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from sklearn.base import clone

from .data import Level, TrialData, TrialDataError
from .estimators import DEFAULT_LABELS, REGISTRY, make_estimator
from .simulate import ScenarioSpec, ScenarioTruth, compute_truth, generate


class ConfigError(ValueError):
    """Invalid run configuration or command-line options."""


class CsvFormatError(TrialDataError):
    """A trial CSV file violates the schema; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


SIM1_ADJUST = ("W1", "W2", "W3", "W4", "E1", "E2")


def default_estimators(scenario: str) -> list[dict]:
    """Estimator set used for each scenario's summary table."""
    if scenario == "sim1":
        w = ["W1", "W2", "W3", "W4"]
        return [
            {"estimator": "unadj"},
            {"estimator": "c-tmle", "outcome_candidates": w, "propensity_candidates": w},
            {"estimator": "h-tmle", "outcome_candidates": w, "propensity_candidates": w},
            {"estimator": "t-test"},
            {"estimator": "care", "covariates": list(SIM1_ADJUST)},
            {"estimator": "gee", "covariates": list(SIM1_ADJUST)},
            {"estimator": "aug-gee", "covariates": list(SIM1_ADJUST)},
        ]
    w = ["W1", "W2"]
    return [
        {"estimator": "c-tmle", "outcome_candidates": ["W1"], "adaptive": False},
        {"estimator": "c-tmle", "outcome_candidates": w, "propensity_candidates": w,
         "label": "C-TMLE-AP"},
        {"estimator": "h-tmle", "outcome_candidates": ["W1"], "adaptive": False},
        {"estimator": "h-tmle", "outcome_candidates": w, "propensity_candidates": w,
         "label": "H-TMLE-AP"},
    ]


def truth_key(estimator: str, level: str, scale: str) -> str:
    """Name of the :class:`ScenarioTruth` attribute an estimator targets."""
    if estimator in ("t-test", "care"):
        return "geometric_ratio"
    if estimator in ("gee", "aug-gee"):
        level = "individual"
    return f"{level}_{'ratio' if scale == 'ratio' else 'difference'}"


@dataclass
class RunConfig:
    """Everything that determines a simulation run.

    Serialized as a flat JSON object; ``estimators`` is a list of
    ``{"estimator": name, **params}`` objects.
    """

    scenario: str = "sim1"
    n_clusters: int = 20
    size_mean: float | None = None
    size_sd: float | None = None
    size_floor: int | None = None
    null: bool = False
    seed: int = 0
    reps: int = 500
    targets: tuple = ("cluster",)
    matched: bool = False
    estimators: list = field(default_factory=list)
    out: str | None = None
    workers: int = 1
    truth_population: int | None = None

    def __post_init__(self):
        if isinstance(self.targets, str):
            self.targets = ("cluster", "individual") if self.targets == "both" else (self.targets,)
        self.targets = tuple(self.targets)
        try:
            for t in self.targets:
                Level(t)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if not self.estimators:
            self.estimators = default_estimators(self.scenario)
        try:
            self.scenario_spec()
            built = [make_estimator(e) for e in self.estimators]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        labels = [b.label for b in built]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"estimator labels must be unique, got {labels}")

    def scenario_spec(self) -> ScenarioSpec:
        return ScenarioSpec(self.scenario, self.n_clusters, self.size_mean, self.size_sd,
                            self.size_floor, self.null, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(data) - known)
        if bad:
            raise ConfigError(f"unknown config keys: {bad}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)


# -- replicates ----------------------------------------------------------------

def _expand(config: RunConfig) -> list[tuple[str, Any]]:
    """(estimator name, configured estimator) for every estimator x target."""
    jobs = []
    for spec in config.estimators:
        est = make_estimator(spec)
        name = spec["estimator"]
        params = est.get_params()
        if "matched" in params:
            est.set_params(matched=bool(config.matched or params["matched"]))
        if type(est).targetable:
            for level in config.targets:
                jobs.append((name, clone(est).set_params(level=level)))
        else:
            jobs.append((name, est))
    return jobs


def _record(replicate: int, job: int, name: str, est, trial: TrialData) -> dict:
    params = est.get_params()
    rec = {"replicate": replicate, "job": job,
           "label": params.get("label") or DEFAULT_LABELS[name], "estimator": name}
    try:
        est.fit(trial)
        r = est.result_
        rec.update(level=r.target.level.value, scale=r.target.scale.value,
                   estimate=r.estimate, se=r.se, df=r.df, ci_lower=r.ci[0], ci_upper=r.ci[1],
                   p_value=r.p_value, selected_outcome="+".join(r.selected[0]),
                   selected_propensity="+".join(r.selected[1]), error=None)
    except Exception as exc:  # failures are recorded, not fatal
        level = params.get("level", "individual" if name in ("gee", "aug-gee") else "cluster")
        rec.update(level=level, scale=params.get("scale", "ratio"), estimate=math.nan,
                   se=math.nan, df=0, ci_lower=math.nan, ci_upper=math.nan, p_value=math.nan,
                   selected_outcome="", selected_propensity="",
                   error=f"{type(exc).__name__}: {exc}")
    return rec


def run_replicate(config: RunConfig, replicate: int) -> list[dict]:
    """Generate replicate ``replicate`` (its own RNG stream) and run every estimator."""
    trial, _ = generate(config.scenario_spec(), replicate)
    return [_record(replicate, k, name, est, trial)
            for k, (name, est) in enumerate(_expand(config))]


def _run_chunk(args):
    config, reps = args
    return [run_replicate(config, r) for r in reps]


@dataclass
class MetricsRow:
    label: str
    level: str
    n: int
    n_fail: int
    pt: float
    bias: float
    sigma: float
    sigma_hat: float
    covg: float
    power: float
    truth: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    config: RunConfig
    truth: ScenarioTruth
    metrics: list
    records: list

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "truth": asdict(self.truth),
                "metrics": [m.to_dict() for m in self.metrics], "records": self.records}


def compute_metrics(records: Sequence[dict], truth: ScenarioTruth) -> list[MetricsRow]:
    """Aggregate per-replicate records into one row per (label, level).

    ``sigma`` is the sample standard deviation of the estimates and
    ``sigma_hat`` the mean standard error, both on the log scale for ratios;
    ``power`` is the share of replicates with ``p < 0.05``. Failed replicates
    are excluded and counted in ``n_fail``.
    """
    groups: dict[tuple[str, str], list[dict]] = {}
    # rows follow the configured estimator order, whatever the record order
    for rec in sorted(records, key=lambda r: (r["job"], r["replicate"])):
        groups.setdefault((rec["label"], rec["level"]), []).append(rec)
    rows = []
    for (label, level), recs in groups.items():
        ok = [r for r in recs if r["error"] is None]
        name = recs[0]["estimator"]
        scale = recs[0]["scale"]
        t = truth.value(truth_key(name, level, scale))
        if not ok:
            rows.append(MetricsRow(label, level, 0, len(recs), *([math.nan] * 6), t))
            continue
        est = np.array([r["estimate"] for r in ok])
        se = np.array([r["se"] for r in ok])
        lo = np.array([r["ci_lower"] for r in ok])
        hi = np.array([r["ci_upper"] for r in ok])
        p = np.array([r["p_value"] for r in ok])
        spread = np.log(est) if scale == "ratio" else est
        rows.append(MetricsRow(
            label=label, level=level, n=len(ok), n_fail=len(recs) - len(ok),
            pt=float(est.mean()), bias=float((est - t).mean()),
            sigma=float(spread.std(ddof=1)) if len(ok) > 1 else math.nan,
            sigma_hat=float(se.mean()), covg=float(((lo <= t) & (t <= hi)).mean()),
            power=float((p < 0.05).mean()), truth=t))
    return rows


def run_replicates(config: RunConfig, workers: int | None = None) -> RunResult:
    """Run all replicates and aggregate metrics.

    Replicate ``r`` always uses RNG stream ``r``, and results are reduced
    in replicate order, so the output does not depend on ``workers``.
    """
    workers = config.workers if workers is None else workers
    spec = config.scenario_spec()
    truth = compute_truth(spec, config.truth_population)
    reps = list(range(config.reps))
    if workers > 1:
        chunks = [reps[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_chunk, [(config, c) for c in chunks]))
        by_rep = {recs[0]["replicate"]: recs for part in parts for recs in part if recs}
        records = [rec for r in reps for rec in by_rep.get(r, [])]
    else:
        records = [rec for r in reps for rec in run_replicate(config, r)]
    return RunResult(config, truth, compute_metrics(records, truth), records)


# -- tables ----------------------------------------------------------------------

_COLUMNS = ("pt", "bias", "sigma", "sigma_hat", "covg", "power")
_PLAIN_HEADERS = {"pt": "pt", "bias": "bias", "sigma": "σ", "sigma_hat": "σ̂",
                  "covg": "covg", "power": "power"}


def emit_tables(rows: Iterable[MetricsRow], fmt: str = "plain", null: bool = False) -> str:
    """Serialize metric rows as an aligned text table, CSV or JSON.

    Columns follow the order pt, bias, σ, σ̂, covg, power. With ``null`` the
    rejection column is headed ``Type-I``. Plain output rounds to two
    decimals; CSV and JSON keep full precision.
    """
    rows = list(rows)
    power_name = "type_i" if null else "power"
    keys = ["label", "level", "n", "n_fail", *_COLUMNS[:-1], power_name]
    if fmt == "json":
        out = []
        for r in rows:
            d = r.to_dict()
            d[power_name] = d.pop("power")
            out.append({k: d[k] for k in keys})
        return json.dumps(out, indent=2)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            d = r.to_dict()
            w.writerow([d[k] if k != power_name else d["power"] for k in keys])
        return buf.getvalue()
    if fmt != "plain":
        raise ConfigError(f"unknown table format {fmt!r}")
    headers = ["", "level", *[_PLAIN_HEADERS[c] for c in _COLUMNS[:-1]],
               "Type-I" if null else "power"]
    body = [[r.label, r.level, *[f"{getattr(r, c):.2f}" for c in _COLUMNS]] for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(headers, *body)] if body else \
        [len(h) for h in headers]
    lines = ["  ".join(str(x).ljust(wd) if i < 2 else str(x).rjust(wd)
                       for i, (x, wd) in enumerate(zip(line, widths))).rstrip()
             for line in [headers, *body]]
    return "\n".join(lines) + "\n"


# -- CSV trial files ---------------------------------------------------------------

FIXED_COLUMNS = ("cluster_id", "pair_id", "arm", "y")


def write_trial_csv(trial: TrialData, path: str | Path | io.TextIOBase) -> None:
    """One row per individual: ``cluster_id, pair_id, arm, y, <covariates>``.

    Cluster covariates are repeated on each member's row. Values are written
    with ``repr`` so that reading the file back is exact.
    """
    header = list(FIXED_COLUMNS) + list(trial.cluster_covariate_names) + \
        list(trial.individual_covariate_names)
    own = not hasattr(path, "write")
    fh = open(path, "w", newline="") if own else path
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        idx = trial.cluster_index
        for i in range(trial.n_total):
            j = idx[i]
            pair = "" if trial.pair_ids is None else int(trial.pair_ids[j])
            row = [int(trial.cluster_ids[j]), pair, int(trial.arm[j]), repr(float(trial.y[i]))]
            row += [repr(float(v)) for v in trial.cluster_covariates[j]]
            row += [repr(float(v)) for v in trial.individual_covariates[i]]
            w.writerow(row)
    finally:
        if own:
            fh.close()


def _number(text: str, line: int, column: str, integer: bool = False):
    try:
        value = float(text)
    except ValueError:
        raise CsvFormatError(f"column {column!r}: {text!r} is not a number", line) from None
    if not math.isfinite(value):
        raise CsvFormatError(f"column {column!r}: value must be finite", line)
    if integer:
        if value != int(value):
            raise CsvFormatError(f"column {column!r}: {text!r} is not an integer", line)
        return int(value)
    return value


def read_trial_csv(path: str | Path | io.TextIOBase,
                   cluster_covariates: Sequence[str] | None = None) -> TrialData:
    """Parse and validate a trial CSV file.

    ``cluster_covariates`` names the columns that describe clusters; they
    must be constant within each cluster. When omitted, every covariate
    column that is constant within all clusters is treated as a cluster
    covariate. Clusters keep their order of first appearance and rows need
    not be contiguous.
    """
    own = not hasattr(path, "read")
    fh = open(path, newline="") if own else path
    try:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError("file is empty", 1) from None
        missing = [c for c in FIXED_COLUMNS if c not in header]
        if missing:
            raise CsvFormatError(f"missing required columns {missing}", 1)
        if len(set(header)) != len(header):
            raise CsvFormatError("duplicate column names", 1)
        cov_names = [h for h in header if h not in FIXED_COLUMNS]
        pos = {h: k for k, h in enumerate(header)}
        order: list[int] = []
        members: dict[int, list] = {}
        info: dict[int, tuple] = {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"expected {len(header)} fields, found {len(row)}", line)
            cid = _number(row[pos["cluster_id"]], line, "cluster_id", integer=True)
            arm = _number(row[pos["arm"]], line, "arm", integer=True)
            if arm not in (0, 1):
                raise CsvFormatError(f"arm must be 0 or 1, got {arm}", line)
            ptxt = row[pos["pair_id"]].strip()
            pair = None if ptxt == "" else _number(ptxt, line, "pair_id", integer=True)
            y = _number(row[pos["y"]], line, "y")
            covs = [_number(row[pos[c]], line, c) for c in cov_names]
            if cid not in info:
                info[cid] = (arm, pair, line)
                order.append(cid)
                members[cid] = []
            else:
                arm0, pair0, first = info[cid]
                if arm != arm0:
                    raise CsvFormatError(
                        f"cluster {cid} appears in both arms (first seen on line {first})", line)
                if pair != pair0:
                    raise CsvFormatError(f"cluster {cid} has inconsistent pair_id", line)
            members[cid].append((line, y, covs))
    finally:
        if own:
            fh.close()
    if not order:
        raise CsvFormatError("no data rows", 2)
    pairs = [info[c][1] for c in order]
    if any(p is None for p in pairs) and not all(p is None for p in pairs):
        raise CsvFormatError("pair_id must be given for every cluster or for none")

    def constant(k):
        return all(len({m[2][k] for m in members[c]}) == 1 for c in order)

    if cluster_covariates is None:
        e_idx = [k for k in range(len(cov_names)) if constant(k)]
    else:
        unknown = [c for c in cluster_covariates if c not in cov_names]
        if unknown:
            raise CsvFormatError(f"unknown cluster covariate columns {unknown}", 1)
        e_idx = [cov_names.index(c) for c in cluster_covariates]
        for k in e_idx:
            for c in order:
                vals = {m[2][k] for m in members[c]}
                if len(vals) > 1:
                    bad = next(m[0] for m in members[c] if m[2][k] != members[c][0][2][k])
                    raise CsvFormatError(
                        f"cluster covariate {cov_names[k]!r} varies within cluster {c}", bad)
    w_idx = [k for k in range(len(cov_names)) if k not in e_idx]
    rows = [m for c in order for m in members[c]]
    return TrialData(
        arm=np.array([info[c][0] for c in order]),
        sizes=np.array([len(members[c]) for c in order]),
        y=np.array([m[1] for m in rows]),
        cluster_covariates=np.array([[members[c][0][2][k] for k in e_idx] for c in order]),
        individual_covariates=np.array([[m[2][k] for k in w_idx] for m in rows]),
        cluster_covariate_names=tuple(cov_names[k] for k in e_idx),
        individual_covariate_names=tuple(cov_names[k] for k in w_idx),
        cluster_ids=np.array(order),
        pair_ids=None if pairs[0] is None else np.array(pairs),
    )


def analyze_csv(path, estimator: dict, target: str = "cluster", matched: bool = False,
                cluster_covariates: Sequence[str] | None = None) -> dict:
    """Read a trial file, run one estimator and return the serialized result."""
    trial = read_trial_csv(path, cluster_covariates)
    est = make_estimator(estimator)
    params = est.get_params()
    if "level" in params:
        est.set_params(level=target)
    if "matched" in params:
        est.set_params(matched=matched)
    if matched and not trial.is_matched:
        raise TrialDataError("matched analysis requested but the file has no pair ids")
    est.fit(trial)
    return est.summary()


def format_result_row(result: dict) -> str:
    sel = "/".join("+".join(s) or "-" for s in (result["selected_outcome"],
                                                 result["selected_propensity"]))
    return (f"{result['estimator']} [{result['level']} {result['scale']}] "
            f"estimate={result['estimate']:.4f} se={result['se']:.4f} "
            f"95% CI=({result['ci_lower']:.4f}, {result['ci_upper']:.4f}) "
            f"p={result['p_value']:.4g} df={result['df']} adjustment={sel}")


__all__ = [
    "ConfigError", "CsvFormatError", "RunConfig", "RunResult", "MetricsRow", "REGISTRY",
    "default_estimators", "run_replicates", "run_replicate", "compute_metrics", "emit_tables",
    "read_trial_csv", "write_trial_csv", "analyze_csv", "format_result_row", "truth_key",
]
