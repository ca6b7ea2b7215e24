"""Command-line interface: ``truth``, ``simulate``, ``analyze`` and ``export``.

Exit codes: 0 on success, 1 for configuration or usage errors, 2 for data
errors (unreadable or invalid trial files, estimators the data cannot
support).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

from .classical import EstimationError
from .data import TrialDataError
from .glm import GlmError
from .harness import (ConfigError, RunConfig, analyze_csv, emit_tables, format_result_row,
                      run_replicates, write_trial_csv)
from .inference import InferenceError
from .simulate import SCENARIOS, ScenarioSpec, compute_truth, generate
from .tmle import TMLEError

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _names(text: str | None) -> list[str] | None:
    if text is None:
        return None
    return [n.strip() for n in text.split(",") if n.strip()]


def _yes_no(text: str) -> bool:
    if text.lower() in ("yes", "y", "true", "1"):
        return True
    if text.lower() in ("no", "n", "false", "0"):
        return False
    raise argparse.ArgumentTypeError("expected yes or no")


def _add_scenario(p, seed_default=0):
    p.add_argument("--scenario", choices=SCENARIOS, default=None)
    p.add_argument("--seed", type=int, default=None if seed_default is None else seed_default)
    p.add_argument("--n-clusters", type=int, default=None)
    p.add_argument("--size-mean", type=float, default=None)
    p.add_argument("--size-sd", type=float, default=None)
    p.add_argument("--size-floor", type=int, default=None)
    p.add_argument("--null", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crtmethods", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("truth", help="true effects from a large counterfactual population")
    _add_scenario(p)
    p.add_argument("--pop", type=int, default=None, help="number of clusters in the population")

    p = sub.add_parser("simulate", help="run replicates and print the performance table")
    _add_scenario(p, seed_default=None)
    p.add_argument("--config", help="JSON run configuration; flags override its keys")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--estimators", default=None,
                   help="comma-separated estimator names (scenario defaults if omitted)")
    p.add_argument("--target", choices=("cluster", "individual", "both"), default=None)
    p.add_argument("--matched", type=_yes_no, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--format", choices=("plain", "csv", "json"), default="plain")
    p.add_argument("--out", default=None, help="write config, truth, metrics and records as JSON")

    p = sub.add_parser("analyze", help="analyze a trial CSV file")
    p.add_argument("--input", required=True)
    p.add_argument("--estimator", default="c-tmle")
    p.add_argument("--target", choices=("cluster", "individual"), default="cluster")
    p.add_argument("--scale", choices=("ratio", "difference"), default=None)
    p.add_argument("--matched", type=_yes_no, default=False)
    p.add_argument("--outcome", default=None,
                   help="comma-separated outcome-regression candidates (use + to join sets)")
    p.add_argument("--propensity", default=None, help="propensity candidates, as --outcome")
    p.add_argument("--fixed", action="store_true", help="use the first candidates without selection")
    p.add_argument("--covariates", default=None, help="adjustment covariates for CARE/GEE/A-GEE")
    p.add_argument("--cluster-covariates", default=None,
                   help="columns that are constant within clusters (auto-detected if omitted)")
    p.add_argument("--link", default=None, help="GEE link: log, logit or identity")
    p.add_argument("--correlation", default=None, help="GEE working correlation")

    p = sub.add_parser("export", help="write one simulated trial as CSV")
    _add_scenario(p)
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _spec(args) -> ScenarioSpec:
    kwargs = dict(scenario=args.scenario or "sim1", seed=args.seed or 0, null=bool(args.null))
    if args.n_clusters is not None:
        kwargs["n_clusters"] = args.n_clusters
    for key in ("size_mean", "size_sd", "size_floor"):
        if getattr(args, key) is not None:
            kwargs[key] = getattr(args, key)
    try:
        return ScenarioSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _cmd_truth(args, out):
    spec = _spec(args)
    try:
        truth = compute_truth(spec, args.pop)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    d = asdict(truth)
    d.update(cluster_ratio=truth.cluster_ratio, individual_ratio=truth.individual_ratio,
             cluster_difference=truth.cluster_difference,
             individual_difference=truth.individual_difference)
    print(json.dumps({"scenario": spec.scenario, "seed": spec.seed, **d}, indent=2), file=out)


def _cmd_simulate(args, out):
    overrides = {
        "scenario": args.scenario, "seed": args.seed, "n_clusters": args.n_clusters,
        "size_mean": args.size_mean, "size_sd": args.size_sd, "size_floor": args.size_floor,
        "null": args.null, "reps": args.reps, "targets": args.target, "matched": args.matched,
        "workers": args.workers, "out": args.out,
    }
    if args.estimators is not None:
        overrides["estimators"] = [{"estimator": n} for n in _names(args.estimators)]
    if args.config:
        config = RunConfig.from_json(args.config, **overrides)
    else:
        config = RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    result = run_replicates(config)
    out.write(emit_tables(result.metrics, args.format, null=config.null))
    if config.out:
        with open(config.out, "w") as fh:
            json.dump(result.to_dict(), fh, indent=1, default=float)


def _cmd_analyze(args, out):
    est = {"estimator": args.estimator}
    if args.outcome is not None:
        est["outcome_candidates"] = _names(args.outcome)
    if args.propensity is not None:
        est["propensity_candidates"] = _names(args.propensity)
    if args.fixed:
        est["adaptive"] = False
    if args.covariates is not None:
        est["covariates"] = _names(args.covariates)
    if args.scale is not None:
        est["scale"] = args.scale
    if args.link is not None:
        est["link"] = args.link
    if args.correlation is not None:
        est["correlation"] = args.correlation
    try:
        from .estimators import make_estimator
        make_estimator(est)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    result = analyze_csv(args.input, est, args.target, args.matched,
                         _names(args.cluster_covariates))
    print(json.dumps(result, indent=2), file=out)
    print(format_result_row(result), file=out)


def _cmd_export(args, out):
    trial, _ = generate(_spec(args), args.replicate)
    write_trial_csv(trial, args.out)
    print(f"wrote {trial.n_total} rows ({trial.n_clusters} clusters) to {args.out}", file=out)


_COMMANDS = {"truth": _cmd_truth, "simulate": _cmd_simulate, "analyze": _cmd_analyze,
             "export": _cmd_export}


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
        _COMMANDS[args.command](args, out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrialDataError, EstimationError, InferenceError, GlmError, TMLEError, OSError,
            KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
