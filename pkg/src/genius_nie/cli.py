"""Command-line entry point: ``genius-nie {estimate,simulate,het-test,rr-nie}``.

Exit codes: 0 success, 1 estimation failure (separation, too many failed
resamples), 2 invalid input or configuration, 3 weak identification (the
report is still written, with ``weak_id`` set).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import yaml

from . import __version__
from .cli_io import (
    ColumnSpec,
    EstimateReport,
    dumps_json,
    het_dict,
    invocation,
    load_csv,
    load_rr_table,
    load_study_config,
    replicates_to_csv,
    report_to_csv,
    report_to_json,
)
from .errors import MediationError, ValidationError, WeakIdentification
from .genius import het_variance_test, nie_genius, nie_interaction
from .mediation_formula import nie_naive, nie_oracle, rr_nie_plugin
from .simulation import DAGS, METHODS, StudyConfig, run_study

log = logging.getLogger("genius_nie")

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_WEAK = 0, 1, 2, 3


def _csv_list(text):
    return tuple(x.strip() for x in text.split(",") if x.strip()) if text else ()


def _add_columns(p):
    p.add_argument("--input", "-i", required=True, help="CSV file with a header row")
    p.add_argument("--outcome", "-y", default="y")
    p.add_argument("--mediator", "-m", default="m")
    p.add_argument("--exposure", "-a", default="a")
    p.add_argument("--covariates", "-c", default="", help="comma-separated covariate columns")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genius-nie", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimate the natural indirect effect")
    _add_columns(p)
    p.add_argument("--latent-u")
    p.add_argument("--latent-w")
    p.add_argument("--true-m")
    p.add_argument("--method", choices=["naive", "genius", "genius-interaction", "oracle"], default="genius")
    p.add_argument("--a", type=float, default=1.0, dest="a_level")
    p.add_argument("--a-star", type=float, default=0.0)
    p.add_argument("--bootstrap", type=int, default=0, metavar="B", help="bootstrap resamples (0 = off)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--boot-ci", choices=["percentile", "normal"], default="percentile")
    p.add_argument("--robust", choices=["HC0", "HC1"], default="HC0")
    p.add_argument("--first-stage-interaction", action="store_true",
                   help="include exposure x covariate terms in the mediator first stage")
    p.add_argument("--se-method", choices=["stacked", "plugin"], default="stacked")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--output", "-o", help="write the report here instead of stdout")

    p = sub.add_parser("simulate", help="run the Monte Carlo study")
    p.add_argument("--config", help="JSON or YAML file with StudyConfig fields")
    p.add_argument("--dags", help=f"comma-separated subset of {','.join(DAGS)}")
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--n", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--bootstrap", type=int, metavar="B")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-offset", type=float)
    p.add_argument("--variance-param", action="store_true",
                   help="read the mediator noise scale as a variance instead of an sd")
    p.add_argument("--workers", type=int)
    p.add_argument("--output", "-o", required=True, help="report path (.csv or .json)")
    p.add_argument("--json", help="also write the JSON report here")
    p.add_argument("--dump", help="write per-replicate estimates (CSV) here")

    p = sub.add_parser("het-test", help="test exposure-driven heteroskedasticity of the mediator")
    _add_columns(p)
    p.add_argument("--format", choices=["text", "json"], default="text")

    p = sub.add_parser("rr-nie", help="plug-in risk-ratio NIE from a long-format count table")
    p.add_argument("--input", "-i", required=True, help="CSV with columns y,m,a,c,count")
    p.add_argument("--a", required=True, dest="a_level")
    p.add_argument("--a-star", required=True)
    p.add_argument("--c", required=True, dest="c_level")
    return parser


def _emit(text, path):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _spec(args, latent=False):
    kw = {}
    if latent:
        kw = dict(latent_u=args.latent_u, latent_w=args.latent_w, true_m=args.true_m)
    return ColumnSpec(args.outcome, args.mediator, args.exposure, _csv_list(args.covariates), **kw)


def cmd_estimate(args, argv) -> int:
    data, dropped = load_csv(args.input, _spec(args, latent=True))
    if dropped:
        log.warning("dropped %d incomplete rows", dropped)
    inference = "both" if args.bootstrap else "delta"
    common = dict(inference=inference, B=args.bootstrap, seed=args.seed,
                  robust=args.robust, boot_ci=args.boot_ci)
    inv = invocation(argv)
    code = EXIT_OK
    try:
        if args.method == "genius":
            est = nie_genius(data, args.a_level, args.a_star,
                             interaction_first_stage=args.first_stage_interaction,
                             se_method=args.se_method, **common)
        elif args.method == "genius-interaction":
            est = nie_interaction(data, args.a_level, args.a_star, se_method=args.se_method, **common)
        elif args.method == "naive":
            est = nie_naive(data, args.a_level, args.a_star, **common)
        else:
            est = nie_oracle(data, args.a_level, args.a_star, **common)
        report = EstimateReport.from_estimate(est, dropped, inv)
    except WeakIdentification as exc:
        fit = exc.fit
        report = EstimateReport(
            method=args.method.replace("-", "_"), contrast=(args.a_level, args.a_star),
            nie=math.nan, theta_m=math.nan, beta_a=math.nan, se_delta=math.nan,
            ci_delta=(math.nan, math.nan), n=data.n, n_dropped=dropped, weak_id=True,
            het_test=het_dict(fit.het_test) if fit is not None and fit.het_test else None,
            warnings=[str(exc)], invocation=inv,
        )
        code = EXIT_WEAK
    if dropped:
        report.warnings.append(f"{dropped} incomplete rows dropped")
    _emit(report.to_json() if args.format == "json" else report.to_csv(), args.output)
    return code


def cmd_simulate(args, argv) -> int:
    overrides = dict(
        dags=_csv_list(args.dags) or None,
        methods=_csv_list(args.methods) or None,
        n=args.n,
        replications=args.replications,
        bootstrap_B=args.bootstrap,
        seed=args.seed,
        noise_offset=args.noise_offset,
        sd_is_second_param=False if args.variance_param else None,
        workers=args.workers,
    )
    if args.config:
        cfg = load_study_config(args.config, **overrides)
    else:
        cfg = StudyConfig(**{k: v for k, v in overrides.items() if v is not None})
    inv = invocation(argv)
    report = run_study(cfg)
    out = Path(args.output)
    out.write_text(report_to_json(report, inv) if out.suffix.lower() == ".json" else report_to_csv(report, inv))
    if args.json:
        Path(args.json).write_text(report_to_json(report, inv))
    if args.dump:
        Path(args.dump).write_text(replicates_to_csv(report))
    return EXIT_OK


def cmd_het_test(args, argv) -> int:
    data, dropped = load_csv(args.input, _spec(args))
    res = het_variance_test(data)
    if args.format == "json":
        sys.stdout.write(dumps_json({**het_dict(res), "n_dropped": dropped, "invocation": invocation(argv)}))
        return EXIT_OK
    print(f"statistic  {res.statistic!r}")
    print(f"df         {res.df}")
    print(f"p_value    {res.p_value!r}")
    for lvl, var in res.variance_by_level.items():
        print(f"var(M | A={lvl:g})  {var!r}")
    if res.small_sample:
        print("note: n < 10, the chi-square reference distribution is unreliable")
    return EXIT_OK


def _label(tok):
    try:
        return int(tok)
    except ValueError:
        return tok


def cmd_rr_nie(args, argv) -> int:
    table = load_rr_table(args.input)
    res = rr_nie_plugin(table, _label(args.a_level), _label(args.a_star), _label(args.c_level))
    sys.stdout.write(dumps_json({
        "rr": res.rr, "numerator": res.numerator, "denominator": res.denominator,
        "contrast": list(res.contrast), "c": res.c, "invocation": invocation(argv),
    }))
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate,
            "het-test": cmd_het_test, "rr-nie": cmd_rr_nie}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except (ValidationError, OSError, json.JSONDecodeError, yaml.YAMLError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except WeakIdentification as exc:
        print(f"error: WeakIdentification: {exc}", file=sys.stderr)
        return EXIT_WEAK
    except MediationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
