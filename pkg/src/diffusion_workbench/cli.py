"""Command-line entry point: ``diffusion-workbench <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .analyze import cluster_countries, forecast
from .calibrate import FitConfig
from .model import FORMS, DiffusionModel, DiffusionParams, ShockTerm
from .pipeline import (
    EXIT_OK,
    EXIT_PARTIAL,
    EXIT_PRE_RUN,
    PreRunError,
    RunManifest,
    dump_json,
    model_from_dict,
    process_country,
    run_pipeline,
)
from .series import ingest_series_partial, read_targets, write_series
from .synthgen import SynthSpec, generate


def _forms(text: str) -> tuple[str, ...]:
    forms = tuple(f.strip().upper() for f in text.split(",") if f.strip())
    bad = [f for f in forms if f not in FORMS]
    if bad or not forms:
        raise argparse.ArgumentTypeError(f"forms must be a comma list drawn from {','.join(FORMS)}")
    return forms


def _shock(text: str) -> ShockTerm:
    """Parse ``F3:A=17.99,a=16.41,c=0.97``."""
    try:
        form, rest = text.split(":", 1)
        kv = dict(item.split("=", 1) for item in rest.split(","))
        kv = {k.strip(): float(v) for k, v in kv.items()}
        return ShockTerm(form.strip().upper(), kv["A"], kv["a"], b=kv.get("b"), c=kv.get("c"))
    except (ValueError, KeyError) as exc:
        raise argparse.ArgumentTypeError(f"bad shock {text!r}: {exc}") from None


def _config(args) -> FitConfig:
    kw = {
        "smpcc_threshold": args.threshold,
        "max_shocks": args.max_shocks,
        "candidate_forms": args.forms,
        "rng_seed": args.seed,
    }
    if getattr(args, "estimate_m", False):
        kw["m_mode"] = "estimated"
    return FitConfig(**kw)


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threshold", type=float, default=0.5, help="SMPCC acceptance threshold")
    p.add_argument("--max-shocks", type=int, default=3)
    p.add_argument("--forms", type=_forms, default=FORMS, help="candidate shock forms, e.g. F2,F3")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffusion-workbench", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check series (and targets) files only")
    p.add_argument("--series", required=True)
    p.add_argument("--targets")

    p = sub.add_parser("fit", help="stepwise fit of one country")
    p.add_argument("--series", required=True)
    p.add_argument("--country", required=True)
    p.add_argument("--targets")
    p.add_argument("--scenario", choices=("minimum", "long"), default="minimum")
    p.add_argument("--m", type=float, help="market potential (overrides the targets file)")
    p.add_argument("--estimate-m", action="store_true", help="estimate m instead of fixing it")
    p.add_argument("--horizon", type=int, default=2050)
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    _add_fit_flags(p)

    p = sub.add_parser("run", help="full pipeline over every country")
    p.add_argument("--manifest", help="load a saved manifest.json instead of the flags below")
    p.add_argument("--series")
    p.add_argument("--targets")
    p.add_argument("--scenario", choices=("minimum", "long"), default="minimum")
    p.add_argument("--horizon", type=int, default=2050)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_fit_flags(p)

    p = sub.add_parser("forecast", help="re-evaluate a fitted country report to a horizon")
    p.add_argument("--report", required=True, help="countries/<C>.json from a run")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--out", help="CSV path (default stdout)")

    p = sub.add_parser("cluster", help="k-means over (q, efficacy) points")
    p.add_argument("--points", required=True, help="CSV with header country,q,efficacy")
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("simulate", help="synthetic series from a known model")
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--m", type=float, required=True)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--y0", type=float, default=0.0)
    p.add_argument("--shock", type=_shock, action="append", default=[], help="e.g. F3:A=18,a=16.4,c=0.97")
    p.add_argument("--years", type=int, default=25)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--country", default="SYN")
    p.add_argument("--base-year", type=int, default=1992)
    p.add_argument("--out", required=True)
    return parser


def _err(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_PRE_RUN


def cmd_validate(args) -> int:
    try:
        series, problems = ingest_series_partial(args.series)
        targets = read_targets(args.targets) if args.targets else None
    except (OSError, ValueError) as exc:
        return _err(str(exc))
    for s in series:
        print(f"{s.country}: {len(s)} observations {s.years[0]}-{s.last_year}")
    for country, msg in problems.items():
        print(f"{country}: INVALID {msg}")
    if targets is not None:
        missing = [s.country for s in series if s.country not in targets]
        for c in missing:
            print(f"{c}: no target row")
        if missing:
            return EXIT_PRE_RUN
    return EXIT_PRE_RUN if problems else EXIT_OK


def cmd_fit(args) -> int:
    try:
        series, problems = ingest_series_partial(args.series)
    except (OSError, ValueError) as exc:
        return _err(str(exc))
    if args.country in problems:
        return _err(problems[args.country])
    match = [s for s in series if s.country == args.country]
    if not match:
        return _err(f"country {args.country} not in {args.series}")
    m = args.m
    if m is None and args.targets:
        row = read_targets(args.targets).get(args.country)
        m = row.for_scenario(args.scenario) if row else None
    config = _config(args)
    if m is None and config.m_mode == "fixed":
        return _err(f"no market potential for {args.country}: pass --m, --targets or --estimate-m")
    try:
        result = process_country(match[0], m, config, args.horizon)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {args.country}: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    text = dump_json({"fit": result["fit"], "analysis": result["analysis"]})
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"{args.country}: {result['fit']['model']['label']} q={result['fit']['model']['q']:.4f}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        if args.manifest:
            manifest = RunManifest.load(args.manifest)
        else:
            if not args.series:
                return _err("--series or --manifest is required")
            manifest = RunManifest(
                series_path=args.series,
                targets_path=args.targets,
                config=_config(args),
                scenario=args.scenario,
                horizon_year=args.horizon,
                rng_seed=args.seed,
            )
        report = run_pipeline(manifest, args.out, jobs=args.jobs)
    except PreRunError as exc:
        return _err(str(exc))
    for c in report.succeeded:
        print(f"{c}: ok")
    for c, f in report.failures.items():
        print(f"{c}: FAILED ({f['stage']}) {f['error']}")
    return report.exit_code


def cmd_forecast(args) -> int:
    try:
        doc = json.loads(Path(args.report).read_text(encoding="utf-8"))
        model = model_from_dict(doc["fit"]["model"])
        base = int(doc["fit"]["base_year"])
        tr = forecast(model, args.horizon, base)
    except (OSError, KeyError, ValueError) as exc:
        return _err(str(exc))
    lines = ["t,year,cumulative_mw,annual_rate_mw"]
    lines += [f"{t!r},{base + t!r},{y!r},{r!r}" for t, y, r in zip(tr.times.tolist(), tr.cumulative.tolist(), tr.annual_rate.tolist())]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_cluster(args) -> int:
    import csv

    try:
        with open(args.points, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        points = {r["country"]: (float(r["q"]), float(r["efficacy"])) for r in rows}
        res = cluster_countries(points, range(args.k_min, args.k_max + 1), rng_seed=args.seed)
    except (OSError, KeyError, ValueError) as exc:
        return _err(str(exc))
    text = dump_json(res.to_dict())
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        model = DiffusionModel(DiffusionParams(args.alpha, args.q, args.m, args.y0), tuple(args.shock))
        res = generate(SynthSpec(model, args.years, args.sigma, args.seed, args.country, args.base_year))
        write_series(args.out, [res.series])
    except (OSError, ValueError) as exc:
        return _err(str(exc))
    print(f"{args.country}: {args.years} observations, {res.clamp_count} clamped")
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "fit": cmd_fit,
    "run": cmd_run,
    "forecast": cmd_forecast,
    "cluster": cmd_cluster,
    "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
