"""Batch runs across countries: manifest in, deterministic report bundle out."""

from __future__ import annotations

import csv
import io
import json
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analyze import analyze_fit, cluster_countries
from .calibrate import FitConfig, FitResult, stepwise_fit
from .model import DiffusionModel, DiffusionParams, ShockTerm, cumulative
from .series import AdoptionSeries, TargetsTable, ingest_series_partial, read_targets

SCENARIOS = ("minimum", "long")
EXIT_OK, EXIT_PRE_RUN, EXIT_PARTIAL = 0, 1, 2


class PreRunError(ValueError):
    """The run cannot start (bad manifest, unreadable inputs, missing targets)."""


@dataclass(frozen=True)
class RunManifest:
    series_path: str
    targets_path: str | None
    config: FitConfig = field(default_factory=FitConfig)
    scenario: str = "minimum"
    horizon_year: int = 2050
    rng_seed: int = 0
    version: str = __version__

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise PreRunError(f"unknown scenario {self.scenario!r}")
        if self.config.m_mode == "fixed" and self.targets_path is None:
            raise PreRunError("fixed market potential needs a targets file")

    def to_dict(self) -> dict:
        return {
            "series_path": self.series_path,
            "targets_path": self.targets_path,
            "config": self.config.to_dict(),
            "scenario": self.scenario,
            "horizon_year": self.horizon_year,
            "rng_seed": self.rng_seed,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        data = dict(data)
        data["config"] = FitConfig.from_dict(data.get("config", {}))
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class RunReport:
    out_dir: Path
    succeeded: list[str]
    failures: dict[str, dict]
    clusters: dict | None

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.failures else EXIT_OK


def model_from_dict(data: dict) -> DiffusionModel:
    """Rebuild a fitted model from the ``model`` block of a country report."""
    p = DiffusionParams(data["alpha"], data["q"], data["m"], data["y0"])
    shocks = tuple(
        ShockTerm(s["form"], s["A"], s["a"], b=s.get("b"), c=s.get("c")) for s in data.get("shocks", [])
    )
    return DiffusionModel(p, shocks, frozenset(data.get("free", ())) or None)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def _fmt2(x: float | None) -> str:
    return "" if x is None else f"{x:.2f}"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# one country


def _plot_tables(fit: FitResult, report) -> dict[str, str]:
    series = fit.series
    years = series.years
    z = series.z
    Y = np.asarray(cumulative(fit.model, series.t))
    annual = []
    growth = []
    for k in range(1, len(z)):
        annual.append([int(years[k]), _fmt(z[k] - z[k - 1]), _fmt(Y[k] - Y[k - 1])])
        obs_g = math.log(z[k] / z[k - 1]) if z[k - 1] > 0 and z[k] > 0 else None
        fit_g = math.log(Y[k] / Y[k - 1]) if Y[k - 1] > 0 and Y[k] > 0 else None
        growth.append([int(years[k]), _fmt(obs_g), _fmt(fit_g)])
    tr = report.forecast
    fc = [[_fmt(t), _fmt(series.base_year + t), _fmt(y), _fmt(r)] for t, y, r in zip(tr.times, tr.cumulative, tr.annual_rate)]
    return {
        "annual": _csv_text(["year", "observed_annual_mw", "fitted_annual_mw"], annual),
        "growth": _csv_text(["year", "observed_log_growth", "fitted_log_growth"], growth),
        "forecast": _csv_text(["t", "year", "cumulative_mw", "annual_rate_mw"], fc),
    }


def process_country(series: AdoptionSeries, m_target: float | None, config: FitConfig, horizon_year: int) -> dict:
    """Fit and analyse one country; returns JSON-ready blocks plus plot tables."""
    cfg = replace(config, m_target=m_target) if m_target is not None else config
    fit = stepwise_fit(series, cfg)
    report = analyze_fit(fit, m_target, horizon_year)
    return {"fit": fit.to_dict(), "analysis": report.to_dict(), "plots": _plot_tables(fit, report)}


def _safe_process(args) -> tuple[str, dict | None, dict | None]:
    series, m_target, config, horizon = args
    try:
        return series.country, process_country(series, m_target, config, horizon), None
    except Exception as exc:  # isolate per-country failures
        return series.country, None, {
            "stage": "fit",
            "error": f"{type(exc).__name__}: {exc}",
            "traceback_tail": traceback.format_exc().strip().splitlines()[-1],
        }


# ---------------------------------------------------------------------------
# summary table


def summary_rows(results: dict[str, dict], max_shocks: int) -> tuple[list[str], list[list[str]]]:
    header = ["country", "model", "q", "t99_year", "t99_no_incentive_year", "target_year", "peak"]
    for i in range(1, max_shocks + 1):
        header += [f"shock{i}_form", f"shock{i}_A", f"shock{i}_a", f"shock{i}_b", f"shock{i}_c"]
    rows = []
    for country in sorted(results):
        fit = results[country]["fit"]["model"]
        an = results[country]["analysis"]
        row = [
            country,
            fit["label"],
            f"{fit['q']:.4f}",
            an["t99_year"] if an["t99_year"] is not None else "",
            an["t99_no_incentive_year"] if an["t99_no_incentive_year"] is not None else "",
            an["target_year"] if an["target_year"] is not None else "",
            "yes" if an["peak"]["flag"] else "no",
        ]
        for i in range(max_shocks):
            if i < len(fit["shocks"]):
                s = fit["shocks"][i]
                row += [s["form"], _fmt2(s["A"]), _fmt2(s["a"]), _fmt2(s.get("b")), _fmt2(s.get("c"))]
            else:
                row += [""] * 5
        rows.append([str(x) for x in row])
    return header, rows


def cluster_points(results: dict[str, dict]) -> tuple[dict[str, tuple[float, float]], list[str]]:
    """(q, efficacy of the most effective F2/F3 shock) per country; countries without one are skipped."""
    points, skipped = {}, []
    for country in sorted(results):
        summaries = results[country]["analysis"]["shock_summaries"]
        if not summaries:
            skipped.append(country)
            continue
        eff = max(s["efficacy"] for s in summaries)
        points[country] = (results[country]["fit"]["model"]["q"], eff)
    return points, skipped


def run_clustering(results: dict[str, dict], seed: int) -> dict:
    points, skipped = cluster_points(results)
    n = len(points)
    out: dict = {"skipped_no_shock": skipped, "points": {c: list(p) for c, p in points.items()}}
    if n < 3:
        out["status"] = f"skipped: {n} countries with shock summaries, need at least 3"
        return out
    k_range = range(2, min(6, n - 1) + 1)
    try:
        res = cluster_countries(points, k_range, rng_seed=seed)
    except ValueError as exc:
        out["status"] = f"failed: {exc}"
        return out
    out.update(res.to_dict())
    out["status"] = "ok"
    return out


# ---------------------------------------------------------------------------
# driver


def _targets_for(manifest: RunManifest, countries: list[str]) -> dict[str, float | None]:
    if manifest.targets_path is None:
        return {c: None for c in countries}
    try:
        table: TargetsTable = read_targets(manifest.targets_path)
    except (OSError, ValueError) as exc:
        raise PreRunError(f"targets: {exc}") from exc
    out = {}
    missing = []
    for c in countries:
        row = table.get(c)
        value = row.for_scenario(manifest.scenario) if row else None
        if value is None and manifest.config.m_mode == "fixed":
            missing.append(c)
        out[c] = value
    if missing:
        what = "target row" if manifest.scenario == "minimum" else "long-term target"
        raise PreRunError(f"missing {what} for: {', '.join(missing)}")
    return out


def run_pipeline(manifest: RunManifest, out_dir: str | Path, jobs: int = 1) -> RunReport:
    """Fit, analyse and cluster every country in the manifest; write the bundle to ``out_dir``.

    Bundle layout: ``manifest.json``, ``summary.csv``, ``countries/<C>.json``,
    ``plots/<C>_{annual,growth,forecast}.csv``, ``clusters.json``, ``failures.json``.
    """
    out = Path(out_dir)
    try:
        series, problems = ingest_series_partial(manifest.series_path)
    except (OSError, ValueError) as exc:
        raise PreRunError(f"series: {exc}") from exc
    countries = sorted([s.country for s in series] + list(problems))
    targets = _targets_for(manifest, countries)
    config = replace(manifest.config, rng_seed=manifest.rng_seed)

    tasks = [(s, targets[s.country], config, manifest.horizon_year) for s in series]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_safe_process, tasks))
    else:
        outcomes = [_safe_process(t) for t in tasks]

    results: dict[str, dict] = {}
    failures: dict[str, dict] = {c: {"stage": "ingest", "error": msg} for c, msg in problems.items()}
    for country, result, failure in outcomes:
        if failure is None:
            results[country] = result
        else:
            failures[country] = failure

    clusters = run_clustering(results, manifest.rng_seed)
    echo = manifest.to_dict()

    (out / "countries").mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(dump_json(echo), encoding="utf-8")
    header, rows = summary_rows(results, manifest.config.max_shocks)
    (out / "summary.csv").write_text(_csv_text(header, rows), encoding="utf-8")
    for country in sorted(results):
        r = results[country]
        doc = {"manifest": echo, "fit": r["fit"], "analysis": r["analysis"]}
        (out / "countries" / f"{country}.json").write_text(dump_json(doc), encoding="utf-8")
        for name, text in r["plots"].items():
            (out / "plots" / f"{country}_{name}.csv").write_text(text, encoding="utf-8")
    (out / "clusters.json").write_text(dump_json({"manifest": echo, **clusters}), encoding="utf-8")
    (out / "failures.json").write_text(dump_json({"manifest": echo, "failures": dict(sorted(failures.items()))}), encoding="utf-8")
    return RunReport(out, sorted(results), dict(sorted(failures.items())), clusters)
