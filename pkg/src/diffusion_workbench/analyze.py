"""Post-fit analytics: forecasts, peaks, quantile times, market-potential checks, shock summaries, clustering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.signal import find_peaks

from .calibrate import FitConfig, FitResult, nls_fit
from .model import (
    DiffusionModel,
    DomainError,
    ShockTerm,
    Trajectory,
    _cumulative_from_H,
    _transformed_time,
    check_admissible,
    trajectory,
)
from .series import AdoptionSeries

MONTH = 1.0 / 12.0
QUANTILE_TOL = 1e-6


class ZeroVarianceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# forecasting


def forecast(model: DiffusionModel, horizon_year: float, base_year: float = 0.0) -> Trajectory:
    """Monthly trajectory from t = 0 to ``horizon_year``; fitted shocks stay, no new ones are added."""
    horizon = float(horizon_year) - base_year
    if horizon <= 0:
        raise ValueError("forecast horizon must lie after the base year")
    n = int(round(horizon * 12))
    times = np.arange(n + 1) / 12.0
    check_admissible(model, float(times[-1]))
    return trajectory(model, times, base_year)


def _fraction_fn(model: DiffusionModel, horizon: float):
    check_admissible(model, horizon)
    forms, rows = model.pack()
    p = model.params
    cutoff = model.shock_cutoff

    def F(t: float) -> float:
        H = _transformed_time(forms, rows, np.array([t]), cutoff)
        return float(_cumulative_from_H(p.alpha, p.q, p.m, p.y0, H)[0]) / p.m

    return F


def time_to_quantile(model: DiffusionModel, p: float, after: float | None = None, t_max: float = 1e4) -> float:
    """Smallest t with F(t) >= p, by bisection to 1e-6 years.

    With ``after`` set, every shock is switched off beyond that time (imitation-only
    continuation); if the quantile is already passed by then, the in-sample
    crossing is returned.
    """
    if not 0 < p < 1:
        raise DomainError("quantile must lie in (0, 1)")
    mdl = model if after is None else model.with_cutoff(after)
    start = 0.0 if after is None else float(after)
    if after is not None:
        F = _fraction_fn(mdl, start)
        if F(start) >= p:
            return _bisect(F, 0.0, start, p)
    step = 1.0
    hi = start + step
    F = _fraction_fn(mdl, hi)
    while F(hi) < p:
        step *= 2
        hi = start + step
        if hi > t_max:
            raise DomainError(f"fraction {p} not reached within {t_max:g} years")
        F = _fraction_fn(mdl, hi)
    return _bisect(F, start, hi, p)


def _bisect(F, lo: float, hi: float, p: float) -> float:
    if F(lo) >= p:
        return lo
    while hi - lo > QUANTILE_TOL:
        mid = 0.5 * (lo + hi)
        if F(mid) >= p:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class PeakReport:
    flag: bool
    times: tuple[float, ...]
    values: tuple[float, ...]


def detect_peak(traj: Trajectory, prominence: float = 0.01) -> PeakReport:
    """Interior local maxima of the annual adoption rate with prominence >= ``prominence`` x global max."""
    rate = np.asarray(traj.annual_rate, dtype=float)
    if rate.size < 3 or not np.any(rate > 0):
        return PeakReport(False, (), ())
    idx, _ = find_peaks(rate, prominence=prominence * float(rate.max()))
    return PeakReport(bool(idx.size), tuple(float(traj.times[i]) for i in idx), tuple(float(rate[i]) for i in idx))


# ---------------------------------------------------------------------------
# market potential


def implied_market_potential(q: float, r, y):
    """m = q / (q - r) * Y, from the internal model's growth-rate identity."""
    r = np.asarray(r, dtype=float)
    if np.any(r >= q):
        raise DomainError("growth rate at or above q: the implied market potential is unbounded")
    out = q / (q - r) * np.asarray(y, dtype=float)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MarketPotentialDiagnostic:
    identifiable: bool
    status: str
    q: float
    growth_rates: tuple[float, ...]
    implied_m: tuple[float, ...]
    estimate: float | None = None
    interval: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        return {
            "identifiable": self.identifiable,
            "status": self.status,
            "q": self.q,
            "growth_rates": list(self.growth_rates),
            "implied_m": list(self.implied_m),
            "estimate": self.estimate,
            "interval": list(self.interval) if self.interval else None,
        }


def market_potential_diagnostic(
    model: DiffusionModel,
    series: AdoptionSeries,
    window: int = 3,
    decline_ratio: float = 0.9,
    max_spread: float = 0.5,
) -> MarketPotentialDiagnostic:
    """Is the saturation level visible in the data yet?

    Empirical continuous growth rates ln(z_k / z_{k-1}) over the final ``window``
    observations are plugged into m = q/(q - r) z. The level counts as
    identifiable when the last rate has fallen below ``decline_ratio`` q and the
    implied values agree to within ``max_spread`` relative spread.
    """
    z = series.z
    if z.size < window + 1 or np.any(z[-window - 1:] <= 0):
        raise ValueError(f"need {window + 1} positive trailing observations")
    q = model.params.q
    r = np.log(z[-window:] / z[-window - 1:-1])
    rates = tuple(float(x) for x in r)
    if np.any(r >= q):
        return MarketPotentialDiagnostic(False, "still expansive phase", q, rates, ())
    implied = q / (q - r) * z[-window:]
    spread = float((implied.max() - implied.min()) / implied.mean())
    path = tuple(float(x) for x in implied)
    if r[-1] < decline_ratio * q and spread < max_spread:
        return MarketPotentialDiagnostic(
            True, "identifiable", q, rates, path, float(implied[-1]), (float(implied.min()), float(implied.max()))
        )
    return MarketPotentialDiagnostic(False, "not identifiable: early exponential phase", q, rates, path)


# ---------------------------------------------------------------------------
# shocks


@dataclass(frozen=True)
class ShockSummary:
    country: str
    form: str
    onset: float
    intensity: float
    persistence: float
    efficacy: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _shock_end(s: ShockTerm) -> float:
    if s.form == "F1":
        return s.b
    # mean time of the F2 / F3 profile
    return s.a + (1.0 if s.form == "F2" else 2.0) / s.c


def _as_f3(s: ShockTerm) -> ShockTerm:
    if s.form == "F3":
        return s
    if s.form == "F1":
        c = 2.0 / (s.b - s.a)
    else:
        c = s.c if s.c > 0 else 1.0
    return ShockTerm("F3", s.total_effect() * c * c if math.isfinite(s.total_effect()) else s.A, s.a, c=c)


def _refit(fit: FitResult, shocks: Sequence[ShockTerm], config: FitConfig) -> FitResult:
    p = fit.model.params
    free = {n for n in fit.model.free if not n.startswith("shock")}
    tpl = DiffusionModel(p, tuple(shocks), frozenset())
    tpl = DiffusionModel(p, tpl.shocks, frozenset(free | {n for n in tpl.parameter_names() if n.startswith("shock")}))
    return nls_fit(fit.series, tpl, config, search_onsets=False)


def homogenized_refit(fit: FitResult, config: FitConfig | None = None, merge_gap: float = 1.0) -> FitResult:
    """Refit with every shock recast as F3, merging shocks that start within ``merge_gap`` years of the previous one's end."""
    config = replace(config or fit.config, candidate_forms=("F3",))
    if not fit.model.shocks:
        return fit
    current = _refit(fit, [_as_f3(s) for s in fit.model.shocks], config)
    while len(current.model.shocks) > 1:
        shocks = list(current.model.shocks)
        for i in range(len(shocks) - 1):
            first, second = shocks[i], shocks[i + 1]
            if second.a - _shock_end(first) <= merge_gap:
                effect = first.total_effect() + second.total_effect()
                c = 2.0 / max(_shock_end(second) - first.a, 0.1)
                merged = ShockTerm("F3", effect * c * c, first.a, c=c)
                shocks[i:i + 2] = [merged]
                break
        else:
            break
        current = _refit(current, shocks, config)
    return current


def shock_summaries(country: str, model: DiffusionModel, t_last: float, exclusion_window: float = 2.0) -> list[ShockSummary]:
    """Intensity A, persistence 1/c and efficacy A/c of every F2/F3 shock of ``model``.

    F1 shocks (no decay rate) and shocks starting in the final
    ``exclusion_window`` years before ``t_last`` are left out.
    """
    out = []
    for s in model.shocks:
        if s.form == "F1" or s.c is None or s.c <= 0:
            continue
        if s.a > t_last - exclusion_window:
            continue
        persistence = 1.0 / s.c
        out.append(ShockSummary(country, s.form, s.a, s.A, persistence, s.A * persistence))
    return out


def summarize_shocks(
    fits: Mapping[str, FitResult] | Sequence[FitResult],
    homogenize: bool = False,
    config: FitConfig | None = None,
    exclusion_window: float = 2.0,
) -> list[ShockSummary]:
    """Shock summaries across fitted countries, optionally after an F3-only homogenizing refit."""
    items = fits.values() if isinstance(fits, Mapping) else fits
    out = []
    for fit in items:
        if homogenize:
            fit = homogenized_refit(fit, config)
        out.extend(shock_summaries(fit.series.country, fit.model, float(fit.series.t[-1]), exclusion_window))
    return out


# ---------------------------------------------------------------------------
# clustering


@dataclass
class ClusterResult:
    k: int
    assignments: dict[str, int]
    silhouettes: dict[int, float]
    inertia: float
    dropped: list[str] = field(default_factory=list)

    def groups(self) -> list[list[str]]:
        out: dict[int, list[str]] = {}
        for country, label in self.assignments.items():
            out.setdefault(label, []).append(country)
        return [sorted(out[k]) for k in sorted(out)]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "assignments": dict(sorted(self.assignments.items())),
            "silhouettes": {str(k): v for k, v in sorted(self.silhouettes.items())},
            "inertia": self.inertia,
            "dropped": list(self.dropped),
        }


def cluster_countries(
    points: Mapping[str, Sequence[float]],
    k_range: Sequence[int] = range(2, 7),
    rng_seed: int = 0,
    n_init: int = 16,
    coordinates: Sequence[str] = ("q", "efficacy"),
) -> ClusterResult:
    """Standardize (q, efficacy), run k-means for each k and keep the k with the best mean silhouette."""
    from sklearn.cluster import KMeans
    from sklearn.metrics import silhouette_score

    countries = sorted(points)
    X = np.array([list(points[c]) for c in countries], dtype=float)
    if X.ndim != 2 or not np.all(np.isfinite(X)):
        raise ValueError("cluster inputs must be finite")
    ks = sorted(k_range)
    if not ks or len(countries) < ks[-1] + 1:
        raise ValueError(f"{len(countries)} points are too few for k up to {ks[-1] if ks else '?'}")
    std = X.std(axis=0)
    # rounding in the mean leaves ~1e-17 spread on identical values
    keep = std > 1e-12 * np.maximum(1.0, np.abs(X).max(axis=0))
    dropped = [coordinates[j] if j < len(coordinates) else str(j) for j in np.flatnonzero(~keep)]
    if not keep.any():
        raise ZeroVarianceError("every coordinate has zero variance")
    Z = (X[:, keep] - X[:, keep].mean(axis=0)) / std[keep]
    best = None
    scores = {}
    for k in ks:
        km = KMeans(n_clusters=k, n_init=n_init, random_state=rng_seed).fit(Z)
        if len(set(km.labels_)) < 2:
            scores[k] = -1.0
            continue
        scores[k] = float(silhouette_score(Z, km.labels_))
        if best is None or scores[k] > scores[best[0]]:
            best = (k, km)
    if best is None:
        raise ValueError("k-means found no non-trivial partition")
    k, km = best
    # relabel by first appearance in country order so labels are stable
    relabel: dict[int, int] = {}
    for lab in km.labels_:
        relabel.setdefault(int(lab), len(relabel))
    assignments = {c: relabel[int(lab)] for c, lab in zip(countries, km.labels_)}
    return ClusterResult(k, assignments, scores, float(km.inertia_), dropped)


# ---------------------------------------------------------------------------
# per-country report


@dataclass
class AnalysisReport:
    country: str
    base_year: int
    forecast: Trajectory
    peak: PeakReport
    target_mw: float
    target_fraction: float
    target_year: int | None
    t99: float | None
    t99_year: int | None
    t99_no_incentive_year: int | None
    shock_summaries: list[ShockSummary]
    market_potential: MarketPotentialDiagnostic | None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        tr = self.forecast
        return {
            "country": self.country,
            "base_year": self.base_year,
            "peak": {"flag": self.peak.flag, "times": list(self.peak.times), "values": list(self.peak.values)},
            "target_mw": self.target_mw,
            "target_fraction": self.target_fraction,
            "target_year": self.target_year,
            "t99": self.t99,
            "t99_year": self.t99_year,
            "t99_no_incentive_year": self.t99_no_incentive_year,
            "shock_summaries": [s.to_dict() for s in self.shock_summaries],
            "market_potential": self.market_potential.to_dict() if self.market_potential else None,
            "forecast": {
                "times": [float(x) for x in tr.times],
                "cumulative": [float(x) for x in tr.cumulative],
                "annual_rate": [float(x) for x in tr.annual_rate],
            },
            "notes": list(self.notes),
        }


def calendar_year(base_year: int, t: float | None) -> int | None:
    """Year containing time t (t = 0 is the start of the base year)."""
    return None if t is None else int(base_year + math.floor(t))


def analyze_fit(fit: FitResult, m_target: float | None, horizon_year: int, quantile: float = 0.99) -> AnalysisReport:
    model = fit.model
    series = fit.series
    base = series.base_year
    t_last = float(series.t[-1])
    notes = []
    traj = forecast(model, horizon_year, base)
    peak = detect_peak(traj)
    m = model.params.m
    target = m_target if m_target is not None else m
    frac = min(target / m, quantile)
    if target / m > quantile:
        notes.append(f"target at or above {quantile:.0%} of m: achievement measured at that fraction")

    def safe(fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except DomainError as exc:
            notes.append(str(exc))
            return None

    target_t = safe(time_to_quantile, model, frac)
    t99 = safe(time_to_quantile, model, quantile, after=t_last)
    t99_free = safe(time_to_quantile, model.without_shocks(), quantile)
    try:
        diag = market_potential_diagnostic(model, series)
    except ValueError as exc:
        notes.append(f"market potential diagnostic skipped: {exc}")
        diag = None
    return AnalysisReport(
        country=series.country,
        base_year=base,
        forecast=traj,
        peak=peak,
        target_mw=target,
        target_fraction=frac,
        target_year=calendar_year(base, target_t),
        t99=t99,
        t99_year=calendar_year(base, t99),
        t99_no_incentive_year=calendar_year(base, t99_free),
        shock_summaries=summarize_shocks([fit]),
        market_potential=diag,
        notes=notes,
    )
