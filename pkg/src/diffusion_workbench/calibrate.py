"""Nonlinear least-squares calibration of diffusion models with stepwise shock selection.

The objective is the plain residual sum of squares on the cumulative scale. It
is minimised by a damped Gauss-Newton (Levenberg-Marquardt) iteration over an
unconstrained vector: every bounded parameter is mapped through a logistic
transform onto its interval, an estimated market potential through a log
transform above the largest observation. Iterates whose transformed time
decreases anywhere on the observation window are rejected like a failed step.

Shock onsets make the objective multimodal, so each fit is multi-started on a
uniform onset grid (with seeded jitter of the other parameters). All starts
get a short screening run, the best few are polished to convergence and the
lowest objective wins, ties broken by start index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import expit, logit

from .model import (
    FORMS,
    DiffusionModel,
    DiffusionParams,
    DomainError,
    ShockTerm,
    _critical_points,
    _cumulative_from_H,
    _intervention,
    _shock_G,
    _transformed_time,
    admissibility_grid,
    cumulative,
    implied_transformed_time,
    shock_names,
)
from .series import AdoptionSeries

__all__ = [
    "AdoptionSeries",
    "AllStartsInadmissibleError",
    "ConfigError",
    "Estimate",
    "FitConfig",
    "FitResult",
    "InsufficientDataError",
    "SmpccStep",
    "initial_model",
    "nls_fit",
    "r_squared",
    "smpcc",
    "stepwise_fit",
]

_FORM_PREFERENCE = {"F3": 0, "F2": 1, "F1": 2}
_BOUND_EPS = 1e-8


class ConfigError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class AllStartsInadmissibleError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    m_mode: str = "fixed"
    m_target: float | None = None
    smpcc_threshold: float = 0.5
    max_shocks: int = 3
    candidate_forms: tuple[str, ...] = FORMS
    exclusion_window: int = 2
    multistart_count: int = 32
    rng_seed: int = 0
    gtol: float = 1e-10
    xtol: float = 1e-12
    ftol: float = 1e-12
    max_iter: int = 300
    screen_iter: int = 25
    polish_count: int = 4
    alpha_bounds: tuple[float, float] = (0.0, 1.0)
    q_bounds: tuple[float, float] = (0.0, 5.0)
    amplitude_bounds: tuple[float, float] = (-50.0, 5000.0)
    decay_bounds: tuple[float, float] = (0.0, 20.0)
    inflating_decay_bounds: tuple[float, float] = (-2.0, 20.0)
    duration_bounds: tuple[float, float] = (0.05, 60.0)
    y0_slack: float = 1.0
    allow_inflating: bool = False
    force_m: bool = False
    bass_free_y0: bool = True
    alpha_ratio_switch: float = 1e-4
    tie_rtol: float = 1e-9

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidate_forms", tuple(self.candidate_forms))
        if self.m_mode not in ("fixed", "estimated"):
            raise ConfigError(f"m_mode must be 'fixed' or 'estimated', not {self.m_mode!r}")
        if self.m_target is not None and not self.m_target > 0:
            raise ConfigError("m_target must be positive")
        if not 0 < self.smpcc_threshold < 1:
            raise ConfigError("smpcc_threshold must lie in (0, 1)")
        if self.exclusion_window < 0 or self.max_shocks < 0:
            raise ConfigError("exclusion_window and max_shocks must be >= 0")
        if self.multistart_count < 1 or self.polish_count < 1:
            raise ConfigError("multistart_count and polish_count must be >= 1")
        bad = [f for f in self.candidate_forms if f not in FORMS]
        if bad:
            raise ConfigError(f"unknown shock forms {bad}")

    def to_dict(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**kw)


@dataclass(frozen=True)
class Estimate:
    value: float | None
    se: float = math.nan
    ci_low: float = math.nan
    ci_high: float = math.nan
    free: bool = True
    at_bound: bool = False

    def to_dict(self) -> dict:
        return {k: _jsonable(getattr(self, k)) for k in ("value", "se", "ci_low", "ci_high", "free", "at_bound")}


@dataclass(frozen=True)
class SmpccStep:
    shock_index: int
    form: str
    r2_prev: float
    r2_next: float
    smpcc: float
    accepted: bool
    objective: float

    def to_dict(self) -> dict:
        return {k: _jsonable(getattr(self, k)) for k in self.__dataclass_fields__}


@dataclass
class FitResult:
    model: DiffusionModel
    series: AdoptionSeries
    config: FitConfig
    estimates: dict[str, Estimate]
    r_squared: float
    residuals: np.ndarray
    objective: float
    converged: bool
    iterations: int
    starts_explored: int
    starts_admissible: int
    smpcc_trace: list[SmpccStep] = field(default_factory=list)
    stages: list[dict] = field(default_factory=list)
    m_identifiable: bool | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def label(self) -> str:
        return self.model.label

    def to_dict(self) -> dict:
        m = self.model
        shocks = [{"form": s.form, **s.params()} for s in m.shocks]
        return {
            "country": self.series.country,
            "base_year": self.series.base_year,
            "model": {
                "kind": m.kind,
                "label": m.label,
                "alpha": m.params.alpha,
                "q": m.params.q,
                "m": m.params.m,
                "y0": m.params.y0,
                "shocks": shocks,
                "free": sorted(m.free),
            },
            "estimates": {k: v.to_dict() for k, v in self.estimates.items()},
            "r_squared": _jsonable(self.r_squared),
            "objective": self.objective,
            "residuals": [float(x) for x in self.residuals],
            "observations": [[y, v] for y, v in self.series.observations],
            "converged": self.converged,
            "iterations": self.iterations,
            "starts_explored": self.starts_explored,
            "starts_admissible": self.starts_admissible,
            "smpcc_trace": [s.to_dict() for s in self.smpcc_trace],
            "stages": self.stages,
            "m_identifiable": self.m_identifiable,
            "notes": list(self.notes),
        }


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, np.floating):
        return _jsonable(float(v))
    return v


# ---------------------------------------------------------------------------
# goodness of fit


def r_squared(series: AdoptionSeries, model: DiffusionModel) -> float:
    """1 - RSS/TSS on the cumulative scale; NaN for a constant series."""
    z = series.z
    if len(z) == 0:
        raise ValueError("empty series")
    resid = z - np.asarray(cumulative(model, series.t))
    return _r2(float(resid @ resid), z)


def _r2(rss: float, z: np.ndarray) -> float:
    dev = z - z.mean()
    tss = float(dev @ dev)
    if tss == 0:
        return math.nan
    return 1.0 - rss / tss


def smpcc(r2_prev: float, r2_next: float) -> float:
    """Relative reduction of residual deviance between nested fits.

    Evaluated exactly on the shortest decimal form of each R^2 and rounded
    once, so decimal inputs give the decimal answer (0.90, 0.96 -> 0.6).
    """
    if r2_prev >= 1:
        raise DomainError("SMPCC undefined when the incumbent already fits perfectly (R^2 >= 1)")
    prev, nxt = Fraction(repr(float(r2_prev))), Fraction(repr(float(r2_next)))
    return float((nxt - prev) / (1 - prev))


# ---------------------------------------------------------------------------
# parameter space


class _Problem:
    """Residuals of one model structure on one series, over an unconstrained vector."""

    def __init__(self, series: AdoptionSeries, template: DiffusionModel, config: FitConfig):
        self.t = series.t
        self.z = series.z
        self.config = config
        self.names = template.parameter_names()
        self.forms = tuple(s.code for s in template.shocks)
        self.form_names = tuple(s.form for s in template.shocks)
        self.base = np.array(list(template.values().values()), dtype=float)
        self.free = [n for n in self.names if n in template.free]
        self.index = {n: i for i, n in enumerate(self.names)}
        self.horizon = float(self.t[-1])
        self.grid = admissibility_grid(self.horizon)
        self.zmax = float(self.z.max())
        # noise can put the first observations below Y(0), so only the largest one bounds y0
        self.y0_hi = config.y0_slack * self.zmax if self.zmax > 0 else 1.0
        if "m" not in self.free:
            self.y0_hi = min(self.y0_hi, self.base[2] * (1 - 1e-9))
        self.onset_window = onset_window(series, config.exclusion_window)
        self.bounds = {n: self._bounds(n) for n in self.free}

    def _bounds(self, name: str):
        cfg = self.config
        if name == "alpha":
            return cfg.alpha_bounds
        if name == "q":
            return cfg.q_bounds
        if name == "y0":
            return (0.0, self.y0_hi)
        if name == "m":
            return None
        k = int(name[5:name.index(".")]) - 1
        last = name[-1]
        if last == "A":
            return cfg.amplitude_bounds
        if last == "a":
            return self.onset_window
        if last == "b":
            return cfg.duration_bounds
        if self.form_names[k] == "F2" and cfg.allow_inflating:
            return cfg.inflating_decay_bounds
        return cfg.decay_bounds

    # natural values of the free parameters, with F1 end times stored as durations
    def _to_internal(self, name: str, full: np.ndarray) -> float:
        v = full[self.index[name]]
        if name.endswith(".b"):
            v = v - full[self.index[name[:-1] + "a"]]
        return v

    def theta_of(self, full: np.ndarray) -> np.ndarray:
        theta = np.empty(len(self.free))
        for j, n in enumerate(self.free):
            v = self._to_internal(n, full)
            b = self.bounds[n]
            if b is None:
                theta[j] = math.log(max(v / self.zmax - 1.0, 1e-12))
            else:
                s = (v - b[0]) / (b[1] - b[0])
                theta[j] = logit(min(max(s, 1e-10), 1 - 1e-10))
        return theta

    def full_of(self, theta: np.ndarray) -> np.ndarray:
        full = self.base.copy()
        durations = []
        for j, n in enumerate(self.free):
            b = self.bounds[n]
            if b is None:
                v = self.zmax * (1.0 + math.exp(min(theta[j], 700.0)))
            else:
                v = b[0] + (b[1] - b[0]) * float(expit(theta[j]))
            if n.endswith(".b"):
                durations.append((n, v))
            else:
                full[self.index[n]] = v
        for n, d in durations:
            full[self.index[n]] = full[self.index[n[:-1] + "a"]] + d
        return full

    def clip_full(self, full: np.ndarray) -> np.ndarray:
        return self.full_of(self.theta_of(full))

    def at_bound(self, name: str, full: np.ndarray) -> bool:
        b = self.bounds.get(name)
        if b is None:
            return False
        s = (self._to_internal(name, full) - b[0]) / (b[1] - b[0])
        return bool(s < _BOUND_EPS or s > 1 - _BOUND_EPS)

    def predict(self, full: np.ndarray, t: np.ndarray | None = None):
        alpha, q, m, y0 = full[:4]
        rows = full[4:].reshape(-1, 3)
        if not (m > 0 and 0 <= y0 < m and alpha >= 0 and q >= 0 and alpha + q > 0):
            return None
        if alpha == 0 and y0 <= 0:
            return None
        for code, (A, a, third) in zip(self.forms, rows):
            if a <= 0 or (code == 1 and third <= a) or (code == 3 and third <= 0):
                return None
        # extreme iterates (e.g. c underflowing) yield inf/nan and are rejected below
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if self.forms:
                pts = _critical_points(self.forms, rows, self.horizon)
                tt = np.concatenate([self.grid, pts]) if pts else self.grid
                if not np.min(_intervention(self.forms, rows, tt)) >= -1e-12:
                    return None
            tq = self.t if t is None else t
            H = _transformed_time(self.forms, rows, tq)
            Y = _cumulative_from_H(alpha, q, m, y0, H)
        if not np.all(np.isfinite(Y)):
            return None
        return Y

    def residuals_full(self, full: np.ndarray):
        Y = self.predict(full)
        return None if Y is None else self.z - Y

    def residuals(self, theta: np.ndarray):
        return self.residuals_full(self.full_of(theta))

    def model_of(self, full: np.ndarray, template: DiffusionModel) -> DiffusionModel:
        values = dict(zip(self.names, (float(v) for v in full)))
        return template.with_values(values)


def onset_window(series: AdoptionSeries, exclusion_window: int) -> tuple[float, float]:
    """Admissible shock onsets: one year after the first observation up to ``exclusion_window`` years before the last."""
    t = series.t
    return (max(float(t[0]) + 1.0, 1e-6), float(t[-1]) - exclusion_window)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass
class _LMResult:
    theta: np.ndarray
    r: np.ndarray
    cost: float
    iterations: int
    converged: bool


def _jacobian(fun, theta: np.ndarray, r: np.ndarray) -> np.ndarray:
    J = np.zeros((r.size, theta.size))
    for j in range(theta.size):
        h = 1e-7 * max(1.0, abs(theta[j]))
        for sign in (1.0, -1.0):
            th = theta.copy()
            th[j] += sign * h
            rj = fun(th)
            if rj is not None:
                J[:, j] = (rj - r) / (sign * h)
                break
    return J


def _levenberg_marquardt(fun, theta, r, cfg: FitConfig, max_iter: int, scale: float) -> _LMResult:
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    floor = 1e-30 * scale
    for it in range(1, max_iter + 1):
        if cost <= floor:
            converged = True
            break
        J = _jacobian(fun, theta, r)
        g = J.T @ r
        JTJ = J.T @ J
        if np.max(np.abs(g), initial=0.0) <= cfg.gtol * cost:
            converged = True
            break
        d = np.diag(JTJ).copy()
        dmax = d.max(initial=0.0)
        if dmax <= 0:
            converged = True
            break
        d = np.maximum(d, 1e-12 * dmax)
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(JTJ + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            th_new = theta + step
            r_new = fun(th_new)
            if r_new is not None:
                c_new = float(r_new @ r_new)
                if c_new < cost:
                    accepted = True
                    break
            lam *= 10
        if not accepted:
            converged = True
            break
        drop = (cost - c_new) / cost
        small_step = np.linalg.norm(step) <= cfg.xtol * (np.linalg.norm(theta) + cfg.xtol)
        theta, r, cost = th_new, r_new, c_new
        lam = max(lam / 10, 1e-12)
        if drop <= cfg.ftol or small_step:
            converged = True
            break
    return _LMResult(theta, r, cost, it, converged)


# ---------------------------------------------------------------------------
# starting values


def initial_model(series: AdoptionSeries, m: float, alpha: float = 0.0, shocks: Sequence[ShockTerm] = ()) -> DiffusionModel:
    """A data-driven starting model: q from early log growth, y0 back-cast from the first positive observation."""
    t, z = series.t, series.z
    pos = z > 0
    tp, zp = t[pos], z[pos]
    q0 = 0.2
    if zp.size >= 3:
        lr = np.diff(np.log(zp)) / np.diff(tp)
        k = max(2, lr.size // 2)
        q0 = float(np.median(lr[:k]))
    q0 = float(np.clip(q0, 0.02, 2.0))
    y0 = float(zp[0] * math.exp(-q0 * (tp[0] - t[0]))) if zp.size else 1e-3 * m
    y0 = min(y0, 0.5 * m)
    free = {"q"}
    if alpha > 0:
        free.add("alpha")
    if y0 > 0:
        free.add("y0")
    model = DiffusionModel(DiffusionParams(alpha, q0, m, y0), tuple(shocks))
    names = set(model.parameter_names())
    return DiffusionModel(model.params, model.shocks, frozenset(free | {n for n in names if n.startswith("shock")}))


def _excess_profile(problem: _Problem, full: np.ndarray, skip: int) -> np.ndarray:
    """Transformed time implied by the data, less t and the shocks other than ``skip``."""
    alpha, q, m, y0 = full[:4]
    try:
        params = DiffusionParams(float(alpha), float(q), float(m), float(y0))
    except DomainError:
        return np.zeros_like(problem.t)
    H = implied_transformed_time(params, problem.z)
    excess = H - problem.t
    rows = full[4:].reshape(-1, 3)
    for i, (code, (A, a, third)) in enumerate(zip(problem.forms, rows)):
        if i != skip:
            excess = excess - _shock_G(code, A, a, third, problem.t)
    return excess


def _place_shock(problem: _Problem, full: np.ndarray, k: int, onset: float, rng: np.random.Generator) -> None:
    code = problem.forms[k]
    t = problem.t
    excess = _excess_profile(problem, full, k)
    tail = np.median(excess[-2:])
    before = excess[t <= onset]
    head = np.median(before[-3:]) if before.size else 0.0
    effect = float(np.clip(tail - head, -5.0, 100.0))
    if abs(effect) < 0.05:
        effect = 0.05
    base = 4 + 3 * k
    full[base + 1] = onset
    if code == 1:
        d = math.exp(rng.uniform(math.log(1.0), math.log(5.0)))
        full[base] = max(effect / d, -0.9)
        full[base + 2] = onset + d
    else:
        c = math.exp(rng.uniform(math.log(0.3), math.log(4.0)))
        full[base + 2] = c
        full[base] = max(effect * c, -0.9) if code == 2 else max(effect * c * c, -0.9 * c * math.e)


def _repartition(problem: _Problem, full: np.ndarray, k: int, onset: float, rng: np.random.Generator) -> None:
    """Re-place every shock, giving each the raw excess increment up to the next onset."""
    t = problem.t
    excess = _excess_profile(problem, full[:4], -1)
    onsets = [onset if i == k else float(full[5 + 3 * i]) for i in range(len(problem.forms))]
    ends = sorted(onsets) + [float(t[-1]) + 1.0]
    for i, code in enumerate(problem.forms):
        a = onsets[i]
        end = min(e for e in ends if e > a) if any(e > a for e in ends) else a + 1.0
        gap = max(end - a, 0.5)
        before = excess[t <= a]
        inside = excess[t <= end]
        effect = float(np.median(inside[-2:]) - (np.median(before[-2:]) if before.size else 0.0))
        effect = float(np.clip(effect, 0.05, 100.0))
        base = 4 + 3 * i
        full[base + 1] = a
        if code == 1:
            d = min(math.exp(rng.uniform(0.0, math.log(5.0))), gap)
            full[base] = effect / d
            full[base + 2] = a + d
        else:
            c = max(math.exp(rng.uniform(math.log(0.3), math.log(4.0))), (1.0 if code == 2 else 2.0) / gap)
            full[base + 2] = c
            full[base] = effect * c if code == 2 else effect * c * c


def _jitter(problem: _Problem, full: np.ndarray, skip: int | None, rng: np.random.Generator) -> None:
    idx = problem.index
    scales = {"q": 0.15, "y0": 0.3, "alpha": 1.0, "m": 0.2}
    for n, s in scales.items():
        if n in problem.bounds:
            full[idx[n]] *= math.exp(s * rng.standard_normal())
    for k in range(len(problem.forms)):
        if k == skip:
            continue
        base = 4 + 3 * k
        names = problem.names[base:base + 3]
        if names[0] in problem.bounds:
            full[base] *= math.exp(0.1 * rng.standard_normal())
        if names[1] in problem.bounds:
            shift = 0.2 * rng.standard_normal()
            full[base + 1] += shift
            if problem.forms[k] == 1:
                full[base + 2] += shift
        if names[2] in problem.bounds:
            if problem.forms[k] == 1:
                full[base + 2] += 0.2 * rng.standard_normal()
            else:
                full[base + 2] *= math.exp(0.1 * rng.standard_normal())


def _starts(problem: _Problem, count: int, grid_shock: int | None, rng: np.random.Generator) -> list[np.ndarray]:
    starts = []
    lo, hi = problem.onset_window
    if grid_shock is None:
        count = min(count, 8)
    for j in range(count):
        full = problem.base.copy()
        if j > 0:
            _jitter(problem, full, grid_shock, rng)
        if j > 0 and j % 2 == 0 and "alpha" in problem.bounds:
            # alpha and y0 trade off along a flat ridge; also start near its alpha -> 0 end
            full[problem.index["alpha"]] *= 10.0 ** (-2 * (1 + (j // 2 - 1) % 3))
        if grid_shock is not None and (j > 0 or count == 1):
            pos = 0.5 if count <= 2 else (j - 1) / (count - 2)
            onset = lo + (hi - lo) * pos if hi > lo else lo
            if len(problem.forms) > 1 and j % 2 == 1:
                _repartition(problem, full, grid_shock, onset, rng)
            else:
                _place_shock(problem, full, grid_shock, onset, rng)
        full = problem.clip_full(full)
        if problem.predict(full) is None and grid_shock is not None:
            base = 4 + 3 * grid_shock
            for _ in range(30):
                full[base] *= 0.5
                if problem.predict(full) is not None:
                    break
        starts.append(full)
    return starts


# ---------------------------------------------------------------------------
# fitting


def _check_size(series: AdoptionSeries, template: DiffusionModel) -> None:
    p = len(template.free)
    if len(series) < p + 2:
        raise InsufficientDataError(
            f"{series.country}: {len(series)} observations for {p} free parameters (need at least {p + 2})"
        )


def nls_fit(
    series: AdoptionSeries,
    model_template: DiffusionModel,
    config: FitConfig,
    grid_shock: int | None = None,
    seed_key: Sequence[int] = (),
    search_onsets: bool = True,
) -> FitResult:
    """Least-squares fit of the template's free parameters to ``series``.

    ``grid_shock`` selects the shock whose onset is multi-started on the onset
    grid (default: the last shock, if any); with ``search_onsets=False`` the
    starts are the template and jittered copies of it. Fixed parameters keep their
    template values. The series is expected with leading zeros already
    trimmed; :func:`stepwise_fit` does that.
    """
    series = series.trimmed()
    if config.m_mode == "estimated" and "m" not in model_template.free:
        model_template = replace(model_template, free=model_template.free | {"m"})
    _check_size(series, model_template)
    if not search_onsets:
        grid_shock = None
    elif grid_shock is None and model_template.shocks:
        grid_shock = len(model_template.shocks) - 1
    problem = _Problem(series, model_template, config)
    rng = np.random.default_rng([config.rng_seed, *seed_key])
    starts = _starts(problem, config.multistart_count, grid_shock, rng)
    scale = float(series.z @ series.z) or 1.0

    screened = []
    iterations = 0
    for idx, full in enumerate(starts):
        theta = problem.theta_of(full)
        r = problem.residuals(theta)
        if r is None:
            continue
        res = _levenberg_marquardt(problem.residuals, theta, r, config, config.screen_iter, scale)
        iterations += res.iterations
        screened.append((res.cost, idx, res))
    if not screened:
        raise AllStartsInadmissibleError(f"{series.country}: every start of {model_template.label} is inadmissible")
    screened.sort(key=lambda x: (x[0], x[1]))
    polished = []
    for _, idx, res in screened[: config.polish_count]:
        fin = _levenberg_marquardt(problem.residuals, res.theta, res.r, config, config.max_iter, scale)
        iterations += fin.iterations
        polished.append((fin.cost, idx, fin))
    polished.sort(key=lambda x: (x[0], x[1]))
    best = polished[0][2]

    full = problem.full_of(best.theta)
    model = problem.model_of(full, model_template)
    estimates = _standard_errors(problem, full, best.cost)
    result = FitResult(
        model=model,
        series=series,
        config=config,
        estimates=_rename_estimates(estimates, problem, model),
        r_squared=_r2(best.cost, series.z),
        residuals=best.r,
        objective=best.cost,
        converged=best.converged,
        iterations=iterations,
        starts_explored=len(starts),
        starts_admissible=len(screened),
    )
    if not best.converged:
        result.notes.append("best start hit the iteration limit before converging")
    if config.m_mode == "estimated":
        _check_market_potential(result)
    return result


def _standard_errors(problem: _Problem, full: np.ndarray, cost: float) -> dict[str, Estimate]:
    n = problem.z.size
    est_names = [nm for nm in problem.free if not problem.at_bound(nm, full)]
    cols = []
    r0 = problem.residuals_full(full)
    for nm in est_names:
        i = problem.index[nm]
        v = full[i]
        h = 1e-6 * max(abs(v), 1e-3)
        up, dn = full.copy(), full.copy()
        up[i] += h
        dn[i] -= h
        ru, rd = problem.residuals_full(up), problem.residuals_full(dn)
        if ru is not None and rd is not None:
            cols.append((rd - ru) / (2 * h))
        elif ru is not None:
            cols.append((r0 - ru) / h)
        elif rd is not None:
            cols.append((rd - r0) / h)
        else:
            cols.append(np.zeros(n))
    p = len(est_names)
    dof = n - p
    se = {}
    if p and dof > 0:
        J = np.column_stack(cols)
        s2 = cost / dof
        cov = s2 * np.linalg.pinv(J.T @ J)
        tq = float(stats.t.ppf(0.975, dof))
        for k, nm in enumerate(est_names):
            var = cov[k, k]
            se[nm] = (math.sqrt(var) if var >= 0 else math.nan, tq)
    out = {}
    for nm in problem.names:
        v = float(full[problem.index[nm]])
        if nm not in problem.bounds:
            out[nm] = Estimate(v, free=False)
        elif nm in se:
            s, tq = se[nm]
            out[nm] = Estimate(v, s, v - tq * s, v + tq * s)
        else:
            out[nm] = Estimate(v, at_bound=problem.at_bound(nm, full))
    return out


def _rename_estimates(estimates: dict[str, Estimate], problem: _Problem, model: DiffusionModel) -> dict[str, Estimate]:
    """Map template-order shock names onto the fitted model's onset order."""
    rows = np.array(list(estimates[n].value for n in problem.names[4:])).reshape(-1, 3)
    order = sorted(range(len(rows)), key=lambda k: rows[k][1])
    out = {n: estimates[n] for n in problem.names[:4]}
    for new_k, old_k in enumerate(order):
        old = problem.names[4 + 3 * old_k: 7 + 3 * old_k]
        new = shock_names(new_k, model.shocks[new_k])
        for o, nn in zip(old, new):
            out[nn] = estimates[o]
    return out


def _check_market_potential(result: FitResult) -> None:
    from .analyze import market_potential_diagnostic

    try:
        diag = market_potential_diagnostic(result.model, result.series)
        ok = diag.identifiable
        status = diag.status
    except (DomainError, ValueError) as exc:
        ok, status = False, str(exc)
    result.m_identifiable = ok
    if not ok:
        result.notes.append(f"market potential not identifiable: {status}")
        if not result.config.force_m:
            old = result.estimates["m"]
            result.estimates["m"] = Estimate(None, free=old.free, at_bound=old.at_bound)


# ---------------------------------------------------------------------------
# stepwise selection


def _with_shock(model: DiffusionModel, form: str, onset: float, extra_free: set[str]) -> tuple[DiffusionModel, int]:
    if form == "F1":
        shock = ShockTerm("F1", 0.5, onset, b=onset + 2.0)
    else:
        shock = ShockTerm(form, 0.5, onset, c=1.0)
    tmp = DiffusionModel(model.params, model.shocks + (shock,), frozenset())
    idx = next(i for i, s in enumerate(tmp.shocks) if s is shock)
    base = {n for n in model.free if not n.startswith("shock")} | extra_free
    names = {n for n in tmp.parameter_names() if n.startswith("shock")}
    return DiffusionModel(tmp.params, tmp.shocks, frozenset(base | names)), idx


def _pick(proposals: list[tuple[str, FitResult]], rtol: float) -> tuple[str, FitResult]:
    """Lowest objective; near-ties (within ``rtol``) go to F3, then F2, then F1."""
    best = min(fit.objective for _, fit in proposals)
    tied = [p for p in proposals if p[1].objective <= best + rtol * max(abs(best), 1e-300)]
    return min(tied, key=lambda p: (_FORM_PREFERENCE[p[0]], p[1].objective))


def _negligible_external(fit: FitResult, config: FitConfig) -> bool:
    p = fit.model.params
    return p.q > 0 and (p.alpha / p.q < config.alpha_ratio_switch or fit.estimates["alpha"].at_bound)


def _maybe_internal(series, fit: FitResult, config: FitConfig, extra: set[str], notes: list[str], stage: int) -> FitResult:
    """Refit a GBM with a negligible external channel as the internal model; keep it unless it fits worse."""
    if not _negligible_external(fit, config):
        return fit
    p = fit.model.params
    free = (fit.model.free - {"alpha"}) | {"y0"} | extra
    y0 = p.y0 if p.y0 > 0 else initial_model(series, p.m).params.y0
    template = DiffusionModel(DiffusionParams(0.0, p.q, p.m, y0), fit.model.shocks, frozenset(free))
    gim = nls_fit(series, template, config, seed_key=(stage, 9), search_onsets=False)
    if gim.objective <= fit.objective * (1 + 1e-6) + 1e-300:
        notes.append(f"stage {stage}: external channel negligible, switched to the generalized internal model")
        return gim
    return fit


def stepwise_fit(series: AdoptionSeries, config: FitConfig) -> FitResult:
    """Bass fit, optional switch to the internal model, then shock-by-shock SMPCC selection."""
    if not config.candidate_forms:
        raise ConfigError("candidate_forms is empty")
    if config.m_mode == "fixed" and config.m_target is None:
        raise ConfigError("m_mode 'fixed' needs m_target")
    series = series.trimmed()
    zmax = float(series.z.max())
    m = config.m_target if config.m_target is not None else 3.0 * zmax
    extra = {"m"} if config.m_mode == "estimated" else set()

    start = initial_model(series, m)
    y0 = start.params.y0
    bass_free = {"alpha", "q"} | ({"y0"} if config.bass_free_y0 else set()) | extra
    bass = DiffusionModel(
        DiffusionParams(1e-3 * start.params.q, start.params.q, m, y0 if config.bass_free_y0 else 0.0),
        free=frozenset(bass_free),
    )
    incumbent = nls_fit(series, bass, config, seed_key=(0, 0))
    stages = [{"stage": 0, "label": incumbent.model.label, "objective": incumbent.objective, "r_squared": _jsonable(incumbent.r_squared)}]
    p = incumbent.model.params
    ratio = p.alpha / p.q if p.q > 0 else math.inf
    notes = [f"basic Bass fit: alpha/q = {ratio:.3g}"]
    if _negligible_external(incumbent, config):
        gy0 = p.y0 if p.y0 > 0 else y0
        gim = DiffusionModel(DiffusionParams(0.0, p.q, p.m, gy0), free=frozenset({"q", "y0"} | extra))
        incumbent = nls_fit(series, gim, config, seed_key=(0, 1))
        notes.append("external channel negligible: switched to the generalized internal model")
        stages.append({"stage": 0, "label": incumbent.model.label, "objective": incumbent.objective, "r_squared": _jsonable(incumbent.r_squared)})

    lo, hi = onset_window(series, config.exclusion_window)
    trace: list[SmpccStep] = []
    for k in range(1, config.max_shocks + 1):
        if hi < lo:
            notes.append("no admissible onset window left for further shocks")
            break
        if not incumbent.r_squared < 1:
            notes.append("incumbent fits exactly; no residual deviance left to explain")
            break
        proposals = []
        for form in config.candidate_forms:
            template, idx = _with_shock(incumbent.model, form, 0.5 * (lo + hi), extra)
            if len(series) < len(template.free) + 2:
                continue
            fit = nls_fit(series, template, config, grid_shock=idx, seed_key=(k, FORMS.index(form) + 1))
            proposals.append((form, fit))
        if not proposals:
            notes.append(f"too few observations to propose shock {k}")
            break
        form, best = _pick(proposals, config.tie_rtol)
        if best.model.kind == "GBM":
            best = _maybe_internal(series, best, config, extra, notes, k)
        value = smpcc(incumbent.r_squared, best.r_squared)
        accepted = value >= config.smpcc_threshold
        trace.append(SmpccStep(k, form, incumbent.r_squared, best.r_squared, value, accepted, best.objective))
        stages.append({"stage": k, "label": best.model.label, "objective": best.objective, "r_squared": _jsonable(best.r_squared), "accepted": accepted})
        if not accepted:
            break
        incumbent = best

    incumbent.smpcc_trace = trace
    incumbent.stages = stages
    incumbent.notes = notes + incumbent.notes
    return incumbent
