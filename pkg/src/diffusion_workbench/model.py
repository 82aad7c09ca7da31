"""Closed-form Bass, Generalized Bass (GBM) and Generalized Internal (GIM) models.

Time is measured in years from the series base year. Every model is evaluated
through the transformed time ``H(t) = t + sum_i G_i(t)``, where ``G_i`` is the
integral of the i-th shock term; substituting ``H`` for ``t`` in the unperturbed
solution gives the shocked one.

The array kernels prefixed with an underscore take shocks as a tuple of form
codes plus a ``(k, 3)`` parameter array ``(A, a, b_or_c)``. They skip all
validation and are what the calibrator calls in its inner loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

FORMS = ("F1", "F2", "F3")
ADMISSIBILITY_STEP = 0.05
_FORM_CODE = {"F1": 1, "F2": 2, "F3": 3}
_H_TOL = 1e-12


class DomainError(ValueError):
    """Raised when an operation is evaluated outside its mathematical domain."""


class InadmissibleModelError(ValueError):
    """Raised when the transformed time H(t) decreases somewhere on the horizon."""


@dataclass(frozen=True)
class DiffusionParams:
    """Innovation ``alpha``, imitation ``q`` (per year), market potential ``m`` and ``y0 = Y(0)``."""

    alpha: float
    q: float
    m: float
    y0: float = 0.0

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.alpha, self.q, self.m, self.y0)):
            raise DomainError(f"non-finite diffusion parameters: {self}")
        if self.alpha < 0 or self.q < 0 or self.alpha + self.q <= 0:
            raise DomainError(f"need alpha >= 0, q >= 0, alpha + q > 0 (got alpha={self.alpha}, q={self.q})")
        if self.m <= 0:
            raise DomainError(f"market potential must be positive (got m={self.m})")
        if not 0 <= self.y0 < self.m:
            raise DomainError(f"need 0 <= y0 < m (got y0={self.y0}, m={self.m})")
        if self.alpha == 0 and self.y0 <= 0:
            raise DomainError("a pure-imitation process (alpha = 0) needs y0 > 0")


@dataclass(frozen=True)
class ShockTerm:
    """One shock g_i(t).

    F1 is a rectangle ``A`` on ``[a, b]``; F2 jumps to ``A`` at ``a`` and decays at
    rate ``c``; F3 rises gradually from ``a`` as ``A (t-a) exp(-c (t-a))``.
    """

    form: str
    A: float
    a: float
    b: float | None = None
    c: float | None = None

    def __post_init__(self) -> None:
        if self.form not in _FORM_CODE:
            raise DomainError(f"unknown shock form {self.form!r}; expected one of {FORMS}")
        if not (math.isfinite(self.A) and math.isfinite(self.a)) or self.a <= 0:
            raise DomainError(f"{self.form} needs finite A and onset a > 0 (got A={self.A}, a={self.a})")
        if self.form == "F1":
            if self.b is None or self.c is not None:
                raise DomainError("F1 takes (A, a, b) and no decay rate c")
            if not (math.isfinite(self.b) and self.b > self.a):
                raise DomainError(f"F1 needs b > a (got a={self.a}, b={self.b})")
        else:
            if self.c is None or self.b is not None:
                raise DomainError(f"{self.form} takes (A, a, c) and no end time b")
            if not math.isfinite(self.c):
                raise DomainError(f"{self.form} needs a finite decay rate")
            if self.form == "F3" and self.c <= 0:
                raise DomainError(f"F3 needs c > 0 (got c={self.c})")

    @property
    def code(self) -> int:
        return _FORM_CODE[self.form]

    @property
    def third(self) -> float:
        return float(self.b if self.form == "F1" else self.c)

    def as_row(self) -> tuple[float, float, float]:
        return (self.A, self.a, self.third)

    def value(self, t):
        return shock_value(self, t)

    def integral(self, t):
        return shock_integral(self, t)

    def total_effect(self) -> float:
        """G(inf): the total transformed time the shock adds (inf if it never ends)."""
        if self.form == "F1":
            return self.A * (self.b - self.a)
        if self.c <= 0:
            return math.inf if self.A > 0 else -math.inf if self.A < 0 else 0.0
        return self.A / self.c if self.form == "F2" else self.A / self.c**2

    def params(self) -> dict[str, float]:
        if self.form == "F1":
            return {"A": self.A, "a": self.a, "b": self.b}
        return {"A": self.A, "a": self.a, "c": self.c}

    @classmethod
    def from_row(cls, form: str, row: Sequence[float]) -> "ShockTerm":
        A, a, third = (float(x) for x in row)
        if form == "F1":
            return cls(form, A, a, b=third)
        return cls(form, A, a, c=third)


BASE_NAMES = ("alpha", "q", "m", "y0")


def shock_names(index: int, shock: ShockTerm) -> tuple[str, str, str]:
    last = "b" if shock.form == "F1" else "c"
    return (f"shock{index + 1}.A", f"shock{index + 1}.a", f"shock{index + 1}.{last}")


@dataclass(frozen=True)
class DiffusionModel:
    """Diffusion parameters plus an onset-ordered tuple of shocks.

    ``free`` names the parameters an estimator may move; everything else is held
    at its current value. ``shock_cutoff`` switches every shock off after the
    given time, giving the imitation-only continuation used for what-if
    horizons.
    """

    params: DiffusionParams
    shocks: tuple[ShockTerm, ...] = ()
    free: frozenset[str] | None = None
    shock_cutoff: float | None = None

    def __post_init__(self) -> None:
        shocks = tuple(sorted(self.shocks, key=lambda s: s.a))
        object.__setattr__(self, "shocks", shocks)
        names = self.parameter_names()
        if self.free is None:
            default = {"q"} | {n for n in names if n.startswith("shock")}
            default |= {"alpha"} if self.params.alpha > 0 else set()
            default |= {"y0"} if self.params.y0 > 0 else set()
            object.__setattr__(self, "free", frozenset(default))
        else:
            free = frozenset(self.free)
            unknown = free - set(names)
            if unknown:
                raise ValueError(f"unknown free parameters: {sorted(unknown)}")
            object.__setattr__(self, "free", free)

    @property
    def kind(self) -> str:
        if self.params.alpha == 0:
            return "GIM"
        return "GBM" if self.shocks else "Bass"

    @property
    def label(self) -> str:
        """Shock forms in onset order joined by '+', or the model kind when unshocked."""
        return "+".join(s.form for s in self.shocks) if self.shocks else self.kind

    @property
    def free_mask(self) -> dict[str, bool]:
        return {n: n in self.free for n in self.parameter_names()}

    def parameter_names(self) -> list[str]:
        names = list(BASE_NAMES)
        for i, s in enumerate(self.shocks):
            names.extend(shock_names(i, s))
        return names

    def values(self) -> dict[str, float]:
        p = self.params
        out = {"alpha": p.alpha, "q": p.q, "m": p.m, "y0": p.y0}
        for i, s in enumerate(self.shocks):
            out.update(zip(shock_names(i, s), s.as_row()))
        return out

    def with_values(self, values: Mapping[str, float]) -> "DiffusionModel":
        """Return a copy with the named parameters replaced (shock indices refer to the current order)."""
        cur = self.values()
        cur.update(values)
        params = DiffusionParams(cur["alpha"], cur["q"], cur["m"], cur["y0"])
        shocks = [
            ShockTerm.from_row(s.form, [cur[n] for n in shock_names(i, s)])
            for i, s in enumerate(self.shocks)
        ]
        order = sorted(range(len(shocks)), key=lambda k: shocks[k].a)
        rename = {}
        for new_k, old_k in enumerate(order):
            s = shocks[old_k]
            rename.update(zip(shock_names(old_k, s), shock_names(new_k, s)))
        free = frozenset(rename.get(n, n) for n in self.free)
        return DiffusionModel(params, tuple(shocks[k] for k in order), free, self.shock_cutoff)

    def with_cutoff(self, cutoff: float | None) -> "DiffusionModel":
        return replace(self, shock_cutoff=cutoff)

    def without_shocks(self) -> "DiffusionModel":
        free = frozenset(n for n in self.free if not n.startswith("shock"))
        return DiffusionModel(self.params, (), free, None)

    def pack(self) -> tuple[tuple[int, ...], np.ndarray]:
        forms = tuple(s.code for s in self.shocks)
        rows = np.array([s.as_row() for s in self.shocks], dtype=float).reshape(len(forms), 3)
        return forms, rows


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    cumulative: np.ndarray
    fraction: np.ndarray
    annual_rate: np.ndarray
    growth_rate: np.ndarray
    hazard: np.ndarray
    base_year: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def years(self) -> np.ndarray:
        return self.base_year + self.times


# ---------------------------------------------------------------------------
# array kernels


def _shock_g(code: int, A: float, a: float, third: float, t: np.ndarray) -> np.ndarray:
    x = t - a
    if code == 1:
        return np.where((t >= a) & (t <= third), A, 0.0)
    if code == 2:
        return np.where(x >= 0, A * np.exp(-third * np.maximum(x, 0.0)), 0.0)
    xp = np.maximum(x, 0.0)
    return np.where(x > 0, A * xp * np.exp(-third * xp), 0.0)


def _shock_G(code: int, A: float, a: float, third: float, t: np.ndarray) -> np.ndarray:
    x = np.maximum(t - a, 0.0)
    if code == 1:
        return A * (np.minimum(t, third) - a) * (t > a)
    c = third
    if code == 2:
        if c == 0.0:
            return A * x
        return A * (-np.expm1(-c * x)) / c
    u = c * x
    small = np.abs(u) < 0.05
    # 1 - e^-u (1 + u) cancels for small u; use its series sum_n (-1)^n (n-1)/n! u^n
    series = sum(((-1) ** n * (n - 1) / math.factorial(n)) * u**n for n in range(2, 10))
    closed = -np.expm1(-u) - u * np.exp(-u)
    return (A / (c * c)) * np.where(small, series, closed)


def _intervention(forms, rows, t, cutoff=None) -> np.ndarray:
    h = np.ones_like(t, dtype=float)
    for code, (A, a, third) in zip(forms, rows):
        h = h + _shock_g(code, A, a, third, t)
    if cutoff is not None:
        h = np.where(t > cutoff, 1.0, h)
    return h


def _transformed_time(forms, rows, t, cutoff=None) -> np.ndarray:
    tt = t if cutoff is None else np.minimum(t, cutoff)
    H = tt.astype(float, copy=True)
    for code, (A, a, third) in zip(forms, rows):
        H = H + _shock_G(code, A, a, third, tt)
    if cutoff is not None:
        H = H + np.maximum(t - cutoff, 0.0)
    return H


def _cumulative_from_H(alpha, q, m, y0, H) -> np.ndarray:
    if alpha == 0.0:
        return m * y0 / (y0 + (m - y0) * np.exp(-q * H))
    rho0 = alpha * (m - y0) / (alpha * m + q * y0)
    e = np.exp(-(alpha + q) * H)
    return m * (1 - rho0 * e) / (1 + (q / alpha) * rho0 * e)


def _critical_points(forms, rows, horizon: float) -> list[float]:
    pts = []
    for code, (A, a, third) in zip(forms, rows):
        pts.append(a)
        if code == 1:
            pts.append(third)
        elif code == 3:
            pts.append(a + 1.0 / third)
    return [p for p in pts if 0.0 <= p <= horizon]


def admissibility_grid(horizon: float, step: float = ADMISSIBILITY_STEP) -> np.ndarray:
    n = int(math.ceil(horizon / step))
    return np.linspace(0.0, n * step, n + 1)


def _min_intervention(forms, rows, grid, horizon, cutoff=None) -> float:
    if not forms:
        return 1.0
    pts = _critical_points(forms, rows, horizon)
    t = np.concatenate([grid, np.asarray(pts, dtype=float)]) if pts else grid
    return float(np.min(_intervention(forms, rows, t, cutoff)))


# ---------------------------------------------------------------------------
# public operations


def _as_array(t):
    arr = np.asarray(t, dtype=float)
    return arr, arr.ndim == 0


def _out(arr, scalar):
    return float(arr) if scalar else arr


def shock_value(shock: ShockTerm, t):
    """g_i(t); right-continuous at the onset (F1/F2 take A there, F3 takes 0)."""
    arr, scalar = _as_array(t)
    return _out(_shock_g(shock.code, shock.A, shock.a, shock.third, arr), scalar)


def shock_integral(shock: ShockTerm, t):
    """G_i(t) = integral of g_i over [0, t], in closed form."""
    arr, scalar = _as_array(t)
    return _out(_shock_G(shock.code, shock.A, shock.a, shock.third, arr), scalar)


def intervention(model: DiffusionModel, t):
    """h(t) = 1 + sum of shock values."""
    arr, scalar = _as_array(t)
    forms, rows = model.pack()
    return _out(_intervention(forms, rows, arr, model.shock_cutoff), scalar)


def is_admissible(model: DiffusionModel, horizon: float) -> bool:
    forms, rows = model.pack()
    grid = admissibility_grid(max(horizon, 0.0))
    return _min_intervention(forms, rows, grid, horizon, model.shock_cutoff) >= -_H_TOL


def check_admissible(model: DiffusionModel, horizon: float) -> None:
    """Raise InadmissibleModelError unless H is nondecreasing on [0, horizon].

    h is sampled every 0.05 years plus at every onset, F1 end and F3 extremum.
    """
    if not is_admissible(model, horizon):
        raise InadmissibleModelError(
            f"transformed time decreases on [0, {horizon:g}]: negative shocks too strong in {model.label}"
        )


def carryover_time(model: DiffusionModel, t, check: bool = True):
    """Transformed time H(t) = t + sum_i G_i(t)."""
    arr, scalar = _as_array(t)
    if np.any(arr < 0):
        raise DomainError("carryover time is defined for t >= 0")
    if check and arr.size:
        check_admissible(model, float(np.max(arr)))
    forms, rows = model.pack()
    return _out(_transformed_time(forms, rows, arr, model.shock_cutoff), scalar)


def bass_cumulative(params: DiffusionParams, t):
    """Closed-form Bass solution with Y(0) = 0."""
    if params.alpha <= 0:
        raise DomainError("the natural-initial-condition Bass solution needs alpha > 0")
    arr, scalar = _as_array(t)
    a, q, m = params.alpha, params.q, params.m
    e = np.exp(-(a + q) * arr)
    return _out(m * (1 - e) / (1 + (q / a) * e), scalar)


def gbm_cumulative(model: DiffusionModel, t):
    """Cumulative adoptions of the Generalized Bass model (alpha > 0)."""
    if model.params.alpha <= 0:
        raise DomainError("gbm_cumulative needs alpha > 0; use gim_cumulative for alpha = 0")
    H = carryover_time(model, t)
    p = model.params
    return _out(_cumulative_from_H(p.alpha, p.q, p.m, p.y0, np.asarray(H)), np.ndim(H) == 0)


def gim_cumulative(params: DiffusionParams, shocks: Iterable[ShockTerm], t, shock_cutoff: float | None = None):
    """Logistic-in-transformed-time solution of the Generalized Internal model."""
    if params.alpha != 0:
        raise DomainError("gim_cumulative needs alpha = 0")
    if params.y0 <= 0:
        raise DomainError("gim_cumulative needs y0 > 0")
    model = DiffusionModel(params, tuple(shocks), shock_cutoff=shock_cutoff)
    H = carryover_time(model, t)
    return _out(_cumulative_from_H(0.0, params.q, params.m, params.y0, np.asarray(H)), np.ndim(H) == 0)


def cumulative(model: DiffusionModel, t):
    """Y(t) for any model, dispatching on alpha."""
    if model.params.alpha == 0:
        return gim_cumulative(model.params, model.shocks, t, model.shock_cutoff)
    return gbm_cumulative(model, t)


def annual_rate(model: DiffusionModel, t):
    """S(t) = h(t) (alpha + q Y/m) (m - Y)."""
    p = model.params
    arr, scalar = _as_array(t)
    Y = np.asarray(cumulative(model, arr))
    h = intervention(model, arr)
    return _out(h * (p.alpha + p.q * Y / p.m) * (p.m - Y), scalar)


def hazard(model: DiffusionModel, t):
    """h(t) (alpha + q F(t)); reduces to alpha + q F without shocks."""
    p = model.params
    arr, scalar = _as_array(t)
    F = np.asarray(cumulative(model, arr)) / p.m
    return _out(intervention(model, arr) * (p.alpha + p.q * F), scalar)


def growth_rate(model: DiffusionModel, t):
    """Relative growth r(t) = S(t)/Y(t); for the GIM exactly h(t) q (1 - Y/m)."""
    p = model.params
    arr, scalar = _as_array(t)
    Y = np.asarray(cumulative(model, arr))
    if np.any(Y <= 0):
        raise DomainError("growth rate undefined where cumulative adoption is zero")
    h = intervention(model, arr)
    if p.alpha == 0:
        r = h * p.q * (1 - Y / p.m)
    else:
        r = h * (p.alpha + p.q * Y / p.m) * (p.m - Y) / Y
    return _out(r, scalar)


def trajectory(model: DiffusionModel, times, base_year: float = 0.0) -> Trajectory:
    times = np.asarray(times, dtype=float)
    p = model.params
    Y = np.asarray(cumulative(model, times))
    h = np.asarray(intervention(model, times))
    rate = h * (p.alpha + p.q * Y / p.m) * (p.m - Y)
    with np.errstate(divide="ignore", invalid="ignore"):
        growth = np.where(Y > 0, rate / np.where(Y > 0, Y, 1.0), np.nan)
    return Trajectory(
        times=times,
        cumulative=Y,
        fraction=Y / p.m,
        annual_rate=rate,
        growth_rate=growth,
        hazard=h * (p.alpha + p.q * Y / p.m),
        base_year=base_year,
    )


def implied_transformed_time(params: DiffusionParams, y) -> np.ndarray:
    """Invert the unshocked solution: the H at which the model reaches level ``y``.

    Levels are clipped into (0, m) so noisy observations still map somewhere.
    """
    y = np.asarray(y, dtype=float)
    a, q, m, y0 = params.alpha, params.q, params.m, params.y0
    F = np.clip(y / m, 1e-12, 1 - 1e-12)
    if a == 0:
        F0 = y0 / m
        return (np.log(F / (1 - F)) - math.log(F0 / (1 - F0))) / q
    rho0 = a * (m - y0) / (a * m + q * y0)
    x = (1 - F) / (1 + F * q / a)
    return -np.log(x / rho0) / (a + q)
