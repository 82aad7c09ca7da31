"""Synthetic adoption series drawn from a known model with white observation noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DiffusionModel, check_admissible, cumulative
from .series import AdoptionSeries


@dataclass(frozen=True)
class SynthSpec:
    model: DiffusionModel
    n_years: int
    noise_sigma: float = 0.0
    rng_seed: int = 0
    country: str = "SYN"
    base_year: int = 2000
    clamp: bool = True

    def __post_init__(self) -> None:
        if self.n_years < 4:
            raise ValueError("n_years must be at least 4")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class SynthResult:
    spec: SynthSpec
    times: np.ndarray
    clean: np.ndarray
    values: np.ndarray
    clamp_count: int

    @property
    def truth(self) -> DiffusionModel:
        return self.spec.model

    @property
    def series(self) -> AdoptionSeries:
        """The observations as a validated series (raises if clamping was off and noise broke monotonicity)."""
        return AdoptionSeries.from_values(self.spec.country, self.spec.base_year, self.values)


def generate(spec: SynthSpec) -> SynthResult:
    """Observe ``spec.model`` at t = 0 .. n_years-1 with iid Normal(0, sigma^2) noise.

    With ``clamp`` on, a draw below the previous observation (or below zero) is
    raised to it so the result is a valid cumulative series.
    """
    t = np.arange(spec.n_years, dtype=float)
    check_admissible(spec.model, float(t[-1]))
    clean = np.asarray(cumulative(spec.model, t))
    rng = np.random.default_rng(spec.rng_seed)
    values = clean + spec.noise_sigma * rng.standard_normal(t.size)
    clamps = 0
    if spec.clamp:
        floor = 0.0
        for k in range(values.size):
            if values[k] < floor:
                values[k] = floor
                clamps += 1
            floor = values[k]
    return SynthResult(spec, t, clean, values, clamps)
