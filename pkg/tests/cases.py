"""Seeded model families shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from diffusion_workbench.model import DiffusionModel, DiffusionParams, ShockTerm, is_admissible

KINDS = ("Bass", "GBM-F1", "GBM-F2", "GBM-F3", "GIM")


def random_shock(rng: np.random.Generator, form: str, lo: float = 2.0, hi: float = 30.0) -> ShockTerm:
    a = float(rng.uniform(lo, hi))
    if form == "F1":
        A = float(rng.choice([-1, 1]) * rng.uniform(0.2, 3.0))
        return ShockTerm("F1", max(A, -0.8), a, b=a + float(rng.uniform(0.5, 6.0)))
    c = float(rng.uniform(0.2, 3.0))
    if form == "F2":
        return ShockTerm("F2", float(rng.uniform(-0.8, 6.0)), a, c=c)
    return ShockTerm("F3", float(rng.uniform(-1.0, 12.0)) * c, a, c=c)


def random_model(rng: np.random.Generator, kind: str, horizon: float = 40.0) -> DiffusionModel:
    """Draw until admissible on [0, horizon]."""
    while True:
        q = float(rng.uniform(0.05, 0.6))
        m = float(10 ** rng.uniform(2, 4))
        if kind == "GIM":
            params = DiffusionParams(0.0, q, m, float(m * 10 ** rng.uniform(-4, -2)))
            forms = [str(rng.choice(["F1", "F2", "F3"]))]
        else:
            y0 = 0.0 if kind == "Bass" or rng.random() < 0.5 else float(m * rng.uniform(0, 0.05))
            params = DiffusionParams(float(rng.uniform(1e-3, 0.05)), q, m, y0)
            forms = [] if kind == "Bass" else [kind.split("-")[1]]
        shocks = tuple(random_shock(rng, f) for f in forms)
        model = DiffusionModel(params, shocks)
        if is_admissible(model, horizon):
            return model


def oracle_models(seed: int = 20240101, count: int = 20) -> list[DiffusionModel]:
    rng = np.random.default_rng(seed)
    return [random_model(rng, KINDS[i % len(KINDS)]) for i in range(count)]


def gim_one_f3(y0: float = 2.0) -> DiffusionModel:
    return DiffusionModel(DiffusionParams(0.0, 0.25, 1000.0, y0), (ShockTerm("F3", 10.0, 12.0, c=1.0),))


def gim_two_f3() -> DiffusionModel:
    """Two sharp, well separated F3 shocks, each adding 3 years of transformed time."""
    return DiffusionModel(
        DiffusionParams(0.0, 0.25, 1000.0, 5.0),
        (ShockTerm("F3", 12.0, 6.0, c=2.0), ShockTerm("F3", 12.0, 15.0, c=2.0)),
    )


def plain_bass() -> DiffusionModel:
    return DiffusionModel(DiffusionParams(0.01, 0.3, 1000.0))
