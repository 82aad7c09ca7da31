import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cases import gim_one_f3, random_model
from diffusion_workbench.model import DiffusionModel, DiffusionParams, InadmissibleModelError, ShockTerm, cumulative
from diffusion_workbench.synthgen import SynthSpec, generate


def test_noiseless_equals_curve():
    res = generate(SynthSpec(gim_one_f3(), 25))
    np.testing.assert_array_equal(res.values, cumulative(gim_one_f3(), np.arange(25.0)))
    assert res.clamp_count == 0
    assert res.series.base_year == 2000


def test_same_seed_same_series():
    spec = SynthSpec(gim_one_f3(), 25, noise_sigma=5.0, rng_seed=11)
    a, b = generate(spec), generate(spec)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.series == b.series


def test_noise_variance():
    model = DiffusionModel(DiffusionParams(0.05, 0.2, 1e6))
    sigma = 2.0
    res = [generate(SynthSpec(model, 100, sigma, seed, clamp=False)) for seed in range(100)]
    eps = np.concatenate([r.values - r.clean for r in res])
    assert eps.size == 10_000
    assert abs(eps.var(ddof=1) / sigma**2 - 1) < 0.05
    # mean of the residuals within 3 standard errors of zero
    assert abs(eps.mean()) < 3 * sigma / np.sqrt(eps.size)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(gim_one_f3(), 3)
    with pytest.raises(ValueError):
        SynthSpec(gim_one_f3(), 10, noise_sigma=-1)


def test_inadmissible_model_rejected():
    bad = DiffusionModel(DiffusionParams(0.01, 0.3, 100), (ShockTerm("F2", -3.0, 2, c=0.1),))
    with pytest.raises(InadmissibleModelError):
        generate(SynthSpec(bad, 10))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["Bass", "GBM-F1", "GBM-F3", "GIM"]), rel=st.floats(0, 0.05))
def test_clamped_output_is_valid_series(seed, kind, rel):
    model = random_model(np.random.default_rng(seed), kind, horizon=30)
    res = generate(SynthSpec(model, 30, rel * model.params.m, seed))
    s = res.series
    assert np.all(np.diff(s.z) >= 0) and np.all(s.z >= 0)
    assert res.clamp_count == int(np.sum(res.values != res.clean + rel * model.params.m
                                         * np.random.default_rng(seed).standard_normal(30)))
