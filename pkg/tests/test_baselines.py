import math

import numpy as np
import pytest

from noiseflow.baselines import GaussianModel, NlfModel, gaussian_fit
from noiseflow.layers import ConditioningContext
from noiseflow.numerics import RngStream


def test_gaussian_fit_population_variance():
    m = gaussian_fit(np.array([0.1, -0.1, 0.1, -0.1]), max_abs_mean=1.0)
    assert m.sigma2 == pytest.approx(0.01)


def test_gaussian_fit_streaming_matches_array(gen):
    x = 0.05 * gen.standard_normal(10_000)
    whole = gaussian_fit(x)
    parts = gaussian_fit(iter(np.array_split(x, 7)))
    assert whole.sigma2 == pytest.approx(parts.sigma2, rel=1e-12)


def test_gaussian_fit_errors():
    with pytest.raises(ValueError, match="two"):
        gaussian_fit(np.array([0.1]))
    with pytest.raises(ValueError, match="variance 0"):
        gaussian_fit(np.zeros(10))
    with pytest.raises(ValueError, match="zero-mean"):
        gaussian_fit(np.array([0.5, 0.7, 0.6]))


def test_gaussian_nll_value():
    m = GaussianModel(sigma2=0.25)
    nll = m.nll_per_dim(np.zeros((2, 2, 2, 1)))
    assert np.allclose(nll, 0.5 * math.log(2 * math.pi * 0.25))


def test_gaussian_sample_variance():
    m = GaussianModel(sigma2=0.01)
    s = m.sample(np.zeros((40, 16, 16, 4)), RngStream(3))
    assert s.var() == pytest.approx(0.01, rel=0.02)


def test_nlf_variance_example():
    m = NlfModel(beta1=0.01, beta2=0.0001)
    assert m.variance(np.array([0.5])) == pytest.approx(0.0051)


def test_nlf_reads_context_coefficients(gen):
    clean = gen.uniform(0, 1, (3, 2, 2, 4))
    ctx = ConditioningContext(clean, iso=100, camera_id=0, nlf_beta1=[0.01, 0.02, 0.03], nlf_beta2=1e-4)
    var = NlfModel().variance(clean, ctx)
    assert np.allclose(var[1], 0.02 * clean[1] + 1e-4)


def test_nlf_missing_coefficients():
    ctx = ConditioningContext(np.zeros((1, 1, 1, 4)), iso=100, camera_id=0, nlf_beta1=np.nan, nlf_beta2=1e-4)
    with pytest.raises(ValueError, match="missing"):
        NlfModel().nll_per_dim(np.zeros((1, 1, 1, 4)), ctx)


def test_nlf_nonpositive_variance_reports_pixel():
    clean = np.zeros((1, 2, 2, 4))
    with pytest.raises(ValueError, match="pixel"):
        NlfModel(beta1=0.01, beta2=-1e-3).variance(clean)


def test_nlf_zero_variance_uses_floor():
    # beta2 = 0 with zero signal stays finite through the floor only if allowed
    clean = np.full((1, 1, 1, 4), 0.5)
    nll = NlfModel(beta1=1e-3, beta2=1e-6).nll_per_dim(np.zeros((1, 1, 1, 4)), clean)
    assert np.isfinite(nll).all()


def test_nlf_is_optimal_on_its_own_samples(gen):
    clean = gen.uniform(0, 1, (200, 8, 8, 4))
    nlf = NlfModel(beta1=4e-3, beta2=1e-5)
    noise = nlf.sample(clean, RngStream(5))
    g = gaussian_fit(noise)
    assert nlf.nll_per_dim(noise, clean).mean() < g.nll_per_dim(noise).mean()
