"""Gaussian and noise-level-function (NLF) baselines."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import as_generator

VARIANCE_FLOOR = 1e-12
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _gauss_nll(n, var):
    var = np.maximum(var, VARIANCE_FLOOR)
    return HALF_LOG_2PI + 0.5 * np.log(var) + 0.5 * n * n / var


def _per_record_mean(a):
    a = np.asarray(a)
    if a.ndim <= 3:
        return float(np.mean(a))
    return a.reshape(a.shape[0], -1).mean(axis=1)


@dataclass
class GaussianModel:
    """Homoscedastic zero-mean Gaussian noise."""

    sigma2: float
    mean: float = 0.0
    name: str = "gaussian"

    def nll_per_dim(self, noise, ctx=None):
        return _per_record_mean(_gauss_nll(np.asarray(noise, dtype=np.float64), self.sigma2))

    def sample(self, ctx, rng):
        shape = ctx.clean.shape if hasattr(ctx, "clean") else np.shape(ctx)
        return as_generator(rng).standard_normal(shape) * math.sqrt(max(self.sigma2, VARIANCE_FLOOR))


def gaussian_fit(values, max_abs_mean=0.01) -> GaussianModel:
    """Population MLE of the variance of a stream of noise values.

    ``values`` may be an array or an iterable of arrays (e.g. minibatches).
    The empirical mean is subtracted and kept on the model; a mean larger
    than ``max_abs_mean`` means the data is not zero-mean noise.
    """
    if isinstance(values, np.ndarray):
        values = [values]
    count, total, total_sq = 0, 0.0, 0.0
    for chunk in values:
        chunk = np.asarray(chunk, dtype=np.float64).ravel()
        count += chunk.size
        total += float(chunk.sum())
        total_sq += float(np.dot(chunk, chunk))
    if count < 2:
        raise ValueError("need at least two values to fit a Gaussian")
    mean = total / count
    sigma2 = total_sq / count - mean * mean
    if not sigma2 > 0:
        raise ValueError("degenerate noise: all values identical (variance 0)")
    if abs(mean) > max_abs_mean:
        raise ValueError(f"noise mean {mean:.4g} exceeds {max_abs_mean}; data is not zero-mean")
    return GaussianModel(sigma2=sigma2, mean=mean)


@dataclass
class NlfModel:
    """Heteroscedastic Gaussian with variance ``beta1 * clean + beta2``.

    Coefficients are scalars or per-record arrays. When left as ``None`` they
    are read from the conditioning context (``ctx.nlf_beta1/2``), which is
    how calibrated per-record NLFs from a dataset are used.
    """

    beta1: object = None
    beta2: object = None
    name: str = "nlf"

    def _coeffs(self, ctx):
        b1 = self.beta1 if self.beta1 is not None else getattr(ctx, "nlf_beta1", None)
        b2 = self.beta2 if self.beta2 is not None else getattr(ctx, "nlf_beta2", None)
        if b1 is None or b2 is None:
            raise ValueError("NLF coefficients missing for these records")
        b1, b2 = np.asarray(b1, dtype=np.float64), np.asarray(b2, dtype=np.float64)
        if np.any(np.isnan(b1)) or np.any(np.isnan(b2)):
            raise ValueError("NLF coefficients missing (NaN) for some records")
        return b1, b2

    def variance(self, clean, ctx=None):
        clean = np.asarray(clean, dtype=np.float64)
        b1, b2 = self._coeffs(ctx)
        if b1.ndim == 1 and clean.ndim == 4:
            b1, b2 = b1.reshape(-1, 1, 1, 1), b2.reshape(-1, 1, 1, 1)
        var = b1 * clean + b2
        if np.any(var <= 0):
            bad = np.unravel_index(int(np.argmax(var <= 0)), var.shape)
            raise ValueError(f"non-positive NLF variance at pixel {tuple(int(i) for i in bad)}")
        return var

    def nll_per_dim(self, noise, ctx):
        clean = ctx.clean if hasattr(ctx, "clean") else ctx
        var = self.variance(clean, ctx)
        return _per_record_mean(_gauss_nll(np.asarray(noise, dtype=np.float64), var))

    def sample(self, ctx, rng):
        clean = ctx.clean if hasattr(ctx, "clean") else ctx
        var = np.maximum(self.variance(clean, ctx), VARIANCE_FLOOR)
        return as_generator(rng).standard_normal(var.shape) * np.sqrt(var)


def gaussian_nll(model: GaussianModel, noise):
    return model.nll_per_dim(noise)


def nlf_nll(model: NlfModel, noise, clean):
    return model.nll_per_dim(noise, clean)


def gaussian_sample(model: GaussianModel, clean, rng):
    return model.sample(clean, rng)


def nlf_sample(model: NlfModel, clean, rng):
    return model.sample(clean, rng)
