"""Bijective layers of the noise flow.

Direction convention: ``forward`` maps base samples to noise (generative),
``inverse`` maps noise to base samples (normalizing). Both return the
transformed batch and a per-sample log-determinant of *their own* Jacobian,
so ``logdet_forward + logdet_inverse == 0``.

All tensors are batched as ``(N, H, W, C)`` float64 arrays.

Training only ever runs the inverse direction, so each layer has a
``backward`` that differentiates ``inverse``. Pass a dict as ``cache`` to
``inverse`` to record what ``backward`` needs; ``backward`` accumulates
parameter gradients into the shared :class:`ParamStore` and returns the
gradient w.r.t. the layer input ``y``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import NonFiniteError, ParamStore, SingularMatrixError, as_generator

try:
    from . import _kernels
except ImportError:  # numba missing: numpy path only
    _kernels = None

DEFAULT_ISO_SET = (100, 400, 800, 1600)
USE_FUSED_KERNELS = True


@dataclass
class ConditioningContext:
    """Per-sample conditioning: clean signal, ISO level and camera index.

    ``clean`` has the same ``(N, H, W, C)`` shape as the noise; ``iso`` and
    ``camera_id`` are length-``N`` integer arrays. ``gain_amplified`` marks
    records whose clean image still carries the sensor gain; for those the
    model divides by the learned gain before using it.
    """

    clean: np.ndarray
    iso: np.ndarray
    camera_id: np.ndarray
    gain_amplified: Optional[np.ndarray] = None
    nlf_beta1: Optional[np.ndarray] = None
    nlf_beta2: Optional[np.ndarray] = None

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.float64)
        if self.clean.ndim == 3:
            self.clean = self.clean[None]
        n = self.clean.shape[0]
        self.iso = np.broadcast_to(np.asarray(self.iso, dtype=np.int64), (n,))
        self.camera_id = np.broadcast_to(np.asarray(self.camera_id, dtype=np.int64), (n,))
        if self.gain_amplified is not None:
            self.gain_amplified = np.broadcast_to(np.asarray(self.gain_amplified, dtype=bool), (n,))
        for name in ("nlf_beta1", "nlf_beta2"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.broadcast_to(np.asarray(val, dtype=np.float64), (n,)))

    def __len__(self) -> int:
        return self.clean.shape[0]

    def subset(self, idx) -> "ConditioningContext":
        def pick(a):
            return None if a is None else np.asarray(a)[idx]

        return ConditioningContext(
            clean=self.clean[idx],
            iso=self.iso[idx],
            camera_id=self.camera_id[idx],
            gain_amplified=pick(self.gain_amplified),
            nlf_beta1=pick(self.nlf_beta1),
            nlf_beta2=pick(self.nlf_beta2),
        )

    def with_clean(self, clean: np.ndarray) -> "ConditioningContext":
        return ConditioningContext(clean, self.iso, self.camera_id, None, self.nlf_beta1, self.nlf_beta2)


def _bcast(v: np.ndarray) -> np.ndarray:
    return v.reshape(-1, 1, 1, 1)


def _need_cache(cache):
    if not cache:
        raise RuntimeError("backward called without a cache from a preceding inverse pass")


class SignalLayer:
    """Scale by ``s = sqrt(beta1 * clean + beta2)`` with ``beta = exp(b)``."""

    kind = "S"

    def __init__(self, params: ParamStore, prefix: str = "signal", b1: float = -5.0, b2: float = 0.0):
        self.params = params
        self.n_b1 = f"{prefix}.b1"
        self.n_b2 = f"{prefix}.b2"
        params.add(self.n_b1, [b1])
        params.add(self.n_b2, [b2])

    @property
    def beta1(self) -> float:
        return float(np.exp(self.params[self.n_b1][0]))

    @property
    def beta2(self) -> float:
        return float(np.exp(self.params[self.n_b2][0]))

    @property
    def param_names(self):
        return [self.n_b1, self.n_b2]

    def variance(self, clean: np.ndarray) -> np.ndarray:
        if np.any(clean < -1e-9):
            raise ValueError("clean signal contains negative values")
        return self.beta1 * clean + self.beta2

    def forward(self, x, ctx: ConditioningContext):
        v = self.variance(ctx.clean)
        s = np.sqrt(v)
        return s * x, 0.5 * np.log(v).sum(axis=(1, 2, 3))

    def inverse(self, y, ctx: ConditioningContext, cache: Optional[dict] = None):
        v = self.variance(ctx.clean)
        x = y / np.sqrt(v)
        if cache is not None:
            cache.update(v=v, x=x, clean=ctx.clean)
        return x, -0.5 * np.log(v).sum(axis=(1, 2, 3))

    def backward(self, cache, grad_x, grad_logdet):
        _need_cache(cache)
        v, x = cache["v"], cache["x"]
        grad_y = grad_x / np.sqrt(v)
        # x = y * v^-1/2, logdet = -1/2 sum log v
        grad_v = -0.5 * (grad_x * x + _bcast(grad_logdet)) / v
        b1, b2 = self.beta1, self.beta2
        self.params.grad(self.n_b1)[0] += np.sum(grad_v * cache["clean"]) * b1
        self.params.grad(self.n_b2)[0] += np.sum(grad_v) * b2
        cache["grad_clean"] = grad_v * b1
        return grad_y


class GainLayer:
    """Scale by ``gamma = psi_m * exp(v_iso) * ISO``.

    ``psi_m = exp(w_m)`` exists only when camera-specific gains are enabled.
    An ISO outside ``iso_set`` is an error unless ``nearest_iso`` is set, in
    which case the closest configured level's ``v`` is used with the true
    ISO value.
    """

    kind = "G"

    def __init__(self, params: ParamStore, iso_set: Sequence[int] = DEFAULT_ISO_SET,
                 camera_count: Optional[int] = None, prefix: str = "gain"):
        self.params = params
        self.iso_set = tuple(int(i) for i in iso_set)
        if len(set(self.iso_set)) != len(self.iso_set) or any(i <= 0 for i in self.iso_set):
            raise ValueError(f"invalid ISO set {self.iso_set}")
        self.camera_count = camera_count
        self.nearest_iso = False
        self.n_v = f"{prefix}.v"
        self.n_w = f"{prefix}.w" if camera_count else None
        params.add(self.n_v, np.full(len(self.iso_set), -np.log(200.0)))
        if camera_count:
            params.add(self.n_w, np.zeros(camera_count))

    @property
    def param_names(self):
        return [self.n_v] + ([self.n_w] if self.n_w else [])

    def iso_index(self, iso) -> np.ndarray:
        iso = np.asarray(iso, dtype=np.int64)
        levels = np.asarray(self.iso_set)
        match = iso[..., None] == levels
        found = match.any(axis=-1)
        if not np.all(found):
            if not self.nearest_iso:
                bad = sorted(set(iso[~found].tolist()))
                raise ValueError(f"ISO level(s) {bad} not in configured set {list(self.iso_set)}")
            return np.abs(iso[..., None] - levels).argmin(axis=-1)
        return match.argmax(axis=-1)

    def _camera(self, ctx):
        cam = np.asarray(ctx.camera_id, dtype=np.int64)
        if self.n_w is not None and (np.any(cam < 0) or np.any(cam >= self.camera_count)):
            raise ValueError(f"camera id out of range [0, {self.camera_count})")
        return cam

    def log_gamma(self, ctx: ConditioningContext) -> np.ndarray:
        idx = self.iso_index(ctx.iso)
        lg = self.params[self.n_v][idx] + np.log(np.asarray(ctx.iso, dtype=np.float64))
        if self.n_w is not None:
            lg = lg + self.params[self.n_w][self._camera(ctx)]
        return lg

    def gamma(self, ctx: ConditioningContext) -> np.ndarray:
        return np.exp(self.log_gamma(ctx))

    def forward(self, x, ctx: ConditioningContext):
        lg = self.log_gamma(ctx)
        d = np.prod(x.shape[1:])
        return x * _bcast(np.exp(lg)), d * lg

    def inverse(self, y, ctx: ConditioningContext, cache: Optional[dict] = None):
        lg = self.log_gamma(ctx)
        d = np.prod(y.shape[1:])
        x = y * _bcast(np.exp(-lg))
        if cache is not None:
            cache.update(lg=lg, x=x, ctx=ctx, d=d)
        return x, -d * lg

    def add_log_gamma_grad(self, ctx: ConditioningContext, grad_lg: np.ndarray) -> None:
        np.add.at(self.params.grad(self.n_v), self.iso_index(ctx.iso), grad_lg)
        if self.n_w is not None:
            np.add.at(self.params.grad(self.n_w), self._camera(ctx), grad_lg)

    def backward(self, cache, grad_x, grad_logdet):
        _need_cache(cache)
        lg, x = cache["lg"], cache["x"]
        grad_y = grad_x * _bcast(np.exp(-lg))
        grad_lg = -np.sum(grad_x * x, axis=(1, 2, 3)) - cache["d"] * grad_logdet
        self.add_log_gamma_grad(cache["ctx"], grad_lg)
        return grad_y


class AffineCoupling:
    """Affine coupling with a per-pixel two-stage network.

    The channels are split into halves; ``parity`` picks which half is
    transformed (A) and which conditions the transform (B). The conditioner
    is ``relu(x_B @ W1 + bias1) @ W2 + bias2``, whose output holds the scale
    logits ``a`` and shifts ``b`` for the A half: ``y_A = exp(a) * x_A + b``.

    With ``scale_clamp`` set, raw logits pass through
    ``clamp * tanh(raw / clamp)`` first. Unbounded logits let stacked
    couplings amplify each other until ``exp`` overflows.
    """

    kind = "A"

    def __init__(self, params: ParamStore, prefix: str, channels: int = 4, hidden: int = 32,
                 parity: int = 0, rng=None, scale_clamp: Optional[float] = None):
        if channels % 2:
            raise ValueError("affine coupling needs an even channel count")
        self.params = params
        self.channels = channels
        self.hidden = hidden
        half = channels // 2
        lo, hi = np.arange(half), np.arange(half, channels)
        self.idx_a, self.idx_b = (lo, hi) if parity % 2 == 0 else (hi, lo)
        self.parity = parity % 2
        self.scale_clamp = scale_clamp
        self.n_w1, self.n_c1 = f"{prefix}.W1", f"{prefix}.bias1"
        self.n_w2, self.n_c2 = f"{prefix}.W2", f"{prefix}.bias2"
        gen = as_generator(rng if rng is not None else 0)
        params.add(self.n_w1, gen.standard_normal((half, hidden)) / np.sqrt(half))
        params.add(self.n_c1, np.zeros(hidden))
        params.add(self.n_w2, np.zeros((hidden, channels)))
        params.add(self.n_c2, np.zeros(channels))

    @property
    def param_names(self):
        return [self.n_w1, self.n_c1, self.n_w2, self.n_c2]

    def _net(self, xb):
        p = self.params
        half = self.channels // 2
        # 2-D products keep numpy on the BLAS path
        pre = xb.reshape(-1, half) @ p[self.n_w1]
        pre += p[self.n_c1]
        h = np.maximum(pre, 0.0)
        out = h @ p[self.n_w2]
        out += p[self.n_c2]
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("coupling network produced non-finite output")
        out = out.reshape(xb.shape[:-1] + (self.channels,))
        a = out[..., :half]
        if self.scale_clamp:
            a = self.scale_clamp * np.tanh(a / self.scale_clamp)
        return a, out[..., half:], pre, h

    def forward(self, x, ctx=None):
        xa, xb = x[..., self.idx_a], x[..., self.idx_b]
        a, b, _, _ = self._net(xb)
        y = np.empty_like(x)
        y[..., self.idx_a] = np.exp(a) * xa + b
        y[..., self.idx_b] = xb
        return y, a.sum(axis=(1, 2, 3))

    def inverse(self, y, ctx=None, cache: Optional[dict] = None):
        if self.fused:
            return self._inverse_fused(y, cache)
        ya, yb = y[..., self.idx_a], y[..., self.idx_b]
        a, b, pre, h = self._net(yb)
        ea = np.exp(-a)
        xa = (ya - b) * ea
        x = np.empty_like(y)
        x[..., self.idx_a] = xa
        x[..., self.idx_b] = yb
        if cache is not None:
            cache.update(xa=xa, yb=yb, ea=ea, pre=pre, h=h, a=a)
        return x, -a.sum(axis=(1, 2, 3))

    def backward(self, cache, grad_x, grad_logdet):
        _need_cache(cache)
        if "fused" in cache:
            return self._backward_fused(cache, grad_x, grad_logdet)
        p, c = self.params, self.channels
        xa, yb, ea, pre, h = cache["xa"], cache["yb"], cache["ea"], cache["pre"], cache["h"]
        gxa = grad_x[..., self.idx_a]
        grad_a = -gxa * xa - _bcast(grad_logdet)
        if self.scale_clamp:
            grad_a = grad_a * (1.0 - (cache["a"] / self.scale_clamp) ** 2)
        grad_b = -gxa * ea
        g_out = np.concatenate([grad_a, grad_b], axis=-1).reshape(-1, c)
        p.grad(self.n_w2)[...] += h.T @ g_out
        p.grad(self.n_c2)[...] += g_out.sum(axis=0)
        g_pre = g_out @ p[self.n_w2].T
        g_pre *= pre > 0
        p.grad(self.n_w1)[...] += yb.reshape(-1, c // 2).T @ g_pre
        p.grad(self.n_c1)[...] += g_pre.sum(axis=0)
        grad_y = np.empty_like(grad_x)
        grad_y[..., self.idx_a] = gxa * ea
        grad_y[..., self.idx_b] = grad_x[..., self.idx_b] + (g_pre @ p[self.n_w1].T).reshape(yb.shape)
        return grad_y

    # -- numba path ------------------------------------------------------------
    @property
    def fused(self) -> bool:
        return USE_FUSED_KERNELS and _kernels is not None

    def _inverse_fused(self, y, cache):
        p, c = self.params, self.channels
        y2 = np.ascontiguousarray(y, dtype=np.float64).reshape(-1, c)
        x2 = np.empty_like(y2)
        a = np.empty((y2.shape[0], c // 2))
        _kernels.coupling_inverse(y2, self.idx_a, self.idx_b, p[self.n_w1], p[self.n_c1],
                                  p[self.n_w2], p[self.n_c2], float(self.scale_clamp or 0.0), x2, a)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(x2))):
            raise NonFiniteError("coupling network produced non-finite output")
        if cache is not None:
            cache.update(fused=True, y=y2, x=x2, a=a)
        return x2.reshape(y.shape), -a.reshape(y.shape[0], -1).sum(axis=1)

    def _backward_fused(self, cache, grad_x, grad_logdet):
        p, c = self.params, self.channels
        y2 = cache["y"]
        n = grad_x.shape[0]
        gld = np.repeat(np.asarray(grad_logdet, dtype=np.float64), y2.shape[0] // n)
        gx = np.ascontiguousarray(grad_x, dtype=np.float64).reshape(-1, c)
        gy = np.empty_like(gx)
        _kernels.coupling_backward(y2, cache["x"], cache["a"], gx, gld, self.idx_a, self.idx_b,
                                   p[self.n_w1], p[self.n_c1], p[self.n_w2],
                                   float(self.scale_clamp or 0.0), gy,
                                   p.grad(self.n_w1), p.grad(self.n_c1), p.grad(self.n_w2), p.grad(self.n_c2))
        return gy.reshape(grad_x.shape)


def random_orthogonal(n: int, rng=None) -> np.ndarray:
    gen = as_generator(rng if rng is not None else 0)
    q, r = np.linalg.qr(gen.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class ChannelMix:
    """Invertible 1x1 convolution: every pixel's channel vector is multiplied by ``A``."""

    kind = "M"
    min_abs_det = 1e-12

    def __init__(self, params: ParamStore, prefix: str, channels: int = 4, rng=None):
        self.params = params
        self.channels = channels
        self.n_a = f"{prefix}.A"
        params.add(self.n_a, random_orthogonal(channels, rng))

    @property
    def param_names(self):
        return [self.n_a]

    def _matrix(self):
        a = self.params[self.n_a]
        sign, logdet = np.linalg.slogdet(a)
        if sign == 0 or not np.isfinite(logdet) or logdet < np.log(self.min_abs_det):
            raise SingularMatrixError(f"{self.n_a} is numerically singular (|det| < {self.min_abs_det})")
        return a, logdet

    def forward(self, x, ctx=None):
        a, logdet = self._matrix()
        hw = x.shape[1] * x.shape[2]
        return x @ a.T, np.full(x.shape[0], hw * logdet)

    def inverse(self, y, ctx=None, cache: Optional[dict] = None):
        a, logdet = self._matrix()
        a_inv = np.linalg.inv(a)
        x = y @ a_inv.T
        hw = y.shape[1] * y.shape[2]
        if cache is not None:
            cache.update(y=y, a_inv=a_inv, hw=hw)
        return x, np.full(y.shape[0], -hw * logdet)

    def backward(self, cache, grad_x, grad_logdet):
        _need_cache(cache)
        a_inv, y, c = cache["a_inv"], cache["y"], self.channels
        # x = y B^T with B = A^-1; dL/dA = -B^T (dL/dB) B^T
        g_b = grad_x.reshape(-1, c).T @ y.reshape(-1, c)
        g_a = -a_inv.T @ g_b @ a_inv.T
        g_a -= cache["hw"] * np.sum(grad_logdet) * a_inv.T
        self.params.grad(self.n_a)[...] += g_a
        return grad_x @ a_inv
