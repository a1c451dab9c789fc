"""Oracle self-checks: invertibility, log-det against the numeric Jacobian,
and analytic gradients against central finite differences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ConditioningContext
from .model import FlowModel
from .numerics import as_generator, finite_diff_gradient, numeric_jacobian_logdet


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} {self.value:.3e}  (tol {self.tolerance:g}) {self.detail}".rstrip()


def random_context(model: FlowModel, n: int, shape, gen, amplified=False) -> ConditioningContext:
    cams = model.spec.camera_count if model.spec.camera_specific else 1
    return ConditioningContext(
        clean=gen.uniform(0.0, 1.0, (n,) + tuple(shape)),
        iso=gen.choice(np.asarray(model.iso_set), n),
        camera_id=gen.integers(0, cams, n),
        gain_amplified=np.full(n, amplified),
    )


def _probe_shape(model: FlowModel, dim: int):
    c = model.spec.channels
    side = int(round((dim / c) ** 0.5))
    return (side, max(dim // (side * c), 1), c)


def round_trip_error(model: FlowModel, trials=100, shape=(4, 4, 4), rng=0) -> tuple[float, float]:
    """Worst ``|inverse(forward(x)) - x|`` and ``|ld_fwd + ld_inv|`` over random trials."""
    gen = as_generator(rng)
    worst_x = worst_ld = 0.0
    for _ in range(trials):
        ctx = random_context(model, 1, shape, gen)
        eps = gen.standard_normal(ctx.clean.shape)
        y, ld_f = model.forward(eps, ctx)
        x, ld_i = model.inverse(y, ctx)
        worst_x = max(worst_x, float(np.max(np.abs(x - eps))))
        worst_ld = max(worst_ld, float(np.max(np.abs(ld_f + ld_i))))
    return worst_x, worst_ld


def logdet_errors(model: FlowModel, dim=64, rng=0) -> dict[str, float]:
    """Analytic minus numeric log-det for every layer and the whole model."""
    gen = as_generator(rng)
    shape = _probe_shape(model, dim)
    ctx = random_context(model, 1, shape, gen)
    x = gen.standard_normal(ctx.clean.shape)
    out = {}
    h = x
    for i, layer in enumerate(model.layers):
        y, ld = layer.forward(h, ctx)
        num = numeric_jacobian_logdet(lambda v: layer.forward(v.reshape(h.shape), ctx)[0], h)
        out[f"layer{i}.{type(layer).__name__}"] = abs(float(ld[0]) - num)
        h = y
    _, ld = model.forward(x, ctx)
    num = numeric_jacobian_logdet(lambda v: model.forward(v.reshape(x.shape), ctx)[0], x)
    out["model"] = abs(float(ld[0]) - num)
    return out


def gradient_errors(model: FlowModel, n=4, shape=(2, 2, 4), h=1e-5, rng=0, amplified=False) -> dict[str, float]:
    """Relative error ``|g - g_fd| / max(|g|, |g_fd|)`` per named parameter."""
    gen = as_generator(rng)
    ctx = random_context(model, n, shape, gen, amplified)
    noise = 0.1 * gen.standard_normal(ctx.clean.shape)
    model.params.zero_grad()
    model.loss_and_grad(noise, ctx)
    analytic = model.params.split_flat(model.params.flat_grads())
    numeric = model.params.split_flat(finite_diff_gradient(lambda p: model.loss(noise, ctx), model.params, h))
    out = {}
    for name in analytic:
        a, f = analytic[name], numeric[name]
        scale = max(np.linalg.norm(a), np.linalg.norm(f))
        # both sides vanish exactly for unreachable blocks (e.g. W1 behind a zero W2)
        out[name] = 0.0 if scale < 1e-10 else float(np.linalg.norm(a - f) / scale)
    return out


def run_checks(model: FlowModel, rng=0, trials=100, dim=64) -> list[CheckResult]:
    """The full oracle suite; any exception becomes a failed row."""
    results = []

    def guarded(name, tol, fn):
        try:
            fn()
        except Exception as exc:  # reported, not raised: the table is the output
            results.append(CheckResult(name, False, float("nan"), tol, f"{type(exc).__name__}: {exc}"))

    def inv():
        ex, eld = round_trip_error(model, trials, _probe_shape(model, dim), rng)
        results.append(CheckResult("round trip |x' - x|", ex < 1e-9, ex, 1e-9))
        results.append(CheckResult("round trip |ld_f + ld_i|", eld < 1e-9, eld, 1e-9))

    def ld():
        for name, err in logdet_errors(model, dim, rng).items():
            results.append(CheckResult(f"logdet {name}", err < 1e-3, err, 1e-3))

    def grad():
        errs = gradient_errors(model, rng=rng, shape=(2, 2, model.spec.channels))
        worst = max(errs, key=errs.get)
        results.append(CheckResult("gradient vs finite diff", errs[worst] < 1e-4, errs[worst], 1e-4,
                                   f"worst {worst}"))

    guarded("round trip", 1e-9, inv)
    guarded("logdet", 1e-3, ld)
    guarded("gradient", 1e-4, grad)
    return results
