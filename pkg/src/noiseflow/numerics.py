"""Parameter storage, Adam, seeded random streams and finite-difference oracles.

Everything here runs in float64. The oracles (:func:`finite_diff_gradient`,
:func:`numeric_jacobian_logdet`) never call into analytic derivative code, so
they can be used to check it.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where a finite value was required."""


class SingularMatrixError(ArithmeticError):
    """A matrix that must stay invertible became (numerically) singular."""


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray

    @property
    def size(self) -> int:
        return self.value.size


class ParamStore:
    """Ordered collection of named float64 parameter arrays.

    Layers keep a reference to the store and look their arrays up by name,
    so in-place edits of ``store[name]`` (optimizer steps, finite-difference
    probes) are seen immediately.
    """

    def __init__(self) -> None:
        self._entries: "OrderedDict[str, Param]" = OrderedDict()
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        self._entries[name] = Param(
            value=value,
            grad=np.zeros_like(value),
            adam_m=np.zeros_like(value),
            adam_v=np.zeros_like(value),
        )
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> Param:
        return self._entries[name]

    def grad(self, name: str) -> np.ndarray:
        return self._entries[name].grad

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    @property
    def count(self) -> int:
        return sum(p.size for p in self._entries.values())

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad.fill(0.0)

    def flat_values(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([p.value.ravel() for p in self._entries.values()])

    def flat_grads(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([p.grad.ravel() for p in self._entries.values()])

    def set_flat_values(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.count:
            raise ValueError(f"expected {self.count} values, got {flat.size}")
        offset = 0
        for p in self._entries.values():
            p.value[...] = flat[offset:offset + p.size].reshape(p.value.shape)
            offset += p.size

    def split_flat(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, offset = {}, 0
        for name, p in self._entries.items():
            out[name] = flat[offset:offset + p.size].reshape(p.value.shape)
            offset += p.size
        return out

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._entries.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self._entries.items():
            p.value[...] = values[name]


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Streams with different ids are statistically independent (numpy
    ``SeedSequence`` spawn keys), so data shuffling, initialisation and
    sampling can each own one without interfering.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=(int(self.stream_id),))
        object.__setattr__(self, "_gen", np.random.Generator(np.random.PCG64(ss)))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def standard_normal_patch(shape, rng) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ValueError(f"invalid patch shape {shape}")
    return as_generator(rng).standard_normal(shape)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Rescale all gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(p.grad**2)) for _, p in params.items()))
    if max_norm is not None and max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for _, p in params.items():
            p.grad *= scale
    return total


def adam_step(params: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, t=None,
              lr_scale: Optional[Callable[[str], float]] = None) -> None:
    """One bias-corrected Adam update; ``lr_scale(name)`` multiplies the step per parameter."""
    if t is None:
        params.step += 1
        t = params.step
    if t < 1:
        raise ValueError("Adam step index must be >= 1")
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        rate = lr * lr_scale(name) if lr_scale else lr
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * p.grad**2
        p.value -= rate * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + eps)


def finite_diff_gradient(loss_fn: Callable[[ParamStore], float], params: ParamStore, h=1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` w.r.t. every scalar in ``params``.

    Values are perturbed in place and restored afterwards.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    out = np.empty(params.count)
    k = 0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn(params))
            flat[i] = orig - h
            down = float(loss_fn(params))
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteError(f"non-finite loss while probing {name}[{i}]")
            out[k] = (up - down) / (2.0 * h)
            k += 1
    return out


def numeric_jacobian_logdet(f: Callable[[np.ndarray], np.ndarray], x, h=1e-5) -> float:
    """log|det J| of ``f`` at ``x`` using a central-difference Jacobian."""
    x = np.asarray(x, dtype=np.float64).ravel()
    d = x.size
    if d > 256:
        raise ValueError(f"numeric Jacobian limited to 256 dimensions, got {d}")
    jac = np.empty((d, d))
    for j in range(d):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        jac[:, j] = (np.ravel(f(xp)) - np.ravel(f(xm))) / (2.0 * h)
    sign, logdet = np.linalg.slogdet(jac)
    if sign == 0 or not np.isfinite(logdet):
        raise SingularMatrixError("numeric Jacobian is singular")
    return float(logdet)
