"""Composed noise-flow models: architecture strings, exact NLL, sampling, checkpoints."""
from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .layers import (
    DEFAULT_ISO_SET,
    AffineCoupling,
    ChannelMix,
    ConditioningContext,
    GainLayer,
    SignalLayer,
)
from .numerics import NonFiniteError, ParamStore, RngStream, as_generator

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"NFLOW1\x00"
CHECKPOINT_VERSION = 1
PARAM_BUDGET = 2500


class ArchitectureError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


_TOKEN = re.compile(r"S|G|CAM|Ax(\d+)")


@dataclass(frozen=True)
class ArchitectureSpec:
    """Parsed architecture string such as ``"S-Ax4-G-Ax4-CAM"``.

    ``tokens`` keeps the layer order; ``Ax<K>`` tokens are stored as
    ``("A", K)`` and everything else as ``(name, None)``.
    """

    tokens: tuple
    iso_set: tuple = DEFAULT_ISO_SET
    camera_count: int = 5
    hidden_width: int = 32
    channels: int = 4
    scale_clamp: Optional[float] = None

    @classmethod
    def parse(cls, text: str, **kwargs) -> "ArchitectureSpec":
        tokens = []
        pos = 0
        if not text:
            raise ArchitectureError("empty architecture string", 0)
        while True:
            m = _TOKEN.match(text, pos)
            if m is None or (m.end() < len(text) and text[m.end()] != "-"):
                raise ArchitectureError(f"unexpected token {text[pos:].split('-')[0]!r}", pos)
            if m.group(1) is not None:
                tokens.append(("A", int(m.group(1))))
            else:
                tokens.append((m.group(0), None))
            pos = m.end()
            if pos == len(text):
                break
            pos += 1
            if pos == len(text):
                raise ArchitectureError("trailing '-'", pos - 1)
        names = [t[0] for t in tokens]
        for single in ("S", "G", "CAM"):
            if names.count(single) > 1:
                dup = [i for i, n in enumerate(names) if n == single][1]
                raise ArchitectureError(f"duplicate {single} token", _token_offset(text, dup))
        if "CAM" in names and "G" not in names:
            raise ArchitectureError("CAM requires a gain layer G", _token_offset(text, names.index("CAM")))
        kwargs.setdefault("iso_set", DEFAULT_ISO_SET)
        kwargs["iso_set"] = tuple(int(i) for i in kwargs["iso_set"])
        return cls(tokens=tuple(tokens), **kwargs)

    def render(self) -> str:
        return "-".join(f"Ax{k}" if name == "A" else name for name, k in self.tokens)

    @property
    def camera_specific(self) -> bool:
        return any(name == "CAM" for name, _ in self.tokens)

    def __str__(self) -> str:
        return self.render()


def _token_offset(text: str, index: int) -> int:
    return sum(len(t) + 1 for t in text.split("-")[:index])


class FlowModel:
    """An ordered list of bijections sharing one :class:`ParamStore`.

    Layers are listed in generative order: ``sample`` applies them first to
    last starting from a standard normal draw, and ``nll`` runs the inverses
    last to first.
    """

    def __init__(self, spec: ArchitectureSpec, params: ParamStore, layers: list):
        self.spec = spec
        self.params = params
        self.layers = layers
        self.gain = next((l for l in layers if isinstance(l, GainLayer)), None)
        self.signal = next((l for l in layers if isinstance(l, SignalLayer)), None)
        self.config: dict = {}

    @property
    def nearest_iso(self) -> bool:
        return bool(self.gain and self.gain.nearest_iso)

    @nearest_iso.setter
    def nearest_iso(self, flag: bool) -> None:
        if self.gain is not None:
            self.gain.nearest_iso = bool(flag)

    @property
    def iso_set(self):
        return self.spec.iso_set

    def param_count(self) -> int:
        return self.params.count

    def param_breakdown(self) -> list[tuple[str, int]]:
        return [(name, p.size) for name, p in self.params.items()]

    # -- conditioning ---------------------------------------------------
    def _effective_ctx(self, ctx: ConditioningContext):
        """Replace gain-amplified clean images by ``clean / gamma``."""
        flags = ctx.gain_amplified
        if flags is None or self.gain is None or not np.any(flags):
            return ctx, None
        inv_gamma = np.where(flags, np.exp(-self.gain.log_gamma(ctx)), 1.0)
        return ctx.with_clean(ctx.clean * inv_gamma.reshape(-1, 1, 1, 1)), flags

    # -- directions -----------------------------------------------------
    def forward(self, eps, ctx: ConditioningContext):
        eps, ctx = _batched(eps, ctx)
        ectx, _ = self._effective_ctx(ctx)
        x = eps
        logdet = np.zeros(x.shape[0])
        for i, layer in enumerate(self.layers):
            x, ld = _run_layer(layer.forward, i, layer, x, ectx)
            logdet += ld
            _check_finite(x, ld, i, layer)
        return x, logdet

    def inverse(self, noise, ctx: ConditioningContext, caches: Optional[list] = None):
        noise, ctx = _batched(noise, ctx)
        ectx, _ = self._effective_ctx(ctx)
        x = noise
        logdet = np.zeros(x.shape[0])
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            cache = caches[i] if caches is not None else None
            x, ld = _run_layer(layer.inverse, i, layer, x, ectx, cache)
            logdet += ld
            _check_finite(x, ld, i, layer)
        return x, logdet

    # -- likelihood -----------------------------------------------------
    def nll(self, noise, ctx: ConditioningContext) -> np.ndarray:
        """Per-sample negative log-likelihood in nats."""
        z, logdet = self.inverse(noise, ctx)
        d = np.prod(z.shape[1:])
        return 0.5 * np.sum(z * z, axis=(1, 2, 3)) + d * HALF_LOG_2PI - logdet

    def nll_per_dim(self, noise, ctx: ConditioningContext) -> np.ndarray:
        noise, ctx = _batched(noise, ctx)
        return self.nll(noise, ctx) / np.prod(noise.shape[1:])

    def loss(self, noise, ctx: ConditioningContext) -> float:
        """Batch-mean NLL per dimension (the training objective)."""
        return float(np.mean(self.nll_per_dim(noise, ctx)))

    def loss_and_grad(self, noise, ctx: ConditioningContext) -> float:
        """Evaluate :meth:`loss` and accumulate its gradient into ``params``."""
        noise, ctx = _batched(noise, ctx)
        caches = [dict() for _ in self.layers]
        z, logdet = self.inverse(noise, ctx, caches)
        n = z.shape[0]
        d = np.prod(z.shape[1:])
        nll = 0.5 * np.sum(z * z, axis=(1, 2, 3)) + d * HALF_LOG_2PI - logdet
        scale = 1.0 / (n * d)
        grad = z * scale
        grad_logdet = np.full(n, -scale)
        for layer, cache in zip(self.layers, caches):
            grad = layer.backward(cache, grad, grad_logdet)
        if self.signal is not None and self.gain is not None:
            ectx, flags = self._effective_ctx(ctx)
            if flags is not None:
                cache = caches[self.layers.index(self.signal)]
                # d clean_eff / d log gamma = -clean_eff on flagged records
                g_lg = -np.sum(cache["grad_clean"] * ectx.clean, axis=(1, 2, 3)) * flags
                self.gain.add_log_gamma_grad(ctx, g_lg)
        return float(np.mean(nll) / d)

    # -- sampling -------------------------------------------------------
    def sample(self, ctx: ConditioningContext, rng) -> np.ndarray:
        shape = ctx.clean.shape if ctx.clean.ndim == 4 else (1,) + ctx.clean.shape
        eps = as_generator(rng).standard_normal(shape)
        noise, _ = self.forward(eps, ctx)
        return noise

    # -- introspection --------------------------------------------------
    def named_scalars(self) -> dict[str, float]:
        """Interpretable parameters: b1, b2, v_<iso>, w_<m> (when present)."""
        out = {}
        if self.signal is not None:
            out["b1"] = float(self.params[self.signal.n_b1][0])
            out["b2"] = float(self.params[self.signal.n_b2][0])
        if self.gain is not None:
            for iso, v in zip(self.gain.iso_set, self.params[self.gain.n_v]):
                out[f"v_{iso}"] = float(v)
            if self.gain.n_w is not None:
                for m, w in enumerate(self.params[self.gain.n_w]):
                    out[f"w_{m}"] = float(w)
        return out


def _batched(x, ctx: ConditioningContext):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape != ctx.clean.shape:
        raise ValueError(f"noise shape {x.shape} does not match clean shape {ctx.clean.shape}")
    return x, ctx


def _run_layer(fn, i, layer, *args):
    try:
        return fn(*args)
    except NonFiniteError as exc:
        raise NonFiniteError(f"layer {i} ({type(layer).__name__}): {exc}") from exc


def _check_finite(x, ld, i, layer):
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(ld))):
        raise NonFiniteError(f"non-finite value in layer {i} ({type(layer).__name__})")


def build(spec, rng=0, **spec_kwargs) -> FlowModel:
    """Instantiate a model from an :class:`ArchitectureSpec` or architecture string."""
    if isinstance(spec, str):
        spec = ArchitectureSpec.parse(spec, **spec_kwargs)
    gen = as_generator(rng.child(1) if isinstance(rng, RngStream) else rng)
    params = ParamStore()
    layers = []
    step = 0
    for name, k in spec.tokens:
        if name == "S":
            layers.append(SignalLayer(params))
        elif name == "G":
            cams = spec.camera_count if spec.camera_specific else None
            layers.append(GainLayer(params, spec.iso_set, cams))
        elif name == "A":
            for _ in range(k):
                prefix = f"step{step}"
                layers.append(AffineCoupling(params, f"{prefix}.coupling", spec.channels,
                                             spec.hidden_width, parity=step, rng=gen,
                                             scale_clamp=spec.scale_clamp))
                layers.append(ChannelMix(params, f"{prefix}.mix", spec.channels, rng=gen))
                step += 1
    return FlowModel(spec, params, layers)


def expected_param_count(spec: ArchitectureSpec) -> int:
    """Closed-form parameter count, independent of :func:`build`."""
    c, h = spec.channels, spec.hidden_width
    total = 0
    for name, k in spec.tokens:
        if name == "S":
            total += 2
        elif name == "G":
            total += len(spec.iso_set) + (spec.camera_count if spec.camera_specific else 0)
        elif name == "A":
            total += k * ((c // 2) * h + h + h * c + c + c * c)
    return total


# -- checkpoints ------------------------------------------------------------

def save(model: FlowModel, path) -> None:
    """Write a little-endian NFLOW1 checkpoint.

    Layout: magic ``NFLOW1\\0``, u16 version, u32+bytes architecture string,
    u16 ISO count + u32 levels, u32 camera count, u32 hidden width,
    f64 coupling scale clamp (0 for none),
    u32+bytes JSON config, u32 block count, then per block
    u16+bytes name, u8 ndim, u32 dims, f64 values.
    """
    spec = model.spec
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<H", CHECKPOINT_VERSION)
    arch = spec.render().encode()
    out += struct.pack("<I", len(arch)) + arch
    out += struct.pack("<H", len(spec.iso_set)) + struct.pack(f"<{len(spec.iso_set)}I", *spec.iso_set)
    out += struct.pack("<II", spec.camera_count, spec.hidden_width)
    out += struct.pack("<d", spec.scale_clamp or 0.0)
    cfg = json.dumps(model.config, sort_keys=True).encode()
    out += struct.pack("<I", len(cfg)) + cfg
    out += struct.pack("<I", len(model.params))
    for name, p in model.params.items():
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", p.value.ndim) + struct.pack(f"<{p.value.ndim}I", *p.value.shape)
        out += p.value.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


class CheckpointError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path, iso_set=None, camera_count=None) -> FlowModel:
    """Read an NFLOW1 checkpoint.

    If ``iso_set`` or ``camera_count`` are given they must match the header.
    """
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not an NFLOW1 checkpoint (bad magic)")
    (version,) = r.unpack("H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("I")
    arch = r.take(n).decode()
    (n_iso,) = r.unpack("H")
    isos = tuple(r.unpack(f"{n_iso}I"))
    cams, hidden = r.unpack("II")
    (clamp,) = r.unpack("d")
    (n,) = r.unpack("I")
    config = json.loads(r.take(n).decode())
    (n_blocks,) = r.unpack("I")
    blocks = {}
    for _ in range(n_blocks):
        (n,) = r.unpack("H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after parameter blocks")
    if iso_set is not None and tuple(int(i) for i in iso_set) != isos:
        raise CheckpointError(f"ISO set mismatch: checkpoint has {list(isos)}, expected {list(iso_set)}")
    if camera_count is not None and int(camera_count) != cams:
        raise CheckpointError(f"camera count mismatch: checkpoint has {cams}, expected {camera_count}")
    channels = 4
    mix = next((v for k, v in blocks.items() if k.endswith(".mix.A")), None)
    if mix is not None:
        channels = mix.shape[0]
    spec = ArchitectureSpec.parse(arch, iso_set=isos, camera_count=cams, hidden_width=hidden, channels=channels,
                                 scale_clamp=clamp or None)
    model = build(spec, rng=0)
    if set(blocks) != set(model.params.names()):
        raise CheckpointError("parameter blocks do not match the architecture")
    for name in model.params:
        if blocks[name].shape != model.params[name].shape:
            raise CheckpointError(f"shape mismatch for {name}")
        model.params[name][...] = blocks[name]
    model.config = config
    return model
