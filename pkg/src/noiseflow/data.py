"""NFPATCH1 patch datasets, stratified splits and the synthetic noise generator.

File layout (all little-endian)::

    magic    8 bytes  b"NFPATCH1"
    version  u16
    count    u32
    H, W, C  u16 x 3
    n_iso    u16, then n_iso x u32 ISO levels
    cameras  u16
    records  count x {camera u8, iso u32, nlf_beta1 f32, nlf_beta2 f32,
                      gain_amplified u8, clean f32[H*W*C], noise f32[H*W*C]}

Missing NLF coefficients are stored as NaN.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .layers import DEFAULT_ISO_SET, ConditioningContext
from .numerics import as_generator

MAGIC = b"NFPATCH1"
VERSION = 1


class FormatError(ValueError):
    pass


def record_dtype(h: int, w: int, c: int) -> np.dtype:
    return np.dtype([
        ("camera", "u1"),
        ("iso", "<u4"),
        ("nlf_beta1", "<f4"),
        ("nlf_beta2", "<f4"),
        ("gain_amplified", "u1"),
        ("clean", "<f4", (h, w, c)),
        ("noise", "<f4", (h, w, c)),
    ])


@dataclass
class PatchDataset:
    """Column-oriented patch records; clean and noise stay float32 in memory."""

    camera: np.ndarray
    iso: np.ndarray
    nlf_beta1: np.ndarray
    nlf_beta2: np.ndarray
    gain_amplified: np.ndarray
    clean: np.ndarray
    noise: np.ndarray
    iso_set: tuple = DEFAULT_ISO_SET
    camera_count: int = 1

    def __post_init__(self):
        self.iso_set = tuple(int(i) for i in self.iso_set)
        n = len(self.camera)
        for name in ("iso", "nlf_beta1", "nlf_beta2", "gain_amplified", "clean", "noise"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has {len(getattr(self, name))} rows, expected {n}")
        if self.clean.shape != self.noise.shape or self.clean.ndim != 4:
            raise ValueError("clean and noise must both be (N, H, W, C)")

    def __len__(self) -> int:
        return len(self.camera)

    @property
    def shape(self) -> tuple:
        return tuple(self.clean.shape[1:])

    def subset(self, idx) -> "PatchDataset":
        idx = np.asarray(idx)
        return PatchDataset(
            self.camera[idx], self.iso[idx], self.nlf_beta1[idx], self.nlf_beta2[idx],
            self.gain_amplified[idx], self.clean[idx], self.noise[idx],
            iso_set=self.iso_set, camera_count=self.camera_count,
        )

    def context(self, idx=None) -> ConditioningContext:
        sl = slice(None) if idx is None else idx
        return ConditioningContext(
            clean=self.clean[sl].astype(np.float64),
            iso=self.iso[sl].astype(np.int64),
            camera_id=self.camera[sl].astype(np.int64),
            gain_amplified=self.gain_amplified[sl].astype(bool),
            nlf_beta1=self.nlf_beta1[sl].astype(np.float64),
            nlf_beta2=self.nlf_beta2[sl].astype(np.float64),
        )

    def batch(self, idx=None):
        sl = slice(None) if idx is None else idx
        return self.noise[sl].astype(np.float64), self.context(idx)

    def cells(self) -> dict:
        """Record indices grouped by ``(camera, iso)``."""
        out = {}
        for key in sorted(set(zip(self.camera.tolist(), self.iso.tolist()))):
            out[key] = np.flatnonzero((self.camera == key[0]) & (self.iso == key[1]))
        return out


def to_bytes(ds: PatchDataset) -> bytes:
    h, w, c = ds.shape
    header = bytearray(MAGIC)
    header += struct.pack("<HIHHH", VERSION, len(ds), h, w, c)
    header += struct.pack("<H", len(ds.iso_set)) + struct.pack(f"<{len(ds.iso_set)}I", *ds.iso_set)
    header += struct.pack("<H", ds.camera_count)
    rec = np.empty(len(ds), dtype=record_dtype(h, w, c))
    rec["camera"] = ds.camera
    rec["iso"] = ds.iso
    rec["nlf_beta1"] = ds.nlf_beta1
    rec["nlf_beta2"] = ds.nlf_beta2
    rec["gain_amplified"] = ds.gain_amplified
    rec["clean"] = ds.clean
    rec["noise"] = ds.noise
    return bytes(header) + rec.tobytes()


def from_bytes(buf: bytes) -> PatchDataset:
    if len(buf) < 20 or buf[:8] != MAGIC:
        raise FormatError("not an NFPATCH1 file (bad magic)")
    version, count, h, w, c = struct.unpack_from("<HIHHH", buf, 8)
    if version != VERSION:
        raise FormatError(f"unsupported NFPATCH1 version {version}")
    if min(h, w, c) == 0:
        raise FormatError("zero-sized patch shape in header")
    pos = 20
    (n_iso,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if pos + 4 * n_iso + 2 > len(buf):
        raise FormatError("truncated header")
    iso_set = struct.unpack_from(f"<{n_iso}I", buf, pos)
    pos += 4 * n_iso
    (cams,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    dt = record_dtype(h, w, c)
    need = dt.itemsize * count
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload: expected {need} bytes of records, found {len(buf) - pos}")
    if len(buf) - pos > need:
        raise FormatError("trailing bytes after records")
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=pos)
    ds = PatchDataset(
        camera=rec["camera"].copy(),
        iso=rec["iso"].copy(),
        nlf_beta1=rec["nlf_beta1"].copy(),
        nlf_beta2=rec["nlf_beta2"].copy(),
        gain_amplified=rec["gain_amplified"].copy(),
        clean=rec["clean"].copy(),
        noise=rec["noise"].copy(),
        iso_set=iso_set,
        camera_count=cams,
    )
    if count and iso_set and not set(ds.iso.tolist()) <= set(iso_set):
        raise FormatError("record ISO outside the header ISO set")
    if count and cams and int(ds.camera.max()) >= cams:
        raise FormatError("record camera id outside the header camera count")
    return ds


def write(ds: PatchDataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def read(path) -> PatchDataset:
    return from_bytes(Path(path).read_bytes())


def concat(parts: Sequence[PatchDataset]) -> PatchDataset:
    first = parts[0]
    return PatchDataset(
        *(np.concatenate([getattr(p, k) for p in parts]) for k in
          ("camera", "iso", "nlf_beta1", "nlf_beta2", "gain_amplified", "clean", "noise")),
        iso_set=first.iso_set, camera_count=first.camera_count,
    )


def split(ds: PatchDataset, train_fraction: float = 0.7, seed: int = 0):
    """Stratified train/test split over ``(camera, iso)`` cells."""
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must be in (0, 1]")
    gen = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    train, test, problems = [], [], []
    for key, idx in ds.cells().items():
        n_train = int(round(train_fraction * len(idx)))
        if len(idx) < 2 or n_train == 0 or n_train == len(idx):
            problems.append(f"camera={key[0]} iso={key[1]} ({len(idx)} records)")
            continue
        perm = gen.permutation(idx)
        train.append(perm[:n_train])
        test.append(perm[n_train:])
    if problems:
        raise ValueError("cannot split cells with an empty side: " + ", ".join(problems))
    train_idx = np.sort(np.concatenate(train))
    test_idx = np.sort(np.concatenate(test))
    return ds.subset(train_idx), ds.subset(test_idx)


def minibatches(ds_or_count, batch_size: int, rng) -> Iterator[np.ndarray]:
    """Yield index arrays covering a fresh random permutation of the records."""
    n = ds_or_count if isinstance(ds_or_count, (int, np.integer)) else len(ds_or_count)
    if batch_size <= 0:
        raise ValueError("batch size must be positive")
    perm = as_generator(rng).permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


# -- synthetic data ---------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Ground-truth heteroscedastic, gain-scaled noise.

    noise = gamma * z with z ~ N(0, beta1 * clean + beta2) and
    gamma = psi[camera] * gain_scale * ISO.
    """

    beta1: float = 0.02
    beta2: float = 1e-4
    psi: tuple = (0.8, 1.0, 1.25)
    iso_set: tuple = DEFAULT_ISO_SET
    patches_per_cell: int = 100
    shape: tuple = (32, 32, 4)
    gain_scale: float = 1.0 / 1600.0
    seed: int = 0

    def __post_init__(self):
        self.psi = tuple(float(p) for p in self.psi)
        self.iso_set = tuple(int(i) for i in self.iso_set)
        self.shape = tuple(int(s) for s in self.shape)
        if not (self.beta1 > 0 and self.beta2 > 0 and self.gain_scale > 0):
            raise ValueError("beta1, beta2 and gain_scale must be positive")
        if not self.psi or any(p <= 0 for p in self.psi):
            raise ValueError("camera gain multipliers must be positive")
        if not self.iso_set or any(i <= 0 for i in self.iso_set):
            raise ValueError("ISO levels must be positive")
        if self.patches_per_cell < 1 or len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError("invalid patch count or shape")

    def gamma(self, iso, camera):
        return np.asarray(self.psi)[camera] * self.gain_scale * np.asarray(iso, dtype=np.float64)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def clean_patches(count: int, shape, gen: np.random.Generator) -> np.ndarray:
    """Smooth ramps with constant tiles, values in [0, 1]."""
    h, w, c = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    theta = gen.uniform(0, 2 * np.pi, count)
    ends = np.sort(gen.uniform(0, 1, (count, 2)), axis=1)
    t = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    t_min = t.reshape(count, -1).min(axis=1)[:, None, None]
    t_max = t.reshape(count, -1).max(axis=1)[:, None, None]
    t = (t - t_min) / np.maximum(t_max - t_min, 1e-12)
    ramp = ends[:, :1, None] + (ends[:, 1:, None] - ends[:, :1, None]) * t
    img = np.repeat(ramp[..., None], c, axis=-1) * gen.uniform(0.6, 1.0, (count, 1, 1, c))
    th, tw = max(h // 2, 1), max(w // 2, 1)
    for i in range(0, h, th):
        for j in range(0, w, tw):
            flat = gen.uniform(size=count) < 0.4
            level = gen.uniform(0, 1, count)
            img[flat, i:i + th, j:j + tw, :] = level[flat, None, None, None]
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec) -> PatchDataset:
    gen = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(3,)))
    cams, isos = [], []
    for m in range(len(spec.psi)):
        for iso in spec.iso_set:
            cams.append(np.full(spec.patches_per_cell, m))
            isos.append(np.full(spec.patches_per_cell, iso))
    camera = np.concatenate(cams).astype(np.uint8)
    iso = np.concatenate(isos).astype(np.uint32)
    n = len(camera)
    clean = clean_patches(n, spec.shape, gen).astype(np.float32)
    gamma = spec.gamma(iso, camera)
    var = spec.beta1 * clean.astype(np.float64) + spec.beta2
    noise = gamma[:, None, None, None] * gen.standard_normal(clean.shape) * np.sqrt(var)
    return PatchDataset(
        camera=camera,
        iso=iso,
        nlf_beta1=(gamma**2 * spec.beta1).astype(np.float32),
        nlf_beta2=(gamma**2 * spec.beta2).astype(np.float32),
        gain_amplified=np.zeros(n, dtype=np.uint8),
        clean=clean,
        noise=noise.astype(np.float32),
        iso_set=spec.iso_set,
        camera_count=len(spec.psi),
    )


def true_entropy_per_dim(ds: PatchDataset) -> np.ndarray:
    """Per-record differential entropy per dimension under the stored NLF."""
    var = (ds.nlf_beta1.astype(np.float64)[:, None, None, None] * ds.clean
           + ds.nlf_beta2.astype(np.float64)[:, None, None, None])
    return (0.5 * np.log(2 * np.pi * np.e * var)).reshape(len(ds), -1).mean(axis=1)
