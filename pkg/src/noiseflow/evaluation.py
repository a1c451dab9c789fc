"""NLL aggregation, marginal-KL histograms and machine-readable reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream, as_generator

REPORT_VERSION = 1
KL_SMOOTHING = 1e-12


@dataclass
class NoiseHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    clipped: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def frequencies(self) -> np.ndarray:
        return self.counts / max(self.total, 1)


def histogram(values, r: float = 0.2, bins: int = 256) -> NoiseHistogram:
    """Uniform histogram on ``[-r, r]``; out-of-range values land in the end bins."""
    if r <= 0 or bins < 2:
        raise ValueError("need r > 0 and at least 2 bins")
    values = np.asarray(values, dtype=np.float64).ravel()
    edges = np.linspace(-r, r, bins + 1)
    clipped = int(np.count_nonzero((values < -r) | (values > r)))
    idx = np.floor((values + r) / (2 * r) * bins).astype(np.int64)
    counts = np.bincount(np.clip(idx, 0, bins - 1), minlength=bins)
    return NoiseHistogram(edges, counts, clipped)


def kl_divergence(p: NoiseHistogram, q: NoiseHistogram, eps: float = KL_SMOOTHING) -> float:
    """Discrete KL(p || q) between normalized, eps-smoothed histograms."""
    if p.bin_edges.shape != q.bin_edges.shape or not np.array_equal(p.bin_edges, q.bin_edges):
        raise ValueError("histograms have different bin edges")
    pf = p.frequencies() + eps
    qf = q.frequencies() + eps
    pf /= pf.sum()
    qf /= qf.sum()
    return float(np.sum(pf * np.log(pf / qf)))


def likelihood_improvement(nll_other: float, nll_ref: float) -> float:
    """Relative gain in per-dimension likelihood ``exp(-nll)`` of ``ref`` over ``other``."""
    return math.exp(nll_other - nll_ref) - 1.0


@dataclass
class EvalReport:
    models: dict = field(default_factory=dict)
    breakdown: dict = field(default_factory=dict)
    improvements: dict = field(default_factory=dict)
    records: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _nll_batched(model, ds, idx_chunks):
    out = np.empty(len(ds))
    for idx in idx_chunks:
        noise, ctx = ds.batch(idx)
        try:
            out[idx] = model.nll_per_dim(noise, ctx)
        except Exception as exc:
            raise type(exc)(f"records {idx[0]}..{idx[-1]}: {exc}") from exc
    return out


def evaluate(models, ds, rng=0, r: float = 0.2, bins: int = 256,
             samples_per_record: int = 1, chunk: int = 64, reference: str = None) -> EvalReport:
    """NLL of the real noise and marginal KL of one model sample per record.

    ``models`` maps display names to objects exposing ``nll_per_dim(noise,
    ctx)`` and ``sample(ctx, rng)`` (or is a list of objects with ``name``).
    Histograms pool all pixels and channels of a record. Improvements are
    reported for every model relative to ``reference`` (default: the first).
    """
    if not isinstance(models, dict):
        models = {getattr(m, "name", f"model{i}"): m for i, m in enumerate(models)}
    report = EvalReport(settings={
        "hist_range": r,
        "hist_bins": bins,
        "kl_smoothing": KL_SMOOTHING,
        "samples_per_record": samples_per_record,
        "histogram_pooling": "all pixels and channels per record",
        "record_count": len(ds),
    })
    if not models:
        return report
    base_seed = rng.seed if isinstance(rng, RngStream) else int(as_generator(rng).integers(2**63))
    chunks = [np.arange(s, min(s + chunk, len(ds))) for s in range(0, len(ds), chunk)]
    real_hists = [histogram(ds.noise[i], r, bins) for i in range(len(ds))]
    cells = ds.cells()
    for k, (name, model) in enumerate(models.items()):
        try:
            nll = _nll_batched(model, ds, chunks)
        except Exception as exc:
            raise type(exc)(f"{name}: {exc}") from exc
        kls = np.empty(len(ds))
        gen = RngStream(base_seed, 1000 + k).generator
        for idx in chunks:
            noise, ctx = ds.batch(idx)
            draws = [model.sample(ctx, gen) for _ in range(samples_per_record)]
            for j, rec in enumerate(idx):
                pooled = np.concatenate([d[j].ravel() for d in draws])
                kls[rec] = kl_divergence(real_hists[rec], histogram(pooled, r, bins))
        report.models[name] = {
            "nll_per_dim": float(nll.mean()),
            "kl_mean": float(kls.mean()),
            "kl_std": float(kls.std()),
        }
        report.records[name] = {"nll_per_dim": nll.tolist(), "kl": kls.tolist()}
        report.breakdown[name] = [
            {
                "camera": int(cam),
                "iso": int(iso),
                "count": int(len(idx)),
                "nll_per_dim": float(nll[idx].mean()),
                "kl_mean": float(kls[idx].mean()),
            }
            for (cam, iso), idx in cells.items()
        ]
    ref = reference or next(iter(models))
    ref_stats = report.models[ref]
    for name, stats in report.models.items():
        if name == ref:
            continue
        report.improvements[name] = {
            "reference": ref,
            "delta_nll": stats["nll_per_dim"] - ref_stats["nll_per_dim"],
            "likelihood_improvement": likelihood_improvement(stats["nll_per_dim"], ref_stats["nll_per_dim"]),
            "kl_reduction": (1.0 - ref_stats["kl_mean"] / stats["kl_mean"]) if stats["kl_mean"] > 0 else 0.0,
        }
    return report


def emit_report(report: EvalReport, path, fmt: str = "json", config: dict = None) -> None:
    """Write a report. JSON holds everything; CSV has one row per record."""
    path = Path(path)
    if fmt == "json":
        payload = report.to_dict()
        if config is not None:
            payload["config"] = config
        path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    elif fmt == "csv":
        names = list(report.records)
        n = len(next(iter(report.records.values()))["kl"]) if names else 0
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["record"] + [f"{m}_{k}" for m in names for k in ("nll_per_dim", "kl")])
            for i in range(n):
                w.writerow([i] + [repr(report.records[m][k][i]) for m in names for k in ("nll_per_dim", "kl")])
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report(path) -> EvalReport:
    d = json.loads(Path(path).read_text())
    d.pop("config", None)
    return EvalReport.from_dict(d)


def emit_plot_data(trace: list, path) -> None:
    """Write a training trace (list of dicts) as CSV with a stable column order."""
    if not trace:
        Path(path).write_text("step,train_nll,test_nll\n")
        return
    head = ["step", "train_nll", "test_nll"]
    rest = sorted({k for row in trace for k in row} - set(head), key=_column_key)
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=head + rest, restval="")
        w.writeheader()
        for row in trace:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})


def _column_key(name: str):
    order = {"b1": 0, "b2": 1, "v": 2, "w": 3}
    prefix, _, suffix = name.partition("_")
    return (order.get(prefix, 4), int(suffix) if suffix.isdigit() else 0, name)
