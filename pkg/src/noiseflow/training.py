"""Maximum-likelihood training with Adam."""
from __future__ import annotations

import logging
import math
from typing import Callable, Optional

import numpy as np

from .config import RunConfig
from .data import PatchDataset, minibatches
from .model import FlowModel
from .numerics import NonFiniteError, RngStream, adam_step, clip_grad_norm

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``last_good`` holds the parameters before the bad step."""

    def __init__(self, message, last_good: dict, trace: list):
        super().__init__(message)
        self.last_good = last_good
        self.trace = trace


def evaluate_nll(model: FlowModel, ds: PatchDataset, max_records: Optional[int] = None, chunk: int = 64) -> float:
    """Mean per-dimension NLL; ``max_records`` takes an evenly strided subset."""
    rows = np.arange(len(ds))
    if max_records and max_records < len(ds):
        rows = np.linspace(0, len(ds) - 1, max_records).round().astype(int)
    total = 0.0
    for start in range(0, len(rows), chunk):
        noise, ctx = ds.batch(rows[start:start + chunk])
        total += float(model.nll_per_dim(noise, ctx).sum())
    return total / len(rows)


def train(model: FlowModel, train_ds: PatchDataset, config: RunConfig,
          test_ds: Optional[PatchDataset] = None,
          callback: Optional[Callable[[dict], None]] = None) -> list:
    """Minimize the mean per-dimension NLL of ``train_ds``.

    Returns the trace: one dict per logged step with ``step``, ``train_nll``
    (mean over the steps since the last log), ``test_nll`` (or None) and the
    interpretable parameters of :meth:`FlowModel.named_scalars`.
    """
    model.nearest_iso = config.nearest_iso
    rng = RngStream(config.seed, 2)
    steps_per_epoch = math.ceil(len(train_ds) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    trace = []
    window = []
    step = 0

    def lr_scale(name):
        return config.scalar_lr_scale if name.startswith(("signal.", "gain.")) else 1.0

    def lr_at(s):
        if config.lr_final_fraction >= 1.0 or total_steps <= 1:
            return config.lr
        frac = config.lr_final_fraction
        return config.lr * (frac + (1 - frac) * 0.5 * (1 + math.cos(math.pi * s / total_steps)))

    def log_row(with_test):
        row = {"step": step, "train_nll": float(np.mean(window)) if window else None, "test_nll": None}
        if with_test and test_ds is not None:
            row["test_nll"] = evaluate_nll(model, test_ds, config.eval_max_records)
        row.update(model.named_scalars())
        trace.append(row)
        if callback:
            callback(row)
        log.info("step %d train %.5f test %s", step, row["train_nll"] or float("nan"), row["test_nll"])

    for epoch in range(config.epochs):
        for idx in minibatches(len(train_ds), config.batch_size, rng):
            last_good = model.params.copy_values()
            noise, ctx = train_ds.batch(np.sort(idx))
            model.params.zero_grad()
            try:
                loss = model.loss_and_grad(noise, ctx)
                if not math.isfinite(loss):
                    raise NonFiniteError("training loss is not finite")
                clip_grad_norm(model.params, config.clip_norm)
                adam_step(model.params, lr_at(step), config.adam_beta1, config.adam_beta2, config.adam_eps,
                          lr_scale=lr_scale)
            except (NonFiniteError, FloatingPointError, ArithmeticError) as exc:
                model.params.load_values(last_good)
                raise TrainingDiverged(f"diverged at step {step}: {exc}", last_good, trace) from exc
            step += 1
            window.append(loss)
            at_eval = config.eval_every and step % config.eval_every == 0
            if step % config.log_every == 0 or at_eval:
                log_row(bool(at_eval))
                window = []
        if not config.eval_every:
            log_row(True)
            window = []
    return trace
