"""Command-line entry point: ``noiseflow <command> ...``.

Exit codes: 0 success, 1 internal or check failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import data as data_mod
from .baselines import NlfModel, gaussian_fit
from .checks import run_checks
from .config import RunConfig
from .evaluation import emit_plot_data, emit_report, evaluate
from .layers import ConditioningContext
from .model import PARAM_BUDGET, CheckpointError, build, load, save
from .numerics import RngStream
from .training import TrainingDiverged, train


class UsageError(Exception):
    """Bad input from the user; maps to exit code 2."""


def _apply_thread_limit():
    raw = os.environ.get("NF_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"NF_THREADS must be a positive integer, got {raw!r}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})")


def _read_data(path) -> data_mod.PatchDataset:
    if not Path(path).is_file():
        raise UsageError(f"data file not found: {path}")
    return data_mod.read(path)


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load(path)


def _check_conditioning(model, isos, cameras, nearest):
    unknown = sorted(set(int(i) for i in isos) - set(model.iso_set))
    if unknown and not nearest:
        raise UsageError(f"ISO {unknown} not in checkpoint ISO set {list(model.iso_set)}; "
                         "pass --nearest-iso to map to the nearest level")
    limit = model.spec.camera_count if model.spec.camera_specific else None
    if limit is not None and len(cameras) and int(np.max(cameras)) >= limit:
        raise UsageError(f"camera id {int(np.max(cameras))} outside the checkpoint's {limit} cameras")


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args):
    raw = _read_json(args.spec)
    try:
        spec = data_mod.SyntheticSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}")
    ds = data_mod.generate_synthetic(spec)
    data_mod.write(ds, args.out)
    print(f"wrote {len(ds)} records of shape {'x'.join(map(str, ds.shape))} to {args.out}")
    return 0


def _run_config(args, ds) -> RunConfig:
    raw = _read_json(args.config) if args.config else {}
    raw.setdefault("iso_set", list(ds.iso_set))
    raw.setdefault("cameras", ds.camera_count)
    overrides = {
        "arch": args.arch, "epochs": args.epochs, "lr": args.lr, "seed": args.seed,
        "batch_size": args.batch_size, "train_data": args.data, "test_data": args.test,
        "nearest_iso": True if args.nearest_iso else None,
    }
    try:
        return RunConfig.from_dict(raw).updated(**overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}")


def cmd_train(args):
    ds = _read_data(args.data)
    test = _read_data(args.test) if args.test else None
    cfg = _run_config(args, ds)
    try:
        model = build(cfg.arch, rng=RngStream(cfg.seed), iso_set=cfg.iso_set, camera_count=cfg.cameras,
                      hidden_width=cfg.hidden_width, channels=cfg.channels,
                      scale_clamp=cfg.scale_clamp or None)
    except ValueError as exc:
        raise UsageError(str(exc))
    for part in (ds, test):
        if part is not None:
            _check_conditioning(model, part.iso, part.camera, cfg.nearest_iso)
    model.config = cfg.to_dict()
    trace_path = Path(str(args.out) + ".trace.csv")
    try:
        trace = train(model, ds, cfg, test,
                      callback=lambda row: print(_trace_line(row), flush=True) if not args.quiet else None)
    except TrainingDiverged as exc:
        model.params.load_values(exc.last_good)
        save(model, args.out)
        emit_plot_data(exc.trace, trace_path)
        print(f"error: {exc}; last good parameters saved to {args.out}", file=sys.stderr)
        return 1
    save(model, args.out)
    emit_plot_data(trace, trace_path)
    print(f"saved {args.out} ({model.param_count()} parameters); trace in {trace_path}")
    return 0


def _trace_line(row):
    test = "" if row["test_nll"] is None else f" test {row['test_nll']:.5f}"
    train_nll = row["train_nll"]
    return f"step {row['step']:>7} train {train_nll:.5f}{test}" if train_nll is not None else f"step {row['step']:>7}{test}"


def cmd_eval(args):
    model = _load_model(args.ckpt)
    ds = _read_data(args.data)
    model.nearest_iso = args.nearest_iso
    _check_conditioning(model, ds.iso, ds.camera, args.nearest_iso)
    models = OrderedDict(noiseflow=model)
    for name in [b.strip() for b in args.baselines.split(",") if b.strip()]:
        if name == "gaussian":
            fit_ds = _read_data(args.fit_data) if args.fit_data else ds
            models["gaussian"] = gaussian_fit(fit_ds.noise)
        elif name == "nlf":
            models["nlf"] = NlfModel()
        else:
            raise UsageError(f"unknown baseline {name!r} (choose from gaussian, nlf)")
    report = evaluate(models, ds, rng=RngStream(args.seed), r=args.hist_range, bins=args.hist_bins,
                      samples_per_record=args.samples_per_record, reference="noiseflow")
    fmt = args.format or ("csv" if str(args.report).endswith(".csv") else "json")
    emit_report(report, args.report, fmt, config={"checkpoint": model.config, "eval": {
        "data": args.data, "fit_data": args.fit_data, "seed": args.seed, "nearest_iso": args.nearest_iso}})
    for name, stats in report.models.items():
        line = f"{name:<10} nll/dim {stats['nll_per_dim']:.5f}  kl {stats['kl_mean']:.5f}"
        if name in report.improvements:
            line += f"  flow likelihood gain {100 * report.improvements[name]['likelihood_improvement']:.1f}%"
        print(line)
    return 0


def cmd_sample(args):
    model = _load_model(args.ckpt)
    src = _read_data(args.data)
    if not 0 <= args.clean < len(src):
        raise UsageError(f"record index {args.clean} outside 0..{len(src) - 1}")
    if args.count < 1:
        raise UsageError("--count must be positive")
    if args.camera < 0:
        raise UsageError("camera id must be non-negative")
    model.nearest_iso = args.nearest_iso
    _check_conditioning(model, [args.iso], [args.camera], args.nearest_iso)
    clean = np.repeat(src.clean[args.clean:args.clean + 1], args.count, axis=0)
    ctx = ConditioningContext(clean.astype(np.float64), iso=args.iso, camera_id=args.camera)
    noise = model.sample(ctx, RngStream(args.seed))
    n = args.count
    out = data_mod.PatchDataset(
        camera=np.full(n, args.camera, np.uint8), iso=np.full(n, args.iso, np.uint32),
        nlf_beta1=np.full(n, np.nan, np.float32), nlf_beta2=np.full(n, np.nan, np.float32),
        gain_amplified=np.zeros(n, np.uint8), clean=clean, noise=noise.astype(np.float32),
        iso_set=tuple(sorted(set(model.iso_set) | {args.iso})),
        camera_count=max(model.spec.camera_count, args.camera + 1),
    )
    data_mod.write(out, args.out)
    print(f"wrote {n} samples (iso {args.iso}, camera {args.camera}) to {args.out}; "
          f"noise std {float(noise.std()):.5f}")
    return 0


def cmd_check(args):
    if args.ckpt:
        model = _load_model(args.ckpt)
    elif args.arch:
        try:
            model = build(args.arch, rng=RngStream(args.seed), camera_count=args.cameras,
                          scale_clamp=args.scale_clamp or None)
        except ValueError as exc:
            raise UsageError(str(exc))
    else:
        raise UsageError("check needs --ckpt or --arch")
    results = run_checks(model, rng=args.seed, trials=args.trials)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_count_params(args):
    try:
        model = build(args.arch, camera_count=args.cameras)
    except ValueError as exc:
        raise UsageError(str(exc))
    groups = OrderedDict()
    for name, size in model.param_breakdown():
        key = name.rsplit(".", 1)[0]
        groups[key] = groups.get(key, 0) + size
    for key, size in groups.items():
        print(f"{key:<20} {size:>6}")
    total = model.param_count()
    verdict = "OK" if total < PARAM_BUDGET else "EXCEEDED"
    print(f"{'total':<20} {total:>6}  (< {PARAM_BUDGET}: {verdict})")
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noiseflow", description="Conditional normalizing-flow noise model.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic NFPATCH1 dataset")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="fit a model by maximum likelihood")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--test")
    t.add_argument("--out", required=True)
    t.add_argument("--arch")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--nearest-iso", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="compare a checkpoint with baselines")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--baselines", default="gaussian,nlf")
    e.add_argument("--fit-data", help="dataset for the Gaussian fit (default: --data)")
    e.add_argument("--report", required=True)
    e.add_argument("--format", choices=["json", "csv"])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--hist-range", type=float, default=0.2)
    e.add_argument("--hist-bins", type=int, default=256)
    e.add_argument("--samples-per-record", type=int, default=1)
    e.add_argument("--nearest-iso", action="store_true")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sample", help="draw noise for one clean patch")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="NFPATCH1 file holding the clean patch")
    s.add_argument("--clean", type=int, required=True, help="record index in --data")
    s.add_argument("--iso", type=int, required=True)
    s.add_argument("--camera", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--nearest-iso", action="store_true")
    s.set_defaults(fn=cmd_sample)

    c = sub.add_parser("check", help="run the invertibility, log-det and gradient oracles")
    c.add_argument("--ckpt")
    c.add_argument("--arch")
    c.add_argument("--cameras", type=int, default=5)
    c.add_argument("--scale-clamp", type=float, default=0.0)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--trials", type=int, default=100)
    c.set_defaults(fn=cmd_check)

    k = sub.add_parser("count-params", help="print the parameter count of an architecture")
    k.add_argument("--arch", default="S-Ax4-G-Ax4-CAM")
    k.add_argument("--cameras", type=int, default=5)
    k.set_defaults(fn=cmd_count_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_limit()
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (data_mod.FormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
