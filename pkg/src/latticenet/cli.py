"""Command-line interface: ``latticenet <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, gradcheck
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .datasets import KINDS, make_dataset
from .io import CloudFormatError, parse_cloud, read_labels, write_cloud, write_labels
from .lattice import LatticeCapacityError, PointCloud
from .network import LatticeNet, LayerSpec
from .training import NonFiniteGradientError, compute_metrics, fit, format_record
from .validation import check_sigma

log = logging.getLogger("latticenet")

# exit codes by failure category
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_CONFIG = 4
EXIT_CHECKPOINT = 5
EXIT_NUMERIC = 6
EXIT_CHECK_FAILED = 7


class CliError(Exception):
    def __init__(self, category: str, message: str, code: int):
        super().__init__(message)
        self.category = category
        self.code = code


def _sigma_arg(text: str):
    parts = [float(p) for p in text.replace(",", " ").split()]
    return parts[0] if len(parts) == 1 else parts


def _read(path: Path, columns, sigma) -> PointCloud:
    if not path.is_file():
        raise CliError("input", f"no such file: {path}", EXIT_INPUT)
    cloud = parse_cloud(path, columns=columns)
    return cloud.replace(sigma=check_sigma(sigma, cloud.dim))


def _model_spec(model: dict, clouds: list[PointCloud]) -> LayerSpec:
    first = clouds[0]
    for c in clouds:
        if c.labels is None:
            raise CliError("input", "training clouds must carry a label column", EXIT_INPUT)
        if c.dim != first.dim or c.channels != first.channels:
            raise CliError("input", "all clouds must share dimension and feature columns", EXIT_INPUT)
    data = dict(model)
    data.setdefault("num_classes", max(2, int(max(c.labels.max() for c in clouds)) + 1))
    data.setdefault("dim", first.dim)
    data.setdefault("in_features", first.num_features)
    try:
        return LayerSpec.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise CliError("config", f"bad model section: {exc}", EXIT_CONFIG) from None


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.sigma is not None:
        cfg.sigma = args.sigma
    if args.output is not None:
        cfg.output = Path(args.output)
    if args.epochs is not None:
        cfg.training.epochs = args.epochs
    train = [_read(p, cfg.columns, cfg.sigma) for p in cfg.train_files()]
    val = [_read(p, cfg.columns, cfg.sigma) for p in cfg.val_files()]
    spec = _model_spec(cfg.model, train + val)
    model = LatticeNet.create(spec, seed=cfg.seed)
    cfg.output.mkdir(parents=True, exist_ok=True)
    metrics_path = cfg.output / "metrics.jsonl"
    with open(metrics_path, "w") as log_file:
        def on_epoch(rec):
            log_file.write(format_record(rec) + "\n")
            log_file.flush()
            if not args.quiet:
                print(format_record(rec), flush=True)

        with threadpool_limits(limits=1 if cfg.reproducible else None):
            result = fit(model, train, val, cfg.training, on_epoch=on_epoch)
    sigma = np.broadcast_to(np.asarray(cfg.sigma, dtype=np.float64), (spec.dim,)).tolist()
    meta = {
        "sigma": sigma,
        "columns": cfg.columns,
        "seed": cfg.seed,
        "epochs_run": len(result.history),
        "best_val_miou": result.best_miou if val else None,
    }
    save_checkpoint(cfg.output / "checkpoint.ckpt", result.best_state, spec.to_dict(), meta)
    if val:
        print(f"best val mIoU {result.best_miou:.4f} after {len(result.history)} epochs")
    print(f"wrote {cfg.output / 'checkpoint.ckpt'} and {metrics_path}")
    return 0


def _load_model(path: Path) -> tuple[LatticeNet, dict]:
    if not path.is_file():
        raise CliError("input", f"no such file: {path}", EXIT_INPUT)
    ckpt = load_checkpoint(path)
    if ckpt.spec is None:
        raise CliError("checkpoint", f"{path}: checkpoint has no model spec", EXIT_CHECKPOINT)
    spec = LayerSpec.from_dict(ckpt.spec)
    model = LatticeNet.create(spec)
    try:
        model.load_state_dict(ckpt.state)
    except ValueError as exc:
        raise CliError("checkpoint", f"{path}: {exc}", EXIT_CHECKPOINT) from None
    return model, ckpt.meta


def _predict(args) -> tuple[PointCloud, np.ndarray]:
    model, meta = _load_model(Path(args.checkpoint))
    sigma = args.sigma if args.sigma is not None else meta.get("sigma", 1.0)
    columns = args.columns or meta.get("columns")
    cloud = _read(Path(args.input), columns, sigma)
    spec = model.spec
    if cloud.dim != spec.dim or cloud.num_features != spec.in_features:
        raise CliError(
            "input",
            f"{args.input}: cloud has dim {cloud.dim} and {cloud.num_features} feature columns, "
            f"model expects dim {spec.dim} and {spec.in_features}",
            EXIT_INPUT,
        )
    return cloud, model.predict(cloud)


def cmd_infer(args) -> int:
    cloud, pred = _predict(args)
    write_labels(args.output, cloud, pred)
    print(f"wrote {len(pred)} labels to {args.output}")
    return 0


def cmd_eval(args) -> int:
    if args.predictions is not None:
        cloud = _read(Path(args.input), args.columns, 1.0)
        if not Path(args.predictions).is_file():
            raise CliError("input", f"no such file: {args.predictions}", EXIT_INPUT)
        pred = read_labels(args.predictions)
        if len(pred) != cloud.num_points:
            raise CliError("input", f"{len(pred)} predictions for {cloud.num_points} points", EXIT_INPUT)
        num_classes = int(max(pred.max(initial=0), cloud.labels.max(initial=0) if cloud.labels is not None else 0)) + 1
    else:
        cloud, pred = _predict(args)
        num_classes = None
    if cloud.labels is None:
        raise CliError("input", f"{args.input}: no label column to evaluate against", EXIT_INPUT)
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), cloud.labels.max(initial=0))) + 1
    m = compute_metrics(pred, cloud.labels, num_classes)
    print(f"mIoU {m.miou:.3f}")
    print(f"accuracy {m.accuracy:.3f}")
    print("IoU " + " ".join("nan" if np.isnan(x) else f"{x:.3f}" for x in m.iou))
    return 0


def cmd_gen_data(args) -> int:
    train, val = make_dataset(args.kind, args.n, args.seed, clouds=args.clouds)
    out = Path(args.out)
    for name, split in (("train", train), ("val", val)):
        (out / name).mkdir(parents=True, exist_ok=True)
        for i, cloud in enumerate(split):
            write_cloud(out / name / f"{args.kind}_{i:03d}.xyz", cloud)
    print(f"wrote {len(train)} train and {len(val)} val clouds to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    names = args.op or list(gradcheck.OPERATORS if not args.all else gradcheck.ALL_CHECKS)
    for name in names:
        if name not in gradcheck.ALL_CHECKS:
            raise CliError("usage", f"unknown operator {name!r}; choose from {', '.join(gradcheck.ALL_CHECKS)}", EXIT_USAGE)
    failed = 0
    print(f"{'operator':<24}{'max rel err':>14}{'seeds':>7}{'time':>9}  status")
    for name in names:
        r = gradcheck.run_check(name, args.seeds)
        failed += not r.passed
        print(f"{r.op:<24}{r.max_rel_error:>14.3e}{r.seeds:>7}{r.seconds:>8.2f}s  {'ok' if r.passed else 'FAIL'}")
    if failed:
        print(f"{failed} operator(s) exceeded relative error {gradcheck.TOLERANCE:g}")
        return EXIT_CHECK_FAILED
    return 0


def cmd_bench(args) -> int:
    rows = bench.run(points=args.points, sigma=args.sigma or 0.1, repeat=args.repeat)
    for name, ms in rows:
        print(f"{name:<22}{ms:>10.1f} ms")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latticenet", description="Sparse permutohedral-lattice segmentation of point clouds.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--sigma", type=_sigma_arg, help="lattice scale, overrides the config (scalar or 'sx,sy,sz')")
    t.add_argument("--output", type=Path, help="output directory, overrides the config")
    t.add_argument("--epochs", type=int, help="epoch budget, overrides the config")
    t.add_argument("--quiet", action="store_true", help="do not echo per-epoch metrics")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("infer", cmd_infer, "label a cloud with a trained model"), ("eval", cmd_eval, "report mIoU on a labelled cloud")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=(name == "infer"))
        s.add_argument("--input", required=True)
        s.add_argument("--columns", help="ascii column layout, e.g. 'xyz,rgb,label'")
        s.add_argument("--sigma", type=_sigma_arg, help="lattice scale, overrides the checkpoint")
        if name == "infer":
            s.add_argument("--output", required=True)
        else:
            s.add_argument("--predictions", help="label file written by infer, instead of a checkpoint")
        s.set_defaults(func=func)

    g = sub.add_parser("gen-data", help="write a synthetic train/val dataset")
    g.add_argument("--kind", required=True, choices=KINDS)
    g.add_argument("--n", type=int, required=True, help="points per cloud")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--clouds", type=int, default=5)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    c.add_argument("--op", action="append", help="check only this operator (repeatable)")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--all", action="store_true", help="also check autodiff primitives")
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="time the lattice operators")
    b.add_argument("--points", type=int, default=4000)
    b.add_argument("--sigma", type=float)
    b.add_argument("--repeat", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "eval" and (args.checkpoint is None) == (args.predictions is None):
            raise CliError("usage", "eval needs exactly one of --checkpoint or --predictions", EXIT_USAGE)
        return args.func(args)
    except CliError as exc:
        category, code, msg = exc.category, exc.code, str(exc)
    except CloudFormatError as exc:
        category, code, msg = "input", EXIT_INPUT, str(exc)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        category, code, msg = "input", EXIT_INPUT, str(exc)
    except ConfigError as exc:
        category, code, msg = "config", EXIT_CONFIG, str(exc)
    except CheckpointError as exc:
        category, code, msg = "checkpoint", EXIT_CHECKPOINT, str(exc)
    except (NonFiniteGradientError, FloatingPointError, LatticeCapacityError) as exc:
        category, code, msg = "numeric", EXIT_NUMERIC, str(exc)
    except ValueError as exc:
        category, code, msg = "input", EXIT_INPUT, str(exc)
    print(f"latticenet: {category} error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
