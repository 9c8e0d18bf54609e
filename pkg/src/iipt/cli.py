"""Command-line interface: dataset synthesis, training, evaluation, fusion,
cost reports, augmentation previews, and the gradient self-check.

Exit codes: 0 success, 1 user error (bad flags or files), 2 internal
invariant failure. Config files are flat ``key = value`` text; command-line
flags override file values.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import augment as aug
from . import complexity as cx
from . import model as mdl
from . import training as tr
from .errors import UserInputError
from .gradcheck import run_suite
from .skeldata import (
    default_partition_map,
    load_sequence,
    save_sequence,
    synth_dataset,
)

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2

GRADCHECK_TOLERANCE = 1e-4


class _ArgumentParser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; user errors must map to 1
    def error(self, message):
        raise UserInputError(message)


def _read_config_file(path) -> dict[str, str]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UserInputError(f"cannot read config file {path}: {exc}") from exc
    return mdl.parse_kv_text(text, origin=str(path))


_MODEL_KEYS = set(mdl.model_config_to_kv(mdl.ModelConfig(num_classes=2)))


def _model_config_from(kv: dict[str, str], overrides: dict[str, str]) -> mdl.ModelConfig:
    merged = dict(kv)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(merged) - _MODEL_KEYS - tr.KNOWN_TRAIN_KEYS
    if unknown:
        raise UserInputError(f"unknown config keys: {sorted(unknown)}")
    if "num_classes" not in merged:
        raise UserInputError("config must define num_classes")
    return mdl.model_config_from_kv({k: v for k, v in merged.items() if k in _MODEL_KEYS})


def _train_config_from(kv: dict[str, str], overrides: dict[str, str]) -> tr.TrainConfig:
    merged = dict(kv)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return tr.train_config_from_kv({k: v for k, v in merged.items() if k in tr.KNOWN_TRAIN_KEYS})


def _print_report(report: tr.EvalReport) -> None:
    print(report.format_text())


def _cmd_synth(args) -> int:
    manifest = synth_dataset(args.classes, args.per_class, args.frames, args.seed, args.out)
    print(f"wrote {args.classes * args.per_class} sequences, manifest {manifest}")
    return EXIT_OK


def _cmd_train(args) -> int:
    kv = _read_config_file(args.config)
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
        "seed": args.seed, "modality": args.modality, "workers": args.workers,
    }
    overrides = {k: (str(v) if v is not None else None) for k, v in overrides.items()}
    model_cfg = _model_config_from(kv, {})
    train_cfg = _train_config_from(kv, overrides)
    log_path = args.log if args.log else str(args.out) + ".log"
    t0 = time.perf_counter()
    tr.train(args.manifest, model_cfg, train_cfg, ckpt_path=args.out, log_path=log_path,
             log_stream=sys.stdout)
    print(f"checkpoint {args.out} metrics {log_path} ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    report = tr.evaluate_checkpoint(args.manifest, args.ckpt, scores_path=args.scores)
    _print_report(report)
    if args.scores:
        print(f"scores {args.scores}")
    return EXIT_OK


def _cmd_fuse(args) -> int:
    if len(args.scores) < 2:
        raise UserInputError("fuse needs at least two score files")
    report = tr.fuse_streams(args.scores)
    _print_report(report)
    return EXIT_OK


def _cmd_flops(args) -> int:
    kv = _read_config_file(args.config)
    config = _model_config_from(kv, {})
    report = cx.count_model(config)
    print(cx.format_text(report))
    print()
    print(cx.format_csv(report))
    if args.compare:
        other = _model_config_from(_read_config_file(args.compare), {})
        print()
        print(cx.format_comparison(cx.compare_configs(config, other)))
    return EXIT_OK


def _cmd_augment(args) -> int:
    seq = load_sequence(getattr(args, "in"))
    rng = np.random.default_rng(args.seed)
    pmap = default_partition_map()
    if args.op == "rotation":
        out = aug.apply_rotation(seq, aug.random_rotation(rng, args.bound))
    elif args.op == "part_mask":
        part = args.part if args.part is not None else int(rng.integers(pmap.parts))
        try:
            out = aug.part_mask_coords(seq, pmap, part)
        except ValueError as exc:
            raise UserInputError(str(exc)) from exc
    elif args.op == "noise":
        out = aug.gaussian_noise(seq, args.sigma, rng)
    elif args.op == "joint_mask":
        try:
            out = aug.joint_mask(seq, args.count, rng)
        except ValueError as exc:
            raise UserInputError(str(exc)) from exc
    else:  # pragma: no cover - argparse restricts choices
        raise UserInputError(f"unknown op {args.op}")
    save_sequence(out, args.out)
    print(f"augment {args.op}: {getattr(args, 'in')} -> {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_suite(args.seed)
    worst = 0.0
    for name, err in results:
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:<20} max_rel_err={err:.3e} {status}")
        worst = max(worst, err)
    print(f"gradcheck {'passed' if worst < GRADCHECK_TOLERANCE else 'FAILED'} "
          f"(worst {worst:.3e}, {time.perf_counter() - t0:.1f}s)")
    return EXIT_OK if worst < GRADCHECK_TOLERANCE else EXIT_INTERNAL


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="iipt", description=__doc__,
                             formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--classes", type=int, default=4, help="number of classes")
    p.add_argument("--per-class", type=int, default=32, help="samples per class")
    p.add_argument("--frames", type=int, default=64, help="raw frames per clip")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--modality", choices=("joint", "bone", "joint_motion", "bone_motion"),
                   default=None, help="input stream (default from config file, else joint)")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="metrics log path (default: <out>.log)")
    p.add_argument("--epochs", type=int, default=None, help="override epochs")
    p.add_argument("--batch-size", type=int, default=None, help="override batch size")
    p.add_argument("--lr", type=float, default=None, help="override base learning rate")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--workers", type=int, default=None, help="augmentation worker threads")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--scores", default=None, help="also write a fusion score file")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("fuse", help="fuse score files by softmax averaging", formatter_class=fmt)
    p.add_argument("--scores", nargs="+", required=True, help="two or more score files")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("flops", help="analytic multiply-add and parameter report", formatter_class=fmt)
    p.add_argument("--config", required=True, help="model config file")
    p.add_argument("--compare", default=None, help="second config for a ratio report")
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("augment", help="apply one augmentation to a sequence file", formatter_class=fmt)
    p.add_argument("--in", required=True, help="input sequence file")
    p.add_argument("--op", choices=("rotation", "part_mask", "noise", "joint_mask"), required=True,
                   help="augmentation to apply")
    p.add_argument("--seed", type=int, default=0, help="rng seed")
    p.add_argument("--out", required=True, help="output sequence file")
    p.add_argument("--bound", type=float, default=aug.AugmentConfig().rotation_bound,
                   help="rotation angle bound (radians)")
    p.add_argument("--part", type=int, default=None, help="part index for part_mask (default: random)")
    p.add_argument("--sigma", type=float, default=0.01, help="noise sigma")
    p.add_argument("--count", type=int, default=10, help="cells to zero for joint_mask")
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0, help="rng seed")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UserInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - invariant failures map to exit 2
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
