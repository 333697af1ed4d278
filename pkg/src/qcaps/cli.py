"""Command-line surface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import data_io as dio
from . import gradcheck as gc
from . import model as qmodel
from . import train as qtrain

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (
    dio.DatasetMissing, dio.BadMagic, dio.TruncatedFile, dio.DimensionMismatch,
    dio.MissingCompanion, dio.MissingMeta, ckpt.BadCheckpoint, ckpt.CheckpointMismatch,
    FileNotFoundError,
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qcaps",
        description="Quaternion capsule networks: train, evaluate, verify.",
    )
    parser.add_argument("--version", action="version", version=f"qcaps {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the optimization loop")
    p_train.add_argument("--config", help="flat key = value config file")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--dataset")
    p_train.add_argument("--data-dir", dest="data_dir")
    p_train.add_argument("--out", dest="out_dir")
    p_train.add_argument("--split", choices=["standard", "novel-azimuth", "novel-elevation"])
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--no-figures", action="store_true",
                         help="skip rendering PNG training curves")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset")
    p_eval.add_argument("--data-dir", dest="data_dir")
    p_eval.add_argument("--split", choices=["standard", "novel-azimuth", "novel-elevation"])

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--tolerance", type=float,
                        help="override every component's tolerance")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--self-test", action="store_true",
                        help="corrupt one gradient to prove failures surface")

    p_params = sub.add_parser("params", help="trainable-parameter census")
    p_params.add_argument("--config", help="flat key = value config file")
    p_params.add_argument("--dataset")

    p_data = sub.add_parser("data", help="dataset utilities")
    data_sub = p_data.add_subparsers(dest="data_command", required=True)
    p_verify = data_sub.add_parser("verify", help="parse a dataset and check invariants")
    p_verify.add_argument("--dataset", required=True)
    p_verify.add_argument("--data-dir", dest="data_dir", default="data")

    p_report = sub.add_parser("report", help="render figures from a metrics CSV")
    p_report.add_argument("--metrics", required=True)
    p_report.add_argument("--out", help="output directory (default: beside the CSV)")
    return parser


def _load_config(args, keys):
    file_values = qtrain.parse_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return qtrain.make_config(file_values, overrides)


def cmd_train(args):
    overrides = ["seed", "epochs", "dataset", "data_dir", "out_dir", "split",
                 "batch_size", "resume"]
    config = _load_config(args, overrides)
    if args.no_figures:
        config = dataclasses.replace(config, figures=False)

    def progress(row):
        fam = row.get("eval_familiar", "")
        nov = row.get("eval_novel", "")
        extra = f" familiar={fam:.4f}" if isinstance(fam, float) else ""
        extra += f" novel={nov:.4f}" if isinstance(nov, float) else ""
        print(
            f"epoch {row['epoch']:>3} step {row['step']:>6} "
            f"loss {row['loss']:.4f} train_acc {row['train_acc']:.4f}{extra}",
            flush=True,
        )

    checkpoint_path, metrics_path = qtrain.train(config, progress=progress)
    print(f"checkpoint: {checkpoint_path}")
    print(f"metrics: {metrics_path}")
    if config.figures:
        from .report import FIGURES

        print(f"figures: {', '.join(FIGURES)} in {config.out_dir}")
    return EXIT_OK


def cmd_eval(args):
    result = qtrain.evaluate(
        args.checkpoint, dataset=args.dataset, data_dir=args.data_dir, split=args.split
    )
    print(json.dumps(result, indent=2, default=float))
    return EXIT_OK


def cmd_gradcheck(args):
    tolerances = None
    if args.tolerance is not None:
        tolerances = {name: args.tolerance for name in gc.DEFAULT_TOLERANCES}
    rows = gc.run_gradcheck(
        tolerances, seed=args.seed,
        negate_component="rotor_rotation" if args.self_test else None,
    )
    failed = False
    for row in rows:
        status = "pass" if row["passed"] else "FAIL"
        print(
            f"{status}  {row['component']:<22} max_rel_error={row['max_rel_error']:.3e} "
            f"tolerance={row['tolerance']:.0e}"
        )
        failed |= not row["passed"]
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_params(args):
    config = _load_config(args, ["dataset"])
    net = qmodel.init_parameters(qtrain.build_arch(config), seed=config.seed)
    report = net.parameter_count()
    print(f"dataset: {config.dataset}")
    for module, count in report["modules"].items():
        print(f"  {module:<8} {count:>10,}")
    print(f"  {'total':<8} {report['total']:>10,}")
    print(
        f"transform parameters: {report['rotor_transform_params']:,} as rotors vs "
        f"{report['matrix_transform_params']:,} as 4x4 matrices "
        f"(ratio {report['transform_param_ratio']:.2f})"
    )
    return EXIT_OK


def cmd_data_verify(args):
    train, test = dio.load_dataset(args.dataset, args.data_dir)
    classes = dio.DATASET_CLASSES[args.dataset]
    problems = []
    for split_name, samples in [("train", train), ("test", test)]:
        labels = np.array([s.label for s in samples])
        if labels.min() < 0 or labels.max() >= classes:
            problems.append(f"{split_name}: labels outside [0, {classes})")
        for s in samples:
            if s.image.min() < 0.0 or s.image.max() > 1.0:
                problems.append(f"{split_name}: image values outside [0, 1]")
                break
        if samples[0].meta is not None:
            azimuths = {s.meta["azimuth"] for s in samples}
            elevations = {s.meta["elevation"] for s in samples}
            if any(a % 2 or not 0 <= a <= 34 for a in azimuths):
                problems.append(f"{split_name}: azimuth codes outside even 0..34")
            if any(not 0 <= e <= 8 for e in elevations):
                problems.append(f"{split_name}: elevation indices outside 0..8")
        hist = np.bincount(labels, minlength=classes)
        print(
            f"{split_name}: {len(samples)} samples, image {samples[0].image.shape}, "
            f"label histogram {hist.tolist()}"
        )
    if problems:
        for p in problems:
            print(f"INVALID: {p}", file=sys.stderr)
        return EXIT_DATA
    print("ok")
    return EXIT_OK


def cmd_report(args):
    from . import report

    written = report.render_metrics(args.metrics, args.out)
    for path in written:
        print(path)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "params":
            return cmd_params(args)
        if args.command == "data":
            return cmd_data_verify(args)
        if args.command == "report":
            return cmd_report(args)
        parser.error(f"unknown command {args.command}")
    except qtrain.ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except qtrain.NonFiniteLoss as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
