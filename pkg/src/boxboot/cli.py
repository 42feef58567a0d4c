"""``boxboot`` command line: gen-data, train, grad-check, eval.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 I/O error.
Result lines go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from boxboot import diffnet, gradcheck, trainer
from boxboot.config import ConfigError, load_config
from boxboot.synthdata import DatasetError, generate_dataset, manifest_header, read_dataset, write_dataset
from boxboot.trainer import TrainConfig, TrainData, TrainingAborted

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("boxboot")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(path):
    try:
        return load_config(path)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None


def _dataset(path):
    try:
        return read_dataset(path)
    except (DatasetError, OSError, UnicodeDecodeError) as exc:
        raise CliError(f"cannot read dataset: {exc}", EXIT_IO) from None


def cmd_gen_data(args) -> int:
    _, scene_cfg, pp_ratio = _config(args.config)
    if args.n < 5:
        raise CliError(f"--n must be at least 5, got {args.n}", EXIT_USAGE)
    dataset = generate_dataset(scene_cfg, args.n, pp_ratio)
    try:
        write_dataset(args.out, dataset)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {args.out}: {exc}", EXIT_IO) from None
    print(manifest_header(len(dataset.scenes), dataset.width, dataset.height, dataset.classes))
    return EXIT_OK


def _write_run(out: Path, params, history) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        trainer.write_metrics(out / "metrics.csv", history)
        diffnet.save_checkpoint(out / "final.ckpt", params)
    except OSError as exc:
        raise CliError(f"cannot write run outputs to {out}: {exc}", EXIT_IO) from None


def cmd_train(args) -> int:
    train_cfg, scene_cfg, _ = _config(args.config)
    dataset = _dataset(args.data)
    if scene_cfg.classes != dataset.classes:
        log.warning("config says classes=%d, dataset has %d; using the dataset", scene_cfg.classes, dataset.classes)
    try:
        trainer.network_classes(dataset.classes, train_cfg.loss_variant)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    data = TrainData.from_dataset(dataset)
    out = Path(args.out)
    try:
        params, history = trainer.train(data, train_cfg)
    except TrainingAborted as exc:
        _write_run(out, exc.params, exc.history)
        log.error("%s (last parameters written to %s)", exc, out / "final.ckpt")
        return EXIT_CHECK
    _write_run(out, params, history)
    if train_cfg.export_masks:
        try:
            trainer.export_masks(params, data, train_cfg, out / "masks")
        except OSError as exc:
            raise CliError(f"cannot export masks: {exc}", EXIT_IO) from None
    print(f"miou={history[-1].miou!r}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    names = [args.loss] if args.loss else None
    results = gradcheck.run_suites(names)
    for result in results:
        print(result.line())
    return EXIT_OK if all(r.ok for r in results) else EXIT_CHECK


def cmd_eval(args) -> int:
    cfg = _config(args.config)[0] if args.config else TrainConfig()
    try:
        params = diffnet.load_checkpoint(args.ckpt)
    except (diffnet.CheckpointError, OSError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}", EXIT_IO) from None
    dataset = _dataset(args.data)
    channels = diffnet.n_classes_of(params)
    allowed = {1, 2} if dataset.classes == 1 else {dataset.classes + 1}
    if channels not in allowed:
        raise CliError(
            f"checkpoint predicts {channels} class channel(s), dataset has {dataset.classes} object class(es)", EXIT_USAGE
        )
    if channels > 1 and cfg.loss_variant in (trainer.LossVariant.L2_UNC, trainer.LossVariant.BCE_UNC_BOOTSTRAP):
        cfg = TrainConfig(loss_variant=trainer.LossVariant.MULTI_CLASS, tau=cfg.tau)
    record = trainer.evaluate(params, TrainData.from_dataset(dataset), cfg)
    for c, value in enumerate(record.iou, 1):
        print(f"iou_c{c}={value!r}")
    print(f"miou={record.miou!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boxboot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grad-check", help="run the finite-difference gradient suites")
    p.add_argument("--loss", choices=gradcheck.SUITE_NAMES, help="run only this loss variant's suite")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="training config (selects the decision rule and tau)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"boxboot {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    raise SystemExit(main())
