"""``dpc <command> --config <file> [--set key=value]...``

Exit status: 0 success, 1 validation error, 2 numeric error, 3 failed gradcheck.
All artifacts go under ``<out_dir>/<config digest>/``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock, Timeout

from . import experiment as ex
from .config import RunConfig, parse_config
from .data import ImageReadError, SeparabilityError
from .graph import ContractViolation, NonDeterministicError, NumericError, inject_backward_fault
from .training import Checkpoint, Metrics, ablate, evaluate, sensitivity

log = logging.getLogger("dpc")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3
COMMANDS = ("train", "eval", "ablate", "sensitivity", "gradcheck")


def eval_threads() -> int:
    raw = os.environ.get("DPC_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ContractViolation(f"DPC_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ContractViolation(f"DPC_THREADS must be a positive integer, got {raw!r}")
    return value


def run_dir(config: RunConfig) -> Path:
    return config.resolve(config.out_dir) / config.digest().hex()


def write_kv(path: Path, items: Sequence[tuple[str, object]]) -> None:
    lines = [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in items]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_confusion(path: Path, confusion: np.ndarray) -> None:
    path.write_text("".join(",".join(str(int(v)) for v in row) + "\n" for row in confusion),
                    encoding="utf-8")


def _header(config: RunConfig, command: str) -> list[tuple[str, object]]:
    return [
        ("config_digest", config.digest().hex()),
        ("command", command),
        ("instance_specific", str(config.instance_specific).lower()),
        ("class_specific", str(config.class_specific).lower()),
        ("normalize_weights", str(config.normalize_weights).lower()),
        ("logit_scale", config.logit_scale),
        ("template", config.template),
    ]


def _metric_items(prefix: str, m: Metrics, labels: Sequence[str]) -> list[tuple[str, object]]:
    items: list[tuple[str, object]] = [
        (f"{prefix}.accuracy", m.accuracy),
        (f"{prefix}.correct", m.correct),
        (f"{prefix}.total", m.total),
    ]
    items += [(f"{prefix}.per_class_accuracy.{label}", acc)
              for label, acc in zip(labels, m.per_class_accuracy)]
    return items


def cmd_train(config: RunConfig, out: Path, threads: int) -> int:
    prep = ex.prepare(config, threads)
    model, result = ex.run_training(config, prep, threads=threads)
    Checkpoint.capture(model, result.optimizer, config.digest(), config.epochs).save(out / "checkpoint.dpcc")
    items = _header(config, "train")
    items += [("labels", ",".join(prep.labels)), ("n_train", len(prep.train_y)),
              ("n_test", len(prep.test_y))]
    if prep.certificate is not None:
        items.append(("separability_certificate", prep.certificate))
    for rec in result.history:
        items += [(f"epoch.{rec.epoch}.lr", rec.lr), (f"epoch.{rec.epoch}.train_loss", rec.train_loss),
                  (f"epoch.{rec.epoch}.train_accuracy", rec.train_accuracy),
                  (f"epoch.{rec.epoch}.test_accuracy", rec.test_accuracy)]
    items.append(("steps", result.steps))
    items += _metric_items("final.train", result.final_train, prep.labels)
    items += _metric_items("final.test", result.final_test, prep.labels)
    write_kv(out / "metrics.txt", items)
    write_confusion(out / "confusion.csv", result.final_test.confusion)
    print(f"train: test accuracy {result.final_test.accuracy:.4f} -> {out}")
    return EXIT_OK


def cmd_eval(config: RunConfig, out: Path, threads: int, checkpoint: str | None) -> int:
    ckpt_path = Path(checkpoint) if checkpoint else out / "checkpoint.dpcc"
    if not ckpt_path.exists():
        raise ContractViolation(f"checkpoint not found: {ckpt_path}")
    ckpt = Checkpoint.load(ckpt_path)
    if ckpt.config_digest != config.digest():
        print(f"checkpoint digest: {ckpt.config_digest.hex()}", file=sys.stderr)
        print(f"runtime digest:    {config.digest().hex()}", file=sys.stderr)
    prep = ex.prepare(config, threads)
    model = ex.build_model(config, prep)
    ckpt.restore(model, config.digest())
    metrics = evaluate(model, prep.test_x, prep.test_y, config.batch_size, threads)
    items = _header(config, "eval") + [("labels", ",".join(prep.labels)), ("epoch", ckpt.epoch)]
    items += _metric_items("test", metrics, prep.labels)
    write_kv(out / "eval_metrics.txt", items)
    write_confusion(out / "eval_confusion.csv", metrics.confusion)
    print(f"eval: test accuracy {metrics.accuracy:.4f} -> {out}")
    return EXIT_OK


def cmd_ablate(config: RunConfig, out: Path, threads: int) -> int:
    prep = ex.prepare(config, threads)
    baseline = ex.zero_shot_accuracy(config, prep, threads)
    rows = ablate(lambda flags: ex.run_training(config, prep, flags, threads=threads)[1].final_test.accuracy)
    items = _header(config, "ablate") + [("zero_shot_accuracy", baseline)]
    for k, row in enumerate(rows):
        items += [(f"row.{k}.instance_specific", str(row.flags.instance_specific).lower()),
                  (f"row.{k}.class_specific", str(row.flags.class_specific).lower()),
                  (f"row.{k}.accuracy", row.accuracy),
                  (f"row.{k}.margin_over_zero_shot", row.accuracy - baseline)]
    write_kv(out / "ablation.txt", items)
    for row in rows:
        print(f"{row.flags.label}: {row.accuracy:.4f}")
    return EXIT_OK


def cmd_sensitivity(config: RunConfig, out: Path, threads: int) -> int:
    prep = ex.prepare(config, threads)
    report = sensitivity(
        lambda t: ex.run_training(config, prep, template=t, threads=threads)[1].final_test.accuracy,
        config.templates)
    items = _header(config, "sensitivity")
    for k, (t, acc) in enumerate(zip(report.templates, report.accuracies)):
        items += [(f"template.{k}.text", t), (f"template.{k}.accuracy", acc)]
    items.append(("sample_std", report.std))
    write_kv(out / "sensitivity.txt", items)
    print(f"sensitivity: std {report.std:.4f}")
    return EXIT_OK


def cmd_gradcheck(config: RunConfig, out: Path, fault: str | None) -> int:
    if fault:
        with inject_backward_fault(fault):
            report = ex.gradient_check(config)
    else:
        report = ex.gradient_check(config)
    items = _header(config, "gradcheck") + [
        ("step", report.step), ("tolerance", report.tolerance),
        ("coordinates", report.n_coordinates), ("max_rel_error", report.max_rel_error),
        ("passed", str(report.passed).lower())]
    if fault:
        items.append(("injected_fault", fault))
    write_kv(out / "gradcheck.txt", items)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpc", description="Diversified prompt tuning runs.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="flat TOML run config")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("--checkpoint", help="eval: checkpoint file (default: run directory's)")
    parser.add_argument("--inject-fault", metavar="OP",
                        help="gradcheck test hook: corrupt the backward rule of OP (e.g. mul)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = parse_config(args.config, args.overrides)
        threads = eval_threads()
        out = run_dir(config)
        out.mkdir(parents=True, exist_ok=True)
        try:
            lock = FileLock(str(out / ".lock"), timeout=0)
            lock.acquire()
        except Timeout:
            raise ContractViolation(f"run directory {out} is locked by another process") from None
        try:
            if args.command == "train":
                return cmd_train(config, out, threads)
            if args.command == "eval":
                return cmd_eval(config, out, threads, args.checkpoint)
            if args.command == "ablate":
                return cmd_ablate(config, out, threads)
            if args.command == "sensitivity":
                return cmd_sensitivity(config, out, threads)
            return cmd_gradcheck(config, out, args.inject_fault)
        finally:
            lock.release()
    except (NumericError, SeparabilityError, NonDeterministicError) as exc:
        print(f"dpc: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractViolation, ImageReadError) as exc:
        print(f"dpc: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
