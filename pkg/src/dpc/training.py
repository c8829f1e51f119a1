"""SGD with momentum, step schedule, training/evaluation loops and checkpoints."""

from __future__ import annotations

import io
import statistics
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encoders import ArchiveError, read_entries, write_entries
from .graph import ContractViolation, NumericError, Parameter, backward, zero_grad
from .prompting import ABLATION_ROWS, AblationFlags

CHECKPOINT_MAGIC = b"DPCC"
CHECKPOINT_VERSION = 1


class DigestMismatch(ContractViolation):
    pass


# ---------------------------------------------------------------------------
# optimisation


def step_lr(epoch: int, lr0: float, step_size: int = 3, gamma: float = 0.9) -> float:
    """``lr0 * gamma ** (epoch // step_size)``, rounded once from exact decimals.

    Repeated float multiplication drifts (0.1 * 0.9 != 0.09); going through
    Decimal returns the double nearest to the true product.
    """
    if epoch < 0:
        raise ContractViolation(f"epoch must be >= 0, got {epoch}")
    k = epoch // step_size
    return float(Decimal(repr(float(lr0))) * Decimal(repr(float(gamma))) ** k)


@dataclass(frozen=True)
class Schedule:
    lr0: float
    step_size: int = 3
    gamma: float = 0.9

    def lr(self, epoch: int) -> float:
        return step_lr(epoch, self.lr0, self.step_size, self.gamma)

    def sequence(self, epochs: int) -> list[float]:
        return [self.lr(e) for e in range(epochs)]


class SGD:
    """``v <- momentum * v + g``; ``theta <- theta - lr * v``."""

    def __init__(self, parameters: Sequence[Parameter], lr: float, momentum: float = 0.9):
        self.parameters = list(parameters)
        frozen = [p.name or repr(p) for p in self.parameters if not p.trainable]
        if frozen:
            raise ContractViolation(f"optimizer given frozen parameters: {frozen}")
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.parameters]

    def step(self) -> None:
        missing = [p.name or repr(p) for p in self.parameters if p.grad is None]
        if missing:
            raise ContractViolation(f"sgd_step: no gradient on trainable parameters {missing}")
        for p, v in zip(self.parameters, self.velocity):
            dt = p.data.dtype.type
            v *= dt(self.momentum)
            v += p.grad
            p.data -= dt(self.lr) * v
        zero_grad(self.parameters)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    confusion: np.ndarray  # rows = ground truth, columns = prediction

    @property
    def correct(self) -> int:
        return int(np.trace(self.confusion))

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    @property
    def per_class_accuracy(self) -> list[float]:
        rows = self.confusion.sum(axis=1)
        return [float(self.confusion[i, i] / rows[i]) if rows[i] else float("nan")
                for i in range(len(rows))]


def confusion_matrix(targets: np.ndarray, predictions: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (np.asarray(targets), np.asarray(predictions)), 1)
    return out


def predict_all(model, features: np.ndarray, batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Predictions in fixed ``batch_size`` chunks.

    Chunk boundaries do not depend on ``threads``, so results are identical
    whatever the parallelism.
    """
    chunks = [features[i:i + batch_size] for i in range(0, len(features), batch_size)]
    if not chunks:
        return np.zeros(0, dtype=np.int64)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return np.concatenate(list(pool.map(model.predict, chunks)))


def evaluate(model, features: np.ndarray, targets: np.ndarray, batch_size: int = 64,
             threads: int = 1) -> Metrics:
    preds = predict_all(model, features, batch_size, threads)
    return Metrics(confusion_matrix(targets, preds, model.n_classes))


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainSettings:
    lr0: float
    momentum: float = 0.9
    step_size: int = 3
    gamma: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    shuffle_seed: int = 0
    threads: int = 1

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.lr0, self.step_size, self.gamma)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    test_accuracy: float | None


@dataclass
class TrainResult:
    history: list[EpochRecord]
    optimizer: SGD
    steps: int
    final_train: Metrics
    final_test: Metrics | None = None


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _locate_bad_instances(model, features, targets, idx) -> list[int]:
    bad = []
    for i in idx:
        try:
            if not np.isfinite(model.loss(features[i:i + 1], targets[i:i + 1]).item()):
                bad.append(int(i))
        except NumericError:
            bad.append(int(i))
    return bad


def train(model, features: np.ndarray, targets: np.ndarray, settings: TrainSettings,
          test_features: np.ndarray | None = None, test_targets: np.ndarray | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Minibatch training of ``model.parameters()`` only; one schedule step per epoch."""
    params = model.parameters()
    opt = SGD(params, settings.lr0, settings.momentum)
    history: list[EpochRecord] = []
    steps = 0
    n = len(features)
    for epoch in range(settings.epochs):
        opt.lr = settings.schedule.lr(epoch)
        running = 0.0
        for b, idx in enumerate(batch_order(n, settings.batch_size, settings.shuffle_seed, epoch)):
            if max_steps is not None and steps >= max_steps:
                break
            try:
                loss = model.loss(features[idx], targets[idx])
                if not np.isfinite(loss.item()):
                    raise NumericError("loss is not finite")
                backward(loss, params)
            except NumericError as exc:
                bad = _locate_bad_instances(model, features, targets, idx)
                raise NumericError(f"epoch {epoch}, batch {b}, instances {bad}: {exc}") from exc
            opt.step()
            steps += 1
            running += loss.item() * len(idx)
        train_acc = evaluate(model, features, targets, settings.batch_size, settings.threads).accuracy
        test_acc = None
        if test_features is not None:
            test_acc = evaluate(model, test_features, test_targets, settings.batch_size,
                                settings.threads).accuracy
        history.append(EpochRecord(epoch, opt.lr, running / n, train_acc, test_acc))
    final_train = evaluate(model, features, targets, settings.batch_size, settings.threads)
    final_test = None
    if test_features is not None:
        final_test = evaluate(model, test_features, test_targets, settings.batch_size, settings.threads)
    return TrainResult(history, opt, steps, final_train, final_test)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Prompt parameters and optimizer velocity only; never encoder weights."""

    config_digest: bytes
    epoch: int
    bank: np.ndarray
    velocity: np.ndarray | None = None

    def to_bytes(self) -> bytes:
        if len(self.config_digest) != 32:
            raise ContractViolation(f"config digest must be 32 bytes, got {len(self.config_digest)}")
        entries = {"prompt_bank": self.bank}
        if self.velocity is not None:
            entries["velocity.prompt_bank"] = self.velocity
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        buf.write(self.config_digest)
        buf.write(struct.pack("<II", self.epoch, len(entries)))
        write_entries(buf, entries)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != CHECKPOINT_MAGIC:
            raise ArchiveError(f"bad checkpoint magic {buf[:4]!r}")
        if len(buf) < 48:
            raise ArchiveError(f"truncated checkpoint header ({len(buf)} bytes)")
        (version,) = struct.unpack("<I", buf[4:8])
        if version != CHECKPOINT_VERSION:
            raise ArchiveError(f"unsupported checkpoint version {version}")
        digest = buf[8:40]
        epoch, count = struct.unpack("<II", buf[40:48])
        entries, end = read_entries(buf, 48, count)
        if end != len(buf):
            raise ArchiveError(f"trailing bytes in checkpoint at byte offset {end}")
        if "prompt_bank" not in entries:
            raise ArchiveError("checkpoint has no prompt_bank entry")
        return cls(digest, epoch, entries["prompt_bank"], entries.get("velocity.prompt_bank"))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def capture(cls, model, optimizer: SGD | None, config_digest: bytes, epoch: int) -> "Checkpoint":
        velocity = optimizer.velocity[0].copy() if optimizer is not None else None
        return cls(config_digest, epoch, model.bank.values.data.copy(), velocity)

    def restore(self, model, expected_digest: bytes) -> None:
        """Load the prompt bank into ``model``; refuses a checkpoint from another config."""
        if self.config_digest != expected_digest:
            raise DigestMismatch(
                f"checkpoint config digest {self.config_digest.hex()} does not match "
                f"runtime config digest {expected_digest.hex()}")
        target = model.bank.values
        if self.bank.shape != target.shape:
            raise ContractViolation(f"checkpoint bank shape {self.bank.shape} != model {target.shape}")
        target.data[...] = self.bank.astype(target.dtype)


# ---------------------------------------------------------------------------
# harnesses


@dataclass
class AblationRow:
    flags: AblationFlags
    accuracy: float


def ablate(run: Callable[[AblationFlags], float],
           rows: Sequence[AblationFlags] = ABLATION_ROWS) -> list[AblationRow]:
    """One training run per flag combination; ``run`` must hold seeds fixed."""
    return [AblationRow(flags, run(flags)) for flags in rows]


def sample_std(values: Sequence[float]) -> float:
    """Standard deviation with the n - 1 denominator."""
    if len(values) < 2:
        raise ContractViolation(f"sample std needs at least 2 values, got {len(values)}")
    return statistics.stdev(values)


@dataclass
class SensitivityReport:
    templates: list[str]
    accuracies: list[float]
    std: float = field(init=False)

    def __post_init__(self):
        self.std = sample_std(self.accuracies)


def sensitivity(run: Callable[[str], float], templates: Sequence[str]) -> SensitivityReport:
    if len(templates) < 2:
        raise ContractViolation(f"sensitivity needs at least 2 templates, got {len(templates)}")
    return SensitivityReport(list(templates), [run(t) for t in templates])
