"""Cross-entropy loss, Adam, the training loop with early stopping on
validation loss, and evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .data import LabeledImageSet, batches
from .errors import DataEmpty, LabelOutOfRange, NumericError
from .models import Model, audit_params

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def cross_entropy(tape: Tape, logits_node: int, labels: np.ndarray) -> int:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    logits = tape.value(logits_node)
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= c:
        raise LabelOutOfRange(f"labels span [{labels.min()}, {labels.max()}] for {c} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = np.asarray(-log_probs[np.arange(n), labels].mean())
    probs = np.exp(log_probs)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return tape.custom("cross_entropy", loss, (logits_node,), vjp)


class Adam:
    """Standard bias-corrected Adam over a named parameter dict."""

    def __init__(
        self,
        lr: float = 0.001,
        beta1: float = ADAM_BETA1,
        beta2: float = ADAM_BETA2,
        eps: float = ADAM_EPS,
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    precision: str = "f64"  # f64 for gradient checks, f32 for faster runs

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size, max_epochs must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class ExperimentReport:
    model: str
    epochs: list[EpochRow] = field(default_factory=list)
    best_epoch: int = 0
    wall_time_s: float = 0.0
    param_total: int = 0
    param_audit: dict = field(default_factory=dict)
    pipeline_hashes: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def best_row(self) -> EpochRow:
        return self.epochs[self.best_epoch - 1]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_row.val_loss,
            "best_val_acc": self.best_row.val_acc,
            "wall_time_s": self.wall_time_s,
            "param_total": self.param_total,
            "param_audit": self.param_audit,
            "pipeline_hashes": self.pipeline_hashes,
            "config": self.config,
            "epochs": [
                {
                    "epoch": r.epoch,
                    "train_loss": r.train_loss,
                    "val_loss": r.val_loss,
                    "val_acc": r.val_acc,
                }
                for r in self.epochs
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for r in self.epochs:
                writer.writerow([r.epoch, f"{r.train_loss:.17g}", f"{r.val_loss:.17g}", f"{r.val_acc:.17g}"])


def _dataset_hash(dataset: LabeledImageSet) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.images).tobytes())
    h.update(np.ascontiguousarray(dataset.labels).tobytes())
    return h.hexdigest()


def evaluate(model: Model, split: LabeledImageSet, batch_size: int = 256) -> tuple[float, float]:
    """Mean loss and top-1 accuracy in inference mode (running statistics)."""
    if len(split) == 0:
        raise DataEmpty("evaluation split is empty")
    total_loss = 0.0
    correct = 0
    for lo in range(0, len(split), batch_size):
        images = split.images[lo : lo + batch_size]
        labels = split.labels[lo : lo + batch_size]
        tape = Tape()
        node = tape.leaf(images.astype(model.dtype))
        logits_node = model.forward(tape, node, train=False)
        loss = cross_entropy(tape, logits_node, labels)
        total_loss += float(tape.value(loss)) * len(images)
        preds = np.argmax(tape.value(logits_node), axis=1)
        correct += int((preds == labels).sum())
    return total_loss / len(split), correct / len(split)


def train_step(
    model: Model, optimizer: Adam, images: np.ndarray, labels: np.ndarray
) -> float:
    """One forward/backward/Adam update; returns the batch loss."""
    tape = Tape()
    node = tape.leaf(images.astype(model.dtype))
    logits_node = model.forward(tape, node, train=True)
    loss_node = cross_entropy(tape, logits_node, labels)
    loss = float(tape.value(loss_node))
    grads = tape.backward(loss_node).params
    optimizer.step(dict(model.params()), grads)
    return loss


def train(
    model: Model,
    train_set: LabeledImageSet,
    val_set: LabeledImageSet,
    config: TrainConfig,
    log=None,
) -> tuple[ExperimentReport, list[tuple[str, np.ndarray]]]:
    """Paper protocol: seeded shuffle, Adam, stop once validation loss has
    not improved for `patience` epochs. Returns the report and the best
    state (deep copies, restored into the model before returning)."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataEmpty("train and validation splits must be non-empty")
    started = time.perf_counter()
    optimizer = Adam(lr=config.learning_rate)
    report = ExperimentReport(
        model=model.spec.name,
        param_total=model.param_count(),
        param_audit=audit_params(model.spec).to_dict(),
        config={
            "learning_rate": config.learning_rate,
            "batch_size": config.batch_size,
            "max_epochs": config.max_epochs,
            "patience": config.patience,
            "seed": config.seed,
            "precision": config.precision,
        },
    )
    best_val = np.inf
    best_state: list[tuple[str, np.ndarray]] = []
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        report.pipeline_hashes.append(_dataset_hash(train_set))
        epoch_loss = 0.0
        for batch_index, (images, labels) in enumerate(
            batches(train_set, config.batch_size, config.seed, epoch)
        ):
            loss = train_step(model, optimizer, images, labels)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {batch_index}")
            epoch_loss += loss * len(images)
        val_loss, val_acc = evaluate(model, val_set)
        row = EpochRow(epoch, epoch_loss / len(train_set), val_loss, val_acc)
        report.epochs.append(row)
        if log:
            log(
                f"epoch {epoch:3d}  train {row.train_loss:.4f}  "
                f"val {row.val_loss:.4f}  acc {row.val_acc:.4f}"
            )
        if val_loss < best_val:
            best_val = val_loss
            report.best_epoch = epoch
            best_state = [(name, arr.copy()) for name, arr in model.state()]
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    for (name, arr), (_, best) in zip(model.state(), best_state):
        arr[...] = best
    report.wall_time_s = time.perf_counter() - started
    return report, best_state
