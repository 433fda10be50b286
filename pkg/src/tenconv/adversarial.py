"""FGSM white-box attack, epsilon sweeps producing robustness curves, and
cross-model transfer (black-box) evaluation.

The attack rule is x_adv = clip(x + eps * sign(dL/dx), 0, 1) with the same
cross-entropy used in training and the true labels. Sweeps craft the
examples per batch from the attacked model itself; transfer crafts them on
a source model and measures the target.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .data import LabeledImageSet
from .errors import ClassCountMismatch, DataEmpty
from .models import Model
from .training import cross_entropy


@dataclass
class AttackConfig:
    epsilons: list[float] = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3])
    clip: tuple[float, float] = (0.0, 1.0)
    batch_size: int = 256

    def __post_init__(self) -> None:
        eps = list(self.epsilons)
        if not eps:
            raise DataEmpty("epsilon list is empty")
        if any(e < 0 for e in eps) or eps != sorted(eps):
            raise ValueError(f"epsilons must be ascending and non-negative, got {eps}")


@dataclass
class RobustnessCurve:
    model: str
    param_count: int
    epsilons: list[float]
    accuracies: list[float]
    source_model: str | None = None  # set for transfer attacks

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "param_count": self.param_count,
            "source_model": self.source_model,
            "epsilons": self.epsilons,
            "accuracies": self.accuracies,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epsilon", "accuracy"])
            for e, a in zip(self.epsilons, self.accuracies):
                writer.writerow([f"{e:.17g}", f"{a:.17g}"])


def input_gradient(model: Model, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """dL/dx of the inference-mode cross-entropy at the true labels."""
    tape = Tape()
    node = tape.leaf(np.ascontiguousarray(images, dtype=model.dtype))
    logits = model.forward(tape, node, train=False)
    loss = cross_entropy(tape, logits, labels)
    return tape.backward(loss, want=[node]).nodes[node]


def fgsm(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    epsilon: float,
    clip: tuple[float, float] = (0.0, 1.0),
) -> np.ndarray:
    """Single-step sign attack; the perturbation never exceeds epsilon in
    L-infinity and outputs stay inside the clip range."""
    if epsilon == 0.0:
        return images.copy()
    grad = input_gradient(model, images, labels)
    adv = np.clip(images + epsilon * np.sign(grad), clip[0], clip[1])
    # x + eps - x can round one ulp above eps; snap those pixels back so the
    # realized L-infinity bound holds exactly
    over = np.abs(adv - images) > epsilon
    while np.any(over):
        adv[over] = np.nextafter(adv[over], images[over])
        over = np.abs(adv - images) > epsilon
    return adv


def _adversarial_accuracy(
    attacked: Model, measured: Model, dataset: LabeledImageSet, epsilon: float, config: AttackConfig
) -> float:
    correct = 0
    for lo in range(0, len(dataset), config.batch_size):
        images = dataset.images[lo : lo + config.batch_size]
        labels = dataset.labels[lo : lo + config.batch_size]
        adv = fgsm(attacked, images, labels, epsilon, config.clip)
        preds = np.argmax(measured.logits(adv, train=False), axis=1)
        correct += int((preds == labels).sum())
    return correct / len(dataset)


def sweep(model: Model, dataset: LabeledImageSet, config: AttackConfig) -> RobustnessCurve:
    """White-box robustness curve: adversarial accuracy per epsilon."""
    if len(dataset) == 0:
        raise DataEmpty("attack dataset is empty")
    accs = [_adversarial_accuracy(model, model, dataset, e, config) for e in config.epsilons]
    return RobustnessCurve(model.spec.name, model.param_count(), list(config.epsilons), accs)


def transfer_attack(
    source: Model, target: Model, dataset: LabeledImageSet, config: AttackConfig
) -> RobustnessCurve:
    """Black-box curve: examples crafted on `source`, measured on `target`."""
    if source.spec.class_count != target.spec.class_count:
        raise ClassCountMismatch(
            f"source has {source.spec.class_count} classes, target {target.spec.class_count}"
        )
    if len(dataset) == 0:
        raise DataEmpty("attack dataset is empty")
    accs = [_adversarial_accuracy(source, target, dataset, e, config) for e in config.epsilons]
    return RobustnessCurve(
        target.spec.name,
        target.param_count(),
        list(config.epsilons),
        accs,
        source_model=source.spec.name,
    )
