"""Tensor-neuron convolutional networks: a self-contained engine whose basic
unit is a tensor-valued neuron, with reverse-mode autodiff, training,
parameter audits, and FGSM robustness experiments."""

from .adversarial import AttackConfig, RobustnessCurve, fgsm, sweep, transfer_attack
from .autodiff import Gradients, GradCheckReport, Tape, grad_check
from .data import LabeledImageSet, batches, load_cifar, load_mnist, make_synthetic
from .layers import (
    BatchNorm,
    FeatureMap,
    FullyConnected,
    PReLU,
    ResidualBlock,
    ScalarConv2d,
    TensorConv,
)
from .models import (
    LayerSpec,
    Model,
    ModelSpec,
    ParamAudit,
    audit_params,
    build_mnist_family,
    build_model,
    builtin_spec,
    load_model,
    save_model,
    trace_spec,
)
from .tensor import (
    TensorTransformSpec,
    contract,
    elementwise,
    linear_combine,
    transform_mode,
)
from .training import Adam, ExperimentReport, TrainConfig, cross_entropy, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AttackConfig",
    "BatchNorm",
    "ExperimentReport",
    "FeatureMap",
    "FullyConnected",
    "GradCheckReport",
    "Gradients",
    "LabeledImageSet",
    "LayerSpec",
    "Model",
    "ModelSpec",
    "PReLU",
    "ParamAudit",
    "ResidualBlock",
    "RobustnessCurve",
    "ScalarConv2d",
    "Tape",
    "TensorConv",
    "TensorTransformSpec",
    "TrainConfig",
    "audit_params",
    "batches",
    "build_mnist_family",
    "build_model",
    "builtin_spec",
    "contract",
    "cross_entropy",
    "elementwise",
    "evaluate",
    "fgsm",
    "grad_check",
    "linear_combine",
    "load_cifar",
    "load_mnist",
    "load_model",
    "make_synthetic",
    "save_model",
    "sweep",
    "trace_spec",
    "train",
    "transfer_attack",
    "transform_mode",
]
