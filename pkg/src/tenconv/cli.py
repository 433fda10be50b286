"""Command-line entry point: train, eval, attack, transfer, audit, gradcheck.

The CLI is a thin shell over the library modules: it resolves configuration
(flags > config file > defaults), loads data, and writes artifacts. Every
successful run directory holds a resolved_config.json snapshot (config,
seed, build identifier) plus the emitted CSV/JSON files, figures, and
checkpoints. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DATASETS = ("mnist", "cifar10", "cifar100", "synthetic", "digits")

TRAIN_KEYS = {
    "model": None,
    "spec": None,
    "dataset": "synthetic",
    "data_dir": None,
    "learning_rate": 0.001,
    "batch_size": 64,
    "max_epochs": 30,
    "patience": 3,
    "seed": 0,
    "precision": "f64",
    "limit": None,
    "out": "run",
    "threads": 1,
}


class ConfigError(Exception):
    pass


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _build_identifier() -> str:
    from . import __version__

    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).parent,
        ).stdout.strip()
    except Exception:
        rev = ""
    return f"tenconv {__version__}" + (f" ({rev})" if rev else "")


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults; unknown config-file keys are rejected."""
    merged = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {e.filename}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        merged.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _resolve_data_dir(config_dir) -> Path | None:
    if config_dir:
        return Path(config_dir)
    env = os.environ.get("TENCONV_DATA_DIR")
    return Path(env) if env else None


def _load_dataset(name: str, data_dir, args) -> tuple:
    """Returns (train_set, val_set); the benchmark test sets serve as validation."""
    from .data import load_cifar, load_mnist, make_synthetic

    if name == "synthetic":
        ds = make_synthetic(
            classes=args.synth_classes,
            per_class=args.synth_per_class,
            geometry=(args.synth_channels, args.synth_hw, args.synth_hw),
            seed=args.synth_seed,
            margin=args.synth_margin,
        )
        return ds.split(0.2, seed=args.synth_seed)
    if name == "digits":
        return _load_digits()
    root = _resolve_data_dir(data_dir)
    if root is None:
        raise FileNotFoundError(
            f"dataset {name!r} needs --data-dir or TENCONV_DATA_DIR"
        )
    if name == "mnist":
        base = root / "mnist"
        train = load_mnist(base / "train-images-idx3-ubyte", base / "train-labels-idx1-ubyte")
        test = load_mnist(base / "t10k-images-idx3-ubyte", base / "t10k-labels-idx1-ubyte")
        return train, test
    if name == "cifar10":
        base = root / "cifar-10-batches-bin"
        train = load_cifar([base / f"data_batch_{i}.bin" for i in range(1, 6)], variant=10)
        test = load_cifar([base / "test_batch.bin"], variant=10)
        return train, test
    if name == "cifar100":
        base = root / "cifar-100-binary"
        return (
            load_cifar([base / "train.bin"], variant=100),
            load_cifar([base / "test.bin"], variant=100),
        )
    raise ConfigError(f"unknown dataset {name!r}")


def _load_digits():
    """Bundled 8x8 scikit-learn digits upscaled to 28x28, as an offline
    stand-in when the MNIST files are not available."""
    import numpy as np

    try:
        from sklearn.datasets import load_digits
    except ImportError as e:
        raise FileNotFoundError("dataset 'digits' needs scikit-learn installed") from e
    from .data import LabeledImageSet

    x, y = load_digits(return_X_y=True)
    images = (x / 16.0).reshape(-1, 1, 8, 8)
    idx = (np.arange(28) * 8) // 28  # nearest-neighbor upsample
    images = images[:, :, idx][:, :, :, idx]
    ds = LabeledImageSet(images, y.astype(np.int64), 10)
    return ds.split(1 / 6, seed=0)


def _resolve_model_spec(model_name, spec_path):
    from .models import ModelSpec, builtin_spec

    if (model_name is None) == (spec_path is None):
        raise ConfigError("exactly one of --model or --spec is required")
    if model_name:
        return builtin_spec(model_name)
    try:
        text = Path(spec_path).read_text()
    except FileNotFoundError as e:
        raise ConfigError(f"spec file not found: {e.filename}") from e
    if not text.strip():
        raise ConfigError(f"spec file {spec_path} is empty")
    return ModelSpec.from_json(text)


def _write_run_snapshot(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, "build": _build_identifier(), **config}
    with open(out_dir / "resolved_config.json", "w") as f:
        json.dump(snapshot, f, indent=2, default=str)


def _parse_epsilons(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as e:
        raise ConfigError(f"bad epsilon list {text!r}") from e


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    from .errors import IncompatibleSpec, NumericError, TenconvError

    try:
        config = _merge_config(args, TRAIN_KEYS)
        spec = _resolve_model_spec(config["model"], config["spec"])
        from .training import TrainConfig

        train_config = TrainConfig(
            learning_rate=config["learning_rate"],
            batch_size=config["batch_size"],
            max_epochs=config["max_epochs"],
            patience=config["patience"],
            seed=config["seed"],
            precision=config["precision"],
        )
    except (ConfigError, IncompatibleSpec, ValueError) as e:
        return _fail(EXIT_CONFIG, str(e))

    try:
        train_set, val_set = _load_dataset(config["dataset"], config["data_dir"], args)
        if config["limit"]:
            train_set = train_set.subset(int(config["limit"]), seed=train_config.seed)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, str(e))
    except (FileNotFoundError, TenconvError) as e:
        return _fail(EXIT_DATA, str(e))

    from .models import build_model, save_model
    from .report import render_loss_curves
    from .training import train

    model = build_model(spec, seed=train_config.seed, dtype=train_config.dtype)
    out_dir = Path(config["out"])
    _write_run_snapshot(out_dir, "train", config)
    try:
        report, _ = train(model, train_set, val_set, train_config, log=print)
    except NumericError as e:
        return _fail(EXIT_NUMERIC, str(e))
    report.write_json(out_dir / "report.json")
    report.write_csv(out_dir / "report.csv")
    render_loss_curves(report, out_dir / "loss_curve.png")
    save_model(model, out_dir / "best.tcnn")
    best = report.best_row
    print(
        f"best epoch {report.best_epoch}: val loss {best.val_loss:.4f}, "
        f"val acc {best.val_acc:.4f} ({report.param_total:,} params, "
        f"{report.wall_time_s:.1f}s)"
    )
    return 0


def cmd_eval(args) -> int:
    from .errors import FormatError, ShapeMismatch, TenconvError

    try:
        from .models import load_model

        model = load_model(args.ckpt)
    except FileNotFoundError as e:
        return _fail(EXIT_CONFIG, f"checkpoint not found: {e.filename}")
    except (FormatError, ShapeMismatch) as e:
        return _fail(EXIT_CONFIG, str(e))
    try:
        _, val_set = _load_dataset(args.dataset, args.data_dir, args)
    except (FileNotFoundError, TenconvError) as e:
        return _fail(EXIT_DATA, str(e))
    from .training import evaluate

    loss, acc = evaluate(model, val_set)
    print(f"{model.spec.name}: loss {loss:.6f}, accuracy {acc:.4f} on {args.dataset}")
    if args.out:
        out_dir = Path(args.out)
        _write_run_snapshot(out_dir, "eval", {"ckpt": args.ckpt, "dataset": args.dataset})
        with open(out_dir / "eval.json", "w") as f:
            json.dump({"model": model.spec.name, "loss": loss, "accuracy": acc}, f, indent=2)
    return 0


def _attack_common(args, transfer: bool) -> int:
    from .errors import FormatError, ShapeMismatch, TenconvError

    try:
        from .models import load_model

        if transfer:
            source = load_model(args.source_ckpt)
            target = load_model(args.target_ckpt)
        else:
            source = target = load_model(args.ckpt)
        epsilons = _parse_epsilons(args.eps)
        from .adversarial import AttackConfig

        config = AttackConfig(epsilons=epsilons)
    except FileNotFoundError as e:
        return _fail(EXIT_CONFIG, f"checkpoint not found: {e.filename}")
    except (ConfigError, FormatError, ShapeMismatch, ValueError) as e:
        return _fail(EXIT_CONFIG, str(e))
    try:
        _, val_set = _load_dataset(args.dataset, args.data_dir, args)
        if args.limit:
            val_set = val_set.subset(int(args.limit), seed=0)
    except (FileNotFoundError, TenconvError) as e:
        return _fail(EXIT_DATA, str(e))

    from .adversarial import sweep, transfer_attack
    from .errors import ClassCountMismatch
    from .report import render_robustness

    try:
        if transfer:
            curve = transfer_attack(source, target, val_set, config)
        else:
            curve = sweep(target, val_set, config)
    except ClassCountMismatch as e:
        return _fail(EXIT_CONFIG, str(e))
    out_dir = Path(args.out)
    snapshot = {"dataset": args.dataset, "epsilons": epsilons, "limit": args.limit}
    if transfer:
        snapshot.update({"source_ckpt": args.source_ckpt, "target_ckpt": args.target_ckpt})
    else:
        snapshot["ckpt"] = args.ckpt
    _write_run_snapshot(out_dir, "transfer" if transfer else "attack", snapshot)
    curve.write_csv(out_dir / "robustness.csv")
    curve.write_json(out_dir / "robustness.json")
    render_robustness([curve], out_dir / "robustness.png")
    for eps, acc in zip(curve.epsilons, curve.accuracies):
        print(f"eps {eps:.3f}: accuracy {acc:.4f}")
    return 0


def cmd_attack(args) -> int:
    return _attack_common(args, transfer=False)


def cmd_transfer(args) -> int:
    return _attack_common(args, transfer=True)


def cmd_audit(args) -> int:
    from .errors import IncompatibleSpec

    try:
        spec = _resolve_model_spec(args.model, args.spec)
        from .models import audit_params

        audit = audit_params(spec)
    except (ConfigError, IncompatibleSpec) as e:
        return _fail(EXIT_CONFIG, str(e))
    expect = None
    if args.expect:
        expect = _parse_param_count(args.expect)
        if expect is None:
            return _fail(EXIT_CONFIG, f"bad --expect value {args.expect!r}")
    print(audit.format_table(expect=expect))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "audit.json", "w") as f:
            json.dump(audit.to_dict(), f, indent=2)
    return 0


def _parse_param_count(text: str) -> float | None:
    text = text.strip().upper().replace(",", "")
    factor = 1.0
    if text.endswith("K"):
        factor, text = 1e3, text[:-1]
    elif text.endswith("M"):
        factor, text = 1e6, text[:-1]
    try:
        return float(text) * factor
    except ValueError:
        return None


def cmd_gradcheck(args) -> int:
    from .errors import IncompatibleSpec

    try:
        spec = _resolve_model_spec(args.model, args.spec)
    except (ConfigError, IncompatibleSpec) as e:
        return _fail(EXIT_CONFIG, str(e))

    import numpy as np

    from .autodiff import Tape, grad_check
    from .data import make_synthetic
    from .models import build_model
    from .training import cross_entropy

    model = build_model(spec, seed=args.seed, dtype=np.float64)
    ds = make_synthetic(
        classes=spec.class_count,
        per_class=max(1, args.batch // spec.class_count),
        geometry=(spec.input_channels, spec.input_height, spec.input_width),
        seed=args.seed,
    )
    images, labels = ds.images[: args.batch], ds.labels[: args.batch]

    def build():
        tape = Tape()
        node = tape.leaf(images)
        logits = model.forward(tape, node, train=True)
        return tape, cross_entropy(tape, logits, labels)

    report = grad_check(
        build,
        dict(model.params()),
        tolerance=args.tol,
        max_coords=args.samples,
        rng=np.random.default_rng(args.seed),
    )
    print(report.format_table())
    return 0 if report.passed else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tenconv", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP threads (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_dataset_flags(p):
        p.add_argument("--dataset", choices=DATASETS, default="synthetic")
        p.add_argument("--data-dir", dest="data_dir", default=None)
        p.add_argument("--synth-classes", type=int, default=2)
        p.add_argument("--synth-per-class", type=int, default=200)
        p.add_argument("--synth-hw", type=int, default=8)
        p.add_argument("--synth-channels", type=int, default=1)
        p.add_argument("--synth-margin", type=float, default=3.0)
        p.add_argument("--synth-seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model and write report + checkpoint")
    p.add_argument("--model", default=None, help="builtin model name")
    p.add_argument("--spec", default=None, help="path to a model spec JSON file")
    p.add_argument("--config", default=None, help="JSON config file (flags override it)")
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--batch", dest="batch_size", type=int, default=None)
    p.add_argument("--epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    p.add_argument("--limit", type=int, default=None, help="seeded train subset size")
    p.add_argument("--out", default=None, help="run directory (default: run)")
    add_dataset_flags(p)
    p.set_defaults(func=cmd_train, dataset=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default=None)
    add_dataset_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", help="white-box FGSM sweep on a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--eps", default="0,0.05,0.1,0.15,0.2,0.25,0.3")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", default="attack")
    add_dataset_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("transfer", help="black-box transfer attack between checkpoints")
    p.add_argument("--source-ckpt", dest="source_ckpt", required=True)
    p.add_argument("--target-ckpt", dest="target_ckpt", required=True)
    p.add_argument("--eps", default="0,0.05,0.1,0.15,0.2,0.25,0.3")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", default="transfer")
    add_dataset_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("audit", help="closed-form parameter audit of a model spec")
    p.add_argument("--model", default=None)
    p.add_argument("--spec", default=None)
    p.add_argument("--expect", default=None, help="expected total, e.g. 0.39M or 22.2K")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--model", default=None)
    p.add_argument("--spec", default=None)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=60, help="sampled coordinates per parameter")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # thread caps must land before numpy loads a BLAS
    threads = "1"
    if "--threads" in argv:
        i = argv.index("--threads")
        if i + 1 < len(argv):
            threads = argv[i + 1]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
