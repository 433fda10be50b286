"""Declarative model specs, builders for the builtin architectures, the
closed-form parameter auditor, and checkpoint serialization.

A ModelSpec is a JSON-serializable description (input geometry, ordered
layer specs, class count); build_model instantiates it deterministically
from a seed. audit_params counts trainable parameters from the spec alone
and must agree exactly with the instantiated model.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from math import prod

import numpy as np

from . import tensor
from .autodiff import Tape
from .errors import BadGeometry, FormatError, IncompatibleSpec, ShapeMismatch
from .layers import (
    ORDER_BN_PRELU,
    BatchNorm,
    FeatureMap,
    FullyConnected,
    PReLU,
    ReLU,
    ResidualBlock,
    ScalarConv2d,
    TensorConv,
    conv_output_extent,
    weight_cell_shape,
)

CHECKPOINT_MAGIC = b"TCNN"
CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    kind: str  # block1 | block2 | tensor_conv | scalar_conv | fc
    out_channels: int = 0
    out_cell: tuple[int, ...] = ()
    r: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    units: int = 0  # fc only

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "out_channels": self.out_channels,
            "out_cell": list(self.out_cell),
            "r": self.r,
            "kernel": self.kernel,
            "stride": self.stride,
            "pad": self.pad,
            "units": self.units,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        known = {
            "kind",
            "out_channels",
            "out_cell",
            "r",
            "kernel",
            "stride",
            "pad",
            "units",
        }
        unknown = set(d) - known
        if unknown:
            raise IncompatibleSpec(f"unknown layer spec keys {sorted(unknown)}")
        d = dict(d)
        d["out_cell"] = tuple(d.get("out_cell", ()))
        return cls(**d)


@dataclass
class ModelSpec:
    name: str
    input_height: int
    input_width: int
    input_channels: int
    tensor_input: bool  # pack pixels into [C, 1] cells rather than scalar channels
    class_count: int
    layers: list[LayerSpec] = field(default_factory=list)
    norm_order: str = ORDER_BN_PRELU
    final_norm: bool = False

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_height": self.input_height,
            "input_width": self.input_width,
            "input_channels": self.input_channels,
            "tensor_input": self.tensor_input,
            "class_count": self.class_count,
            "layers": [l.to_dict() for l in self.layers],
            "norm_order": self.norm_order,
            "final_norm": self.final_norm,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {
            "name",
            "input_height",
            "input_width",
            "input_channels",
            "tensor_input",
            "class_count",
            "layers",
            "norm_order",
            "final_norm",
        }
        unknown = set(d) - known
        if unknown:
            raise IncompatibleSpec(f"unknown model spec keys {sorted(unknown)}")
        d = dict(d)
        d["layers"] = [LayerSpec.from_dict(l) for l in d.get("layers", [])]
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise IncompatibleSpec(f"spec is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise IncompatibleSpec("spec JSON must be an object")
        return cls.from_dict(data)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


# -- shape tracing ----------------------------------------------------------


@dataclass
class LayerTrace:
    """Resolved geometry and closed-form parameter counts of one spec layer."""

    name: str
    kind: str
    out_channels: int
    out_height: int
    out_width: int
    out_cell: tuple[int, ...]
    weight_params: int
    bn_params: int
    prelu_params: int

    @property
    def total_params(self) -> int:
        return self.weight_params + self.bn_params + self.prelu_params


def _block_counts(
    n_layers: int,
    in_ch: int,
    out_ch: int,
    in_cell: tuple[int, ...],
    out_cell: tuple[int, ...],
    r: int,
) -> tuple[int, int, int]:
    expands = in_cell != out_cell
    weights = 0
    for i in range(n_layers):
        ic = in_ch if i == 0 else out_ch
        cell = in_cell if i == 0 else out_cell
        rr = len(in_cell) if (i == 0 and expands) else r
        weights += out_ch * ic * 9 * prod(weight_cell_shape(cell, out_cell, rr))
    if expands or in_ch != out_ch:
        weights += out_ch * in_ch * 1 * prod(weight_cell_shape(in_cell, out_cell, len(in_cell)))
    bn = n_layers * 2 * out_ch * prod(out_cell)
    prelu = n_layers * out_ch
    return weights, bn, prelu


def trace_spec(spec: ModelSpec) -> list[LayerTrace]:
    """Walk the spec once, validating connectivity and counting parameters."""
    h, w = spec.input_height, spec.input_width
    if spec.tensor_input:
        channels, cell = 1, (spec.input_channels, 1)
    else:
        channels, cell = spec.input_channels, ()
    flat: int | None = None  # set once an fc layer flattens the map
    rows: list[LayerTrace] = []
    for idx, layer in enumerate(spec.layers):
        name = f"layer{idx}.{layer.kind}"
        try:
            if layer.kind in ("block1", "block2"):
                n_layers = 3 if layer.kind == "block1" else 4
                oh = conv_output_extent(h, 3, layer.stride, 0 if layer.stride > 1 else 1)
                ow = conv_output_extent(w, 3, layer.stride, 0 if layer.stride > 1 else 1)
                wgt, bn, pr = _block_counts(
                    n_layers, channels, layer.out_channels, cell, layer.out_cell, layer.r
                )
                rows.append(
                    LayerTrace(name, layer.kind, layer.out_channels, oh, ow, layer.out_cell, wgt, bn, pr)
                )
                h, w, channels, cell = oh, ow, layer.out_channels, layer.out_cell
            elif layer.kind == "tensor_conv":
                rr = layer.r if layer.r else len(cell)
                oh = conv_output_extent(h, layer.kernel, layer.stride, layer.pad)
                ow = conv_output_extent(w, layer.kernel, layer.stride, layer.pad)
                wgt = (
                    layer.out_channels
                    * channels
                    * layer.kernel**2
                    * prod(weight_cell_shape(cell, layer.out_cell, rr))
                )
                is_final_cell = layer.out_cell == ()
                with_norm = (not is_final_cell) or spec.final_norm
                bn = 2 * layer.out_channels * prod(layer.out_cell) if with_norm else 0
                pr = layer.out_channels if with_norm else 0
                rows.append(
                    LayerTrace(name, layer.kind, layer.out_channels, oh, ow, layer.out_cell, wgt, bn, pr)
                )
                h, w, channels, cell = oh, ow, layer.out_channels, layer.out_cell
            elif layer.kind == "scalar_conv":
                if cell != ():
                    raise IncompatibleSpec("scalar_conv needs scalar cells")
                oh = conv_output_extent(h, layer.kernel, layer.stride, layer.pad)
                ow = conv_output_extent(w, layer.kernel, layer.stride, layer.pad)
                wgt = layer.out_channels * (channels * layer.kernel**2 + 1)
                rows.append(LayerTrace(name, layer.kind, layer.out_channels, oh, ow, (), wgt, 0, 0))
                h, w, channels = oh, ow, layer.out_channels
            elif layer.kind == "fc":
                if flat is None:
                    if cell != ():
                        raise IncompatibleSpec("fc needs scalar cells")
                    flat = channels * h * w
                wgt = flat * layer.units + layer.units
                rows.append(LayerTrace(name, layer.kind, layer.units, 1, 1, (), wgt, 0, 0))
                flat = layer.units
            else:
                raise IncompatibleSpec(f"unknown layer kind {layer.kind!r}")
        except (IncompatibleSpec, ShapeMismatch, BadGeometry) as e:
            raise IncompatibleSpec(f"{spec.name} {name}: {e}") from e
    if not rows:
        raise IncompatibleSpec(f"{spec.name}: no layers")
    last = spec.layers[-1]
    final_units = last.units if last.kind == "fc" else last.out_channels
    if final_units != spec.class_count:
        raise IncompatibleSpec(
            f"{spec.name}: final layer emits {final_units} outputs, expected {spec.class_count}"
        )
    return rows


@dataclass
class ParamAudit:
    model: str
    rows: list[LayerTrace]

    @property
    def total(self) -> int:
        return sum(r.total_params for r in self.rows)

    def format_table(self, expect: float | None = None) -> str:
        lines = [
            f"{'layer':24s} {'output':>16s} {'weights':>10s} {'batchnorm':>10s} {'prelu':>6s} {'total':>10s}"
        ]
        for r in self.rows:
            shape = f"{r.out_height}x{r.out_width}x{r.out_channels}"
            if r.out_cell:
                shape += "x" + "x".join(map(str, r.out_cell))
            lines.append(
                f"{r.name:24s} {shape:>16s} {r.weight_params:10d} {r.bn_params:10d} "
                f"{r.prelu_params:6d} {r.total_params:10d}"
            )
        lines.append(f"{'TOTAL':24s} {'':>16s} {'':>10s} {'':>10s} {'':>6s} {self.total:10d}")
        if expect is not None:
            delta = 100.0 * (self.total - expect) / expect
            lines.append(f"expected {expect:,.0f}: delta {delta:+.2f}%")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "total": self.total,
            "layers": [
                {
                    "name": r.name,
                    "output": [r.out_channels, r.out_height, r.out_width, list(r.out_cell)],
                    "weights": r.weight_params,
                    "batchnorm": r.bn_params,
                    "prelu": r.prelu_params,
                }
                for r in self.rows
            ],
        }


def audit_params(spec: ModelSpec) -> ParamAudit:
    """Closed-form trainable-parameter count per layer, from the spec alone."""
    return ParamAudit(spec.name, trace_spec(spec))


def pairwise_transform_params(n_in: int, n_out: int, per_pair: int) -> int:
    """Parameters of a dense unit-to-unit transform bank (capsule-style)."""
    return n_in * n_out * per_pair


# -- model ------------------------------------------------------------------


class Model:
    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float64) -> None:
        trace_spec(spec)  # validate before instantiating anything
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.pipeline: list = []
        h, w = spec.input_height, spec.input_width
        if spec.tensor_input:
            channels, cell = 1, (spec.input_channels, 1)
        else:
            channels, cell = spec.input_channels, ()
        flat: int | None = None
        n_layers = len(spec.layers)
        for idx, layer in enumerate(spec.layers):
            name = f"layer{idx}"
            last = idx == n_layers - 1
            if layer.kind in ("block1", "block2"):
                block = ResidualBlock(
                    name,
                    layer.kind,
                    channels,
                    layer.out_channels,
                    cell,
                    layer.out_cell,
                    r=layer.r,
                    stride=layer.stride,
                    order=spec.norm_order,
                    rng=rng,
                    dtype=dtype,
                )
                self.pipeline.append(("block", block))
                h, w = block.out_geometry(h, w)
                channels, cell = layer.out_channels, layer.out_cell
            elif layer.kind == "tensor_conv":
                rr = layer.r if layer.r else len(cell)
                conv = TensorConv(
                    f"{name}.conv",
                    channels,
                    layer.out_channels,
                    cell,
                    layer.out_cell,
                    r=rr,
                    kernel=layer.kernel,
                    stride=layer.stride,
                    pad=layer.pad,
                    rng=rng,
                    dtype=dtype,
                )
                self.pipeline.append(("tconv", conv))
                h, w = conv.out_geometry(h, w)
                channels, cell = layer.out_channels, layer.out_cell
                if layer.out_cell != () or spec.final_norm:
                    bn = BatchNorm(f"{name}.bn", channels, cell, dtype=dtype)
                    act = PReLU(f"{name}.prelu", channels, dtype=dtype)
                    if spec.norm_order == ORDER_BN_PRELU:
                        self.pipeline.extend([("bn", bn), ("prelu", act)])
                    else:
                        self.pipeline.extend([("prelu", act), ("bn", bn)])
            elif layer.kind == "scalar_conv":
                conv = ScalarConv2d(
                    f"{name}.conv",
                    channels,
                    layer.out_channels,
                    kernel=layer.kernel,
                    stride=layer.stride,
                    pad=layer.pad,
                    rng=rng,
                    dtype=dtype,
                )
                self.pipeline.append(("sconv", conv))
                h, w = conv.out_geometry(h, w)
                channels = layer.out_channels
                self.pipeline.append(("relu", ReLU(f"{name}.relu")))
            elif layer.kind == "fc":
                if flat is None:
                    flat = channels * h * w
                    self.pipeline.append(("flatten", flat))
                fc = FullyConnected(f"{name}.fc", flat, layer.units, rng=rng, dtype=dtype)
                self.pipeline.append(("fc", fc))
                flat = layer.units
                if not last:
                    self.pipeline.append(("relu", ReLU(f"{name}.relu")))

    def params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for kind, item in self.pipeline:
            if kind in ("block", "tconv", "sconv", "fc", "bn", "prelu"):
                out.extend(item.params())
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for kind, item in self.pipeline:
            if kind == "block":
                out.extend(item.buffers())
            elif kind == "bn":
                out.extend(item.buffers())
        return out

    def state(self) -> list[tuple[str, np.ndarray]]:
        return self.params() + self.buffers()

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.params())

    def forward(self, tape: Tape, images_node: int, train: bool = True) -> int:
        """Images [N, C, H, W] -> logits [N, class_count]."""
        x = tape.value(images_node)
        n = x.shape[0]
        spec = self.spec
        if spec.tensor_input:
            node = tape.transpose(images_node, (0, 2, 3, 1))
            node = tape.reshape(
                node, (n, 1, spec.input_height, spec.input_width, spec.input_channels, 1)
            )
            fm = FeatureMap(node, 1, spec.input_height, spec.input_width, (spec.input_channels, 1))
        else:
            fm = FeatureMap(
                images_node, spec.input_channels, spec.input_height, spec.input_width, ()
            )
        cursor: FeatureMap | int = fm
        for kind, item in self.pipeline:
            if kind == "flatten":
                assert isinstance(cursor, FeatureMap)
                c = cursor
                cursor = tape.reshape(c.node, (n, c.channels * c.height * c.width))
            elif kind == "fc":
                cursor = item.forward(tape, cursor, train)
            elif kind == "relu":
                cursor = item.forward(tape, cursor, train)
            else:
                cursor = item.forward(tape, cursor, train)
        if isinstance(cursor, FeatureMap):
            c = cursor
            if c.cell_shape != () or (c.height, c.width) != (1, 1):
                raise ShapeMismatch(
                    f"final layer left {c.height}x{c.width} cells {c.cell_shape}; expected 1x1 scalars"
                )
            cursor = tape.reshape(c.node, (n, c.channels))
        return cursor

    def logits(self, images: np.ndarray, train: bool = False) -> np.ndarray:
        tape = Tape()
        node = tape.leaf(np.ascontiguousarray(images, dtype=self.dtype))
        return tape.value(self.forward(tape, node, train))


# -- builtin architectures --------------------------------------------------


def _table_tcnn_spec(
    name: str,
    input_hw: int,
    n_blocks: int,
    cell: tuple[int, ...],
    r: int,
    class_count: int,
) -> ModelSpec:
    layers = []
    for i in range(n_blocks):
        layers.append(
            LayerSpec(
                kind="block1",
                out_channels=1,
                out_cell=cell,
                r=r,
                stride=2 if i % 2 == 0 else 1,
            )
        )
    layers.append(
        LayerSpec(kind="tensor_conv", out_channels=class_count, out_cell=(), r=len(cell), kernel=3)
    )
    return ModelSpec(
        name=name,
        input_height=input_hw,
        input_width=input_hw,
        input_channels=3,
        tensor_input=True,
        class_count=class_count,
        layers=layers,
    )


def mnist_tcnn_spec(
    name: str,
    channels: tuple[int, int, int],
    cell_extent: int = 2,
    input_hw: int = 28,
    input_channels: int = 1,
    class_count: int = 10,
) -> ModelSpec:
    """Plain depth-4 TCNN: expand, two rank-preserving layers, final compression.

    Geometry 28 -> 13 -> 6 -> 3 with the final kernel covering the whole map.
    """
    cell = (cell_extent,) * 4
    c1, c2, c3 = channels
    h = input_hw
    layers = [
        LayerSpec(kind="tensor_conv", out_channels=c1, out_cell=cell, kernel=3, stride=2, pad=0),
        LayerSpec(kind="tensor_conv", out_channels=c2, out_cell=cell, r=2, kernel=3, stride=2, pad=0),
        LayerSpec(kind="tensor_conv", out_channels=c3, out_cell=cell, r=2, kernel=3, stride=2, pad=1),
    ]
    for spec_layer in layers:
        h = conv_output_extent(h, spec_layer.kernel, spec_layer.stride, spec_layer.pad)
    layers.append(
        LayerSpec(kind="tensor_conv", out_channels=class_count, out_cell=(), r=4, kernel=h)
    )
    return ModelSpec(
        name=name,
        input_height=input_hw,
        input_width=input_hw,
        input_channels=input_channels,
        tensor_input=True,
        class_count=class_count,
        layers=layers,
    )


def mnist_cnn_spec(
    name: str,
    conv_channels: tuple[int, int],
    hidden: int,
    input_hw: int = 28,
    input_channels: int = 1,
    class_count: int = 10,
) -> ModelSpec:
    """Depth-4 plain ConvNet: two conv layers then two fully-connected layers."""
    c1, c2 = conv_channels
    return ModelSpec(
        name=name,
        input_height=input_hw,
        input_width=input_hw,
        input_channels=input_channels,
        tensor_input=False,
        class_count=class_count,
        layers=[
            LayerSpec(kind="scalar_conv", out_channels=c1, kernel=3, stride=2, pad=0),
            LayerSpec(kind="scalar_conv", out_channels=c2, kernel=3, stride=2, pad=0),
            LayerSpec(kind="fc", units=hidden),
            LayerSpec(kind="fc", units=class_count),
        ],
    )


def build_mnist_family(kind: str, **knobs) -> ModelSpec:
    """Budget-knob builder for the plain MNIST families.

    kind "tcnn": channels (3-tuple), cell_extent; kind "cnn": conv_channels
    (2-tuple), hidden. Audit the result to read off the parameter budget.
    """
    name = knobs.pop("name", f"mnist-{kind}-custom")
    if kind == "tcnn":
        return mnist_tcnn_spec(name, **knobs)
    if kind == "cnn":
        return mnist_cnn_spec(name, **knobs)
    raise IncompatibleSpec(f"unknown mnist family kind {kind!r}")


def micro_tcnn0_spec() -> ModelSpec:
    """One expanding Block#1 on 8x8 RGB with [2,2,2,2] cells, then compression."""
    return ModelSpec(
        name="micro-tcnn0",
        input_height=8,
        input_width=8,
        input_channels=3,
        tensor_input=True,
        class_count=3,
        layers=[
            LayerSpec(kind="block1", out_channels=1, out_cell=(2, 2, 2, 2), r=2, stride=2),
            LayerSpec(kind="tensor_conv", out_channels=3, out_cell=(), r=4, kernel=3),
        ],
    )


BUILTIN_FACTORIES = {
    "tcnn0": lambda: _table_tcnn_spec("tcnn0", 32, 6, (6, 6, 6, 6), 2, 10),
    "tcnn1": lambda: _table_tcnn_spec("tcnn1", 32, 6, (6, 6, 6, 6), 2, 100),
    "tcnn2": lambda: _table_tcnn_spec("tcnn2", 64, 8, (3, 3, 3, 3, 3, 3), 3, 200),
    "micro-tcnn0": micro_tcnn0_spec,
    "mnist-tcnn-small": lambda: mnist_tcnn_spec("mnist-tcnn-small", (6, 7, 6)),
    "mnist-tcnn-47k": lambda: mnist_tcnn_spec("mnist-tcnn-47k", (9, 11, 10)),
    "mnist-tcnn-large": lambda: mnist_tcnn_spec("mnist-tcnn-large", (20, 23, 21)),
    "mnist-cnn-small": lambda: mnist_cnn_spec("mnist-cnn-small", (8, 16), 36),
    "mnist-cnn-large": lambda: mnist_cnn_spec("mnist-cnn-large", (32, 64), 500),
}


def builtin_spec(name: str) -> ModelSpec:
    if name not in BUILTIN_FACTORIES:
        raise IncompatibleSpec(
            f"unknown builtin model {name!r}; have {sorted(BUILTIN_FACTORIES)}"
        )
    return BUILTIN_FACTORIES[name]()


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float64) -> Model:
    return Model(spec, seed=seed, dtype=dtype)


# -- checkpoints ------------------------------------------------------------


def save_model(model: Model, path: str) -> None:
    """Checkpoint layout: magic, u16 version, u32 json length, spec json,
    sha256(spec json), u32 tensor count, then named tensor records (params
    followed by BatchNorm running statistics), all little-endian."""
    spec_json = model.spec.to_json().encode()
    entries = model.state()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(spec_json)))
    buf.write(spec_json)
    buf.write(hashlib.sha256(spec_json).digest())
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        tensor.write_tensor(buf, arr)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated checkpoint: expected {n} bytes of {what}, got {len(raw)}")
    return raw


def load_model(path: str, dtype=np.float64) -> Model:
    """Rebuild a model from its embedded spec and restore every tensor.

    Stored data is always f64; loading into an f32 build casts each tensor
    down (round-to-nearest). No model is returned on any format violation.
    """
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise FormatError("bad magic; not a tenconv checkpoint")
        version = struct.unpack("<H", _read_exact(f, 2, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        json_len = struct.unpack("<I", _read_exact(f, 4, "spec length"))[0]
        spec_json = _read_exact(f, json_len, "spec json")
        digest = _read_exact(f, 32, "spec digest")
        if hashlib.sha256(spec_json).digest() != digest:
            raise FormatError("spec digest mismatch; checkpoint corrupt")
        spec = ModelSpec.from_json(spec_json.decode())
        n_entries = struct.unpack("<I", _read_exact(f, 4, "tensor count"))[0]
        loaded: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            name_len = struct.unpack("<H", _read_exact(f, 2, "name length"))[0]
            name = _read_exact(f, name_len, "tensor name").decode()
            loaded[name] = tensor.read_tensor(f)
    model = Model(spec, seed=0, dtype=dtype)
    expected = dict(model.state())
    if set(loaded) != set(expected):
        missing = sorted(set(expected) - set(loaded))
        extra = sorted(set(loaded) - set(expected))
        raise FormatError(f"checkpoint entries disagree with spec: missing {missing}, extra {extra}")
    for name, arr in expected.items():
        src = loaded[name]
        if src.shape != arr.shape:
            raise ShapeMismatch(f"{name}: checkpoint shape {src.shape} vs spec {arr.shape}")
        arr[...] = src.astype(arr.dtype)
    return model
