"""Layer zoo: tensor convolution in all three rank modes, PReLU, BatchNorm
over tensor-valued feature maps, residual blocks, plus plain scalar Conv2d
and fully-connected layers for the CNN baselines.

Feature maps are batched: the value tensor of a map with m channels, spatial
extents H x W and per-cell shape `cell` has layout [N, m, H, W, *cell].

Tensor convolution accumulates, per output cell, the contraction of every
input cell in the k x k x m window with its own weight cell (n = k*k*m
summands). It is implemented as a single matrix product per layer by fusing
the window index and the contracted cell index into one reduction axis; the
naive window-plus-contract composition is kept in the tests as the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from .autodiff import Tape
from .errors import BadGeometry, BatchTooSmall, IncompatibleSpec, ShapeMismatch

ORDER_BN_PRELU = "bn_prelu"  # table captions: conv -> BatchNorm -> PReLU
ORDER_PRELU_BN = "prelu_bn"  # residual-figure caption: conv -> PReLU -> BatchNorm


@dataclass
class FeatureMap:
    """Geometry of a value flowing through a tape (the data lives in the node)."""

    node: int
    channels: int
    height: int
    width: int
    cell_shape: tuple[int, ...]


def conv_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    out = (extent + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise BadGeometry(
            f"kernel {kernel} stride {stride} pad {pad} on extent {extent} yields {out}"
        )
    return out


def weight_cell_shape(
    in_cell: tuple[int, ...], out_cell: tuple[int, ...], r: int
) -> tuple[int, ...]:
    """Per-cell weight shape for contract(in_cell, w, r) -> out_cell.

    The weight's leading r axes are the input cell's trailing r extents
    reversed; its trailing axes are the part of the output cell not carried
    over from the input.
    """
    ri = len(in_cell)
    if not 1 <= r <= ri:
        raise IncompatibleSpec(f"contract count {r} illegal for input cell {in_cell}")
    carried = ri - r
    if tuple(out_cell[:carried]) != tuple(in_cell[:carried]):
        raise IncompatibleSpec(
            f"output cell {out_cell} does not carry over the leading {carried} "
            f"extents of input cell {in_cell}"
        )
    return tuple(reversed(in_cell[ri - r :])) + tuple(out_cell[carried:])


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    widths = [(0, 0), (0, 0), (pad, pad), (pad, pad)] + [(0, 0)] * (x.ndim - 4)
    return np.pad(x, widths)


def _gather_windows(xp: np.ndarray, kernel: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """[N, m, Hp, Wp, *cell] -> [N, OH, OW, m, k, k, *cell] (copies)."""
    view = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    # view: [N, m, Hv, Wv, *cell, k, k]
    view = view[:, :, ::stride, ::stride]
    cell_rank = xp.ndim - 4
    perm = (0, 2, 3, 1, view.ndim - 2, view.ndim - 1) + tuple(range(4, 4 + cell_rank))
    return np.ascontiguousarray(np.transpose(view, perm))


def _scatter_windows(
    dwin: np.ndarray,
    x_shape: tuple[int, ...],
    kernel: int,
    stride: int,
    pad: int,
) -> np.ndarray:
    """Adjoint of _gather_windows + padding: scatter-add window grads back."""
    n, m, h, w = x_shape[:4]
    cell = x_shape[4:]
    oh, ow = dwin.shape[1], dwin.shape[2]
    dxp = np.zeros((n, m, h + 2 * pad, w + 2 * pad) + cell, dtype=dwin.dtype)
    # one strided add per kernel offset keeps the accumulation order fixed
    for ky in range(kernel):
        for kx in range(kernel):
            dxp[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += (
                dwin[:, :, :, :, ky, kx].transpose((0, 3, 1, 2) + tuple(range(4, dwin.ndim - 2)))
            )
    if pad:
        dxp = dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


class TensorConv:
    """Tensor-convolution layer; covers rank-preserving, input-expanding and
    final-compressing transformations depending on the cell shapes and r."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        in_cell: tuple[int, ...],
        out_cell: tuple[int, ...],
        r: int,
        kernel: int,
        stride: int = 1,
        pad: int = 0,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ) -> None:
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.in_cell = tuple(in_cell)
        self.out_cell = tuple(out_cell)
        self.r = r
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        w_cell = weight_cell_shape(self.in_cell, self.out_cell, r)
        shape = (out_channels, in_channels, kernel, kernel) + w_cell
        # fan-in counts every weight element reduced into one output
        # component: contracted extents times the k*k*m summands
        fan_in = prod(self.in_cell[len(self.in_cell) - r :]) * kernel * kernel * in_channels
        std = np.sqrt(2.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        self.weight = (rng.standard_normal(shape) * std).astype(dtype)

    def params(self):
        return [(f"{self.name}.weight", self.weight)]

    def out_geometry(self, height: int, width: int) -> tuple[int, int]:
        return (
            conv_output_extent(height, self.kernel, self.stride, self.pad),
            conv_output_extent(width, self.kernel, self.stride, self.pad),
        )

    def forward(self, tape: Tape, fm: FeatureMap, train: bool = True) -> FeatureMap:
        if fm.channels != self.in_channels or fm.cell_shape != self.in_cell:
            raise ShapeMismatch(
                f"{self.name}: got {fm.channels} channels of cells {fm.cell_shape}, "
                f"expected {self.in_channels} of {self.in_cell}"
            )
        oh, ow = self.out_geometry(fm.height, fm.width)
        x = tape.value(fm.node)
        w_node = tape.leaf(self.weight, param=f"{self.name}.weight")

        k, s, p, r = self.kernel, self.stride, self.pad, self.r
        n = x.shape[0]
        carried = len(self.in_cell) - r
        a_free = prod(self.in_cell[:carried])  # per-cell output components carried from input
        k_contr = prod(self.in_cell[carried:])  # contracted extents
        p_free = prod(self.out_cell[carried:])  # components supplied by the weight
        m, oc = self.in_channels, self.out_channels

        win = _gather_windows(_pad_spatial(x, p), k, s, oh, ow)  # [N,OH,OW,m,k,k,*cell]
        # split the cell into carried and contracted parts, then pull the
        # carried part out in front of the fused reduction axis (m, k, k, K)
        u = win.reshape(n, oh, ow, m, k, k, a_free, k_contr)
        u = np.ascontiguousarray(u.transpose(0, 1, 2, 6, 3, 4, 5, 7))
        u_mat = u.reshape(n * oh * ow * a_free, m * k * k * k_contr)

        # weight: reverse the leading r cell axes so its row-major contracted
        # enumeration matches the input cell's trailing block
        wc = len(self.in_cell) - carried  # == r
        perm = (
            (0, 1, 2, 3)
            + tuple(range(4 + wc - 1, 3, -1))
            + tuple(range(4 + wc, self.weight.ndim))
        )
        wp = np.transpose(self.weight.astype(x.dtype, copy=False), perm)
        w_mat = np.ascontiguousarray(
            wp.reshape(oc, m * k * k, k_contr, p_free).transpose(1, 2, 0, 3)
        ).reshape(m * k * k * k_contr, oc * p_free)

        v = (u_mat @ w_mat).reshape(n, oh, ow, a_free, oc, p_free)
        v = np.ascontiguousarray(v.transpose(0, 4, 1, 2, 3, 5)).reshape(
            (n, oc, oh, ow) + self.out_cell
        )

        x_shape = x.shape
        w_dtype = self.weight.dtype

        def vjp(g):
            g_mat = (
                np.ascontiguousarray(
                    g.reshape(n, oc, oh, ow, a_free, p_free).transpose(0, 2, 3, 4, 1, 5)
                ).reshape(n * oh * ow * a_free, oc * p_free)
            )
            du_mat = g_mat @ w_mat.T
            dwin = (
                du_mat.reshape(n, oh, ow, a_free, m, k, k, k_contr)
                .transpose(0, 1, 2, 4, 5, 6, 3, 7)
                .reshape((n, oh, ow, m, k, k) + self.in_cell)
            )
            dx = _scatter_windows(dwin, x_shape, k, s, p)
            dw_mat = u_mat.T @ g_mat
            dwp = (
                dw_mat.reshape(m * k * k, k_contr, oc, p_free)
                .transpose(2, 0, 1, 3)
                .reshape(wp.shape)
            )
            dw = np.transpose(dwp, perm).astype(w_dtype, copy=False)  # reversal is an involution
            return dx, dw

        node = tape.custom("tensor_conv", v, (fm.node, w_node), vjp)
        return FeatureMap(node, oc, oh, ow, self.out_cell)


class PReLU:
    """One learnable slope per channel, applied to every tensor component.

    The derivative at exactly 0 is the negative-side slope.
    """

    def __init__(self, name: str, channels: int, init: float = 0.25, dtype=np.float64) -> None:
        self.name = name
        self.channels = channels
        self.slope = np.full(channels, init, dtype=dtype)

    def params(self):
        return [(f"{self.name}.slope", self.slope)]

    def forward(self, tape: Tape, fm: FeatureMap, train: bool = True) -> FeatureMap:
        x = tape.value(fm.node)
        a_node = tape.leaf(self.slope, param=f"{self.name}.slope")
        bshape = (1, self.channels) + (1,) * (x.ndim - 2)
        a = self.slope.astype(x.dtype, copy=False).reshape(bshape)
        pos = x > 0
        tape.note("prelu_mask", pos)
        y = np.where(pos, x, a * x)

        def vjp(g):
            dx = np.where(pos, g, a * g)
            reduce_axes = (0,) + tuple(range(2, x.ndim))
            da = np.sum(np.where(pos, 0.0, g * x), axis=reduce_axes)
            return dx, da.astype(self.slope.dtype, copy=False)

        node = tape.custom("prelu", y, (fm.node, a_node), vjp)
        return FeatureMap(node, fm.channels, fm.height, fm.width, fm.cell_shape)


class BatchNorm:
    """Normalization over (batch, H, W) per (channel, tensor-component).

    Scale and shift are learnable per component; running statistics use the
    biased batch variance with update running = (1-momentum)*running +
    momentum*batch.
    """

    def __init__(
        self,
        name: str,
        channels: int,
        cell_shape: tuple[int, ...],
        eps: float = 1e-5,
        momentum: float = 0.1,
        dtype=np.float64,
    ) -> None:
        self.name = name
        self.channels = channels
        self.cell_shape = tuple(cell_shape)
        self.eps = eps
        self.momentum = momentum
        shape = (channels,) + self.cell_shape
        self.gamma = np.ones(shape, dtype=dtype)
        self.beta = np.zeros(shape, dtype=dtype)
        self.running_mean = np.zeros(shape, dtype=dtype)
        self.running_var = np.ones(shape, dtype=dtype)

    def params(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def buffers(self):
        return [
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]

    def forward(self, tape: Tape, fm: FeatureMap, train: bool = True) -> FeatureMap:
        x = tape.value(fm.node)
        g_node = tape.leaf(self.gamma, param=f"{self.name}.gamma")
        b_node = tape.leaf(self.beta, param=f"{self.name}.beta")
        axes = (0, 2, 3)
        pshape = (1, self.channels, 1, 1) + self.cell_shape
        gamma = self.gamma.astype(x.dtype, copy=False).reshape(pshape)
        beta = self.beta.astype(x.dtype, copy=False).reshape(pshape)

        if train:
            if x.shape[0] < 2:
                raise BatchTooSmall(f"{self.name}: training-mode batch of {x.shape[0]}")
            mean = x.mean(axis=axes, keepdims=True)
            var = x.var(axis=axes, keepdims=True)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean.reshape(self.running_mean.shape)
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var.reshape(self.running_var.shape)
        else:
            mean = self.running_mean.astype(x.dtype, copy=False).reshape(pshape)
            var = self.running_var.astype(x.dtype, copy=False).reshape(pshape)

        ivar = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * ivar
        y = gamma * xhat + beta
        n_red = x.shape[0] * x.shape[2] * x.shape[3]

        def vjp(g):
            dgamma = np.sum(g * xhat, axis=axes).astype(self.gamma.dtype, copy=False)
            dbeta = np.sum(g, axis=axes).astype(self.beta.dtype, copy=False)
            if not train:
                return g * gamma * ivar, dgamma, dbeta
            # full batch-statistics derivative
            dxhat = g * gamma
            term_mean = dxhat.sum(axis=axes, keepdims=True)
            term_proj = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = (ivar / n_red) * (n_red * dxhat - term_mean - xhat * term_proj)
            return dx, dgamma, dbeta

        node = tape.custom("batchnorm", y, (fm.node, g_node, b_node), vjp)
        return FeatureMap(node, fm.channels, fm.height, fm.width, fm.cell_shape)


class ResidualBlock:
    """Triple-skip (3 conv layers) or quadruple-skip (4 conv layers) block.

    When the block changes spatial extents, its first conv layer carries the
    stride and the skip subsamples the input on the same grid. When it also
    changes the cell shape or channel count (the network's first block), the
    skip additionally applies a learnable 1x1 projection after subsampling,
    so both endpoints always have the same shape.
    """

    N_LAYERS = {"block1": 3, "block2": 4}

    def __init__(
        self,
        name: str,
        kind: str,
        in_channels: int,
        out_channels: int,
        in_cell: tuple[int, ...],
        out_cell: tuple[int, ...],
        r: int,
        stride: int = 1,
        order: str = ORDER_BN_PRELU,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ) -> None:
        if kind not in self.N_LAYERS:
            raise IncompatibleSpec(f"unknown block kind {kind!r}")
        self.name = name
        self.kind = kind
        self.stride = stride
        self.order = order
        n_layers = self.N_LAYERS[kind]
        rng = rng or np.random.default_rng(0)

        expands = tuple(in_cell) != tuple(out_cell)
        self.units: list[tuple[TensorConv, BatchNorm, PReLU]] = []
        for i in range(n_layers):
            first = i == 0
            conv = TensorConv(
                f"{name}.conv{i}",
                in_channels if first else out_channels,
                out_channels,
                tuple(in_cell) if first else tuple(out_cell),
                tuple(out_cell),
                # the expanding first layer contracts the whole input cell;
                # rank-preserving layers keep the block's r
                r=len(in_cell) if (first and expands) else r,
                kernel=3,
                stride=stride if first else 1,
                pad=0 if (first and stride > 1) else 1,
                rng=rng,
                dtype=dtype,
            )
            bn = BatchNorm(f"{name}.bn{i}", out_channels, tuple(out_cell), dtype=dtype)
            act = PReLU(f"{name}.prelu{i}", out_channels, dtype=dtype)
            self.units.append((conv, bn, act))

        self.projection: TensorConv | None = None
        if tuple(in_cell) != tuple(out_cell) or in_channels != out_channels:
            self.projection = TensorConv(
                f"{name}.skip_proj",
                in_channels,
                out_channels,
                tuple(in_cell),
                tuple(out_cell),
                r=len(in_cell),
                kernel=1,
                stride=1,
                pad=0,
                rng=rng,
                dtype=dtype,
            )

    def params(self):
        out = []
        for conv, bn, act in self.units:
            out.extend(conv.params())
            out.extend(bn.params())
            out.extend(act.params())
        if self.projection is not None:
            out.extend(self.projection.params())
        return out

    def buffers(self):
        out = []
        for _, bn, _ in self.units:
            out.extend(bn.buffers())
        return out

    def out_geometry(self, height: int, width: int) -> tuple[int, int]:
        conv0 = self.units[0][0]
        return conv0.out_geometry(height, width)

    def _skip(self, tape: Tape, fm: FeatureMap, oh: int, ow: int, train: bool) -> FeatureMap:
        node = fm.node
        if self.stride > 1:
            x = tape.value(node)
            s = self.stride
            sub = np.ascontiguousarray(x[:, :, 0 : s * oh : s, 0 : s * ow : s])
            x_shape = x.shape

            def vjp(g):
                dx = np.zeros(x_shape, dtype=g.dtype)
                dx[:, :, 0 : s * oh : s, 0 : s * ow : s] = g
                return (dx,)

            node = tape.custom("subsample", sub, (node,), vjp)
        skipped = FeatureMap(node, fm.channels, oh, ow, fm.cell_shape)
        if self.projection is not None:
            skipped = self.projection.forward(tape, skipped, train)
        return skipped

    def forward(self, tape: Tape, fm: FeatureMap, train: bool = True) -> FeatureMap:
        oh, ow = self.out_geometry(fm.height, fm.width)
        skip = self._skip(tape, fm, oh, ow, train)
        out = fm
        for conv, bn, act in self.units:
            out = conv.forward(tape, out, train)
            if self.order == ORDER_BN_PRELU:
                out = bn.forward(tape, out, train)
                out = act.forward(tape, out, train)
            else:
                out = act.forward(tape, out, train)
                out = bn.forward(tape, out, train)
        if (skip.height, skip.width, skip.cell_shape) != (out.height, out.width, out.cell_shape):
            raise ShapeMismatch(
                f"{self.name}: skip endpoint {skip.height}x{skip.width}x{skip.cell_shape} "
                f"vs chain {out.height}x{out.width}x{out.cell_shape}"
            )
        node = tape.add(skip.node, out.node)
        return FeatureMap(node, out.channels, out.height, out.width, out.cell_shape)


class ScalarConv2d:
    """Textbook conv2d on rank-0 cells, for the CNN baselines."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int = 1,
        pad: int = 0,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ) -> None:
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.weight = (
            rng.standard_normal((out_channels, in_channels, kernel, kernel))
            * np.sqrt(2.0 / fan_in)
        ).astype(dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def out_geometry(self, height: int, width: int) -> tuple[int, int]:
        return (
            conv_output_extent(height, self.kernel, self.stride, self.pad),
            conv_output_extent(width, self.kernel, self.stride, self.pad),
        )

    def forward(self, tape: Tape, fm: FeatureMap, train: bool = True) -> FeatureMap:
        if fm.cell_shape != () or fm.channels != self.in_channels:
            raise ShapeMismatch(f"{self.name}: expected {self.in_channels} scalar channels")
        oh, ow = self.out_geometry(fm.height, fm.width)
        x = tape.value(fm.node)
        w_node = tape.leaf(self.weight, param=f"{self.name}.weight")
        b_node = tape.leaf(self.bias, param=f"{self.name}.bias")
        n, m = x.shape[0], self.in_channels
        k, s, p, oc = self.kernel, self.stride, self.pad, self.out_channels

        win = _gather_windows(_pad_spatial(x, p), k, s, oh, ow)  # [N,OH,OW,m,k,k]
        u_mat = win.reshape(n * oh * ow, m * k * k)
        w_mat = self.weight.astype(x.dtype, copy=False).reshape(oc, m * k * k).T
        v = (u_mat @ w_mat + self.bias.astype(x.dtype, copy=False)).reshape(n, oh, ow, oc)
        v = np.ascontiguousarray(v.transpose(0, 3, 1, 2))
        x_shape = x.shape

        def vjp(g):
            g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)
            dwin = (g_mat @ w_mat.T).reshape(n, oh, ow, m, k, k)
            dx = _scatter_windows(dwin, x_shape, k, s, p)
            dw = (u_mat.T @ g_mat).T.reshape(self.weight.shape).astype(self.weight.dtype, copy=False)
            db = g_mat.sum(axis=0).astype(self.bias.dtype, copy=False)
            return dx, dw, db

        node = tape.custom("scalar_conv", v, (fm.node, w_node, b_node), vjp)
        return FeatureMap(node, oc, oh, ow, ())


class FullyConnected:
    """Dense layer on flattened scalar features."""

    def __init__(
        self,
        name: str,
        in_features: int,
        out_features: int,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ) -> None:
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        self.weight = (
            rng.standard_normal((in_features, out_features)) * np.sqrt(2.0 / in_features)
        ).astype(dtype)
        self.bias = np.zeros(out_features, dtype=dtype)

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def forward(self, tape: Tape, x_node: int, train: bool = True) -> int:
        x = tape.value(x_node)
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(
                f"{self.name}: expected [N, {self.in_features}], got {x.shape}"
            )
        w_node = tape.leaf(self.weight, param=f"{self.name}.weight")
        b_node = tape.leaf(self.bias, param=f"{self.name}.bias")
        w = self.weight.astype(x.dtype, copy=False)
        y = x @ w + self.bias.astype(x.dtype, copy=False)

        def vjp(g):
            return (
                g @ w.T,
                (x.T @ g).astype(self.weight.dtype, copy=False),
                g.sum(axis=0).astype(self.bias.dtype, copy=False),
            )

        return tape.custom("fully_connected", y, (x_node, w_node, b_node), vjp)


class ReLU:
    """Stateless rectifier for the CNN baselines."""

    def __init__(self, name: str) -> None:
        self.name = name

    def params(self):
        return []

    def forward(self, tape: Tape, fm_or_node, train: bool = True):
        if isinstance(fm_or_node, FeatureMap):
            node = tape.max_with_zero(fm_or_node.node)
            return FeatureMap(
                node, fm_or_node.channels, fm_or_node.height, fm_or_node.width, fm_or_node.cell_shape
            )
        return tape.max_with_zero(fm_or_node)
