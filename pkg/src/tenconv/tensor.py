"""Dense arbitrary-rank tensor values and the contraction primitive.

Values are numpy float arrays in row-major (C) order; a rank-0 array is a
scalar. The contraction convention is fixed package-wide: the trailing r
axes of the input pair against the leading r axes of the weight with
REVERSED pairing, i.e. input axis (rank_u - 1 - t) pairs with weight axis t
for t = 0..r-1,

    V[a..., p...] = sum_i U[a..., i_{r-1}, ..., i_0] * W[i_0, ..., i_{r-1}, p...]

so the output shape is U's leading (rank_u - r) extents followed by W's
trailing (rank_w - r) extents. r is always explicit; it is never inferred
from shapes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import prod

import numpy as np

from .errors import (
    DivisionByZero,
    EmptyInput,
    FormatError,
    OutOfBounds,
    RankError,
    ShapeMismatch,
)

DEFAULT_DTYPE = np.float64

MODE_PRESERVE = "preserve"
MODE_COMPRESS = "compress"
MODE_EXPAND = "expand"


def transform_mode(input_rank: int, weight_rank: int, r: int) -> str:
    """Classify a transformation by the sign of (output rank - input rank)."""
    out_rank = input_rank - r + weight_rank - r
    if out_rank == input_rank:
        return MODE_PRESERVE
    return MODE_COMPRESS if out_rank < input_rank else MODE_EXPAND


@dataclass(frozen=True)
class TensorTransformSpec:
    """Declares a contraction between an input tensor and a neuron tensor."""

    input_rank: int
    weight_rank: int
    contract_count: int

    def __post_init__(self) -> None:
        r = self.contract_count
        if not 1 <= r <= min(self.input_rank, self.weight_rank):
            raise RankError(
                f"contract count {r} outside [1, {min(self.input_rank, self.weight_rank)}] "
                f"for ranks ({self.input_rank}, {self.weight_rank})"
            )

    @property
    def output_rank(self) -> int:
        return self.input_rank - self.contract_count + self.weight_rank - self.contract_count

    @property
    def mode(self) -> str:
        return transform_mode(self.input_rank, self.weight_rank, self.contract_count)


def _check_contract_args(u_shape: tuple[int, ...], w_shape: tuple[int, ...], r: int) -> None:
    ru, rw = len(u_shape), len(w_shape)
    if not 1 <= r <= min(ru, rw):
        raise RankError(f"contract count {r} outside [1, {min(ru, rw)}] for ranks ({ru}, {rw})")
    for t in range(r):
        ua = ru - 1 - t
        if u_shape[ua] != w_shape[t]:
            raise ShapeMismatch(
                f"input axis {ua} (extent {u_shape[ua]}) does not match "
                f"weight axis {t} (extent {w_shape[t]})"
            )


def contract_output_shape(
    u_shape: tuple[int, ...], w_shape: tuple[int, ...], r: int
) -> tuple[int, ...]:
    """Output shape of contract() after validating the axis pairing."""
    _check_contract_args(u_shape, w_shape, r)
    return u_shape[: len(u_shape) - r] + w_shape[r:]


def _reverse_leading(w: np.ndarray, r: int) -> np.ndarray:
    # Reversing W's leading block makes its row-major enumeration of the
    # contracted index coincide with U's trailing block.
    perm = tuple(range(r - 1, -1, -1)) + tuple(range(r, w.ndim))
    return np.ascontiguousarray(np.transpose(w, perm))


def contract(u: np.ndarray, w: np.ndarray, r: int) -> np.ndarray:
    """Contract the trailing r axes of u against the leading r axes of w.

    Uses the reversed pairing documented at module level. Raises RankError
    for r outside [1, min(rank)] and ShapeMismatch naming the first axis
    pair whose extents differ.
    """
    u = np.asarray(u)
    w = np.asarray(w)
    out_shape = contract_output_shape(u.shape, w.shape, r)
    k = prod(u.shape[u.ndim - r :])
    a = u.size // k
    p = w.size // k
    wp = _reverse_leading(w, r)
    v = np.ascontiguousarray(u).reshape(a, k) @ wp.reshape(k, p)
    return v.reshape(out_shape)


def contract_adjoint_u(g: np.ndarray, w: np.ndarray, r: int, u_shape: tuple[int, ...]) -> np.ndarray:
    """Gradient of contract(u, w, r) with respect to u, given output gradient g."""
    k = prod(u_shape[len(u_shape) - r :])
    a = prod(u_shape) // k
    p = w.size // k
    wp = _reverse_leading(w, r)
    du = np.ascontiguousarray(g).reshape(a, p) @ wp.reshape(k, p).T
    return du.reshape(u_shape)


def contract_adjoint_w(g: np.ndarray, u: np.ndarray, r: int, w_shape: tuple[int, ...]) -> np.ndarray:
    """Gradient of contract(u, w, r) with respect to w, given output gradient g."""
    k = prod(w_shape[:r])
    a = u.size // k
    p = prod(w_shape) // k
    dwp = np.ascontiguousarray(u).reshape(a, k).T @ np.ascontiguousarray(g).reshape(a, p)
    rev_shape = tuple(reversed(w_shape[:r])) + w_shape[r:]
    perm = tuple(range(r - 1, -1, -1)) + tuple(range(r, len(w_shape)))
    # reversing the leading block is an involution, so the same perm undoes it
    return np.transpose(dwp.reshape(rev_shape), perm)


def linear_combine(tensors: list[np.ndarray]) -> np.ndarray:
    """Elementwise sum of equally-shaped tensors, accumulated in list order."""
    if not tensors:
        raise EmptyInput("linear_combine needs at least one tensor")
    first = np.asarray(tensors[0])
    acc = first.copy()
    for i, t in enumerate(tensors[1:], start=1):
        t = np.asarray(t)
        if t.shape != first.shape:
            raise ShapeMismatch(f"tensor {i} has shape {t.shape}, expected {first.shape}")
        acc += t
    return acc


_BINARY_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}
_UNARY_OPS = {
    "max_with_zero": lambda a: np.maximum(a, 0.0),
    "sign": np.sign,
}


def elementwise(op_kind: str, a: np.ndarray, b=None) -> np.ndarray:
    """Entrywise arithmetic. Binary ops require equal shapes; div rejects zeros."""
    a = np.asarray(a)
    if op_kind in _UNARY_OPS:
        return _UNARY_OPS[op_kind](a)
    if op_kind == "scale":
        return a * float(b)
    if op_kind in _BINARY_OPS or op_kind == "div":
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ShapeMismatch(f"operand shapes {a.shape} and {b.shape} differ")
        if op_kind == "div":
            if np.any(b == 0.0):
                raise DivisionByZero("elementwise div has zero entries in the divisor")
            return a / b
        return _BINARY_OPS[op_kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def reshape(t: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reinterpret t row-major under a new shape with the same element count."""
    t = np.asarray(t)
    if prod(shape) != t.size:
        raise ShapeMismatch(f"cannot reshape {t.size} elements to {tuple(shape)}")
    return t.reshape(shape)


def flatten(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    return t.reshape(t.size)


def slice_window(values: np.ndarray, y: int, x: int, k: int) -> np.ndarray:
    """Copy the k-by-k spatial patch at (y, x) from a batched feature map.

    `values` uses the canonical layout [N, m, H, W, *cell]; the window must
    lie fully inside the spatial extents.
    """
    values = np.asarray(values)
    if values.ndim < 4:
        raise ShapeMismatch(f"expected a [N, m, H, W, *cell] layout, got rank {values.ndim}")
    h, w = values.shape[2], values.shape[3]
    if y < 0 or x < 0 or y + k > h or x + k > w:
        raise OutOfBounds(f"{k}x{k} window at ({y}, {x}) exceeds {h}x{w} map")
    return values[:, :, y : y + k, x : x + k].copy()


def write_tensor(f, arr: np.ndarray) -> None:
    """Append one flat binary record: u32 rank, u32 extents[], f64 data[] (LE)."""
    arr = np.asarray(arr)
    f.write(struct.pack("<I", arr.ndim))
    f.write(np.asarray(arr.shape, dtype="<u4").tobytes())
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor record: expected {n} bytes of {what}, got {len(buf)}")
    return buf


def read_tensor(f) -> np.ndarray:
    """Read one record written by write_tensor."""
    rank = struct.unpack("<I", _read_exact(f, 4, "rank"))[0]
    if rank > 32:
        raise FormatError(f"implausible tensor rank {rank}")
    shape = tuple(np.frombuffer(_read_exact(f, 4 * rank, "extents"), dtype="<u4").tolist())
    if any(e < 1 for e in shape):
        raise FormatError(f"non-positive extent in {shape}")
    n = prod(shape)
    data = np.frombuffer(_read_exact(f, 8 * n, "data"), dtype="<f8")
    return data.reshape(shape).copy()
