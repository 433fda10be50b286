"""Reverse-mode automatic differentiation over the tensor primitives.

A Tape records every executed primitive as an append-only list of nodes in
topological order; backward replays the list once in strict reverse order.
Layers and loss functions register fused operations through Tape.custom by
supplying the forward value together with a vjp closure, so the op set here
stays minimal: contract, linear_combine, the elementwise family, reshape and
transpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor
from .errors import NotScalarLoss, ShapeMismatch


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    # grad of the output -> tuple of parent grads (None for non-differentiable slots)
    vjp: Optional[Callable[[np.ndarray], tuple]]
    param: Optional[str] = None


@dataclass
class Gradients:
    """Gradients keyed by parameter id, plus any explicitly requested nodes."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    nodes: dict[int, np.ndarray] = field(default_factory=dict)


class Tape:
    """Single-writer record of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        # side-channel for op diagnostics, e.g. PReLU sign masks for kink
        # detection in grad_check
        self.notes: dict[str, list] = {}

    def value(self, i: int) -> np.ndarray:
        return self.nodes[i].value

    def leaf(self, value: np.ndarray, param: str | None = None) -> int:
        self.nodes.append(Node("leaf", (), np.asarray(value), None, param))
        return len(self.nodes) - 1

    def custom(
        self,
        op: str,
        value: np.ndarray,
        parents: Sequence[int],
        vjp: Callable[[np.ndarray], tuple],
    ) -> int:
        """Record a fused operation with an externally supplied backward rule."""
        self.nodes.append(Node(op, tuple(parents), np.asarray(value), vjp))
        return len(self.nodes) - 1

    def note(self, key: str, item) -> None:
        self.notes.setdefault(key, []).append(item)

    # -- primitive ops ------------------------------------------------------

    def contract(self, a: int, b: int, r: int) -> int:
        u, w = self.value(a), self.value(b)
        out = tensor.contract(u, w, r)

        def vjp(g):
            return (
                tensor.contract_adjoint_u(g, w, r, u.shape),
                tensor.contract_adjoint_w(g, u, r, w.shape),
            )

        return self.custom("contract", out, (a, b), vjp)

    def linear_combine(self, ids: Sequence[int]) -> int:
        values = [self.value(i) for i in ids]
        out = tensor.linear_combine(values)

        def vjp(g):
            return tuple(g for _ in ids)

        return self.custom("linear_combine", out, tuple(ids), vjp)

    def add(self, a: int, b: int) -> int:
        out = tensor.elementwise("add", self.value(a), self.value(b))
        return self.custom("add", out, (a, b), lambda g: (g, g))

    def sub(self, a: int, b: int) -> int:
        out = tensor.elementwise("sub", self.value(a), self.value(b))
        return self.custom("sub", out, (a, b), lambda g: (g, -g))

    def mul(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        out = tensor.elementwise("mul", va, vb)
        return self.custom("mul", out, (a, b), lambda g: (g * vb, g * va))

    def div(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        out = tensor.elementwise("div", va, vb)
        return self.custom("div", out, (a, b), lambda g: (g / vb, -g * va / (vb * vb)))

    def scale(self, a: int, c: float) -> int:
        out = tensor.elementwise("scale", self.value(a), c)
        return self.custom("scale", out, (a,), lambda g: (g * c,))

    def max_with_zero(self, a: int) -> int:
        va = self.value(a)
        out = tensor.elementwise("max_with_zero", va)
        mask = (va > 0).astype(va.dtype)
        return self.custom("max_with_zero", out, (a,), lambda g: (g * mask,))

    def reshape(self, a: int, shape: tuple[int, ...]) -> int:
        va = self.value(a)
        out = tensor.reshape(va, shape)
        return self.custom("reshape", out, (a,), lambda g: (g.reshape(va.shape),))

    def transpose(self, a: int, axes: tuple[int, ...]) -> int:
        va = self.value(a)
        out = np.ascontiguousarray(np.transpose(va, axes))
        inv = tuple(np.argsort(axes))
        return self.custom("transpose", out, (a,), lambda g: (np.transpose(g, inv),))

    def sum_all(self, a: int) -> int:
        va = self.value(a)
        out = np.asarray(va.sum())
        return self.custom("sum_all", out, (a,), lambda g: (np.full_like(va, g),))

    def mean_all(self, a: int) -> int:
        va = self.value(a)
        out = np.asarray(va.mean())
        n = va.size
        return self.custom("mean_all", out, (a,), lambda g: (np.full_like(va, g / n),))

    # -- backward -----------------------------------------------------------

    def backward(self, loss: int, want: Sequence[int] = ()) -> Gradients:
        """Accumulate gradients of a rank-0 loss node over the whole tape.

        Visits nodes in strict reverse id order exactly once; leaves tagged
        with a param id are always collected, other leaves only when listed
        in `want`.
        """
        loss_value = self.value(loss)
        if loss_value.ndim != 0:
            raise NotScalarLoss(f"loss node has shape {loss_value.shape}")
        grads: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss] = np.ones((), dtype=loss_value.dtype)
        for i in range(len(self.nodes) - 1, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                pv = self.nodes[pid].value
                if pg.shape != pv.shape:
                    raise ShapeMismatch(
                        f"vjp of {node.op} returned shape {pg.shape} for parent "
                        f"of shape {pv.shape}"
                    )
                if grads[pid] is None:
                    grads[pid] = pg.copy()
                else:
                    grads[pid] += pg
        result = Gradients()
        want_set = set(want)
        for i, node in enumerate(self.nodes):
            if node.param is not None and node.op == "leaf":
                result.params[node.param] = (
                    grads[i] if grads[i] is not None else np.zeros_like(node.value)
                )
            if i in want_set:
                result.nodes[i] = grads[i] if grads[i] is not None else np.zeros_like(node.value)
        return result


@dataclass
class GradCheckRow:
    param: str
    checked: int
    excluded: int
    max_rel_err: float


@dataclass
class GradCheckReport:
    rows: list[GradCheckRow]
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def format_table(self) -> str:
        lines = [f"{'param':40s} {'checked':>8s} {'excluded':>9s} {'max rel err':>12s}"]
        for r in self.rows:
            lines.append(f"{r.param:40s} {r.checked:8d} {r.excluded:9d} {r.max_rel_err:12.3e}")
        lines.append(
            f"overall max rel err {self.max_rel_err:.3e} "
            f"({'PASS' if self.passed else 'FAIL'} at {self.tolerance:.1e})"
        )
        return "\n".join(lines)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def grad_check(
    build_loss: Callable[[], tuple[Tape, int]],
    params: dict[str, np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    `build_loss` must rebuild the forward pass from the live arrays in
    `params` (they are perturbed in place and restored). Up to `max_coords`
    coordinates are sampled per parameter. Coordinates whose +/- step
    evaluations flip a PReLU sign mask are reported as excluded rather than
    failed, since the loss is not differentiable at the kink.
    """
    rng = rng or np.random.default_rng(0)
    tape0, loss0 = build_loss()
    grads = tape0.backward(loss0).params

    def run():
        t, l = build_loss()
        masks = t.notes.get("prelu_mask", [])
        return float(t.value(l)), masks

    rows = []
    for name in params:
        arr = params[name]
        n = arr.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        excluded = 0
        for i in coords:
            old = arr.flat[i]
            arr.flat[i] = old + step
            plus, masks_p = run()
            arr.flat[i] = old - step
            minus, masks_m = run()
            arr.flat[i] = old
            crossed = any(
                not np.array_equal(mp, mm) for mp, mm in zip(masks_p, masks_m)
            )
            if crossed:
                excluded += 1
                continue
            fd = (plus - minus) / (2.0 * step)
            worst = max(worst, _rel_err(fd, float(grads[name].flat[i])))
        rows.append(GradCheckRow(name, len(coords) - excluded, excluded, worst))
    return GradCheckReport(rows, tolerance)
