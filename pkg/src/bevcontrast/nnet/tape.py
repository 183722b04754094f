"""Reverse-mode gradient engine over float64 numpy arrays.

Primitive operations compute their forward value eagerly and append a
vector-Jacobian closure to a Tape. Because the tape is append-only,
record order is a topological order of the computation graph, and the
backward sweep simply walks the records in reverse, accumulating
adjoints into Tensor.grad.

Conventions:
  * one tape = one graph = one backward pass;
  * tensors that should receive gradients are created via Tape.leaf();
  * plain arrays / scalars passed to an op are wrapped as constants and
    never accumulate gradients a caller can see;
  * mixing tensors from two different tapes is a contract violation.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError


class SmoothnessProbe:
    """Collects local-smoothness margins during one forward pass.

    Central-difference verification is only meaningful where the graph
    is C1 in a neighborhood of the evaluation point; the probe reports
    how close the pass came to a ReLU kink, an argmax tie, or a
    vanishing row norm so a harness can reject bad evaluation points.
    """

    def __init__(self):
        self.min_relu_margin = np.inf
        self.min_argmax_gap = np.inf
        self.min_row_norm = np.inf

    def see_relu(self, preact: np.ndarray) -> None:
        if preact.size:
            self.min_relu_margin = min(self.min_relu_margin, float(np.abs(preact).min()))

    def see_argmax(self, values: np.ndarray) -> None:
        """values: (n, d) competing rows; records the top-two gap per column."""
        if values.shape[0] >= 2:
            top2 = np.sort(values, axis=0)[-2:, :]
            self.min_argmax_gap = min(self.min_argmax_gap, float((top2[1] - top2[0]).min()))

    def see_row_norm(self, norms: np.ndarray) -> None:
        if norms.size:
            self.min_row_norm = min(self.min_row_norm, float(norms.min()))


_ACTIVE_PROBE: SmoothnessProbe | None = None


@contextmanager
def probe_smoothness():
    global _ACTIVE_PROBE
    probe = SmoothnessProbe()
    _ACTIVE_PROBE = probe
    try:
        yield probe
    finally:
        _ACTIVE_PROBE = None


class Tensor:
    """Array node of a taped computation graph."""

    __slots__ = ("value", "grad", "tape", "name")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        """Copy the value into a fresh constant with no graph linkage."""
        return Tensor(self.value.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{tag})"

    # operator sugar; scalars and arrays are treated as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Append-only record of primitive ops for one reverse sweep."""

    def __init__(self):
        self._ops: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def leaf(self, value, name: str | None = None) -> Tensor:
        return Tensor(value, tape=self, name=name)

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, out: Tensor) -> None:
        """Seed d(out)/d(out)=1 and sweep the records in reverse order."""
        if out.value.size != 1:
            raise ContractError("backward requires a scalar output tensor")
        out.grad = np.ones_like(out.value)
        for node, vjp in reversed(self._ops):
            if node.grad is not None:
                vjp(node.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tapes = {t.tape for t in tensors if t.tape is not None}
    if len(tapes) > 1:
        raise ContractError("operation mixes tensors from different tapes")
    return tapes.pop() if tapes else None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an adjoint over broadcast axes back to the parent's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _record(tape: Tape | None, out: Tensor, vjp: Callable[[np.ndarray], None]) -> None:
    if tape is not None:
        out.tape = tape
        tape._ops.append((out, vjp))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.value + b.value)

    def vjp(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    _record(tape, out, vjp)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.value - b.value)

    def vjp(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    _record(tape, out, vjp)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.value * b.value)

    def vjp(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    _record(tape, out, vjp)
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.value / b.value)

    def vjp(g):
        _accum(a, _unbroadcast(g / b.value, a.value.shape))
        _accum(b, _unbroadcast(-g * out.value / b.value, b.value.shape))

    _record(tape, out, vjp)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(-a.value)

    def vjp(g):
        _accum(a, -g)

    _record(tape, out, vjp)
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError("matmul is defined for 2-D tensors only")
    tape = _tape_of(a, b)
    out = Tensor(a.value @ b.value)

    def vjp(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    _record(tape, out, vjp)
    return out


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ContractError("transpose is defined for 2-D tensors only")
    tape = _tape_of(a)
    out = Tensor(a.value.T)

    def vjp(g):
        _accum(a, g.T)

    _record(tape, out, vjp)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    tape = _tape_of(a)
    if _ACTIVE_PROBE is not None:
        _ACTIVE_PROBE.see_relu(a.value)
    out = Tensor(np.maximum(a.value, 0.0))
    mask = a.value > 0.0

    def vjp(g):
        _accum(a, g * mask)

    _record(tape, out, vjp)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.exp(a.value))

    def vjp(g):
        _accum(a, g * out.value)

    _record(tape, out, vjp)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.log(a.value))

    def vjp(g):
        _accum(a, g / a.value)

    _record(tape, out, vjp)
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.sqrt(a.value))

    def vjp(g):
        _accum(a, g * 0.5 / out.value)

    _record(tape, out, vjp)
    return out


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.value.shape))

    _record(tape, out, vjp)
    return out


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(a.value.reshape(shape))

    def vjp(g):
        _accum(a, g.reshape(a.value.shape))

    _record(tape, out, vjp)
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    tape = _tape_of(*parts)
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis))
    sizes = [p.value.shape[axis] for p in parts]

    def vjp(g):
        offset = 0
        for p, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            _accum(p, g[tuple(sl)])
            offset += size

    _record(tape, out, vjp)
    return out


def gather_rows(a, idx) -> Tensor:
    """Select rows a[idx]; backward scatter-adds into the source rows."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    tape = _tape_of(a)
    out = Tensor(a.value[idx])

    def vjp(g):
        z = np.zeros_like(a.value)
        np.add.at(z, idx, g)
        _accum(a, z)

    _record(tape, out, vjp)
    return out


def rowgroup_max(a, groups: Sequence[np.ndarray]) -> Tensor:
    """Channel-wise max over each group of rows of a 2-D tensor.

    Gradient routes to the arg-max row per channel; ties go to the
    lowest row index (group index arrays must be ascending).
    """
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ContractError("rowgroup_max expects a 2-D tensor")
    tape = _tape_of(a)
    n_groups = len(groups)
    d = a.value.shape[1]
    out_val = np.empty((n_groups, d))
    winners = np.empty((n_groups, d), dtype=np.intp)
    cols = np.arange(d)
    for r, gi in enumerate(groups):
        gi = np.asarray(gi, dtype=np.intp)
        rows = a.value[gi]
        if _ACTIVE_PROBE is not None:
            _ACTIVE_PROBE.see_argmax(rows)
        am = rows.argmax(axis=0)  # first max = lowest index
        out_val[r] = rows[am, cols]
        winners[r] = gi[am]
    out = Tensor(out_val)

    def vjp(g):
        z = np.zeros_like(a.value)
        np.add.at(z, (winners, np.broadcast_to(cols, winners.shape)), g)
        _accum(a, z)

    _record(tape, out, vjp)
    return out


def pillar_scatter_max(feats, cells: np.ndarray, n_cells: int) -> Tensor:
    """Scatter point features (P, C) into flat cells by channel-wise max.

    Empty cells stay exactly zero. Gradient routes to the arg-max point
    per (cell, channel); ties go to the lowest point index.
    """
    feats = _as_tensor(feats)
    cells = np.asarray(cells, dtype=np.intp)
    tape = _tape_of(feats)
    p, c = feats.value.shape
    out_val = np.zeros((n_cells, c))
    winners = np.full((n_cells, c), -1, dtype=np.intp)
    if p:
        order = np.argsort(cells, kind="stable")
        sorted_cells = cells[order]
        uniq, starts = np.unique(sorted_cells, return_index=True)
        bounds = np.append(starts, p)
        cols = np.arange(c)
        for k, cell in enumerate(uniq):
            members = order[bounds[k]:bounds[k + 1]]
            rows = feats.value[members]
            if _ACTIVE_PROBE is not None:
                _ACTIVE_PROBE.see_argmax(rows)
            am = rows.argmax(axis=0)
            out_val[cell] = rows[am, cols]
            winners[cell] = members[am]
    out = Tensor(out_val)

    def vjp(g):
        z = np.zeros_like(feats.value)
        occ = winners >= 0
        np.add.at(z, (winners[occ], np.nonzero(occ)[1]), g[occ])
        _accum(feats, z)

    _record(tape, out, vjp)
    return out


def conv3x3(x, k, b) -> Tensor:
    """3x3 convolution with zero padding and stride 1.

    x: (H, W, Cin), k: (3, 3, Cin, Cout), b: (Cout,).
    """
    x, k, b = _as_tensor(x), _as_tensor(k), _as_tensor(b)
    if x.ndim != 3 or k.value.shape[:2] != (3, 3):
        raise ContractError("conv3x3 expects x (H,W,Cin) and k (3,3,Cin,Cout)")
    tape = _tape_of(x, k, b)
    h, w, cin = x.value.shape
    cout = k.value.shape[3]
    pad = np.zeros((h + 2, w + 2, cin))
    pad[1:-1, 1:-1] = x.value
    out_val = np.broadcast_to(b.value, (h, w, cout)).copy()
    for dy in range(3):
        for dx in range(3):
            out_val += pad[dy:dy + h, dx:dx + w, :] @ k.value[dy, dx]
    out = Tensor(out_val)

    def vjp(g):
        _accum(b, g.sum(axis=(0, 1)))
        dk = np.empty_like(k.value)
        gpad = np.zeros_like(pad)
        for dy in range(3):
            for dx in range(3):
                patch = pad[dy:dy + h, dx:dx + w, :]
                dk[dy, dx] = np.tensordot(patch, g, axes=([0, 1], [0, 1]))
                gpad[dy:dy + h, dx:dx + w, :] += g @ k.value[dy, dx].T
        _accum(k, dk)
        _accum(x, gpad[1:-1, 1:-1, :])

    _record(tape, out, vjp)
    return out


def bilinear_gather(fm, v: np.ndarray, u: np.ndarray) -> Tensor:
    """4-neighbour bilinear read of a (H, W, C) map at fractional grid coords.

    v indexes rows, u indexes columns, both in cell-center units and
    already clamped by the caller to [0, H-1] x [0, W-1]. The weights
    are constants with respect to the coordinates.
    """
    fm = _as_tensor(fm)
    tape = _tape_of(fm)
    h, w, _ = fm.value.shape
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, h - 1.0)
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, w - 1.0)
    r0 = np.clip(np.floor(v).astype(np.intp), 0, h - 2)
    c0 = np.clip(np.floor(u).astype(np.intp), 0, w - 2)
    ty = v - r0
    tx = u - c0
    w00 = (1 - ty) * (1 - tx)
    w01 = (1 - ty) * tx
    w10 = ty * (1 - tx)
    w11 = ty * tx
    f = fm.value
    out = Tensor(
        w00[:, None] * f[r0, c0]
        + w01[:, None] * f[r0, c0 + 1]
        + w10[:, None] * f[r0 + 1, c0]
        + w11[:, None] * f[r0 + 1, c0 + 1]
    )

    def vjp(g):
        z = np.zeros_like(f)
        np.add.at(z, (r0, c0), w00[:, None] * g)
        np.add.at(z, (r0, c0 + 1), w01[:, None] * g)
        np.add.at(z, (r0 + 1, c0), w10[:, None] * g)
        np.add.at(z, (r0 + 1, c0 + 1), w11[:, None] * g)
        _accum(fm, z)

    _record(tape, out, vjp)
    return out


# --- composites (differentiable through the primitives above) ---


def logsumexp_rows(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp of a 2-D tensor, stabilized by max subtraction.

    The per-row max is treated as a constant shift, which leaves the
    gradient unchanged because the shift cancels exactly.
    """
    m = x.value.max(axis=1, keepdims=True)
    return add(log(tsum(exp(sub(x, m)), axis=1, keepdims=True)), m)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row of a 2-D tensor to unit Euclidean norm.

    A 1e-18 term under the root keeps an all-zero row at zero instead
    of 0/0; for any row with norm above ~1e-5 the effect is far below
    the 1e-9 unit-norm contract.
    """
    n = sqrt(add(tsum(mul(x, x), axis=1, keepdims=True), 1e-18))
    if _ACTIVE_PROBE is not None:
        _ACTIVE_PROBE.see_row_norm(n.value.ravel())
    return div(x, n)
