"""
Reverse-mode Automatic Differentiation
=====================================

A small tape-based reverse-mode AD engine over numpy arrays.

Every primitive accepts plain ndarrays, Python scalars or `Var`s. When no
operand is a `Var` the primitive is just the numpy computation and returns
an ndarray, so the same rendering and loss code runs untaped for inference
and taped for training, with identical forward values.

Features:
- Append-only tape, topologically ordered by construction
- Named parameter registry (`Tape.parameter`) for gradient lookup
- Broadcasting-aware vector-Jacobian products
- Structural ops (indexing, stacking, concatenation, row assembly)
- Central-difference gradient checker producing a GradReport
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.exceptions import AutodiffError

DIV_FLOOR = 1e-12
NORM_FLOOR = 1e-12

ArrayLike = Union["Var", np.ndarray, float]
Vjp = Callable[[np.ndarray], np.ndarray]


class Var:
    """A recorded value on a tape."""

    __array_ufunc__ = None  # make ndarray operators defer to ours
    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, index={self.index})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, exponent): return power(self, exponent)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


@dataclass
class _Node:
    parents: Tuple[Tuple[int, Vjp], ...]


class Tape:
    """
    Append-only record of primitive evaluations.

    Nodes are appended as values are produced, so every node's parents
    precede it and a single reverse sweep visits each node once.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.parameters: Dict[str, int] = {}
        self._shapes: Dict[str, Tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def parameter(self, name: str, value: np.ndarray) -> Var:
        """Register a trainable leaf under `name`."""
        if name in self.parameters:
            raise AutodiffError(f"parameter '{name}' registered twice")
        var = self._append(np.array(value, dtype=np.float64), ())
        self.parameters[name] = var.index
        self._shapes[name] = var.value.shape
        return var

    def record(self, value: np.ndarray, parents: Sequence[Tuple[Var, Vjp]]) -> Var:
        links = []
        for var, vjp in parents:
            if var.tape is not self:
                raise AutodiffError("operands recorded on different tapes")
            links.append((var.index, vjp))
        return self._append(value, tuple(links))

    def _append(self, value: np.ndarray, parents) -> Var:
        self.nodes.append(_Node(parents))
        return Var(value, self, len(self.nodes) - 1)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x: ArrayLike) -> np.ndarray:
    """Raw numpy value of a Var, ndarray or scalar."""
    return x.value if isinstance(x, Var) else np.asarray(x)


def _raw(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _emit(out: np.ndarray, *pairs) -> ArrayLike:
    """Return `out` untaped, or record it with the VJPs of its Var operands."""
    taped = [(x, vjp) for x, vjp in pairs if isinstance(x, Var)]
    if not taped:
        return out
    return taped[0][0].tape.record(out, taped)


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    va, vb = _raw(a), _raw(b)
    out = va + vb
    sa, sb = np.shape(va), np.shape(vb)
    return _emit(out, (a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    va, vb = _raw(a), _raw(b)
    out = va - vb
    sa, sb = np.shape(va), np.shape(vb)
    return _emit(out, (a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    va, vb = _raw(a), _raw(b)
    out = va * vb
    sa, sb = np.shape(va), np.shape(vb)
    return _emit(
        out,
        (a, lambda g: _unbroadcast(g * vb, sa)),
        (b, lambda g: _unbroadcast(g * va, sb)),
    )


def div(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    """a / b with |b| floored at 1e-12 (sign kept)."""
    va, vb = _raw(a), np.asarray(_raw(b), dtype=np.float64)
    small = np.abs(vb) < DIV_FLOOR
    d = np.where(small, np.where(vb < 0.0, -DIV_FLOOR, DIV_FLOOR), vb)
    out = va / d
    sa, sb = np.shape(va), np.shape(vb)
    return _emit(
        out,
        (a, lambda g: _unbroadcast(g / d, sa)),
        (b, lambda g: _unbroadcast(np.where(small, 0.0, -g * out / d), sb)),
    )


def neg(a: ArrayLike) -> ArrayLike:
    return _emit(-_raw(a), (a, lambda g: -g))


def exp(a: ArrayLike) -> ArrayLike:
    out = np.exp(_raw(a))
    return _emit(out, (a, lambda g: g * out))


def log(a: ArrayLike) -> ArrayLike:
    va = _raw(a)
    if np.any(np.asarray(va) <= 0.0):
        raise AutodiffError("log of non-positive value")
    return _emit(np.log(va), (a, lambda g: g / va))


def sqrt(a: ArrayLike) -> ArrayLike:
    va = _raw(a)
    if np.any(np.asarray(va) <= 0.0):
        raise AutodiffError("sqrt of non-positive value")
    out = np.sqrt(va)
    return _emit(out, (a, lambda g: g * 0.5 / out))


def power(a: ArrayLike, exponent: float) -> ArrayLike:
    """a ** exponent for a constant exponent."""
    va = _raw(a)
    p = float(exponent)
    out = np.power(va, p)
    return _emit(out, (a, lambda g: g * p * np.power(va, p - 1.0)))


def abs_(a: ArrayLike) -> ArrayLike:
    va = _raw(a)
    return _emit(np.abs(va), (a, lambda g: g * np.sign(va)))


def sigmoid(a: ArrayLike) -> ArrayLike:
    va = np.asarray(_raw(a), dtype=np.float64)
    out = np.empty_like(va)
    pos = va >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-va[pos]))
    ev = np.exp(va[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _emit(out, (a, lambda g: g * out * (1.0 - out)))


def sin(a: ArrayLike) -> ArrayLike:
    va = _raw(a)
    return _emit(np.sin(va), (a, lambda g: g * np.cos(va)))


def cos(a: ArrayLike) -> ArrayLike:
    va = _raw(a)
    return _emit(np.cos(va), (a, lambda g: -g * np.sin(va)))


def relu(a: ArrayLike) -> ArrayLike:
    va = _raw(a)
    on = va > 0.0
    return _emit(np.where(on, va, 0.0), (a, lambda g: g * on))


def clamp(a: ArrayLike, lo: float = -np.inf, hi: float = np.inf) -> ArrayLike:
    """Clip the value; the gradient passes straight through."""
    return _emit(np.clip(_raw(a), lo, hi), (a, lambda g: g))


def where(cond: np.ndarray, a: ArrayLike, b: ArrayLike) -> ArrayLike:
    """Select by a constant mask; gradients go to the selected branch only."""
    va, vb = _raw(a), _raw(b)
    out = np.where(cond, va, vb)
    sa, sb = np.shape(va), np.shape(vb)
    return _emit(
        out,
        (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), sa)),
        (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


def replace_value(a: ArrayLike, new_value: np.ndarray) -> ArrayLike:
    """Substitute the forward value while keeping the gradient of `a`."""
    return _emit(np.asarray(new_value, dtype=np.float64), (a, lambda g: g))


# ---------------------------------------------------------------------------
# Reductions and vector ops
# ---------------------------------------------------------------------------

def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> ArrayLike:
    va = np.asarray(_raw(a))
    out = np.sum(va, axis=axis, keepdims=keepdims)
    shape = va.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _emit(out, (a, vjp))


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> ArrayLike:
    va = np.asarray(_raw(a))
    count = va.size if axis is None else np.prod([va.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(count))


def dot(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    """Inner product over the last axis."""
    va, vb = _raw(a), _raw(b)
    out = np.sum(va * vb, axis=-1)
    sa, sb = np.shape(va), np.shape(vb)
    return _emit(
        out,
        (a, lambda g: _unbroadcast(g[..., None] * vb, sa)),
        (b, lambda g: _unbroadcast(g[..., None] * va, sb)),
    )


def cross(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    va, vb = _raw(a), _raw(b)
    out = np.cross(va, vb)
    sa, sb = np.shape(va), np.shape(vb)
    return _emit(
        out,
        (a, lambda g: _unbroadcast(np.cross(np.broadcast_to(vb, g.shape), g), sa)),
        (b, lambda g: _unbroadcast(np.cross(g, np.broadcast_to(va, g.shape)), sb)),
    )


def matvec(m: ArrayLike, x: ArrayLike) -> ArrayLike:
    """(..., r, c) @ (..., c) -> (..., r)."""
    vm, vx = _raw(m), _raw(x)
    out = np.einsum("...ij,...j->...i", vm, vx)
    sm, sx = np.shape(vm), np.shape(vx)
    return _emit(
        out,
        (m, lambda g: _unbroadcast(g[..., :, None] * vx[..., None, :], sm)),
        (x, lambda g: _unbroadcast(np.einsum("...ij,...i->...j", vm, g), sx)),
    )


def matmul(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    """2-D matrix product."""
    va, vb = _raw(a), _raw(b)
    out = va @ vb
    return _emit(out, (a, lambda g: g @ vb.T), (b, lambda g: va.T @ g))


def norm(a: ArrayLike) -> ArrayLike:
    """Euclidean norm over the last axis (gradient zero at the origin)."""
    va = _raw(a)
    n = np.sqrt(np.sum(va * va, axis=-1))
    safe = np.maximum(n, NORM_FLOOR)
    return _emit(n, (a, lambda g: g[..., None] * va / safe[..., None]))


def normalize(a: ArrayLike) -> ArrayLike:
    """x / |x| over the last axis; backward is (I - n n^T) / |x|."""
    va = _raw(a)
    n = np.sqrt(np.sum(va * va, axis=-1, keepdims=True))
    safe = np.maximum(n, NORM_FLOOR)
    out = va / safe

    def vjp(g):
        return (g - out * np.sum(out * g, axis=-1, keepdims=True)) / safe

    return _emit(out, (a, vjp))


def filter2d(a: ArrayLike, rows: np.ndarray, cols: np.ndarray) -> ArrayLike:
    """Separable linear filter of an (H, W, C) image: rows @ X @ cols^T per channel."""
    va = _raw(a)
    out = np.einsum("ih,hwc,jw->ijc", rows, va, cols)
    return _emit(out, (a, lambda g: np.einsum("ih,ijc,jw->hwc", rows, g, cols)))


# ---------------------------------------------------------------------------
# Structure
# ---------------------------------------------------------------------------

def getitem(a: ArrayLike, index) -> ArrayLike:
    va = np.asarray(_raw(a))
    out = va[index]

    def vjp(g):
        grad = np.zeros_like(va, dtype=np.float64)
        np.add.at(grad, index, g)
        return grad

    return _emit(out, (a, vjp))


def reshape(a: ArrayLike, shape) -> ArrayLike:
    va = np.asarray(_raw(a))
    return _emit(va.reshape(shape), (a, lambda g: g.reshape(va.shape)))


def expand_last(a: ArrayLike) -> ArrayLike:
    """Append a unit axis, e.g. (N,) -> (N, 1)."""
    return reshape(a, np.shape(_raw(a)) + (1,))


def stack(items: Sequence[ArrayLike], axis: int = -1) -> ArrayLike:
    raws = [np.asarray(_raw(x), dtype=np.float64) for x in items]
    out = np.stack(raws, axis=axis)
    pairs = [(x, (lambda i: lambda g: np.take(g, i, axis=axis))(i)) for i, x in enumerate(items)]
    return _emit(out, *pairs)


def concat(items: Sequence[ArrayLike], axis: int = 0) -> ArrayLike:
    raws = [np.asarray(_raw(x), dtype=np.float64) for x in items]
    out = np.concatenate(raws, axis=axis)
    bounds = np.cumsum([r.shape[axis] for r in raws])[:-1]

    def part(i):
        return lambda g: np.split(g, bounds, axis=axis)[i]

    return _emit(out, *[(x, part(i)) for i, x in enumerate(items)])


def broadcast_to(a: ArrayLike, shape) -> ArrayLike:
    va = np.asarray(_raw(a))
    out = np.broadcast_to(va, shape).copy()
    return _emit(out, (a, lambda g: _unbroadcast(g, va.shape)))


def assemble(parts: Sequence[ArrayLike], row_ids: Sequence[np.ndarray], total: int) -> ArrayLike:
    """Scatter row blocks back into their original order (ids must partition range(total))."""
    ids = np.concatenate([np.asarray(r, dtype=np.int64) for r in row_ids])
    if ids.size != total:
        raise AutodiffError("row blocks do not cover the output")
    order = np.argsort(ids, kind="stable")
    return getitem(concat(parts, axis=0), order)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(tape: Tape, output: ArrayLike) -> Dict[str, np.ndarray]:
    """
    Gradients of a scalar output w.r.t. every registered parameter.

    Parameters the output does not depend on receive exact zeros.
    """
    grads: Dict[str, np.ndarray] = {
        name: np.zeros(shape) for name, shape in tape._shapes.items()
    }
    if not isinstance(output, Var):
        return grads
    if output.tape is not tape:
        raise AutodiffError("output was recorded on another tape")
    if np.size(output.value) != 1:
        raise AutodiffError("backward needs a scalar output")

    adjoint: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    adjoint[output.index] = np.ones(np.shape(output.value))
    for i in range(output.index, -1, -1):
        g = adjoint[i]
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        for parent, vjp in tape.nodes[i].parents:
            contribution = vjp(g)
            if adjoint[parent] is None:
                adjoint[parent] = contribution
            else:
                adjoint[parent] = adjoint[parent] + contribution
        if tape.nodes[i].parents:
            adjoint[i] = None

    for name, index in tape.parameters.items():
        if adjoint[index] is not None:
            grads[name] = np.asarray(adjoint[index], dtype=np.float64).reshape(tape._shapes[name])
    return grads


@dataclass
class GradReport:
    """Analytic vs central-difference comparison."""

    errors: Dict[str, float] = field(default_factory=dict)
    checked: Dict[str, int] = field(default_factory=dict)
    skipped: Dict[str, int] = field(default_factory=dict)
    worst_parameter: Optional[str] = None

    @property
    def max_relative_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tolerance: float) -> bool:
        return self.max_relative_error < tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _central_difference(function, base: Dict[str, np.ndarray], name: str, idx, h: float) -> float:
    arr = base[name]
    plus, minus = dict(base), dict(base)
    plus[name] = arr.copy()
    plus[name][idx] = arr[idx] + h
    minus[name] = arr.copy()
    minus[name][idx] = arr[idx] - h
    return (float(value(function(plus))) - float(value(function(minus)))) / (2.0 * h)


def grad_check(
    function: Callable[[Dict[str, ArrayLike]], ArrayLike],
    parameters: Dict[str, np.ndarray],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    discontinuity_tolerance: Optional[float] = None,
) -> GradReport:
    """
    Compare taped gradients with central differences.

    Args:
        function: maps a dict of parameters (Vars or ndarrays) to a scalar
        parameters: parameter values by name
        step: relative step; h = step * max(1, |x|)
        max_entries: check at most this many scalars per parameter (sampled)
        rng: generator used for sampling entries
        discontinuity_tolerance: when set, an entry whose difference quotients
            at h and h/2 disagree by more than this (relative) straddles a
            kink or threshold of the function and is skipped

    Returns:
        GradReport: per-parameter max relative error and worst parameter
    """
    report = GradReport()
    if not parameters:
        return report

    tape = Tape()
    taped = {name: tape.parameter(name, v) for name, v in parameters.items()}
    analytic = backward(tape, function(taped))
    base = {name: np.array(v, dtype=np.float64) for name, v in parameters.items()}
    rng = rng if rng is not None else np.random.default_rng(0)

    for name, arr in base.items():
        flat_count = arr.size
        entries = np.arange(flat_count)
        if max_entries is not None and flat_count > max_entries:
            entries = np.sort(rng.choice(flat_count, size=max_entries, replace=False))
        worst = 0.0
        skipped = 0
        for e in entries:
            idx = np.unravel_index(int(e), arr.shape)
            h = step * max(1.0, abs(arr[idx]))
            numeric = _central_difference(function, base, name, idx, h)
            if discontinuity_tolerance is not None:
                half = _central_difference(function, base, name, idx, 0.5 * h)
                if relative_error(numeric, half) > discontinuity_tolerance:
                    skipped += 1
                    continue
            worst = max(worst, relative_error(float(analytic[name][idx]), numeric))
        report.errors[name] = worst
        report.checked[name] = int(entries.size) - skipped
        report.skipped[name] = skipped

    report.worst_parameter = max(report.errors, key=report.errors.get) if report.errors else None
    return report
