"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive lives in ``REGISTRY`` as an :class:`Op` with a
``forward`` and a vector-Jacobian ``backward``.  Operations are recorded on
the innermost active :class:`Tape`; outside a tape nothing is recorded.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import scipy.sparse as sp

DEFAULT_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class ComputationError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tensor + tape
# ---------------------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    # -- introspection ------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic sugar ---------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return reduce("min", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


@dataclass
class _Node:
    op: "Op"
    inputs: tuple
    output: Tensor
    saved: Any
    attrs: dict


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


@dataclass
class Tape:
    """Ordered record of executed operations.

    Use as a context manager; a tape may be replayed backwards once.
    """

    nodes: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def record(self, node: _Node):
        self.nodes.append(node)

    def _replay(self, out: Tensor, seed, keep_intermediate: bool = False) -> dict[int, np.ndarray]:
        if self.consumed:
            raise ContractError("tape already consumed by a backward pass")
        self.consumed = True
        if seed is None:
            if out.size != 1:
                raise ContractError("backward on a non-scalar output needs an explicit seed gradient")
            seed = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=np.float64).reshape(out.shape)}
        for node in reversed(self.nodes):
            key = id(node.output)
            g = grads.get(key) if keep_intermediate else grads.pop(key, None)
            if g is None:
                continue
            xs = [t.data for t in node.inputs]
            in_grads = node.op.backward(g, node.saved, *xs, **node.attrs)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                gi = _unbroadcast(np.asarray(gi, dtype=np.float64), t.shape)
                k = id(t)
                grads[k] = grads[k] + gi if k in grads else gi
        return grads

    def gradient(self, out: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``out`` w.r.t. ``wrt``; leaves' ``.grad`` is left alone."""
        grads = self._replay(out, seed)
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]

    def backward(self, out: Tensor, seed=None) -> None:
        """Replay in reverse and store ``.grad`` on every participating tensor."""
        grads = self._replay(out, seed, keep_intermediate=True)
        for node in self.nodes:
            for t in (*node.inputs, node.output):
                if t.requires_grad:
                    t.grad = grads.get(id(t), np.zeros_like(t.data))
        if out.requires_grad:
            out.grad = grads[id(out)]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

class Op:
    name = "op"

    def forward(self, *xs, **attrs):  # -> (out, saved)
        raise NotImplementedError

    def backward(self, g, saved, *xs, **attrs):
        raise NotImplementedError


REGISTRY: dict[str, Op] = {}


def register(cls):
    REGISTRY[cls.name] = cls()
    return cls


def apply(name: str, *inputs, **attrs) -> Tensor:
    op = REGISTRY[name]
    tensors = tuple(as_tensor(x) for x in inputs)
    out_data, saved = op.forward(*[t.data for t in tensors], **attrs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        tape.record(_Node(op, tensors, out, saved, attrs))
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


@register
class Add(Op):
    name = "add"

    def forward(self, a, b):
        _check_broadcast(a, b)
        return a + b, None

    def backward(self, g, saved, a, b):
        return g, g


@register
class Sub(Op):
    name = "sub"

    def forward(self, a, b):
        _check_broadcast(a, b)
        return a - b, None

    def backward(self, g, saved, a, b):
        return g, -g


@register
class Mul(Op):
    name = "mul"

    def forward(self, a, b):
        _check_broadcast(a, b)
        return a * b, None

    def backward(self, g, saved, a, b):
        return g * b, g * a


@register
class Div(Op):
    name = "div"

    def forward(self, a, b):
        _check_broadcast(a, b)
        if np.any(b == 0):
            raise ComputationError("division by exact zero")
        return a / b, None

    def backward(self, g, saved, a, b):
        return g / b, -g * a / (b * b)


@register
class Maximum(Op):
    """Elementwise max; ties send the gradient to the first argument."""

    name = "maximum"

    def forward(self, a, b):
        _check_broadcast(a, b)
        return np.maximum(a, b), None

    def backward(self, g, saved, a, b):
        first = a >= b
        return np.where(first, g, 0.0), np.where(first, 0.0, g)


@register
class Where(Op):
    name = "where"

    def forward(self, a, b, cond):
        return np.where(cond, a, b), None

    def backward(self, g, saved, a, b, cond):
        return np.where(cond, g, 0.0), np.where(cond, 0.0, g)


@register
class Neg(Op):
    name = "negate"

    def forward(self, a):
        return -a, None

    def backward(self, g, saved, a):
        return -g


@register
class Exp(Op):
    name = "exp"

    def forward(self, a):
        out = np.exp(a)
        return out, out

    def backward(self, g, out, a):
        return g * out


@register
class Log(Op):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise ComputationError("log of a non-positive value")
        return np.log(a), None

    def backward(self, g, saved, a):
        return g / a


@register
class Sqrt(Op):
    name = "sqrt"

    def forward(self, a):
        if np.any(a < 0):
            raise ComputationError("sqrt of a negative value")
        out = np.sqrt(a)
        return out, out

    def backward(self, g, out, a):
        if np.any(out == 0):
            raise ComputationError("sqrt gradient at zero")
        return g / (2.0 * out)


@register
class Square(Op):
    name = "square"

    def forward(self, a):
        return a * a, None

    def backward(self, g, saved, a):
        return 2.0 * a * g


@register
class LeakyRelu(Op):
    name = "leaky_relu"

    def forward(self, a, slope=DEFAULT_SLOPE):
        return np.where(a > 0, a, slope * a), None

    def backward(self, g, saved, a, slope=DEFAULT_SLOPE):
        return np.where(a > 0, g, slope * g)


@register
class Softplus(Op):
    name = "softplus"

    def forward(self, a):
        return np.logaddexp(0.0, a), None

    def backward(self, g, saved, a):
        # logistic(a), written to stay finite for large |a|
        return g * np.exp(-np.logaddexp(0.0, -a))


@register
class MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul needs operands with at least 2 dimensions")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"batch dimensions do not broadcast: {a.shape} @ {b.shape}") from None
        return a @ b, None

    def backward(self, g, saved, a, b):
        return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


@register
class Reduce(Op):
    name = "reduce"

    def forward(self, a, kind="sum", axis=None, keepdims=False):
        axes = _norm_axis(axis, a.ndim)
        if kind == "sum":
            return a.sum(axis=axes, keepdims=keepdims), None
        if kind == "mean":
            return a.mean(axis=axes, keepdims=keepdims), None
        if kind in ("max", "min"):
            if a.size == 0:
                raise ShapeError("max/min of an empty tensor")
            # move reduced axes to the end and flatten them so argmax picks the first occurrence
            keep = [] if axes is None else [i for i in range(a.ndim) if i not in axes]
            red = [i for i in range(a.ndim) if i not in keep]
            moved = np.transpose(a, keep + red).reshape([a.shape[i] for i in keep] + [-1])
            pick = np.argmax(moved, -1) if kind == "max" else np.argmin(moved, -1)
            out = np.take_along_axis(moved, pick[..., None], -1)[..., 0]
            if keepdims:
                out = out.reshape([1 if i in red else a.shape[i] for i in range(a.ndim)])
            return out, (keep, red, pick)
        raise ContractError(f"unknown reduction {kind!r}")

    def backward(self, g, saved, a, kind="sum", axis=None, keepdims=False):
        axes = _norm_axis(axis, a.ndim)
        full_axes = tuple(range(a.ndim)) if axes is None else axes
        if not keepdims:
            g = np.expand_dims(g, full_axes) if full_axes else g
        if kind == "sum":
            return np.broadcast_to(g, a.shape).copy()
        if kind == "mean":
            count = int(np.prod([a.shape[i] for i in full_axes])) if full_axes else 1
            return np.broadcast_to(g, a.shape) / count
        keep, red, pick = saved
        gm = np.transpose(np.broadcast_to(g, a.shape), keep + red).reshape(pick.shape + (-1,))
        mask = np.zeros(gm.shape)
        np.put_along_axis(mask, pick[..., None], 1.0, -1)
        gm = gm * mask
        perm_shape = [a.shape[i] for i in keep + red]
        return np.transpose(gm.reshape(perm_shape), np.argsort(keep + red))


@register
class Reshape(Op):
    name = "reshape"

    def forward(self, a, shape=()):
        try:
            return a.reshape(shape), None
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None

    def backward(self, g, saved, a, shape=()):
        return g.reshape(a.shape)


@register
class Transpose(Op):
    name = "transpose"

    def forward(self, a, axes=None):
        return np.transpose(a, axes), None

    def backward(self, g, saved, a, axes=None):
        if axes is None:
            return np.transpose(g)
        return np.transpose(g, np.argsort(axes))


@register
class GetItem(Op):
    name = "getitem"

    def forward(self, a, key=None):
        return a[key], None

    def backward(self, g, saved, a, key=None):
        out = np.zeros_like(a)
        np.add.at(out, key, g)
        return out


class _Concat(Op):
    name = "concat"

    def forward(self, *xs, axis=0):
        try:
            return np.concatenate(xs, axis=axis), None
        except ValueError as e:
            raise ShapeError(str(e)) from None

    def backward(self, g, saved, *xs, axis=0):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))


REGISTRY["concat"] = _Concat()


def _index_add(n: int, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` into an ``n``-row buffer at positions ``idx``."""
    idx = idx.reshape(-1)
    m = idx.size
    flat = values.reshape(m, -1)
    acc = sp.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n, m)) @ flat
    return np.asarray(acc)


@register
class GatherRows(Op):
    name = "gather_rows"

    def forward(self, a, idx=None):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise IndexError(f"gather index out of range [0, {a.shape[0]})")
        return a[idx], None

    def backward(self, g, saved, a, idx=None):
        idx = np.asarray(idx)
        return _index_add(a.shape[0], idx, g).reshape(a.shape)


@register
class ScatterAdd(Op):
    name = "scatter_add"

    def forward(self, a, idx=None, n=0):
        idx = np.asarray(idx)
        if idx.shape != a.shape[: idx.ndim]:
            raise ShapeError("scatter index shape must prefix the source shape")
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"scatter index out of range [0, {n})")
        tail = a.shape[idx.ndim :]
        return _index_add(n, idx, a).reshape((n,) + tail), None

    def backward(self, g, saved, a, idx=None, n=0):
        return g[np.asarray(idx)]


class SparsePattern:
    """Fixed COO structure (rows, cols) of an n×n matrix, pre-sorted to CSR."""

    def __init__(self, rows, cols, n: int):
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.n = int(n)
        self.order = np.lexsort((self.cols, self.rows))
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(self.rows, minlength=n))])
        self.indices = self.cols[self.order]
        self.sorted_rows = self.rows[self.order]

    @property
    def nnz(self) -> int:
        return self.rows.size

    def matrix(self, vals: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((vals[self.order], self.indices, self.indptr), shape=(self.n, self.n))


@register
class SparseApply(Op):
    """``diag * Z + M @ Z`` with M given by ``pattern`` and differentiable ``vals``."""

    name = "sparse_apply"

    def forward(self, diag, vals, z, pattern=None):
        m = pattern.matrix(vals)
        d = diag.reshape((-1,) + (1,) * (z.ndim - 1))
        return d * z + m @ z, m

    def backward(self, g, m, diag, vals, z, pattern=None):
        d = diag.reshape((-1,) + (1,) * (z.ndim - 1))
        gz = d * g + m.T @ g
        gdiag = (g * z).reshape(z.shape[0], -1).sum(1)
        g2 = g.reshape(g.shape[0], -1)
        z2 = z.reshape(z.shape[0], -1)
        # row-major traversal is far more cache friendly than the input edge order
        gvals = np.empty(pattern.nnz)
        gvals[pattern.order] = np.einsum("ij,ij->i", g2[pattern.sorted_rows], z2[pattern.indices])
        return gdiag, gvals, gz


@register
class SparseHorner(Op):
    """``sum_m coef_m (I - A)^(K-m) A^m Z`` with ``A = diag + M`` on ``pattern``.

    One fused node for the whole recursion ``S <- (I - A) S + coef_m A^m Z``;
    edge gradients from all 2K products are collected in one row-dot pass.
    """

    name = "sparse_horner"

    def forward(self, diag, vals, coef, z, pattern=None):
        m = pattern.matrix(vals)
        d = diag.reshape((-1,) + (1,) * (z.ndim - 1))
        acc = coef[0] * z
        powers, accs = [z], []
        for i in range(1, coef.shape[0]):
            p = d * powers[-1] + m @ powers[-1]
            accs.append(acc)
            acc = (1.0 - d) * acc - m @ acc + coef[i] * p
            powers.append(p)
        return acc, (m, powers, accs)

    def backward(self, g, saved, diag, vals, coef, z, pattern=None):
        m, powers, accs = saved
        d = diag.reshape((-1,) + (1,) * (z.ndim - 1))
        mt = m.T
        K = coef.shape[0] - 1
        gcoef = np.empty_like(coef)
        left, right = [], []
        ga = g
        gp = None
        for i in range(K, 0, -1):
            gcoef[i] = np.sum(ga * powers[i])
            gp_i = coef[i] * ga if gp is None else coef[i] * ga + d * gp + mt @ gp
            if gp is not None:
                left.append(gp)
                right.append(powers[i])
            # through acc_i = (I - A) acc_{i-1}
            left.append(ga)
            right.append(-accs[i - 1])
            ga = (1.0 - d) * ga - mt @ ga
            gp = gp_i
        gcoef[0] = np.sum(ga * z)
        gz = coef[0] * ga
        if gp is not None:
            gz = gz + d * gp + mt @ gp
            left.append(gp)
            right.append(z)
        if not left:
            return np.zeros_like(diag), np.zeros_like(vals), gcoef, gz
        n = z.shape[0]
        lcat = np.concatenate([a.reshape(n, -1) for a in left], axis=1)
        rcat = np.concatenate([b.reshape(n, -1) for b in right], axis=1)
        gdiag = np.einsum("ij,ij->i", lcat, rcat)
        gvals = np.empty(pattern.nnz)
        gvals[pattern.order] = np.einsum("ij,ij->i", lcat[pattern.sorted_rows], rcat[pattern.indices])
        return gdiag, gvals, gcoef, gz


# ---------------------------------------------------------------------------
# functional surface
# ---------------------------------------------------------------------------

def add(a, b):
    return apply("add", a, b)


def sub(a, b):
    return apply("sub", a, b)


def mul(a, b):
    return apply("mul", a, b)


def div(a, b):
    return apply("div", a, b)


def maximum(a, b):
    return apply("maximum", a, b)


def where(cond, a, b):
    return apply("where", a, b, cond=np.asarray(cond, dtype=bool))


def neg(a):
    return apply("negate", a)


def exp(a):
    return apply("exp", a)


def log(a):
    return apply("log", a)


def sqrt(a):
    return apply("sqrt", a)


def square(a):
    return apply("square", a)


def leaky_relu(a, slope: float = DEFAULT_SLOPE):
    return apply("leaky_relu", a, slope=slope)


def softplus(a):
    return apply("softplus", a)


def matmul(a, b):
    return apply("matmul", a, b)


def reduce(kind: str, a, axis=None, keepdims: bool = False):
    if kind not in ("sum", "mean", "max", "min"):
        raise ContractError(f"unknown reduction {kind!r}")
    return apply("reduce", a, kind=kind, axis=axis, keepdims=keepdims)


def reshape(a, shape):
    return apply("reshape", a, shape=tuple(shape))


def transpose(a, axes=None):
    return apply("transpose", a, axes=None if axes is None else tuple(axes))


def getitem(a, key):
    return apply("getitem", a, key=key)


def concat(xs: Sequence, axis: int = 0):
    return apply("concat", *xs, axis=axis)


def gather_rows(a, idx):
    return apply("gather_rows", a, idx=np.asarray(idx, dtype=np.int64))


def scatter_add(a, idx, n: int):
    return apply("scatter_add", a, idx=np.asarray(idx, dtype=np.int64), n=int(n))


def sparse_horner(diag, vals, coef, z, pattern: SparsePattern):
    return apply("sparse_horner", diag, vals, coef, z, pattern=pattern)


def sparse_apply(diag, vals, z, pattern: SparsePattern):
    return apply("sparse_apply", diag, vals, z, pattern=pattern)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "sqrt": sqrt, "square": square, "negate": neg,
    "leaky-relu": leaky_relu,
}


def elementwise(kind: str, a, b=None, slope: float = DEFAULT_SLOPE):
    """Dispatch by op-kind name, e.g. ``elementwise("leaky-relu", x, slope=0.2)``."""
    if kind not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    if kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ContractError(f"{kind} is binary")
        return _ELEMENTWISE[kind](a, b)
    if kind == "leaky-relu":
        return leaky_relu(a, slope)
    return _ELEMENTWISE[kind](a)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    rel_error: list[np.ndarray]
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max((float(e.max()) if e.size else 0.0) for e in self.rel_error)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f: Callable, x, eps: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``x`` is a tensor or a sequence of tensors; ``f`` takes no arguments when a
    sequence is given and reads the tensors itself, otherwise ``f(x)``.  The
    per-coordinate error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    call = (lambda: f(x)) if single else f
    flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
    try:
        with Tape() as tape:
            out = call()
        if out.size != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        analytic = tape.gradient(out, xs)
        numeric = []
        for t in xs:
            num = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            nflat = num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(call().data)
                flat[i] = orig - eps
                fm = float(call().data)
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * eps)
            numeric.append(num)
    finally:
        for t, fl in zip(xs, flags):
            t.requires_grad = fl
    rel = [np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor) for a, n in zip(analytic, numeric)]
    return GradCheckReport(analytic, numeric, rel, tol)
