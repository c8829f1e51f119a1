"""Define-by-run reverse-mode differentiation over numpy arrays.

Every primitive builds a new :class:`Tensor` node that remembers its parents
and a closure mapping the output gradient to one gradient per parent.  The
graph is rebuilt on every forward pass, so instance-dependent computations
(image-weighted prompts) need no special handling.

Only leaves that are trainable :class:`Parameter` objects ever receive a
``.grad``; frozen weights are plain leaves and gradient flow stops there.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ContractViolation(ValueError):
    """Raised when inputs break an operation's preconditions (shapes, ranges)."""


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN/Inf or hits an undefined point."""


class NonDeterministicError(RuntimeError):
    pass


# op name -> multiplier applied to that op's backward output (test hook only)
_backward_faults: contextvars.ContextVar[dict[str, float]] = contextvars.ContextVar(
    "dpc_backward_faults", default={}
)


@contextlib.contextmanager
def inject_backward_fault(op: str, factor: float = 1.5):
    """Scale the gradients produced by ``op``'s backward rule by ``factor``.

    Used to prove that the gradient checker catches a broken rule.
    """
    faults = dict(_backward_faults.get())
    faults[op] = factor
    token = _backward_faults.set(faults)
    try:
        yield
    finally:
        _backward_faults.reset(token)


class Tensor:
    def __init__(self, data, parents: tuple["Tensor", ...] = (), op: str = "",
                 backward_fn: Callable | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.op = op
        self.requires_grad = any(p.requires_grad for p in parents)
        # Nodes that cannot reach a trainable leaf keep no history.
        self._parents = parents if self.requires_grad else ()
        self._backward = backward_fn if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", op={self.op!r}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def backward(self, parameters: Iterable["Parameter"] | None = None) -> None:
        backward(self, parameters)


class Parameter(Tensor):
    """A leaf tensor.  Only ``trainable`` parameters ever hold a gradient."""

    def __init__(self, data, trainable: bool = True, name: str = "", dtype=None):
        super().__init__(data, dtype=dtype)
        self.trainable = trainable
        self.requires_grad = trainable
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values (shape {data.shape})")
    return Tensor(data, parents, op, backward_fn, dtype=data.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), "mul",
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise NumericError(f"div: zero in denominator (shape {b.shape})")
    out = a.data / b.data

    def backward_fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), "div", backward_fn)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), "scale", lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), "exp", lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(x.data)

    def backward_fn(g):
        if np.any(out == 0):
            raise NumericError("sqrt: gradient undefined at 0")
        return (g / (2 * out),)

    return _result(out, (x,), "sqrt", backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu", lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (v + k * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1 + t)

    def backward_fn(g):
        d_inner = c * (1 + 3 * k * v ** 2)
        return (g * (0.5 * (1 + t) + 0.5 * v * (1 - t ** 2) * d_inner),)

    return _result(out.astype(x.dtype, copy=False), (x,), "gelu", backward_fn)


# ---------------------------------------------------------------------------
# shape and reduction


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ContractViolation(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), "sum", backward_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {x.shape} as {shape}") from None
    return _result(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[:-2] + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), "transpose",
                   lambda g: (np.transpose(g, inverse),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ContractViolation(f"broadcast_to: {x.shape} -> {shape} impossible") from None
    return _result(out, (x,), "broadcast_to", lambda g: (_unbroadcast(g, x.shape),))


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.asarray(out), (x,), "index", backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat of an empty list")
    ndim = tensors[0].ndim
    ax = _norm_axis(axis, ndim)[0]
    for t in tensors:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ContractViolation(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tuple(tensors), "concat", backward_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def gather(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ContractViolation(f"gather: table must be rank 2, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation(f"gather: ids outside [0, {table.shape[0]})")
    out = table.data[ids]

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(out, (table,), "gather", backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and normalisers


def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise ContractViolation(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1,) + a.shape), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, b.shape + (1,))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ContractViolation(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), "matmul", backward_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _result(out, (x,), "softmax", backward_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=ax, keepdims=True),)

    return _result(out, (x,), "log_softmax", backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ContractViolation(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} vs width {width}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centred * inv
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, width).sum(axis=0)
        dbias = g.reshape(-1, width).sum(axis=0)
        return dx, dgain, dbias

    return _result(out.astype(x.dtype, copy=False), (x, gain, bias), "layer_norm", backward_fn)


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)[0]
    out = np.sqrt((x.data ** 2).sum(axis=ax, keepdims=True))

    def backward_fn(g):
        if np.any(out == 0):
            raise NumericError("l2_norm: gradient undefined at a zero vector")
        gk = g if keepdims else np.expand_dims(g, ax)
        return (gk * x.data / out,)

    data = out if keepdims else np.squeeze(out, axis=ax)
    return _result(np.asarray(data, dtype=x.dtype), (x,), "l2_norm", backward_fn)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """``a.b / (|a||b|)`` along ``axis`` with numpy broadcasting.

    A zero-norm operand is an error: the similarity is undefined there.
    """
    a, b = _coerce_pair(a, b)
    if a.shape[axis] != b.shape[axis]:
        raise ContractViolation(f"cosine_similarity: dimensions {a.shape} vs {b.shape}")
    _broadcast_shape("cosine_similarity", a, b)
    na = l2_norm(a, axis)
    nb = l2_norm(b, axis)
    if np.any(na.data == 0) or np.any(nb.data == 0):
        raise NumericError("cosine_similarity: zero-norm input, similarity undefined")
    return div(sum(mul(a, b), axis), mul(na, nb))


# ---------------------------------------------------------------------------
# reverse pass


def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, in forward order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor, parameters: Iterable[Parameter] | None = None) -> None:
    """Propagate d(loss)/d(leaf) into every reachable trainable parameter.

    ``parameters`` that the loss does not reach get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    faults = _backward_faults.get()
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(build_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            if node.trainable:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        factor = faults.get(node.op)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if factor is not None:
                pg = pg * parent.dtype.type(factor)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for p in parameters or ():
        if p.trainable and p.grad is None:
            p.grad = np.zeros_like(p.data)


def zero_grad(parameters: Iterable[Parameter]) -> None:
    for p in parameters:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class ParameterCheck:
    name: str
    indices: list[tuple[int, ...]]
    analytic: list[float]
    numeric: list[float]
    max_rel_error: float

    @property
    def norm_rel_error(self) -> float:
        """``|a - n| / max(|a|, |n|)`` for the checked coordinates as one vector.

        Unlike the per-coordinate maximum this stays meaningful when some
        true partial derivatives are exactly zero.
        """
        a, n = np.asarray(self.analytic), np.asarray(self.numeric)
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        return float(np.linalg.norm(a - n) / scale) if scale else 0.0


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    checks: list[ParameterCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    @property
    def n_coordinates(self) -> int:
        return int(np.sum([len(c.indices) for c in self.checks]))

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def format(self) -> str:
        lines = [f"grad_check step={self.step!r} tolerance={self.tolerance!r}"]
        for c in self.checks:
            lines.append(f"  {c.name}: {len(c.indices)} coords, max_rel_error={c.max_rel_error:.3e}")
        lines.append(f"result={'PASS' if self.passed else 'FAIL'} max_rel_error={self.max_rel_error:.3e}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = 1e-10) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(fn: Callable[[], Tensor], parameters: Sequence[Parameter], h: float = 1e-4,
               tolerance: float = 1e-4, max_coords: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare backward() against central differences ``(f(x+h) - f(x-h)) / 2h``.

    With ``max_coords`` set, a seeded random subset of each parameter's
    coordinates is checked; the report records exactly which ones.
    """
    if h <= 0:
        raise ContractViolation(f"grad_check: step h must be positive, got {h}")
    first = fn()
    second = fn()
    if first.data.size != 1:
        raise ContractViolation(f"grad_check: function must return a scalar, got {first.shape}")
    if first.data.tobytes() != second.data.tobytes():
        raise NonDeterministicError(
            f"grad_check aborted: two forward passes disagree ({first.item()!r} vs {second.item()!r})")

    zero_grad(parameters)
    backward(fn(), parameters)
    analytic = {id(p): p.grad.copy() for p in parameters}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance, step=h)
    for k, p in enumerate(parameters):
        all_idx = list(np.ndindex(p.shape))
        if max_coords is not None and max_coords < len(all_idx):
            pick = np.sort(rng.choice(len(all_idx), size=max_coords, replace=False))
            all_idx = [all_idx[i] for i in pick]
        a_vals, n_vals, worst = [], [], 0.0
        for idx in all_idx:
            original = p.data[idx].copy()
            p.data[idx] = original + h
            f_plus = fn().item()
            p.data[idx] = original - h
            f_minus = fn().item()
            p.data[idx] = original
            num = (f_plus - f_minus) / (2 * h)
            ana = float(analytic[id(p)][idx])
            a_vals.append(ana)
            n_vals.append(num)
            worst = max(worst, relative_error(ana, num))
        report.checks.append(ParameterCheck(p.name or f"param{k}", all_idx, a_vals, n_vals, worst))
    zero_grad(parameters)
    return report
