"""
Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation is registered in OPS. Calling an op computes
its forward value immediately and, when any input is gradient-tracked,
records a Node holding the inputs and a backward rule that maps the output
gradient to one gradient per input. backward() walks the record in reverse
topological order.

All values are float64.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NotScalarLoss, ShapeMismatch

logger = logging.getLogger(__name__)

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

# Below this |z|, (exp(z) - 1) / z is taken as its limit 1.
EXPM1_RATIO_SERIES = 1e-8
# Below this |z|, the derivative of (exp(z) - 1) / z uses its Taylor series.
EXPM1_RATIO_GRAD_SERIES = 1e-3

OPS: Dict[str, Callable[..., "Tensor"]] = {}

_grad_enabled = True


def register_op(name: str):
    def wrap(fn):
        OPS[name] = fn
        return fn
    return wrap


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording; used for validation and inference"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Node:
    """Computation record entry"""

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward: Backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward

    def __repr__(self) -> str:
        return f"Node({self.op})"


class Tensor:
    """Dense float64 array with an optional gradient and computation node"""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def item(self) -> float:
        return float(self.values.item())

    def __repr__(self) -> str:
        label = self.name or (self.node.op if self.node else "leaf")
        return f"Tensor({label}, shape={self.shape})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return reduce_mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def swapaxes(self, axis1: int, axis2: int): return swapaxes(self, axis1, axis2)
    def exp(self): return exp(self)
    def sqrt(self): return sqrt(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record(op_name: str, inputs: Sequence[Tensor], values: np.ndarray, backward: Backward) -> Tensor:
    """Wrap a forward value; attach a Node when an input is tracked"""
    out = Tensor(values)
    if _grad_enabled and any(t.tracked for t in inputs):
        out.node = Node(op_name, tuple(inputs), backward)
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to shape"""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


# Elementwise binary ops

@register_op("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return record("add", (a, b), a.values + b.values,
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


@register_op("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return record("sub", (a, b), a.values - b.values,
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


@register_op("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return record("mul", (a, b), a.values * b.values,
                  lambda g: (unbroadcast(g * b.values, a.shape), unbroadcast(g * a.values, b.shape)))


@register_op("div")
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.values / b.values

    def backward(g):
        return (unbroadcast(g / b.values, a.shape),
                unbroadcast(-g * out / b.values, b.shape))

    return record("div", (a, b), out, backward)


@register_op("matmul")
def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch shapes {a.shape[:-2]} and {b.shape[:-2]} do not broadcast")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return record("matmul", (a, b), np.matmul(a.values, b.values), backward)


# Elementwise unary ops

@register_op("exp")
def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return record("exp", (x,), out, lambda g: (g * out,))


@register_op("sqrt")
def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.values)

    def backward(g):
        # Subgradient 0 at the origin keeps a perfect fit finite.
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return record("sqrt", (x,), out, backward)


@register_op("softplus")
def softplus(x) -> Tensor:
    x = as_tensor(x)
    return record("softplus", (x,), np.logaddexp(0.0, x.values),
                  lambda g: (g * _sigmoid(x.values),))


@register_op("silu")
def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.values)
    return record("silu", (x,), x.values * s,
                  lambda g: (g * s * (1.0 + x.values * (1.0 - s)),))


def expm1_ratio_values(v: np.ndarray) -> np.ndarray:
    small = np.abs(v) < EXPM1_RATIO_SERIES
    safe = np.where(small, 1.0, v)
    return np.where(small, 1.0, np.expm1(safe) / safe)


def expm1_ratio_grad(v: np.ndarray) -> np.ndarray:
    tiny = np.abs(v) < EXPM1_RATIO_GRAD_SERIES
    w = np.where(tiny, 1.0, v)
    series = 0.5 + v / 3.0 + v * v / 8.0 + v ** 3 / 30.0
    exact = (w * np.exp(w) - np.expm1(w)) / (w * w)
    return np.where(tiny, series, exact)


@register_op("expm1_ratio")
def expm1_ratio(z) -> Tensor:
    """(exp(z) - 1) / z with the removable singularity at 0 filled by 1"""
    z = as_tensor(z)
    return record("expm1_ratio", (z,), expm1_ratio_values(z.values),
                  lambda g: (g * expm1_ratio_grad(z.values),))


# Normalization

@register_op("layer_norm")
def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift"""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeMismatch(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} for input {x.shape}")
    centered = x.values - x.values.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gxhat = g * gamma.values
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return record("layer_norm", (x, gamma, beta), xhat * gamma.values + beta.values, backward)


# Shape ops

@register_op("getitem")
def getitem(x, index) -> Tensor:
    """Basic (slice/int/Ellipsis/None) indexing"""
    x = as_tensor(x)
    try:
        out = x.values[index]
    except IndexError as e:
        raise ShapeMismatch(f"getitem: {e}")

    def backward(g):
        gx = np.zeros_like(x.values)
        gx[index] += g
        return (gx,)

    return record("getitem", (x,), out, backward)


@register_op("concat")
def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {e}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", tuple(tensors), out, lambda g: tuple(np.split(g, splits, axis=axis)))


@register_op("reshape")
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(f"reshape: {e}")
    return record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


@register_op("swapaxes")
def swapaxes(x, axis1: int, axis2: int) -> Tensor:
    x = as_tensor(x)
    return record("swapaxes", (x,), np.swapaxes(x.values, axis1, axis2),
                  lambda g: (np.swapaxes(g, axis1, axis2),))


# Reductions

def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


@register_op("sum")
def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return record("sum", (x,), x.values.sum(axis=axis, keepdims=keepdims),
                  lambda g: (_expand_reduced(g, x.shape, axis, keepdims),))


@register_op("mean")
def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.values.mean(axis=axis, keepdims=keepdims)
    count = x.size / max(out.size, 1)
    return record("mean", (x,), out,
                  lambda g: (_expand_reduced(g / count, x.shape, axis, keepdims),))


# Recurrence

@register_op("scan")
def scan(a_bar, bu, c) -> Tensor:
    """
    Diagonal linear recurrence with a per-step readout.

    Args:
        a_bar: (..., L, D, N) state decay per step
        bu: (..., L, D, N) input injection per step
        c: (..., L, N) readout vector per step

    Returns:
        y: (..., L, D) with x_k = a_bar_k * x_{k-1} + bu_k, x_0 = 0,
        y_k = sum_n c_k[n] * x_k[:, n]
    """
    a_bar, bu, c = as_tensor(a_bar), as_tensor(bu), as_tensor(c)
    A, U, C = a_bar.values, bu.values, c.values
    if A.ndim < 3 or A.shape != U.shape:
        raise ShapeMismatch(f"scan: a_bar {A.shape} and bu {U.shape} must match with rank >= 3")
    lead, length, (channels, states) = A.shape[:-3], A.shape[-3], A.shape[-2:]
    if C.shape != lead + (length, states):
        raise ShapeMismatch(f"scan: readout {C.shape} does not fit states {A.shape}")

    xs = np.empty_like(A)
    y = np.empty(lead + (length, channels))
    x = np.zeros(lead + (channels, states))
    for k in range(length):
        x = A[..., k, :, :] * x + U[..., k, :, :]
        xs[..., k, :, :] = x
        y[..., k, :] = np.sum(x * C[..., k, None, :], axis=-1)

    def backward(g):
        gA = np.empty_like(A)
        gU = np.empty_like(U)
        gC = np.empty_like(C)
        gx = np.zeros(lead + (channels, states))
        for k in reversed(range(length)):
            gk = g[..., k, :, None]
            gC[..., k, :] = np.sum(gk * xs[..., k, :, :], axis=-2)
            gx = gx + gk * C[..., k, None, :]
            gU[..., k, :, :] = gx
            gA[..., k, :, :] = gx * xs[..., k - 1, :, :] if k > 0 else 0.0
            gx = gx * A[..., k, :, :]
        return gA, gU, gC

    return record("scan", (a_bar, bu, c), y, backward)


# Backward pass

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.tracked and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, store: Optional["ParamStore"] = None) -> None:
    """
    Propagate d(loss)/d(leaf) into every tracked leaf's grad.

    With a store, its parameter grads are reset to zero first, so reachable
    parameters end with exactly their gradient and unreachable ones with zeros.
    """
    if loss.size != 1:
        raise NotScalarLoss(f"loss must be scalar-shaped, got {loss.shape}")
    if store is not None:
        store.zero_grad()
    if not loss.tracked:
        return

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for t in reversed(_topological_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                t.grad = np.array(g) if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward(g)):
            if pg is None or not parent.tracked:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


class ParamStore:
    """Named parameters, iterated in sorted path order"""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, path: str, values) -> Tensor:
        if path in self._params:
            raise KeyError(f"duplicate parameter path: {path}")
        tensor = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=path)
        self._params[path] = tensor
        return tensor

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.paths())

    def paths(self) -> List[str]:
        return sorted(self._params)

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(path, self._params[path]) for path in self.paths()]

    def values(self) -> List[Tensor]:
        return [self._params[path] for path in self.paths()]

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = np.zeros_like(tensor.values)

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {path: t.shape for path, t in self.items()}

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {path: t.values.copy() for path, t in self.items()}

    def load(self, snapshot: Dict[str, np.ndarray]) -> None:
        if set(snapshot) != set(self._params):
            missing = sorted(set(self._params) - set(snapshot))
            unexpected = sorted(set(snapshot) - set(self._params))
            raise ShapeMismatch(f"parameter paths differ: missing {missing}, unexpected {unexpected}")
        for path, values in snapshot.items():
            if np.shape(values) != self._params[path].shape:
                raise ShapeMismatch(
                    f"parameter {path}: shape {np.shape(values)} != {self._params[path].shape}"
                )
        for path, values in snapshot.items():
            self._params[path].values = np.array(values, dtype=np.float64)


# Gradient checking

@dataclass
class GradCheckResult:
    ok: bool
    max_abs_error: float
    max_rel_error: float
    worst: str


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
                    rtol: float = 1e-4, atol: float = 1e-6) -> GradCheckResult:
    """
    Compare analytic gradients with central finite differences.

    Args:
        fn: maps the inputs to a scalar Tensor
        inputs: tensors with requires_grad=True; perturbed in place and restored
        step: finite-difference step
        rtol, atol: an element passes when |analytic - numeric| is within
            max(atol, rtol * max(|analytic|, |numeric|))

    Returns:
        GradCheckResult with the worst element found
    """
    for t in inputs:
        t.grad = None
    backward(fn(*inputs))
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in inputs]

    ok, worst = True, ""
    max_abs = max_rel = 0.0
    with no_grad():
        for i, t in enumerate(inputs):
            for idx in np.ndindex(*t.shape):
                original = t.values[idx]
                t.values[idx] = original + step
                plus = fn(*inputs).item()
                t.values[idx] = original - step
                minus = fn(*inputs).item()
                t.values[idx] = original
                numeric = (plus - minus) / (2.0 * step)
                a = analytic[i][idx]
                err = abs(a - numeric)
                rel = err / max(abs(a), abs(numeric), 1e-300)
                if err > max(atol, rtol * max(abs(a), abs(numeric))):
                    ok = False
                if err > max_abs:
                    max_abs, worst = err, f"input {i}{list(idx)}: analytic {a}, numeric {numeric}"
                if err > atol:
                    max_rel = max(max_rel, rel)
    return GradCheckResult(ok=ok, max_abs_error=max_abs, max_rel_error=max_rel, worst=worst)
