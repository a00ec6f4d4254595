"""
Dense tensors with reverse-mode automatic differentiation

This module supplies every numerical primitive the rest of the project uses.
Tensors wrap read-only float64 numpy arrays. Operations executed inside an
active ``Graph`` are recorded on a tape (define-by-run), so any intermediate
value, attention maps included, can become part of a loss.

Typical use::

    with Graph() as graph:
        loss = sum_(mul(x, x))
    grads = backward(graph, loss, [x])
"""

import contextlib
import contextvars
import logging
import zlib
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, MutableMapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_CHECKED = True


def set_checked(flag: bool) -> None:
    """Turn the finite-value check at tensor construction on or off"""
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


class Tensor:
    """Dense float64 array that may take part in a differentiation graph.

    The data buffer is read-only. The only mutable state is ``grad``, which
    ``backward`` accumulates into for tensors with ``requires_grad`` set.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        self._init(arr, requires_grad, name)

    def _init(self, arr: np.ndarray, requires_grad: bool, name: Optional[str]):
        if any(extent <= 0 for extent in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        if _CHECKED and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''} of shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        out._init(np.asarray(arr, dtype=np.float64), requires_grad, None)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Writable copy of the data"""
        return np.array(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    """One executed primitive on the tape"""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


_ACTIVE: contextvars.ContextVar = contextvars.ContextVar("active_graph", default=None)


class Graph:
    """Tape of primitive operations, confined to one execution context.

    Entering the graph makes it the recording target for the current context;
    distinct graphs can run in parallel threads without sharing state.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Graph":
        self._tokens.append(_ACTIVE.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
        return backward(self, loss, params)


def active_graph() -> Optional[Graph]:
    return _ACTIVE.get()


@contextlib.contextmanager
def no_grad():
    """Run the enclosed code without recording anything"""
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, out: np.ndarray, inputs: Tuple[Tensor, ...], vjp) -> Tensor:
    graph = _ACTIVE.get()
    tracked = graph is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=tracked)
    if tracked:
        graph.record(Node(op, inputs, result, vjp))
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(graph: Graph, loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns the gradients computed by this call keyed by tensor. Tensors listed
    in ``params`` always receive an entry, zero when loss does not reach them.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    produced = {id(node.output) for node in graph.nodes}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: Dict[int, Tensor] = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss

    for node in reversed(graph.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        for inp, g in zip(node.inputs, node.vjp(upstream)):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise ShapeError(f"{node.op}: gradient shape {g.shape} does not match input {inp.shape}")
            key = id(inp)
            grads[key] = grads[key] + g if key in grads else g
            if key not in produced:
                leaves[key] = inp

    result: Dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    for p in params or ():
        if p not in result:
            result[p] = np.zeros(p.shape)
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros(p.shape)
    return result


# Elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _broadcast_op(np.add, a, b)
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _broadcast_op(np.subtract, a, b)
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _broadcast_op(np.multiply, a, b)
    return _emit("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def _broadcast_op(fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit("scale", x.data * factor, (x,), lambda g: (g * factor,))


# Linear algebra and shape manipulation

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes"""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul extents do not match: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents do not broadcast: {a.shape} x {b.shape}") from exc

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _emit("matmul", out, (a, b), vjp)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concatenate", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along one axis (numpy ``take`` semantics)"""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    if idx.size and (idx.min() < -x.shape[axis] or idx.max() >= x.shape[axis]):
        raise ShapeError(f"index out of range for axis {axis} of extent {x.shape[axis]}")
    out = np.take(x.data, idx, axis=axis)

    def vjp(g):
        lead = list(range(axis, axis + idx.ndim))
        g_moved = np.moveaxis(g, lead, list(range(idx.ndim)))
        gx = np.zeros((x.shape[axis],) + x.shape[:axis] + x.shape[axis + 1:])
        np.add.at(gx, idx, g_moved)
        return (np.moveaxis(gx, 0, axis),)

    return _emit("take", out, (x,), vjp)


def gather(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` indexed by ``ids``"""
    return take(table, ids, axis=0)


# Reductions

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# Nonlinearities and normalization

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _emit("softmax", y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    v = x.data
    th = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    out = 0.5 * v * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th ** 2) * du),)

    return _emit("gelu", out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply gain and bias"""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm parameters must have shape ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * rstd
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return _emit("layer_norm", out, (x, gamma, beta), vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight (+ bias)`` with weight stored as (in, out)"""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# Random numbers

def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Counter-based generator for one named consumer of a seed.

    Streams with different names never share draws, so adding a consumer does
    not shift the numbers any other consumer sees.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(key))


def randn(shape: Sequence[int], rng: np.random.Generator) -> Tensor:
    """Standard normal draws from a seeded generator"""
    return Tensor._wrap(rng.standard_normal(tuple(shape)))


# Gradient checking

def gradcheck(f: Callable[[Tensor], Tensor], point: ArrayLike, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)"""
    base = np.array(_as_tensor(point).data)
    x = Tensor(base, requires_grad=True)
    with Graph() as graph:
        y = f(x)
    analytic = backward(graph, y, [x])[x]

    numeric = np.zeros(base.size)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            probe = flat.copy()
            probe[i] += h
            plus = f(Tensor(probe.reshape(base.shape))).item()
            probe[i] -= 2 * h
            minus = f(Tensor(probe.reshape(base.shape))).item()
            numeric[i] = (plus - minus) / (2 * h)

    a = analytic.reshape(-1)
    err = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(err.max()) if err.size else 0.0


# Optimizers

class SGD:
    """Plain gradient descent with a fixed learning rate"""

    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)

    def step(self, params: MutableMapping[str, Tensor], names: Iterable[str]) -> None:
        for name in names:
            p = params[name]
            if p.grad is None:
                continue
            params[name] = Tensor._wrap(p.data - self.lr * p.grad, requires_grad=p.requires_grad)
            params[name].name = name


class Adam:
    """Adam with bias correction; moment state is kept per parameter name"""

    def __init__(self, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: MutableMapping[str, Tensor], names: Iterable[str]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for name in names:
            p = params[name]
            if p.grad is None:
                continue
            m = b1 * self.m.get(name, 0.0) + (1 - b1) * p.grad
            v = b2 * self.v.get(name, 0.0) + (1 - b2) * p.grad ** 2
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            params[name] = Tensor._wrap(p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps),
                                        requires_grad=p.requires_grad)
            params[name].name = name
