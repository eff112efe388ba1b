"""Minimal reverse-mode autodiff over numpy arrays.

Every learnable quantity in the package flows through :class:`Value`.  Graphs
are define-by-run: each forward pass builds a fresh graph and ``backprop``
walks it once in reverse topological order.

Arrays may carry leading batch dimensions; "rows" always means axis ``-2`` and
"features" axis ``-1``.
"""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy import sparse


class ShapeMismatch(ValueError):
    pass


class UnknownOp(KeyError):
    pass


class NonScalarLoss(ValueError):
    pass


class MissingGradient(RuntimeError):
    pass


# float64 for oracles/tests, float32 for training; global, never per tensor
_DTYPE = np.float64


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the global compute dtype."""
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


class Value:
    """A node in the compute graph: data buffer, lazily allocated grad."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Value(shape={self.shape}, op={self.op!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Value":
        """Leaf copy sharing the buffer; gradients stop here."""
        v = Value.__new__(Value)
        v.data, v.grad, v.requires_grad, v.op = self.data, None, False, "detach"
        v._parents, v._backward = (), None
        return v

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        """Add ``g`` into ``grad``; ``owned`` buffers are adopted without a copy."""
        if self.grad is None:
            if owned and g.dtype == self.data.dtype and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(np.broadcast_to(g, self.data.shape),
                                     dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # operator sugar, all routed through the primitive table
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def backprop(self) -> None:
        backprop(self)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _node(data, op, parents, backward) -> Value:
    rg = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=rg, op=op, parents=parents if rg else (),
                 backward=backward if rg else None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Value, b: Value, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot combine {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def _matmul(a: Value, b: Value) -> Value:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), owned=True)
        if b.requires_grad:
            if b.ndim == 2:
                # shared weight: fold the batch into rows
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            b._accumulate(gb, owned=True)

    return _node(out_data, "matmul", (a, b), backward)


def _add(a: Value, b: Value) -> Value:
    _check_broadcast(a, b, "add")

    def backward(g):
        # g is this node's finished grad, so the first consumer may adopt it
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, "add", (a, b), backward)


def _sub(a: Value, b: Value) -> Value:
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape), owned=True)

    return _node(a.data - b.data, "sub", (a, b), backward)


def _mul(a: Value, b: Value) -> Value:
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), owned=True)

    return _node(a.data * b.data, "mul", (a, b), backward)


def _div(a: Value, b: Value) -> Value:
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape), owned=True)

    return _node(out_data, "div", (a, b), backward)


def _scale(a: Value, *, factor: float) -> Value:
    def backward(g):
        a._accumulate(g * factor, owned=True)

    return _node(a.data * factor, "scale", (a,), backward)


def _concat(*xs: Value, axis: int = -1) -> Value:
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
                i != axis % len(ref) and x.shape[i] != ref[i] for i in range(len(ref))):
            raise ShapeMismatch(f"concat: {ref} vs {x.shape}")
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for x, gx in zip(xs, np.split(g, splits, axis=axis)):
            if x.requires_grad:
                x._accumulate(gx)

    return _node(np.concatenate([x.data for x in xs], axis=axis), "concat", xs, backward)


def _relu(a: Value) -> Value:
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask, owned=True)

    return _node(a.data * mask, "relu", (a,), backward)


def _mean_rows(a: Value) -> Value:
    if a.ndim < 2:
        raise ShapeMismatch(f"mean_rows needs >=2 dims, got {a.shape}")
    n = a.shape[-2]

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _node(a.data.mean(axis=-2, keepdims=True), "mean_rows", (a,), backward)


def _max_rows(a: Value) -> Value:
    if a.ndim < 2:
        raise ShapeMismatch(f"max_rows needs >=2 dims, got {a.shape}")
    idx = np.argmax(a.data, axis=-2)[..., None, :]
    out_data = np.take_along_axis(a.data, idx, axis=-2)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g, axis=-2)
        a._accumulate(ga, owned=True)

    return _node(out_data, "max_rows", (a,), backward)


def _slice(a: Value, *, key) -> Value:
    out_data = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        if _has_array_index(key):
            np.add.at(ga, key, g)
        else:
            ga[key] = g
        a._accumulate(ga, owned=True)

    return _node(out_data, "slice", (a,), backward)


def _has_array_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def _reshape(a: Value, *, shape) -> Value:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), "reshape", (a,), backward)


def _transpose(a: Value) -> Value:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeMismatch(f"transpose needs >=2 dims, got {a.shape}")

    def backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(a.data, -1, -2), "transpose", (a,), backward)


def _sum(a: Value, *, axis=None, keepdims=False) -> Value:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), backward)


def _broadcast_rows(a: Value, *, n: int) -> Value:
    if a.ndim < 2 or a.shape[-2] != 1:
        raise ShapeMismatch(f"broadcast_rows expects a single row, got {a.shape}")
    shape = a.shape[:-2] + (n, a.shape[-1])

    def backward(g):
        a._accumulate(g.sum(axis=-2, keepdims=True), owned=True)

    return _node(np.broadcast_to(a.data, shape).copy(), "broadcast_rows", (a,), backward)


def _gather_rows(a: Value, *, index: np.ndarray) -> Value:
    """a: (B, N, C), index: (B, N, k) -> (B, N, k, C)."""
    if a.ndim != 3 or index.ndim != 3 or index.shape[0] != a.shape[0]:
        raise ShapeMismatch(f"gather_rows: {a.shape} with index {index.shape}")
    B, N, C = a.shape
    flat = (index + (np.arange(B) * N)[:, None, None]).reshape(-1)
    out_data = a.data.reshape(B * N, C)[flat].reshape(index.shape + (C,))

    def backward(g):
        # scatter-add as a sparse product; much faster than np.add.at
        scatter = sparse.csr_matrix(
            (np.ones(flat.size, dtype=g.dtype), (flat, np.arange(flat.size))),
            shape=(B * N, flat.size))
        a._accumulate(np.asarray(scatter @ g.reshape(-1, C)).reshape(a.shape), owned=True)

    return _node(out_data, "gather_rows", (a,), backward)


def _softplus(a: Value) -> Value:
    x = a.data
    out_data = np.logaddexp(0.0, x)

    def backward(g):
        a._accumulate(g / (1.0 + np.exp(-x)), owned=True)

    return _node(out_data, "softplus", (a,), backward)


def _sqrt(a: Value) -> Value:
    out_data = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at the origin keeps zero-distance losses finite
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out_data > 0, g / (2.0 * out_data), 0.0)
        a._accumulate(d, owned=True)

    return _node(out_data, "sqrt", (a,), backward)


def _abs(a: Value) -> Value:
    def backward(g):
        a._accumulate(g * np.sign(a.data), owned=True)

    return _node(np.abs(a.data), "abs", (a,), backward)


def _square(a: Value) -> Value:
    def backward(g):
        a._accumulate(2.0 * g * a.data, owned=True)

    return _node(a.data * a.data, "square", (a,), backward)


def _softmax(a: Value) -> Value:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        a._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)), owned=True)

    return _node(p, "softmax", (a,), backward)


def _huber(a: Value) -> Value:
    """Elementwise smooth-L1 with transition at 1."""
    d = a.data
    ad = np.abs(d)
    small = ad < 1.0
    out_data = np.where(small, 0.5 * d * d, ad - 0.5)

    def backward(g):
        a._accumulate(g * np.where(small, d, np.sign(d)), owned=True)

    return _node(out_data, "huber", (a,), backward)


PRIMITIVES: dict[str, Callable[..., Value]] = {
    "matmul": _matmul,
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "div": _div,
    "scale": _scale,
    "concat": _concat,
    "relu": _relu,
    "mean_rows": _mean_rows,
    "max_rows": _max_rows,
    "slice": _slice,
    "reshape": _reshape,
    "transpose": _transpose,
    "sum": _sum,
    "broadcast_rows": _broadcast_rows,
    "gather_rows": _gather_rows,
    "softplus": _softplus,
    "sqrt": _sqrt,
    "abs": _abs,
    "square": _square,
    "softmax": _softmax,
    "huber": _huber,
}


def apply_primitive(op_kind: str, inputs: Iterable, **attrs) -> Value:
    """Run one catalog primitive on ``inputs`` and record it in the graph."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise UnknownOp(op_kind) from None
    return fn(*[as_value(x) for x in inputs], **attrs)


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("sub", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def div(a, b):
    return apply_primitive("div", (a, b))


def scale(a, factor: float):
    return apply_primitive("scale", (a,), factor=float(factor))


def concat(xs, axis: int = -1):
    return apply_primitive("concat", xs, axis=axis)


def relu(a):
    return apply_primitive("relu", (a,))


def mean_rows(a):
    return apply_primitive("mean_rows", (a,))


def max_rows(a):
    return apply_primitive("max_rows", (a,))


def slice_(a, key):
    return apply_primitive("slice", (a,), key=key)


def reshape(a, shape):
    return apply_primitive("reshape", (a,), shape=tuple(shape))


def transpose(a):
    return apply_primitive("transpose", (a,))


def sum_(a, axis=None, keepdims=False):
    return apply_primitive("sum", (a,), axis=axis, keepdims=keepdims)


def broadcast_rows(a, n: int):
    return apply_primitive("broadcast_rows", (a,), n=n)


def gather_rows(a, index):
    return apply_primitive("gather_rows", (a,), index=np.asarray(index))


def softplus(a):
    return apply_primitive("softplus", (a,))


def sqrt(a):
    return apply_primitive("sqrt", (a,))


def abs_(a):
    return apply_primitive("abs", (a,))


def square(a):
    return apply_primitive("square", (a,))


def softmax(a):
    return apply_primitive("softmax", (a,))


def mean(a):
    a = as_value(a)
    return scale(sum_(a), 1.0 / a.data.size)


def norm(a, axis: int = -1):
    """Euclidean norm along ``axis`` (keeps no dims)."""
    return sqrt(sum_(square(a), axis=axis))


# ---------------------------------------------------------------- backprop

def _topo_order(root: Value) -> list[Value]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(loss: Value) -> None:
    """Fill ``grad`` of every reachable node that requires it."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior buffers are no longer needed
            if node._parents:
                node._parents = ()
                node._backward = None


# ---------------------------------------------------------------- losses

def smooth_l1(pred, target) -> Value:
    pred, target = as_value(pred), as_value(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"smooth_l1: {pred.shape} vs {target.shape}")
    return mean(apply_primitive("huber", (sub(pred, target),)))


def mse(a, b) -> Value:
    """Mean squared difference, normalised by the element count."""
    a, b = as_value(a), as_value(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse: {a.shape} vs {b.shape}")
    return mean(square(sub(a, b)))


def l1(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"l1: {a.shape} vs {b.shape}")
    return mean(abs_(sub(a, b)))


# ---------------------------------------------------------------- params & optimizer

class ModelParams:
    """Ordered, named collection of learnable tensors."""

    def __init__(self, tensors: dict | None = None, config_hash: str = ""):
        self.tensors: "OrderedDict[str, Value]" = OrderedDict()
        self.config_hash = config_hash
        for k, v in (tensors or {}).items():
            self.add(k, v)

    def add(self, name: str, data) -> Value:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        v = Value(np.array(data, dtype=_DTYPE), requires_grad=True, op="param")
        self.tensors[name] = v
        return v

    def __getitem__(self, name: str) -> Value:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def count(self, prefix: str | None = None) -> int:
        return sum(v.data.size for k, v in self.tensors.items()
                   if prefix is None or k.startswith(prefix))

    def zero_grad(self) -> None:
        for v in self.tensors.values():
            v.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(state)
        if missing:
            raise KeyError(f"state lacks parameters: {sorted(missing)[:5]}")
        for k, v in self.tensors.items():
            arr = np.asarray(state[k])
            if arr.shape != v.data.shape:
                raise ShapeMismatch(f"{k}: {arr.shape} vs {v.data.shape}")
            v.data = arr.astype(v.data.dtype, copy=True)

    def astype(self, dtype) -> None:
        for v in self.tensors.values():
            v.data = v.data.astype(dtype)


@dataclass
class Adam:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_interval: int = 0  # in optimizer steps; 0 disables decay
    decay_gamma: float = 0.5
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")

    def step(self, params: ModelParams, skip_missing: bool = False) -> None:
        """One Adam update; zeroes grads and advances the decay schedule."""
        todo = []
        for name, p in params:
            if p.grad is None:
                if skip_missing:
                    continue
                raise MissingGradient(name)
            todo.append((name, p))
        self.step_count += 1
        t = self.step_count
        lr = self.learning_rate
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2 ** t) / (1 - b1 ** t)
        for name, p in todo:
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * corr) * m / (np.sqrt(v) + self.eps)
            p.grad = None
        if self.decay_interval and t % self.decay_interval == 0:
            self.learning_rate *= self.decay_gamma


def optimizer_step(opt: Adam, params: ModelParams) -> None:
    opt.step(params)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(f: Callable[[], Value], params: dict[str, Value] | ModelParams,
               h: float = 1e-4, tol: float = 1e-4, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` rebuilds the graph from the current parameter buffers and returns a
    scalar Value.  The relative error per coordinate is
    ``|a - n| / max(|a|, |n|)``, defined as 0 when both vanish.  With
    ``max_coords`` only that many randomly chosen coordinates per tensor are
    probed.
    """
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    items = list(params) if isinstance(params, ModelParams) else list(params.items())
    for _, p in items:
        p.grad = None
    loss = f()
    backprop(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in items}
    rng = rng or np.random.default_rng(0)
    per_param = {}
    worst = 0.0
    for name, p in items:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        err = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = a_flat[i]
            denom = max(abs(a), abs(num))
            # floor keeps round-off sized gradients from dominating
            e = 0.0 if denom < 1e-12 else abs(a - num) / max(denom, 1e-7)
            err = max(err, e)
        per_param[name] = err
        worst = max(worst, err)
    for _, p in items:
        p.grad = None
    return GradCheckReport(worst, per_param, tol)
