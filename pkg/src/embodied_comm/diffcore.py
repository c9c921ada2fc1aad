"""Small reverse-mode autodiff over float64 numpy arrays.

Just enough machinery to push a loss gradient through a discriminator,
a forward-kinematics rollout and a policy network in one backward pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi


class ConfigurationError(ValueError):
    """Raised for shape mismatches and malformed model/topology definitions."""


class UsageError(ValueError):
    """Raised when an API is called outside its preconditions."""


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes non-finite."""


class Tensor:
    """A node in the computation graph.

    ``value`` is always a float64 ndarray; ``grad`` is populated by
    :func:`backward` with an array of the same shape.
    """

    __slots__ = ("value", "grad", "op", "parents", "_vjp", "requires_grad")

    def __init__(self, value, op="const", parents=(), vjp=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        # constant subgraphs never need a backward rule
        self._vjp = vjp if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"

    def backward(self):
        backward(self)

    # Operator sugar; every method routes through a named op below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _ub(g, t):
    return _unbroadcast(g, t.shape) if t.requires_grad else None


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(
            f"{op}: incompatible shapes {a.shape} and {b.shape}"
        ) from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return Tensor(
        a.value + b.value, "add", (a, b),
        lambda g: (_ub(g, a), _ub(g, b)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return Tensor(
        a.value - b.value, "sub", (a, b),
        lambda g: (_ub(g, a), _ub(-g, b)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return Tensor(
        a.value * b.value, "mul", (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
        ),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.value, b.value)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
        return ga, gb

    return Tensor(out, "matmul", (a, b), vjp)


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0
    return Tensor(a.value * mask, "relu", (a,), lambda g: (g * mask,))


def sin(a):
    a = as_tensor(a)
    return Tensor(np.sin(a.value), "sin", (a,), lambda g: (g * np.cos(a.value),))


def cos(a):
    a = as_tensor(a)
    return Tensor(np.cos(a.value), "cos", (a,), lambda g: (-g * np.sin(a.value),))


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def square(a):
    a = as_tensor(a)
    return Tensor(a.value * a.value, "square", (a,), lambda g: (2.0 * g * a.value,))


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor(p, "softmax", (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor(out, "log_softmax", (a,), vjp)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(out, "sum", (a,), vjp)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / count)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ConfigurationError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return Tensor(out, "concat", tensors, vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.value for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ConfigurationError(f"stack: incompatible shapes {shapes}") from None

    def vjp(g):
        return tuple(
            np.take(g, i, axis=axis) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return Tensor(out, "stack", tensors, vjp)


def slice_(a, idx):
    a = as_tensor(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)

    def vjp(g):
        full = np.zeros(a.shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor(a.value[idx], "slice", (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ConfigurationError(f"reshape: cannot view {a.shape} as {shape}") from None
    return Tensor(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def wrap_angle(a):
    """Map angles into [0, 2*pi); the gradient passes straight through."""
    a = as_tensor(a)
    out = np.mod(a.value, TWO_PI)
    # np.mod can return exactly 2*pi for tiny negative inputs
    out[out >= TWO_PI] = 0.0
    return Tensor(out, "wrap", (a,), lambda g: (g,))


def gaussian_noise(a, sigma, rng):
    """Reparameterised noise: the draw is a constant for the backward pass."""
    a = as_tensor(a)
    if sigma == 0:
        return a
    eps = rng.standard_normal(a.shape) * sigma
    return Tensor(a.value + eps, "noise", (a,), lambda g: (g,))


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "square": square,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "stack": lambda *ts, axis=0: stack(ts, axis=axis),
    "slice": slice_,
    "reshape": reshape,
    "sin": sin,
    "cos": cos,
    "wrap": wrap_angle,
    "noise": gaussian_noise,
}


def forward_op(op, *inputs, **kwargs):
    """Apply the named operation; ``forward_op("add", x, y)``."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise UsageError(f"unknown op {op!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


def _topological_order(root):
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Populate ``.grad`` on every node reachable from the scalar ``root``."""
    if root.value.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise UsageError("root does not depend on any tensor with requires_grad=True")
    order = _topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._vjp(node.grad)):
            if g is None:
                continue
            # out-of-place accumulation: vjps may hand the same array to several parents
            parent.grad = g if parent.grad is None else parent.grad + g


@dataclass
class ParamSet:
    """Named trainable arrays plus Adam moment buffers."""

    params: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        self.params = {k: np.asarray(p, dtype=np.float64) for k, p in self.params.items()}
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p))
            self.v.setdefault(k, np.zeros_like(p))
        self._nodes = {}

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def names(self):
        return list(self.params)

    def leaves(self):
        """Fresh graph leaves for one forward pass, keyed by parameter name."""
        self._nodes = {k: Tensor(p, op="param", requires_grad=True) for k, p in self.params.items()}
        return self._nodes

    def grads(self):
        return {k: n.grad for k, n in self._nodes.items()}

    def zero_grad(self):
        self._nodes = {}

    def copy(self):
        return ParamSet(
            {k: p.copy() for k, p in self.params.items()},
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
        )

    def checksum(self):
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def adam_step(params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update using the gradients from the last backward pass.

    Parameters that did not take part in the graph receive a zero gradient.
    Gradients are cleared afterwards.
    """
    if not params._nodes:
        raise RuntimeError("adam_step called before any forward/backward pass")
    b1, b2 = betas
    params.step += 1
    t = params.step
    for name, p in params.params.items():
        node = params._nodes.get(name)
        if node is None:
            raise RuntimeError(f"no gradient slot for parameter {name!r}")
        g = node.grad if node.grad is not None else np.zeros_like(p)
        params.m[name] = b1 * params.m[name] + (1 - b1) * g
        params.v[name] = b2 * params.v[name] + (1 - b2) * g * g
        m_hat = params.m[name] / (1 - b1**t)
        v_hat = params.v[name] / (1 - b2**t)
        params.params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    params.zero_grad()
    return params


def sgd_step(params, lr=1e-2):
    """Plain gradient descent with the gradients from the last backward pass."""
    if not params._nodes:
        raise RuntimeError("sgd_step called before any forward/backward pass")
    params.step += 1
    for name, p in params.params.items():
        node = params._nodes.get(name)
        if node is not None and node.grad is not None:
            params.params[name] = p - lr * node.grad
    params.zero_grad()
    return params


def save_params(params, path, meta=None):
    """Write an ``.npz`` checkpoint; float64 values round-trip bit-exactly."""
    arrays = {f"param/{k}": v for k, v in params.params.items()}
    arrays.update({f"m/{k}": v for k, v in params.m.items()})
    arrays.update({f"v/{k}": v for k, v in params.v.items()})
    header = {"names": list(params.params), "step": params.step, "meta": meta or {}}
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(ParamSet, meta)``."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        names = header["names"]
        ps = ParamSet(
            {k: data[f"param/{k}"] for k in names},
            {k: data[f"m/{k}"] for k in names},
            {k: data[f"v/{k}"] for k in names},
            header["step"],
        )
    return ps, header["meta"]


def he_uniform(rng, fan_in, fan_out):
    """Zero-mean uniform init with variance 2/fan_in."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def numerical_grad(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g
