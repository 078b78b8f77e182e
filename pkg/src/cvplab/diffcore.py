"""Minimal reverse-mode differentiation over float64 numpy arrays.

Every kernel returns a :class:`Tensor` that remembers its parents and a
closure propagating the upstream gradient.  :func:`backward` walks the
recorded graph once in reverse topological order.  Broadcasting is limited
to what the CVP model needs (row-wise bias adds, per-row scalars).
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "parameter",
    "constant",
    "affine",
    "relu",
    "softplus",
    "clamp_min",
    "add",
    "scale",
    "mean",
    "reshape",
    "softmax_cross_entropy",
    "smooth_l1",
    "backward",
    "OptimizerState",
    "sgd_nesterov_step",
    "finite_difference_gradient",
    "gradient_relative_error",
]


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""

    def __init__(self, op: str, where: str | None = None):
        self.op = op
        self.where = where
        msg = f"non-finite value produced by {op}"
        if where:
            msg += f" ({where})"
        super().__init__(msg)


class ShapeError(ValueError):
    pass


class Tensor:
    """A node in the computation record.

    Leaves created with :func:`parameter` collect gradients; everything
    else is an intermediate value whose ``grad`` is filled in transiently
    during :func:`backward`.
    """

    __slots__ = ("data", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = parents
        self._backward: Callable[[np.ndarray], None] | None = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return NotImplemented
        return scale(self, float(other))

    __rmul__ = __mul__


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op)
    return arr


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    return _check_finite(arr, "input")


def parameter(value, name: str | None = None) -> Tensor:
    """Leaf that receives a gradient."""
    return Tensor(_as_array(value), requires_grad=True, name=name)


def constant(value) -> Tensor:
    return Tensor(_as_array(value))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], fn) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, parents if needs else (), fn if needs else None, requires_grad=needs, name=op)


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def affine(x, W, b) -> Tensor:
    """``x @ W.T + b`` for ``x`` of shape ``(in,)`` or ``(..., in)``."""
    x, W, b = _wrap(x), _wrap(W), _wrap(b)
    if W.data.ndim != 2 or b.data.shape != (W.data.shape[0],):
        raise ShapeError(f"affine: W {W.shape} and b {b.shape} are incompatible")
    if x.data.shape[-1:] != (W.data.shape[1],):
        raise ShapeError(f"affine: input {x.shape} does not match W {W.shape}")
    out = x.data @ W.data.T + b.data

    def fn(g):
        if x.requires_grad:
            x._accumulate(g @ W.data)
        if W.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.data.shape[-1])
            W._accumulate(g2.T @ x2)
        if b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _node(out, "affine", (x, W, b), fn)


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def fn(g):
        x._accumulate(g * mask)

    return _node(out, "relu", (x,), fn)


def _softplus(z: np.ndarray) -> np.ndarray:
    # ln(1 + e^z); identity above 30 where the correction is below float resolution
    return np.where(z > 30.0, z, np.log1p(np.exp(np.minimum(z, 30.0))))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def softplus(x) -> Tensor:
    x = _wrap(x)
    out = _softplus(x.data)

    def fn(g):
        x._accumulate(g * _sigmoid(x.data))

    return _node(out, "softplus", (x,), fn)


def clamp_min(x, floor: float) -> Tensor:
    """``max(x, floor)``; no gradient flows where the floor is active."""
    x = _wrap(x)
    keep = x.data >= floor
    out = np.where(keep, x.data, floor)

    def fn(g):
        x._accumulate(g * keep)

    return _node(out, "clamp_min", (x,), fn)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def fn(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g, b.data.shape))

    return _node(out, "add", (a, b), fn)


def scale(x, c: float) -> Tensor:
    x = _wrap(x)
    out = x.data * c

    def fn(g):
        x._accumulate(g * c)

    return _node(out, "scale", (x,), fn)


def mean(x, axis: int | None = None) -> Tensor:
    x = _wrap(x)
    out = np.asarray(x.data.mean(axis=axis))
    n = x.data.size if axis is None else x.data.shape[axis]

    def fn(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g / n, x.data.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape))

    return _node(out, "mean", (x,), fn)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _wrap(x)
    out = x.data.reshape(shape)

    def fn(g):
        x._accumulate(g.reshape(x.data.shape))

    return _node(out, "reshape", (x,), fn)


def softmax_cross_entropy(logits, target) -> Tensor:
    """Per-row ``-log softmax(logits)[target]`` via log-sum-exp.

    ``logits`` is ``(C,)`` with an integer target, or ``(N, C)`` with an
    integer array of length N.  Returns a scalar or an ``(N,)`` tensor.
    """
    logits = _wrap(logits)
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    t = np.atleast_1d(np.asarray(target))
    n_classes = z2.shape[1]
    if t.shape != (z2.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: {t.shape[0]} targets for {z2.shape[0]} rows")
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError("softmax_cross_entropy: targets must be class indices")
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise ValueError(f"softmax_cross_entropy: target out of range [0, {n_classes})")
    zmax = z2.max(axis=1, keepdims=True)
    shifted = z2 - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    out = lse - shifted[rows, t]
    if single:
        out = np.asarray(out[0])

    def fn(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        gg = np.atleast_1d(g)[:, None] * p
        logits._accumulate(gg[0] if single else gg)

    return _node(out, "softmax_cross_entropy", (logits,), fn)


def smooth_l1(a, b) -> Tensor:
    """Elementwise ``0.5 d^2`` if ``|d| < 1`` else ``|d|`` with ``d = a - b``."""
    a, b = _wrap(a), _wrap(b)
    d = a.data - b.data
    quad = np.abs(d) < 1.0
    out = np.where(quad, 0.5 * d * d, np.abs(d))

    def fn(g):
        dd = g * np.where(quad, d, np.sign(d))
        if a.requires_grad:
            a._accumulate(_sum_to_shape(dd, a.data.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(-dd, b.data.shape))

    return _node(out, "smooth_l1", (a, b), fn)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Populate ``.grad`` on every node reachable from ``root``.

    Returns the gradients of named parameter leaves.  Leaves that were
    reached but received no gradient get zeros.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    grads: dict[str, np.ndarray] = {}
    for node in reversed(order):
        if node.is_leaf:
            if node.requires_grad and node.name is not None:
                g = node.grad if node.grad is not None else np.zeros_like(node.data)
                grads[node.name] = _check_finite(g, f"gradient of {node.name}")
            continue
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
        node.grad = None if node is not root else node.grad
    return grads


@dataclass
class OptimizerState:
    """Nesterov SGD buffers; ``velocity`` mirrors the parameter dict."""

    momentum: float = 0.95
    base_lr: float = 5e-4
    step: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], momentum: float = 0.95,
                   base_lr: float = 5e-4) -> "OptimizerState":
        return cls(momentum, base_lr, 0, {k: np.zeros_like(v) for k, v in params.items()})


def sgd_nesterov_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
                      state: OptimizerState, lr: float, weight_decay: float = 0.0) -> None:
    """In-place lookahead Nesterov update.

    ``v <- m v + g`` then ``p <- p - lr (g + m v)``, where ``g`` includes
    the optional L2 term ``weight_decay * p``.
    """
    m = state.momentum
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        v *= m
        v += g
        p -= lr * (g + m * v)
    state.step += 1


def finite_difference_gradient(f: Callable[[dict[str, np.ndarray]], float],
                               params: dict[str, np.ndarray], h: float = 1e-5,
                               names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Central differences of the scalar ``f(params)``, one entry at a time.

    ``params`` is perturbed in place and restored.
    """
    out = {}
    for name in names if names is not None else params:
        p = params[name]
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params)
            flat[i] = orig - h
            fm = f(params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def gradient_relative_error(analytic: Mapping[str, np.ndarray],
                            numeric: Mapping[str, np.ndarray], floor: float = 1e-8) -> float:
    """Largest per-tensor ``||a - n|| / max(||a||, ||n||, floor)``."""
    worst = 0.0
    for name, n in numeric.items():
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst
