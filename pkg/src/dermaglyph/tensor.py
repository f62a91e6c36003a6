"""Dense arrays with reverse-mode automatic differentiation, plus Adam.

A Tensor wraps a numpy array and records the operation that produced it;
``backward`` on a scalar loss walks the tape in reverse topological order
and accumulates gradients into every reachable tensor that requires them.
Kernels use fixed sequential reduction orders (plain numpy), so identical
inputs always produce bit-identical values and gradients.

Training runs in float32; gradient-check tests build float64 graphs, and
every kernel preserves the dtype of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "concat",
    "broadcast_to",
    "softmax",
    "layer_norm",
    "gelu",
    "linear",
    "cross_entropy",
    "AdamState",
    "adam_step",
    "zero_grad",
]


class ShapeError(Exception):
    """Operand shapes are incompatible for the requested kernel."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _grad_fn=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph plumbing -------------------------------------------------

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Accumulate d(self)/d(param) into .grad of all reachable tensors."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        if self._backward_done:
            raise RuntimeError("backward called twice on the same graph without reset")
        self._backward_done = True
        order = self._toposort()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._grad_fn(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    def item(self) -> float:
        return float(self.data.reshape(()))

    # -- elementwise / structural ops ------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other, self.dtype)
        out_data = self.data + other.data
        req = self.requires_grad or other.requires_grad

        def grad_fn(g):
            return (_unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape))

        return Tensor(out_data, req, (self, other), grad_fn if req else None)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        out_data = self.data * other.data
        req = self.requires_grad or other.requires_grad
        a_data, b_data = self.data, other.data

        def grad_fn(g):
            return (
                _unbroadcast(g * b_data, a_data.shape),
                _unbroadcast(g * a_data, b_data.shape),
            )

        return Tensor(out_data, req, (self, other), grad_fn if req else None)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * np.asarray(-1.0, dtype=self.dtype)

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other, self.dtype))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = _as_tensor(other, self.dtype)
        if self.data.shape[-1] != other.data.shape[-2]:
            raise ShapeError(f"matmul: {self.data.shape} @ {other.data.shape}")
        out_data = self.data @ other.data
        req = self.requires_grad or other.requires_grad
        a_data, b_data = self.data, other.data

        def grad_fn(g):
            da = _unbroadcast(g @ np.swapaxes(b_data, -1, -2), a_data.shape)
            db = _unbroadcast(np.swapaxes(a_data, -1, -2) @ g, b_data.shape)
            return (da, db)

        return Tensor(out_data, req, (self, other), grad_fn if req else None)

    def transpose(self, axes: tuple[int, ...]) -> "Tensor":
        out_data = np.transpose(self.data, axes)
        inv = tuple(int(i) for i in np.argsort(axes))

        def grad_fn(g):
            return (np.transpose(g, inv),)

        return Tensor(out_data, self.requires_grad, (self,), grad_fn if self.requires_grad else None)

    def reshape(self, *shape: int) -> "Tensor":
        in_shape = self.data.shape
        out_data = self.data.reshape(shape)

        def grad_fn(g):
            return (g.reshape(in_shape),)

        return Tensor(out_data, self.requires_grad, (self,), grad_fn if self.requires_grad else None)

    def __getitem__(self, idx) -> "Tensor":
        out_data = self.data[idx]
        in_shape = self.data.shape
        dtype = self.data.dtype

        def grad_fn(g):
            full = np.zeros(in_shape, dtype=dtype)
            full[idx] = g
            return (full,)

        return Tensor(out_data, self.requires_grad, (self,), grad_fn if self.requires_grad else None)

    def sum(self) -> "Tensor":
        in_shape = self.data.shape
        dtype = self.data.dtype
        out_data = np.asarray(self.data.sum(), dtype=dtype)

        def grad_fn(g):
            return (np.broadcast_to(g, in_shape).astype(dtype, copy=False),)

        return Tensor(out_data, self.requires_grad, (self,), grad_fn if self.requires_grad else None)

    def mean(self) -> "Tensor":
        n = self.data.size
        return self.sum() * np.asarray(1.0 / n, dtype=self.dtype)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that broadcasting expanded."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    req = any(t.requires_grad for t in tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        out = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return Tensor(out_data, req, tuple(tensors), grad_fn if req else None)


def broadcast_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = np.broadcast_to(t.data, shape).copy()
    in_shape = t.data.shape

    def grad_fn(g):
        return (_unbroadcast(g, in_shape),)

    return Tensor(out_data, t.requires_grad, (t,), grad_fn if t.requires_grad else None)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; rows sum to one."""
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor(y, t.requires_grad, (t,), grad_fn if t.requires_grad else None)


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    d = t.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: features {t.data.shape} but gain {gain.data.shape}, bias {bias.data.shape}"
        )
    mu = t.data.mean(axis=-1, keepdims=True)
    var = t.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (t.data - mu) * inv_std
    out_data = xhat * gain.data + bias.data
    req = t.requires_grad or gain.requires_grad or bias.requires_grad

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gd = g * gain.data
        dx = inv_std * (
            gd - gd.mean(axis=-1, keepdims=True) - xhat * (gd * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, dgain, dbias)

    return Tensor(out_data, req, (t, gain, bias), grad_fn if req else None)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(t: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    x = t.data
    phi = 0.5 * (1.0 + erf(x * np.asarray(_INV_SQRT2, dtype=x.dtype)))
    out_data = x * phi

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * np.asarray(_INV_SQRT2PI, dtype=x.dtype)
        return (g * (phi + x * pdf),)

    return Tensor(out_data, t.requires_grad, (t,), grad_fn if t.requires_grad else None)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis, computed as one 2-D GEMM."""
    d_in, d_out = w.data.shape
    if x.data.shape[-1] != d_in or b.data.shape != (d_out,):
        raise ShapeError(
            f"linear: x {x.data.shape} with w {w.data.shape}, b {b.data.shape}"
        )
    lead = x.data.shape[:-1]
    x2d = np.ascontiguousarray(x.data.reshape(-1, d_in))
    out_data = (x2d @ w.data + b.data).reshape(*lead, d_out)
    req = x.requires_grad or w.requires_grad or b.requires_grad

    def grad_fn(g):
        g2d = np.ascontiguousarray(g.reshape(-1, d_out))
        dx = (g2d @ w.data.T).reshape(x.data.shape)
        dw = x2d.T @ g2d
        db = g2d.sum(axis=0)
        return (dx, dw, db)

    return Tensor(out_data, req, (x, w, b), grad_fn if req else None)


def cross_entropy(logits: Tensor, targets: np.ndarray, class_weight: np.ndarray | None = None) -> Tensor:
    """Weighted-mean cross entropy over a batch of class-index targets.

    loss = sum_i w[y_i] * (-log softmax(logits_i)[y_i]) / sum_i w[y_i].
    """
    n, c = logits.data.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: logits {logits.data.shape} with targets {targets.shape}")
    if class_weight is None:
        w = np.ones(n, dtype=logits.dtype)
    else:
        class_weight = np.asarray(class_weight, dtype=logits.dtype)
        if class_weight.shape != (c,):
            raise ShapeError(f"cross_entropy: class_weight {class_weight.shape}, expected ({c},)")
        w = class_weight[targets]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    w_sum = w.sum()
    out_data = np.asarray(-(w * logp[np.arange(n), targets]).sum() / w_sum, dtype=logits.dtype)

    def grad_fn(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (g * p * (w / w_sum)[:, None],)

    return Tensor(out_data, logits.requires_grad, (logits,), grad_fn if logits.requires_grad else None)


@dataclass
class AdamState:
    """First/second moment buffers and step count for a fixed parameter list."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float = 3e-4) -> "AdamState":
        state = cls(lr=lr)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """Bias-corrected Adam update, in place; a missing grad counts as zero."""
    if len(state.m) != len(params):
        raise ShapeError(f"adam_step: state tracks {len(state.m)} params, got {len(params)}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad {g.shape} does not match param {p.data.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grad(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None
