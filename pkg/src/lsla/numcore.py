"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the ViT-LSLA model needs are provided. Every op records
its parents and a closure that pushes the output gradient back to them;
``Tensor.backward`` walks the graph in reverse topological order.
Gradients accumulate across uses; callers zero them between steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.name = None
        return t

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
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=DTYPE))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _tracks(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor._wrap(data)
    if _tracks(*parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g, b.shape)))
        return out

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * a.data, b.shape)))
        return out

    return _result(a.data * b.data, (a, b), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))

    def backward(g):
        pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
        return [(x, g * (cdf + x.data * pdf))]

    return _result(x.data * cdf, (x,), backward)


# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def backward(g):
        return [(x, g.reshape(src))]

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if not axes:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return [(x, g.transpose(inv))]

    return _result(x.data.transpose(axes), (x,), backward)


def roll(x: Tensor, shifts: tuple[int, ...], axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return [(x, np.roll(g, tuple(-s for s in shifts), axes))]

    return _result(np.roll(x.data, shifts, axes), (x,), backward)


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis with an integer index array of any shape."""
    x = as_tensor(x)
    index = np.asarray(index)
    axis = axis % x.ndim

    def backward(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        gm = g.reshape(x.shape[:axis] + (index.size,) + x.shape[axis + 1 :])
        np.add.at(moved, index.ravel(), np.moveaxis(gm, axis, 0))
        return [(x, gx)]

    return _result(np.take(x.data, index, axis=axis), (x,), backward)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(g, x.shape))]

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = range(x.ndim) if axis is None else np.atleast_1d(axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; size-1 leading dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)))
        return out

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with weight stored (d_in, d_out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        out = []
        if x.requires_grad:
            out.append((x, (g2 @ weight.data.T).reshape(x.shape)))
        if weight.requires_grad:
            out.append((weight, x2.T @ g2))
        if bias is not None and bias.requires_grad:
            out.append((bias, g2.sum(axis=0)))
        return out

    return _result(y.reshape(lead + (weight.shape[1],)), parents, backward)


# normalisation / probabilities


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-subtracted softmax over the last axis. -inf entries map to exactly 0."""
    x = as_tensor(x)
    m = np.max(x.data, axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateRowError("softmax row with every entry -inf")
    e = np.exp(x.data - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return [(x, s * (g - np.sum(g * s, axis=-1, keepdims=True)))]

    return _result(s, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def backward(g):
        out = []
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * np.mean(gh * xhat, axis=-1, keepdims=True)
            )
            out.append((x, gx))
        if gamma.requires_grad:
            out.append((gamma, (g * xhat).reshape(-1, d).sum(axis=0)))
        if beta.requires_grad:
            out.append((beta, g.reshape(-1, d).sum(axis=0)))
        return out

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - z[rows, labels])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return [(logits, p * (g / b))]

    return _result(np.asarray(loss), (logits,), backward)


# convolution


def _im2col(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    taps = [
        xp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :]
        for i in range(3)
        for j in range(3)
    ]
    return np.stack(taps, axis=3)  # b, ho, wo, 9, c


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 cross-correlation, zero padding 1, NHWC layout, kernel [3,3,c_in,c_out]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    if x.ndim != 4 or kernel.shape[:2] != (3, 3) or kernel.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    b, h, w, c = x.shape
    cout = kernel.shape[3]
    ho, wo = -(-h // stride), -(-w // stride)
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col(xp, stride, ho, wo).reshape(b * ho * wo, 9 * c)
    kmat = kernel.data.reshape(9 * c, cout)
    y = cols @ kmat
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        out = []
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(b, ho, wo, 9, c)
            gxp = np.zeros_like(xp)
            for t in range(9):
                i, j = divmod(t, 3)
                gxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += gcols[:, :, :, t, :]
            out.append((x, gxp[:, 1 : h + 1, 1 : w + 1, :]))
        if kernel.requires_grad:
            out.append((kernel, (cols.T @ g2).reshape(kernel.shape)))
        if bias is not None and bias.requires_grad:
            out.append((bias, g2.sum(axis=0)))
        return out

    return _result(y.reshape(b, ho, wo, cout), parents, backward)


# optimisation


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    no_decay: Iterable[str] = (),
) -> AdamWState:
    """One AdamW update, in place on the ``params`` arrays.

    Decay is decoupled: weights shrink by ``lr * weight_decay`` directly and
    the moment estimates only ever see the loss gradient.
    """
    skip = set(no_decay)
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay and name not in skip:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# finite-difference oracle


@dataclass(frozen=True)
class GradReport:
    name: str
    max_abs_error: float
    max_rel_error: float


def fd_gradcheck(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> list[GradReport]:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` closes over ``params`` and is re-evaluated with each coordinate
    nudged by +-h. Relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor keeps
    coordinates whose true gradient is ~0 from reporting pure roundoff.
    """
    for p in params.values():
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("f is not finite at the base point")
    out.backward()
    reports = []
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"f is not finite when perturbing {name}[{i}]")
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
        diff = np.abs(analytic - numeric)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        reports.append(GradReport(name, float(diff.max()), float((diff / scale).max())))
    for p in params.values():
        p.grad = None
    return reports
