"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every primitive builds an output :class:`Tensor` holding references to its
inputs and a closure that pushes the output gradient back to them.  The
graph reachable from a scalar loss is the tape; :func:`backward` replays it
in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was used outside its contract (e.g. backward on a non-scalar)."""


class Tensor:
    """n-dimensional double-precision array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def tensor_sum(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum()), (x,), backward, "sum")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        x._accumulate(g * (out > 0))

    return _make(out, (x,), backward, "relu")


_SQRT_HALF = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data**2)
        x._accumulate(g * (cdf + x.data * pdf))

    return _make(x.data * cdf, (x,), backward, "gelu")


def flatten(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g):
        x._accumulate(g.reshape(shape))

    return _make(x.data.reshape(shape[0], -1), (x,), backward, "flatten")


def mean_pool(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` average pooling of an NCHW tensor."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"spatial dims {(h, w)} not divisible by pool size {size}")
    ho, wo = h // size, w // size
    data = x.data.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def backward(g):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        x._accumulate(up)

    return _make(data, (x,), backward, "mean_pool")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape (N, Fin)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} does not match {weight.shape[0]} outputs")
    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _make(data, parents, backward, "dense")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with a (Cout, Cin, kH, kW) kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError("kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if weight.requires_grad:
            weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if x.requires_grad:
            if stride == 1:
                # full correlation of the output grad with the flipped, transposed kernel
                q = kh - 1 - padding
                r = kw - 1 - padding
                gp = np.pad(g, ((0, 0), (0, 0), (max(q, 0), max(q, 0)), (max(r, 0), max(r, 0))))
                if q < 0 or r < 0:
                    gp = gp[:, :, max(-q, 0) : gp.shape[2] - max(-q, 0), max(-r, 0) : gp.shape[3] - max(-r, 0)]
                wt = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
                gcols, _, _ = _im2col(gp, kh, kw, 1)
                dx = (gcols @ wt.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
                x._accumulate(dx)
                return
            dcols = (gmat @ wmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    return _make(np.ascontiguousarray(out), (x, weight), backward, "conv2d")


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean softmax cross-entropy of (N, K) logits against integer class indices."""
    target = np.asarray(target)
    n, k = logits.shape
    idx = target.astype(np.int64)
    if target.shape != (n,) or np.any(idx != target):
        raise DimensionError(f"cross_entropy targets must be {n} class indices")
    if np.any(idx < 0) or np.any(idx >= k):
        raise DomainError(f"class index out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    value = -logp[rows, idx].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, idx] -= 1.0
        logits._accumulate(g * p / n)

    return _make(np.asarray(value), (logits,), backward, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error averaged over every element."""
    target = np.asarray(target, dtype=np.float64)
    if target.size != pred.data.size:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.reshape(pred.shape)
    value = np.mean(diff**2)

    def backward(g):
        pred._accumulate(g * 2.0 * diff / diff.size)

    return _make(np.asarray(value), (pred,), backward, "mse")


def loss(pred: Tensor, target, kind: str) -> Tensor:
    if kind == "cross_entropy":
        return cross_entropy(pred, target)
    if kind == "mse":
        return mse(pred, target)
    raise ValueError(f"unknown loss kind {kind!r}")


# ------------------------------------------------------------------ backward


def tape(root: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``root`` in forward (topological) order."""
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
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return [t for t in order if t._backward is not None]


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` tensor reachable from a scalar loss."""
    if root.data.shape != () and root.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    ops = tape(root)
    root._accumulate(np.ones_like(root.data))
    for node in reversed(ops):
        if node.grad is not None:
            node._backward(node.grad)


def grad_check(f: Callable[[Tensor], Tensor], point: np.ndarray, h: float = 1e-6) -> float:
    """Max relative error between backward grads and central differences of ``f``.

    ``f`` maps a tensor to a scalar tensor.  The denominator of each relative
    error is ``max(|a|, |b|, 1e-8)``.
    """
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    backward(f(x))
    analytic = np.zeros_like(point) if x.grad is None else x.grad
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(point.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(point.copy())).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
