"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (float32 by default, float64 in verification
mode) plus an optional gradient buffer. Every primitive below records, on its
output, the backward rule and the input tensors it was computed from; calling
``backward(loss)`` walks that record in reverse topological order and
accumulates gradients into every reachable tensor with ``requires_grad``.

Primitives are pure functions of their inputs. A recorded graph belongs to
one thread of execution and may be consumed by ``backward`` exactly once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class FiniteCheckError(FloatingPointError):
    """A primitive produced NaN/Inf while debug checks were enabled."""


_debug_checks = False
_grad_enabled = True


def set_debug_checks(enabled: bool) -> None:
    """Toggle the after-every-primitive NaN/Inf guard (off in release mode)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (inference / benchmarking)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op!r})"


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise FiniteCheckError(f"non-finite values produced by primitive {op!r}")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, seed: np.ndarray | None = None) -> None:
    """Run reverse-mode differentiation from ``loss`` through its graph.

    ``loss`` must be a scalar unless an explicit ``seed`` gradient of the same
    shape is supplied. The recorded graph is consumed: running backward again
    over it (from this or any tensor that shares part of it) raises instead of
    silently producing truncated gradients.
    """
    if loss._consumed:
        raise RuntimeError("backward already ran over this graph; rerun the forward pass first")
    if seed is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss or an explicit seed, got shape {loss.shape}")
        seed = np.ones_like(loss.data)

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._consumed:
                raise RuntimeError(
                    "graph shares nodes with an already-consumed backward pass; "
                    "rerun the forward pass first")
            if id(p) not in visited and p._backward is not None:
                stack.append((p, False))
            elif id(p) not in visited:
                visited.add(id(p))
                topo.append(p)

    loss.grad = seed.astype(loss.dtype, copy=True)
    loss._consumed = True
    for node in reversed(topo):
        if node._backward is None:
            continue  # leaf: parameters stay reusable across forward passes
        if node.grad is not None:
            node._backward(node.grad)
        node._consumed = True
        node._backward = None
        node._parents = ()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    data = a.data + b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), back, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    data = a.data * b.data

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), back, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    data = x.data * c

    def back(g):
        _accumulate(x, g * c)

    return _result(data, (x,), back, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics)."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def back(g):
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(data, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y[..., j] = sum_i x[..., i] w[i, j] (+ b[j]); the workhorse projection."""
    if w.ndim != 2:
        raise DimensionError(f"linear weight must be 2-D, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input last axis {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    data = np.matmul(x.data, w.data)
    if b is not None:
        data = data + b.data

    def back(g):
        _accumulate(x, np.matmul(g, w.data.T))
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, w.shape[1])
        _accumulate(w, x2.T @ g2)
        if b is not None:
            _accumulate(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _result(data, parents, back, "linear")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape)

    def back(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(data, (x,), back, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def back(g):
        _accumulate(x, g.transpose(inv))

    return _result(data, (x,), back, "transpose")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)
    count = 1
    for a in axes:
        count *= x.shape[a]
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape) / count)

    return _result(data, (x,), back, "mean")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to one."""
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, data * (g - inner))

    return _result(data, (x,), back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then
    apply the per-channel affine (gamma, beta)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def back(g):
        flat = g.reshape(-1, d)
        _accumulate(beta, flat.sum(axis=0))
        _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        h = g * gamma.data
        hm = h.mean(axis=-1, keepdims=True)
        hxm = (h * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (h - hm - xhat * hxm))

    return _result(data, (x, gamma, beta), back, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    data = kernels.gelu_forward(x.data)

    def back(g):
        _accumulate(x, kernels.gelu_backward(x.data, g))

    return _result(data, (x,), back, "gelu")


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3x3 convolution, stride 1, zero padding 1.

    ``x`` is [C, H, W] or [B, C, H, W]; output channel c depends only on input
    channel c and spatial shape is preserved.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise DimensionError(f"depthwise_conv2d expects [B,C,H,W] or [C,H,W], got {x.shape}")
    c = xd.shape[1]
    if kernel.shape != (c, 3, 3):
        raise DimensionError(f"depthwise kernel {kernel.shape} does not match {c} input channels")
    if bias is not None and bias.shape != (c,):
        raise DimensionError(f"depthwise bias {bias.shape} does not match {c} channels")
    xd = np.ascontiguousarray(xd)
    data = kernels.dwconv2d_forward(xd, np.ascontiguousarray(kernel.data))
    if bias is not None:
        data = data + bias.data[None, :, None, None]
    if squeeze:
        data = data[0]

    def back(g):
        g4 = np.ascontiguousarray(g[None] if squeeze else g)
        _accumulate(x, kernels.dwconv2d_input_grad(g4, kernel.data)[0] if squeeze
                    else kernels.dwconv2d_input_grad(g4, kernel.data))
        _accumulate(kernel, kernels.dwconv2d_kernel_grad(g4, xd))
        if bias is not None:
            _accumulate(bias, g4.sum(axis=(0, 2, 3)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(data, parents, back, "depthwise_conv2d")


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean softmax cross-entropy of [B, K] logits against integer labels.

    With ``smoothing`` s > 0 the target distribution becomes
    (1 - s) * onehot + s / K.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, K] logits, got {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if b and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    picked = (1.0 - smoothing) * z[np.arange(b), labels] + (smoothing / k) * z.sum(axis=1)
    data = np.asarray((lse - picked).mean(), dtype=z.dtype)

    def back(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(b), labels] -= 1.0 - smoothing
        p -= smoothing / k
        _accumulate(logits, p * (g / b))

    return _result(data, (logits,), back, "cross_entropy")
