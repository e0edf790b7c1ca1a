"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure propagating the upstream gradient into them.  ``backward`` walks the
recorded graph in reverse topological order.

Storage is float32.  Ops keep numpy's result dtype, so feeding a float64
tensor (as :func:`finite_diff_check` does) runs the whole dependent graph in
float64.  Reductions always accumulate in float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """An n-dimensional array that can take part in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _prev: tuple = (), _op: str = ""):
        self.data = _as_array(data)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._prev = _prev
        self._backward: Callable[[], None] | None = None
        self._op = _op
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph plumbing ---------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor that requires it.

        Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            if node._prev:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS post-order; each node appears exactly once."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result; attach a backward rule when any parent needs grads."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _prev=tuple(parents) if needs else (), _op=op)
    if needs:
        def _run():
            backward(out.grad)
        out._backward = _run
    return out


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _operand(x):
    """Tensor passes through; scalars and arrays become constants."""
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return float(x)
    return Tensor(x)


# -- elementwise ----------------------------------------------------------
def add(a: Tensor, b) -> Tensor:
    b = _operand(b)
    if isinstance(b, float):
        return _make(a.data + b, (a,), "add", lambda g: a._accumulate(g))
    _check_same_shape(a.data, b.data, "add")

    def bw(g):
        a._accumulate(g)
        b._accumulate(g)
    return _make(a.data + b.data, (a, b), "add", bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: a._accumulate(-g))


def sub(a: Tensor, b) -> Tensor:
    b = _operand(b)
    if isinstance(b, float):
        return add(a, -b)
    return add(a, neg(b))


def mul(a: Tensor, b) -> Tensor:
    b = _operand(b)
    if isinstance(b, float):
        return _make(a.data * b, (a,), "scale", lambda g: a._accumulate(g * b))
    _check_same_shape(a.data, b.data, "mul")

    def bw(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)
    return _make(a.data * b.data, (a, b), "mul", bw)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), "square", lambda g: a._accumulate(2.0 * g * a.data))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: a._accumulate(g * out))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: a._accumulate(g / a.data))


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), "abs", lambda g: a._accumulate(g * np.sign(a.data)))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clamp", lambda g: a._accumulate(g * inside))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ParameterError(f"leaky_relu slope must be in [0, 1), got {slope}")
    slope = float(slope)
    pos = a.data >= 0
    out = np.where(pos, a.data, a.data * slope)
    return _make(out, (a,), "leaky_relu", lambda g: a._accumulate(np.where(pos, g, g * slope)))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _make(out, (a,), "sigmoid", lambda g: a._accumulate(g * out * (1.0 - out)))


# -- reductions and reshapes ----------------------------------------------
def tsum(a: Tensor) -> Tensor:
    total = np.sum(a.data, dtype=np.float64).astype(a.data.dtype)
    return _make(total, (a,), "sum", lambda g: a._accumulate(np.broadcast_to(g, a.shape)))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    total = (np.sum(a.data, dtype=np.float64) / n).astype(a.data.dtype)
    return _make(total, (a,), "mean", lambda g: a._accumulate(np.broadcast_to(g / n, a.shape)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}") from exc
    return _make(out, (a,), "reshape", lambda g: a._accumulate(g.reshape(a.shape)))


def global_avg_pool(a: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    if a.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {a.shape}")
    n, c, h, w = a.shape
    out = a.data.mean(axis=(2, 3), dtype=np.float64).astype(a.data.dtype)

    def bw(g):
        a._accumulate(np.broadcast_to((g / (h * w))[:, :, None, None], a.shape))
    return _make(out, (a,), "gap", bw)


# -- layers -----------------------------------------------------------------
def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for x: [N, D], weight: [D, E], bias: [E]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: bias {bias.shape} does not match output width {weight.shape[1]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias is not None:
            bias._accumulate(g.sum(axis=0, dtype=np.float64))
    return _make(out, parents, "dense", bw)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    """floor((size + 2*padding - k) / stride) + 1; must be positive."""
    span = size + 2 * padding - k
    if span < 0:
        raise DimensionError(
            f"conv2d: spatial extent {size} with padding {padding} is smaller than kernel {k}")
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x: [N, C, H, W] with kernel: [F, C, k, k] (im2col + GEMM)."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be [N,C,H,W], got {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d: kernel must be [F,C,k,k], got {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, k, _ = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input channel axis (1) has {c}, kernel channel axis (1) has {kc}")
    if k % 2 == 0:
        raise ParameterError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: bad stride {stride} / padding {padding}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {f} filters")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)

    # channel-major padded copy: [C, N, Hp, Wp]
    xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.data.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x.data.transpose(1, 0, 2, 3)
    # cols[i, j, c] holds the (i, j) tap of every output position: [k, k, C, N, Ho, Wo]
    cols = np.empty((k, k, c, n, ho, wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(k * k * c, n * ho * wo)
    kmat = kernel.data.transpose(0, 2, 3, 1).reshape(f, k * k * c)
    out = kmat @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(f, n * ho * wo)
        if kernel.requires_grad:
            kernel._accumulate((g2 @ cols.T).reshape(f, k, k, c).transpose(0, 3, 1, 2))
        if bias is not None:
            bias._accumulate(g2.sum(axis=1, dtype=np.float64))
        if x.requires_grad:
            dcols = (kmat.T @ g2).reshape(k, k, c, n, ho, wo)
            dxp = np.zeros(xp.shape, dtype=dcols.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[i, j]
            x._accumulate(dxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3))
    return _make(out, parents, "conv2d", bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate every pixel into a factor x factor block."""
    if factor <= 0:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise DimensionError(f"upsample_nearest expects [N,C,H,W], got {x.shape}")
    if factor == 1:
        return _make(x.data.copy(), (x,), "upsample", lambda g: x._accumulate(g))
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        x._accumulate(g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))
    return _make(out, (x,), "upsample", bw)


# -- verification -----------------------------------------------------------
def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between ``backward()`` and central differences.

    ``x`` is promoted to float64 for the duration of the check so that the
    oracle is not swamped by float32 rounding; its original data is restored.
    Relative error uses the denominator ``max(|a|, |b|, 1e-8)``.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    original, was_req = x.data, x.requires_grad
    x.data = original.astype(np.float64)
    x.requires_grad = True
    try:
        x.grad = None
        loss = f(x)
        loss.backward()
        analytic = np.zeros(x.shape) if x.grad is None else np.asarray(x.grad, dtype=np.float64)
        x.grad = None
        numeric = np.zeros(x.shape)
        flat = x.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                up = float(np.asarray(f(x).data, dtype=np.float64))
                flat[i] = keep - eps
                down = float(np.asarray(f(x).data, dtype=np.float64))
                flat[i] = keep
                numeric.reshape(-1)[i] = (up - down) / (2.0 * eps)
    finally:
        x.data = original
        x.requires_grad = was_req
        x.grad = None
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
