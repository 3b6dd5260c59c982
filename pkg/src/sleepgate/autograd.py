"""Reverse-mode autodiff over dense numpy arrays.

Kernel set is exactly what the model needs: matmul, biased softmax, a small
elementwise suite, layernorm, fused masked cross-entropy, plus shape plumbing.
float32 is the working dtype; gradcheck runs the same kernels in float64.

Every kernel output (and every gradient buffer at propagation time) is checked
for NaN/Inf and raises NumericalError on the first non-finite value. Additive
attention masks may contain -inf but only ever live inside the softmax kernel,
so tensors stay finite.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class NumericalError(RuntimeError):
    """A forward or backward kernel produced a non-finite value."""


_no_grad_depth = 0


@contextlib.contextmanager
def no_grad():
    """Disable graph construction; forward values only."""
    global _no_grad_depth
    _no_grad_depth += 1
    try:
        yield
    finally:
        _no_grad_depth -= 1


def grad_enabled() -> bool:
    return _no_grad_depth == 0


_op_counter = 0


def _next_id() -> int:
    global _op_counter
    _op_counter += 1
    return _op_counter


def _guard(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite value out of kernel {op!r}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op="leaf"):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and grad_enabled()
        self._parents: tuple[Tensor, ...] = _parents if self.requires_grad else ()
        self._backward: Callable[[np.ndarray], None] | None = _backward if self.requires_grad else None
        self._op = _op
        self._id = _next_id()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Propagate from this (scalar or any-shape) tensor through the tape.

        Nodes are visited in reverse execution order, each exactly once.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        seen = {self._id}
        stack = [self]
        nodes = []
        while stack:
            t = stack.pop()
            nodes.append(t)
            for p in t._parents:
                if p.requires_grad and p._id not in seen:
                    seen.add(p._id)
                    stack.append(p)
        nodes.sort(key=lambda t: t._id, reverse=True)
        self.grad = np.ones_like(self.data)
        for t in nodes:
            if t._backward is None:
                continue
            if t.grad is None:
                continue
            _guard(t.grad, t._op + ".grad")
            t._backward(t.grad)

    # operator sugar over the kernel functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    req = grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(_guard(data, op), requires_grad=req, _parents=parents, _backward=backward, _op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = a.data * s

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _make(out_data, (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics; leading batch dims may broadcast."""
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward, "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out_data = np.ascontiguousarray(a.data.swapaxes(ax1, ax2))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(g.swapaxes(ax1, ax2)))

    return _make(out_data, (a,), backward, "swapaxes")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(np.ascontiguousarray(g[tuple(idx)]))

    return _make(out_data, parts, backward, "concat")


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Index the first axis with an integer array (embedding lookup)."""
    idx = np.asarray(idx)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a._accumulate(ga)

    return _make(out_data, (a,), backward, "gather_rows")


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Broadcast a size-1 axis up to n (copy); backward sums it back."""
    if a.data.shape[axis] != 1:
        raise ValueError(f"expand needs size-1 axis, got {a.data.shape}[{axis}]")
    reps = [1] * a.data.ndim
    reps[axis] = n
    out_data = np.tile(a.data, reps)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward, "expand")


# ---------------------------------------------------------------------------
# elementwise suite


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            a._accumulate(g * (cdf + x * pdf))

    return _make(out_data.astype(x.dtype, copy=False), (a,), backward, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, "sigmoid")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward, "log")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    out_data = np.maximum(a.data, floor)
    passthrough = a.data > floor

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * passthrough)

    return _make(out_data, (a,), backward, "clamp_min")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)
    passthrough = (a.data > lo) & (a.data < hi)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * passthrough)

    return _make(out_data, (a,), backward, "clamp")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(np.asarray(out_data), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = tsum(a)
    return scale(out, 1.0 / n)


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of a over positions where mask is true; 0 if mask is empty."""
    m = np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=a.data.dtype))
    w = m.astype(a.data.dtype) / count
    return tsum(mul(a, Tensor(w)))


def layernorm(a: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + shift.data

    def backward(g):
        if shift.requires_grad:
            shift._accumulate(_unbroadcast(g, shift.data.shape))
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if a.requires_grad:
            n = x.shape[-1]
            gx = g * gain.data
            dot1 = gx.sum(axis=-1, keepdims=True)
            dot2 = (gx * xhat).sum(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - dot1 / n - xhat * dot2 / n))

    return _make(out_data, (a, gain, shift), backward, "layernorm")


# ---------------------------------------------------------------------------
# softmax with additive bias, masked cross-entropy


def softmax_with_bias(logits: Tensor, bias: Tensor | None = None,
                      additive_mask: np.ndarray | None = None,
                      mult_mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis of logits plus an additive bias.

    bias broadcasts against the logits and carries gradient. additive_mask
    and mult_mask are constants applied before the softmax: the additive one
    may contain -inf (it never leaves this kernel), the multiplicative one
    rescales the raw scores. Zero (or None) bias reproduces the plain
    softmax through the identical code path.
    """
    z = logits.data
    if mult_mask is not None:
        z = z * mult_mask
    if bias is not None:
        z = z + bias.data
    if additive_mask is not None:
        z = z + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        dz = (g - inner) * out_data
        if logits.requires_grad:
            dl = dz if mult_mask is None else dz * mult_mask
            logits._accumulate(dl)
        if bias is not None and bias.requires_grad:
            bias._accumulate(_unbroadcast(dz, bias.data.shape))

    parents = (logits,) if bias is None else (logits, bias)
    return _make(out_data, parents, backward, "softmax_with_bias")


def softmax(logits: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    return softmax_with_bias(logits, None, additive_mask)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over masked positions.

    logits: (..., V); targets: integer array matching the leading shape;
    mask: boolean array matching the leading shape. Empty mask gives 0.
    """
    m = np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype))
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
    tgt = np.asarray(targets)
    picked = np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0]
    nll = (lse - picked) * m
    out_data = np.asarray(nll.sum() / count, dtype=z.dtype)

    def backward(g):
        if logits.requires_grad:
            p = np.exp(z - zmax)
            p /= p.sum(axis=-1, keepdims=True)
            flat_p = p.reshape(-1, z.shape[-1])
            flat_t = tgt.reshape(-1)
            flat_p[np.arange(flat_p.shape[0]), flat_t] -= 1.0
            gl = flat_p.reshape(z.shape) * (m[..., None] * (float(g) / count))
            logits._accumulate(gl.astype(z.dtype, copy=False))

    return _make(out_data, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
              step: float = 1e-4, tol: float = 1e-3,
              max_coords: int | None = None,
              rng: np.random.Generator | None = None) -> dict:
    """Compare backward gradients against float64 central differences.

    fn maps Tensors (one per input array) to a scalar Tensor. Every input
    coordinate is perturbed unless max_coords caps the per-input sample.
    Returns {'pass': bool, 'max_rel_err': float, 'per_input': [...]}.
    """
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    out = fn(*ts)
    if out.data.shape != ():
        raise ValueError("gradcheck expects a scalar-valued function")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in ts]

    per_input = []
    worst = 0.0
    for i, x in enumerate(xs):
        flat = x.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        num = np.zeros(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            with no_grad():
                hi = fn(*[Tensor(v.copy()) for v in xs]).item()
            flat[c] = orig - step
            with no_grad():
                lo = fn(*[Tensor(v.copy()) for v in xs]).item()
            flat[c] = orig
            num[j] = (hi - lo) / (2.0 * step)
        ana = analytic[i].reshape(-1)[coords]
        denom = max(np.abs(num).max(initial=0.0), np.abs(ana).max(initial=0.0), 1e-6)
        rel = float(np.abs(num - ana).max(initial=0.0) / denom)
        per_input.append(rel)
        worst = max(worst, rel)
    return {"pass": worst <= tol, "max_rel_err": worst, "per_input": per_input}
