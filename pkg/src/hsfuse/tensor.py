"""Small reverse-mode differentiation engine.

Only the operations the coupled unmixing network needs are provided. Arrays
are band-sequential ``(channels, height, width)``; the batch extent is always
one and is never stored. Parameters and activations are float32 during
training; gradient checks run the same code in float64.

Usage::

    with Tape() as tape:
        y = leaky_relu(conv2d(x, w, b, padding=1), 0.2)
        loss = l1_loss(y, target)
    backward(loss, tape)
    w.grad
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
KL_FLOOR = 1e-6

_ids = itertools.count()
_active: list["Tape"] = []


class NonFiniteError(ArithmeticError):
    """Raised when a forward value or gradient contains NaN or Inf."""


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "tid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; every operator goes through a recorded op.
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
        return scale(self, -1.0)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the operations executed while the tape is active."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite output from {op}")


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(op, out)
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs and _active:
        _active[-1].record(Node(op, inputs, result, vjp))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = as_tensor(a, like=b)
    else:
        b = as_tensor(b, like=a)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    """Pointwise product with numpy broadcasting."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), vjp)


pointwise_mul = mul


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)

    def vjp(g):
        return (g * c,)

    return _make("scale", x.data * c, (x,), vjp)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    """``x`` where non-negative, ``slope * x`` elsewhere. The subgradient at 0 is ``slope``."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)

    def vjp(g):
        return (g * factor,)

    return _make("leaky_relu", x.data * factor, (x,), vjp)


def clamp01(x: Tensor) -> Tensor:
    # Gradient passes only strictly inside (0, 1).
    inside = ((x.data > 0) & (x.data < 1)).astype(x.dtype)

    def vjp(g):
        return (g * inside,)

    return _make("clamp01", np.clip(x.data, 0.0, 1.0), (x,), vjp)


def _axes(x: Tensor, axis) -> tuple[int, ...]:
    if axis == "channel":
        return (0,)
    if axis == "spatial":
        if x.data.ndim < 2:
            raise ValueError("spatial softmax needs at least two dimensions")
        return (x.data.ndim - 2, x.data.ndim - 1)
    if isinstance(axis, int):
        return (axis,)
    return tuple(axis)


def softmax(x: Tensor, axis="channel") -> Tensor:
    """Softmax along ``"channel"`` (axis 0) or over all ``"spatial"`` positions."""
    axes = _axes(x, axis)
    if any(x.shape[a] == 0 for a in axes):
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axes, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axes, keepdims=True)),)

    return _make("softmax", y, (x,), vjp)


def log(x: Tensor) -> Tensor:
    def vjp(g):
        return (g / x.data,)

    return _make("log", np.log(x.data), (x,), vjp)


# ---------------------------------------------------------------------------
# shape and reductions


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"spatial extents differ: {a.shape} vs {b.shape}")
    ca = a.shape[0]

    def vjp(g):
        return g[:ca], g[ca:]

    return _make("concat_channels", np.concatenate([a.data, b.data], axis=0), (a, b), vjp)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make("reduce_sum", np.asarray(out, dtype=x.dtype), (x,), vjp)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def vjp(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _make("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,), vjp)


def normalize_sum(x: Tensor, axis=None) -> Tensor:
    """``x / x.sum(axis)``; used for the SRF columns and the PSF kernel."""
    s = x.data.sum(axis=axis, keepdims=True)
    if np.any(s == 0):
        raise ValueError("cannot normalize a slice that sums to zero")
    y = x.data / s

    def vjp(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) / s,)

    return _make("normalize_sum", y, (x,), vjp)


# ---------------------------------------------------------------------------
# linear maps


def channel_matmul(x: Tensor, w: Tensor) -> Tensor:
    """Per-pixel linear map: ``x`` is (Cin, H, W), ``w`` is (Cin, Cout)."""
    if x.shape[0] != w.shape[0]:
        raise ValueError(f"channel mismatch: {x.shape} vs {w.shape}")
    cin, h, wd = x.shape
    xm = x.data.reshape(cin, h * wd)
    out = (w.data.T @ xm).reshape(w.shape[1], h, wd)

    def vjp(g):
        gm = g.reshape(w.shape[1], h * wd)
        gx = (w.data @ gm).reshape(x.shape) if x.requires_grad else None
        gw = (xm @ gm.T) if w.requires_grad else None
        return gx, gw

    return _make("channel_matmul", out, (x, w), vjp)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (Cin, H, W) input with a (Cout, Cin, k, k) kernel."""
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    cin, h, wd = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ValueError(f"kernel expects {kcin} input channels, got {cin}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("convolution output would be empty")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    # cols[c, i, j] holds the input pixels seen by kernel tap (i, j) at every output position.
    cols = np.empty((cin, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + hs:stride, j:j + ws:stride]
    cols = cols.reshape(cin * kh * kw, ho * wo)
    wmat = kernel.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, ho, wo)
    inputs: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        out += bias.data[:, None, None]
        inputs = (x, kernel, bias)

    def vjp(g):
        gm = g.reshape(cout, ho * wo)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(cin, kh, kw, ho, wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + hs:stride, j:j + ws:stride] += dcols[:, i, j]
            gx = gxp[:, padding:padding + h, padding:padding + wd] if padding else gxp
        gk = (gm @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, gm.sum(axis=1)

    return _make("conv2d", np.ascontiguousarray(out), inputs, vjp)


def block_filter(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise stride-r filtering with one shared r x r kernel (disjoint blocks)."""
    r = kernel.shape[0]
    if kernel.shape != (r, r):
        raise ValueError(f"kernel must be square, got {kernel.shape}")
    c, h, wd = x.shape
    if h % r or wd % r:
        raise ValueError(f"extent {h}x{wd} is not divisible by ratio {r}")
    blocks = x.data.reshape(c, h // r, r, wd // r, r)
    out = np.einsum("cirjs,rs->cij", blocks, kernel.data)

    def vjp(g):
        gx = None
        if x.requires_grad:
            gx = (g[:, :, None, :, None] * kernel.data[None, None, :, None, :]).reshape(x.shape)
        gk = np.einsum("cirjs,cij->rs", blocks, g) if kernel.requires_grad else None
        return gx, gk

    return _make("block_filter", out, (x, kernel), vjp)


def avg_pool(x: Tensor, r: int) -> Tensor:
    return block_filter(x, Tensor(np.full((r, r), 1.0 / (r * r), dtype=x.dtype)))


# ---------------------------------------------------------------------------
# losses


def _spatial_weight(mask, like: Tensor) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask, dtype=like.dtype)
    if m.shape != like.shape[-2:]:
        raise ValueError(f"mask shape {m.shape} does not match {like.shape}")
    return m


def l1_loss(a: Tensor, b, mask=None) -> Tensor:
    """Mean absolute difference, optionally restricted to pixels where ``mask`` is 1."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    diff = a.data - b.data
    m = _spatial_weight(mask, a)
    if m is None:
        n = diff.size
        weights = None
    else:
        n = m.sum() * (diff.size // m.size)
        if n == 0:
            raise ValueError("mask selects no pixels")
        weights = np.broadcast_to(m, diff.shape)
    absdiff = np.abs(diff) if weights is None else np.abs(diff) * weights
    value = np.asarray(absdiff.sum() / n, dtype=a.dtype)

    def vjp(g):
        sgn = np.sign(diff) * (g / n)
        if weights is not None:
            sgn = sgn * weights
        return _unbroadcast(sgn, a.shape), _unbroadcast(-sgn, b.shape)

    return _make("l1_loss", value, (a, b), vjp)


def kl_div(eps: float, a: Tensor, mask=None, reduction: str = "sum") -> Tensor:
    """Bernoulli KL divergence ``KL(eps || a)`` summed (or averaged) over elements.

    ``a`` is clipped into ``[KL_FLOOR, 1 - KL_FLOOR]`` before the logarithms;
    the clipped region carries no gradient.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    ac = np.clip(a.data, KL_FLOOR, 1.0 - KL_FLOOR)
    live = ((a.data > KL_FLOOR) & (a.data < 1.0 - KL_FLOOR)).astype(a.dtype)
    terms = eps * np.log(eps / ac) + (1.0 - eps) * np.log((1.0 - eps) / (1.0 - ac))
    m = _spatial_weight(mask, a)
    weights = None if m is None else np.broadcast_to(m, a.shape)
    if weights is not None:
        terms = terms * weights
    if reduction == "sum":
        n = 1.0
    elif reduction == "mean":
        n = a.size if m is None else m.sum() * (a.size // m.size)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    value = np.asarray(terms.sum() / n, dtype=a.dtype)

    def vjp(g):
        d = (-eps / ac + (1.0 - eps) / (1.0 - ac)) * live * (g / n)
        if weights is not None:
            d = d * weights
        return (d.astype(a.dtype),)

    return _make("kl_div", value, (a,), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(t) for every tensor on ``tape``.

    Returns a map from tensor id to gradient and also stores the gradient
    on each leaf that requires it.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.tid: np.ones(loss.shape, dtype=loss.dtype)}
    produced = {node.output.tid for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.tid, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.tid in grads:
                grads[inp.tid] = grads[inp.tid] + gi
            else:
                grads[inp.tid] = np.asarray(gi, dtype=inp.dtype)
            if inp.tid not in produced:
                leaves[inp.tid] = inp
    for tid, leaf in leaves.items():
        g = grads[tid]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for leaf of shape {leaf.shape}")
        leaf.grad = g
    return {tid: grads[tid] for tid in leaves}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data -= update.astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# finite-difference self-check


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``x.data``."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b)) / denom


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``fn`` builds the scalar loss from ``inputs`` (which must be float64
    tensors with ``requires_grad``). Rounding makes the check meaningless
    in float32.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 tensors")
        t.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(fn, t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def kink_margin(tape: Tape) -> float:
    """Smallest distance from any recorded input to a point where its op is
    not differentiable (ReLU/clamp corners, L1 zero, KL clipping bounds).

    Exact ties (an L1 difference of exactly 0, a KL input pinned at 0 or 1)
    only arise downstream of a saturated clamp and stay put under small
    perturbations, so they are ignored. Finite differences are meaningful
    when the margin exceeds the step size times the local gain.
    """
    margin = math.inf
    for node in tape.nodes:
        x = node.inputs[0].data
        if node.op == "leaky_relu":
            d = np.abs(x)
        elif node.op == "clamp01":
            d = np.minimum(np.abs(x), np.abs(x - 1.0))
        elif node.op == "kl_div":
            inside = x[(x > 0.0) & (x < 1.0)]
            d = np.minimum(np.abs(inside - KL_FLOOR), np.abs(inside - 1.0 + KL_FLOOR))
        elif node.op == "l1_loss":
            d = np.abs(x - node.inputs[1].data)
            d = d[d > 0]
        else:
            continue
        if d.size:
            margin = min(margin, float(d.min()))
    return margin


def kaiming_std(fan_in: int, slope: float) -> float:
    return math.sqrt(2.0 / (1.0 + slope ** 2)) / math.sqrt(fan_in)
