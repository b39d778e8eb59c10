"""Minimal deterministic reverse-mode autodiff on 64-bit numpy arrays.

The graph is recorded on an explicit :class:`Tape`: ops append nodes in
creation order, which is already a topological order, and ``backward``
replays the tape once in reverse. Ops record only while a tape is open
(``with Tape(): ...``), so inference on frozen parameters is just numpy.

Everything is float64. Ops accept a leading batch dimension wherever the
model needs one; gradients for broadcast operands are summed back to the
operand's shape.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DegenerateMaskError, GraphError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

LAYER_NORM_EPS = 1e-5


class Tape:
    """Append-only record of executed ops, replayed in reverse by backward()."""

    _stacks = threading.local()

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    @classmethod
    def _stack(cls) -> list["Tape"]:
        stack = getattr(cls._stacks, "stack", None)
        if stack is None:
            stack = []
            cls._stacks.stack = stack
        return stack

    @classmethod
    def current(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None

    def __enter__(self) -> "Tape":
        self._stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = self._stack().pop()
        assert popped is self
        return False


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "index", "tape")

    def __init__(self, out, parents, backward_fn, index, tape):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = index
        self.tape = tape


class Tensor:
    """n-dimensional float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant copy: same values, no gradient history."""
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Create an op output, recording it on the active tape when needed."""
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        tape = Tape.current()
        if tape is not None:
            node = _Node(out, tuple(parents), backward_fn, len(tape.nodes), tape)
            tape.nodes.append(node)
            out.node = node
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting: reduce g back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every requires_grad ancestor.

    The tape is consumed: a second backward over the same tape raises.
    """
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    node = loss.node
    if node is None:
        raise GraphError("loss has no recorded graph; build it inside `with Tape():`")
    tape = node.tape
    if tape.consumed:
        raise GraphError("tape already consumed by a previous backward()")
    loss.grad = np.ones_like(loss.data)
    for nd in reversed(tape.nodes[: node.index + 1]):
        g = nd.out.grad
        if g is None:
            continue
        nd.backward_fn(g)
    tape.consumed = True


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _sum_to_shape(g, a.shape))
        _accum(b, _sum_to_shape(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _sum_to_shape(g * b.data, a.shape))
        _accum(b, _sum_to_shape(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, -g)

    return _make(-x.data, (x,), bw)


def absolute(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, g * np.sign(x.data))

    return _make(np.abs(x.data), (x,), bw)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def bw(g):
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _make(np.asarray(x.data.sum()), (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)

    def bw(g):
        _accum(x, g.transpose(inverse))

    return _make(x.data.transpose(axes), (x,), bw)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accum(x, full)

    return _make(x.data[index].copy(), (x,), bw)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accum(part, g[tuple(index)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions broadcast like np.matmul."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def bw(g):
        _accum(a, _sum_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), bw)


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(x, g * (cdf + x.data * pdf))

    return _make(x.data * cdf, (x,), bw)


# ---------------------------------------------------------------------------
# normalization and softmax family
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Standardize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bw(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))
        _accum(gamma, _sum_to_shape(g * xhat, gamma.shape))
        _accum(beta, _sum_to_shape(g, beta.shape))

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def masked_softmax(x: Tensor, valid: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to `valid` positions.

    Invalid positions output exactly 0; each row must keep at least one
    valid position.
    """
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), x.shape)
    if not valid.any(axis=-1).all():
        raise DegenerateMaskError("masked_softmax: a row has no valid position")
    shifted = np.where(valid, x.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    expd = np.where(valid, np.exp(shifted), 0.0)
    p = expd / expd.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        _accum(x, p * (g - inner))

    return _make(p, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bw(g):
        p = np.exp(out)
        _accum(x, g - p * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# sequence ops: convolution, pooling, span means
# ---------------------------------------------------------------------------


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    return x, False


def _debatch(y: Tensor, squeezed: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeezed else y


def conv1d(x: Tensor, kernel: Tensor, pad: int) -> Tensor:
    """1-D convolution over the sequence axis with zero padding.

    x: (L, C_in) or (B, L, C_in); kernel: (w, C_in, C_out). Output length
    is L + 2*pad - w + 1.
    """
    xb, squeezed = _batched(x)
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d kernel must be (w, C_in, C_out), got {kernel.shape}")
    w, c_in, _ = kernel.shape
    if w % 2 == 0:
        raise ShapeError(f"conv1d window must be odd, got {w}")
    if xb.shape[-1] != c_in:
        raise ShapeError(f"conv1d channels disagree: input {xb.shape}, kernel {kernel.shape}")
    length = xb.shape[1]
    l_out = length + 2 * pad - w + 1
    if l_out < 1:
        raise ShapeError(f"conv1d window {w} exceeds padded length {length + 2 * pad}")

    xp = np.zeros((xb.shape[0], length + 2 * pad, c_in))
    xp[:, pad : pad + length, :] = xb.data
    out = np.zeros((xb.shape[0], l_out, kernel.shape[2]))
    for t in range(w):
        out += np.matmul(xp[:, t : t + l_out, :], kernel.data[t])

    def bw(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        for t in range(w):
            gxp[:, t : t + l_out, :] += np.matmul(g, kernel.data[t].T)
            gk[t] = np.einsum("blc,blo->co", xp[:, t : t + l_out, :], g)
        _accum(xb, gxp[:, pad : pad + length, :])
        _accum(kernel, gk)

    return _debatch(_make(out, (xb, kernel), bw), squeezed)


def _pool_windows(length: int) -> np.ndarray:
    counts = np.full(length, 3.0)
    counts[0] -= 1.0
    counts[-1] -= 1.0
    if length == 1:
        counts[0] = 1.0
    return counts


def avg_pool1d(x: Tensor) -> Tensor:
    """Mean over a 3-wide window (stride 1); boundary windows divide by the
    number of in-range positions, so a constant sequence is unchanged."""
    xb, squeezed = _batched(x)
    b, length, c = xb.shape
    xp = np.zeros((b, length + 2, c))
    xp[:, 1:-1, :] = xb.data
    s = xp[:, :length, :] + xp[:, 1 : length + 1, :] + xp[:, 2 : length + 2, :]
    counts = _pool_windows(length)[None, :, None]
    out = s / counts

    def bw(g):
        gs = g / counts
        gxp = np.zeros_like(xp)
        gxp[:, :length, :] += gs
        gxp[:, 1 : length + 1, :] += gs
        gxp[:, 2 : length + 2, :] += gs
        _accum(xb, gxp[:, 1:-1, :])

    return _debatch(_make(out, (xb,), bw), squeezed)


def max_pool1d(x: Tensor) -> Tensor:
    """Max over a 3-wide window (stride 1); out-of-range positions ignored."""
    xb, squeezed = _batched(x)
    b, length, c = xb.shape
    xp = np.full((b, length + 2, c), -np.inf)
    xp[:, 1:-1, :] = xb.data
    cands = np.stack(
        [xp[:, :length, :], xp[:, 1 : length + 1, :], xp[:, 2 : length + 2, :]], axis=0
    )
    idx = cands.argmax(axis=0)
    out = cands.max(axis=0)

    def bw(g):
        gxp = np.zeros_like(xp)
        for k in range(3):
            routed = np.where(idx == k, g, 0.0)
            gxp[:, k : k + length, :] += routed
        _accum(xb, gxp[:, 1:-1, :])

    return _debatch(_make(out, (xb,), bw), squeezed)


def span_mean_map(z: Tensor, max_span: int) -> Tensor:
    """Pairwise span means: out[i, j] = mean of z rows [i, j) for i < j,
    z[i] itself on the diagonal, symmetric, zero beyond the span cap.

    z: (L, d) or (B, L, d) -> (L, L, d) or (B, L, L, d). Populated band is
    |i - j| < max_span.
    """
    zb, squeezed = _batched(z)
    b, length, d = zb.shape
    prefix = np.zeros((b, length + 1, d))
    np.cumsum(zb.data, axis=1, out=prefix[:, 1:, :])
    out = np.zeros((b, length, length, d))
    for i in range(length):
        out[:, i, i, :] = zb.data[:, i, :]
        hi = min(length, i + max_span)
        if hi > i + 1:
            js = np.arange(i + 1, hi)
            lens = (js - i).astype(np.float64)[None, :, None]
            vals = (prefix[:, js, :] - prefix[:, i : i + 1, :]) / lens
            out[:, i, js, :] = vals
            out[:, js, i, :] = vals

    def bw(g):
        # Interval-accumulation: each band cell (i, j) spreads its (and its
        # mirror's) gradient uniformly over z rows [i, j).
        diff = np.zeros((b, length + 1, d))
        for i in range(length):
            diff[:, i, :] += g[:, i, i, :]
            diff[:, i + 1, :] -= g[:, i, i, :]
            hi = min(length, i + max_span)
            if hi > i + 1:
                js = np.arange(i + 1, hi)
                lens = (js - i).astype(np.float64)[None, :, None]
                coef = (g[:, i, js, :] + g[:, js, i, :]) / lens
                diff[:, i, :] += coef.sum(axis=1)
                diff[:, js, :] -= coef
        _accum(zb, np.cumsum(diff, axis=1)[:, :length, :])

    out_t = _make(out, (zb,), bw)
    return reshape(out_t, (length, length, d)) if squeezed else out_t


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def gradcheck(f: Callable[..., Tensor], xs, h: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    f maps the given tensors to a scalar tensor; error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    for x in xs:
        x.grad = None
    with Tape():
        y = f(*xs)
        if y.size != 1:
            raise GraphError(f"gradcheck target must be scalar, got shape {y.shape}")
        if not np.isfinite(y.data).all():
            raise GraphError("gradcheck: f(x) is not finite")
        y.backward()
    worst = 0.0
    for x in xs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(f(*xs).data)
            flat[i] = keep - h
            dn = float(f(*xs).data)
            flat[i] = keep
            numeric = (up - dn) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
