"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable primitive used by the model lives here. A graph is built
only when at least one input requires a gradient, so inference under
:func:`no_grad` pays no bookkeeping cost.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward value or a perturbed objective became NaN or infinite."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-dimensional float64 array that can take part in a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64) if op == "leaf" else data
        if arr.ndim == 0 and op == "leaf":
            arr = arr.reshape(())
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by '{op}'")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
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
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators ---------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    # -- reverse pass ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every node requiring a gradient.

        Gradients from a previous call are overwritten, not summed, so calling
        ``backward`` twice on the same graph gives identical results.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, False, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scalar_mul")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError in _make
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; inputs below ``floor`` are clamped and pass no gradient."""
    xd = x.data
    safe = np.maximum(xd, floor) if floor > 0 else xd
    mask = xd >= floor
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(safe)
    return _make(out, (x,), lambda g: (np.where(mask, g / safe, 0.0),), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),), "sqrt")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    xd = x.data
    neg = alpha * np.expm1(np.minimum(xd, 0.0))
    out = np.where(xd > 0, xd, neg)
    return _make(out, (x,), lambda g: (g * np.where(xd > 0, 1.0, neg + alpha),), "elu")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. A zero rate or a missing generator is the identity."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _make(out, (a, b), backward, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit population variance, then scale and shift."""
    if x.shape[-1] < 2:
        raise ShapeError(f"layer_norm needs a last axis of at least 2, got {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward, "sum")


def _count(shape, axes) -> int:
    n = 1
    for a in axes:
        n *= shape[a]
    if n == 0:
        raise ShapeError(f"reduction over an empty axis of shape {shape}")
    return n


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = _count(x.shape, axes)
    return scalar_mul(reduce_sum(x, axes, keepdims), 1.0 / n)


def variance(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divide by N)."""
    axes = _norm_axis(axis, x.ndim)
    n = _count(x.shape, axes)
    xd = x.data
    xc = xd - xd.mean(axis=axes, keepdims=True)
    out = (xc * xc).mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * (2.0 / n) * xc,)

    return _make(out, (x,), backward, "variance")


def l2_norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """sqrt(sum(x**2)); the gradient at the origin is taken as zero."""
    axes = _norm_axis(axis, x.ndim)
    if x.size and axes:
        _count(x.shape, axes)
    xd = x.data
    out = np.sqrt((xd * xd).sum(axis=axes, keepdims=keepdims))

    def backward(g):
        o = out if keepdims else np.expand_dims(out, axes)
        gg = g if keepdims else np.expand_dims(g, axes)
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, gg * xd / safe, 0.0),)

    return _make(out, (x,), backward, "l2_norm")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def transpose_last_two(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter back with accumulation."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), backward, "take")


def slice_band(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis`` (the band axis by default)."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    if x.shape[axis] == 0 or not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    return take(x, tuple(index))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    kind: str = "standard",
    padding: tuple[int, int] = (0, 0),
) -> Tensor:
    """2-D cross-correlation (no kernel flip), stride 1, zero padding.

    ``x`` is ``(N, Cin, H, W)``. Weight layouts:

    * ``standard``/``pointwise``: ``(Cout, Cin, kh, kw)`` (pointwise requires 1x1)
    * ``depthwise``: ``(Cin * D, 1, kh, kw)``; output channel ``c*D + d`` reads input channel ``c``
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    ph, pw = padding
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    if kind == "pointwise" and (kh, kw) != (1, 1):
        raise ShapeError(f"pointwise kernels must be 1x1, got {(kh, kw)}")
    if kind in ("standard", "pointwise"):
        if wcin != cin:
            raise ShapeError(f"conv2d: weight expects {wcin} input channels, input has {cin}")
    elif kind == "depthwise":
        if wcin != 1 or cout % cin:
            raise ShapeError(f"depthwise weight {weight.shape} incompatible with {cin} input channels")
    else:
        raise ValueError(f"unknown convolution kind {kind!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    wd = weight.data
    depth = cout // cin
    out = np.zeros((n, cout, ho, wo))
    if kind == "depthwise":
        wdd = wd.reshape(cin, depth, kh, kw)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + ho, j:j + wo]
                out += (patch[:, :, None] * wdd[None, :, :, i, j, None, None]).reshape(n, cout, ho, wo)
    else:
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + ho, j:j + wo]
                out += np.einsum("nchw,oc->nohw", patch, wd[:, :, i, j], optimize=False)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        if kind == "depthwise":
            g5 = g.reshape(n, cin, depth, ho, wo)
            wdd = wd.reshape(cin, depth, kh, kw)
            gw5 = None if gw is None else gw.reshape(cin, depth, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + ho, j:j + wo]
                    if gx is not None:
                        gx[:, :, i:i + ho, j:j + wo] += np.einsum("ncdhw,cd->nchw", g5, wdd[:, :, i, j], optimize=False)
                    if gw5 is not None:
                        gw5[:, :, i, j] = np.einsum("ncdhw,nchw->cd", g5, patch, optimize=False)
        else:
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + ho, j:j + wo]
                    if gx is not None:
                        gx[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", g, wd[:, :, i, j], optimize=False)
                    if gw is not None:
                        gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch, optimize=False)
        if gx is not None and (ph or pw):
            gx = gx[:, :, ph:ph + h, pw:pw + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, f"conv2d[{kind}]")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over every coordinate.

    ``f`` must rebuild its graph from ``params`` on each call. Parameters are
    perturbed in place and restored afterwards. The error for a coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if loss.size != 1:
        raise ShapeError("grad_check objective must be scalar")
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise ValueError("grad_check needs contiguous parameter arrays")
            a_flat = a.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                try:
                    flat[k] = orig + eps
                    fp = f().item()
                    flat[k] = orig - eps
                    fm = f().item()
                except NonFiniteError as exc:
                    raise NonFiniteError(f"objective not finite near coordinate {k} of {p.shape}") from exc
                finally:
                    flat[k] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NonFiniteError(f"objective not finite near coordinate {k} of {p.shape}")
                num = (fp - fm) / (2.0 * eps)
                err = abs(a_flat[k] - num) / max(1.0, abs(a_flat[k]), abs(num))
                worst = max(worst, err)
    return worst
