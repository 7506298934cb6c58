"""Differentiable primitives.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients.  Broadcasting follows numpy; the
backward pass sums gradients back to each operand's shape.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .core import Tensor, default_dtype, make_result


def _t(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_result("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_result("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _t(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _t(a)
    ad = a.data
    return make_result(
        "pow", ad ** exponent, (a,),
        lambda g: (g * exponent * ad ** (exponent - 1),),
    )


def exp(a) -> Tensor:
    a = _t(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _t(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return make_result("log", out, (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _t(a)
    out = np.sqrt(a.data)
    return make_result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    return make_result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = _sigmoid(a.data)
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a) -> Tensor:
    a = _t(a)
    x = a.data
    s = _sigmoid(x)
    return make_result("silu", x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def clamp_min(a, floor: float) -> Tensor:
    a = _t(a)
    x = a.data
    return make_result("clamp_min", np.maximum(x, floor), (a,), lambda g: (g * (x > floor),))


def relu(a) -> Tensor:
    a = _t(a)
    x = a.data
    return make_result("relu", np.maximum(x, 0), (a,), lambda g: (g * (x > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Gaussian-error linear unit, tanh approximation."""
    a = _t(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return make_result("gelu", out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _t(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_result("mean", np.mean(a.data, axis=axes, keepdims=keepdims), (a,), bw)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _t(a)
    old = a.shape
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), check_finite=False)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _t(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(
        "transpose", np.transpose(a.data, axes), (a,),
        lambda g: (np.transpose(g, inverse),), check_finite=False,
    )


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _t(a)
    perm = list(range(a.ndim))
    perm[ax1], perm[ax2] = perm[ax2], perm[ax1]
    return transpose(a, perm)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_t(x) for x in tensors]
    axis = axis % ts[0].ndim
    sizes = [x.shape[axis] for x in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return make_result("concat", np.concatenate([x.data for x in ts], axis=axis), ts, bw, check_finite=False)


def getitem(a, index) -> Tensor:
    a = _t(a)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return make_result("getitem", a.data[index], (a,), bw, check_finite=False)


def take_rows(table, indices: np.ndarray) -> Tensor:
    """Gather rows ``table[indices]`` (embedding lookup)."""
    table = _t(table)
    indices = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, indices.reshape(-1), g.reshape(-1, *shape[1:]))
        return (out,)

    return make_result("take_rows", table.data[indices], (table,), bw, check_finite=False)


def stop_gradient(a) -> Tensor:
    a = _t(a)
    return Tensor(a.data, requires_grad=False, dtype=a.dtype)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result("matmul", ad @ bd, (a, b), bw)


# ---------------------------------------------------------------------------
# normalisation, softmax, losses
# ---------------------------------------------------------------------------

def softmax_lastdim(x) -> Tensor:
    x = _t(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result("softmax", out, (x,), bw)


def log_softmax_lastdim(x) -> Tensor:
    x = _t(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return make_result("log_softmax", out, (x,), bw)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = _t(x)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("layer_norm needs a last dimension of at least 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_result("layer_norm", xhat, (x,), bw)


def cross_entropy(
    logits,
    labels: np.ndarray,
    class_weights: np.ndarray | None = None,
    ignore_label: int | None = None,
) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (N x K).

    With ``class_weights`` the mean is weighted by the weight of each target
    class.  Entries equal to ``ignore_label`` are excluded.
    """
    logits = _t(logits)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects N x K logits, got {logits.shape}")
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} logit rows")
    keep = np.ones(n, dtype=bool) if ignore_label is None else labels != ignore_label
    if not keep.any():
        raise ValueError("cross_entropy: every entry is ignored")
    kept = labels[keep]
    if kept.min() < 0 or kept.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    safe = np.where(keep, labels, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    w = np.where(keep, 1.0, 0.0).astype(logits.dtype)
    if class_weights is not None:
        w = w * np.asarray(class_weights, dtype=logits.dtype)[safe]
    total = w.sum()
    nll = -logp[np.arange(n), safe]
    loss = np.asarray((w * nll).sum() / total, dtype=logits.dtype)

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(n), safe] -= 1.0
        return (grad * (w / total)[:, None] * g,)

    return make_result("cross_entropy", loss, (logits,), bw)


# ---------------------------------------------------------------------------
# sampling and convolution
# ---------------------------------------------------------------------------

def bilinear_matrix(uv: np.ndarray, height: int, width: int) -> sp.csr_matrix:
    """Sparse N x (H*W) interpolation matrix for normalised coordinates ``uv``.

    ``uv[:, 0]`` indexes the first plane axis and ``uv[:, 1]`` the second, both
    in [0, 1] with cell centres at ``(i + 0.5) / size``.  Coordinates outside
    the plane are clamped to the border cells.
    """
    uv = np.asarray(uv, dtype=np.float64)
    u = np.clip(uv[:, 0] * height - 0.5, 0.0, height - 1.0)
    v = np.clip(uv[:, 1] * width - 0.5, 0.0, width - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), height - 1)
    v0 = np.minimum(np.floor(v).astype(np.int64), width - 1)
    u1 = np.minimum(u0 + 1, height - 1)
    v1 = np.minimum(v0 + 1, width - 1)
    fu, fv = u - u0, v - v0
    n = uv.shape[0]
    rows = np.repeat(np.arange(n), 4)
    cols = np.stack([u0 * width + v0, u0 * width + v1, u1 * width + v0, u1 * width + v1], axis=1).reshape(-1)
    vals = np.stack([(1 - fu) * (1 - fv), (1 - fu) * fv, fu * (1 - fv), fu * fv], axis=1).reshape(-1)
    m = sp.csr_matrix((vals, (rows, cols)), shape=(n, height * width))
    m.sum_duplicates()
    return m


def bilinear_sample_2d(plane, uv: np.ndarray | sp.csr_matrix) -> Tensor:
    """Bilinearly sample ``plane`` (H x W x C, or B x H x W x C) at ``uv`` (N x 2).

    Returns N x C (or B x N x C).  ``uv`` may also be a precomputed matrix
    from :func:`bilinear_matrix`.  Differentiable with respect to ``plane``.
    """
    plane = _t(plane)
    batched = plane.ndim == 4
    if plane.ndim not in (3, 4):
        raise ValueError(f"plane must be H x W x C or B x H x W x C, got {plane.shape}")
    b = plane.shape[0] if batched else 1
    h, w, c = plane.shape[-3:]
    m = uv if sp.issparse(uv) else bilinear_matrix(uv, h, w)
    m = m.astype(plane.dtype)
    mt = m.T.tocsr()
    # (H*W) x (B*C) layout lets a single sparse product serve the whole batch.
    flat = np.moveaxis(plane.data.reshape(b, h * w, c), 0, 1).reshape(h * w, b * c)
    n = m.shape[0]
    out = np.asarray(m @ flat).reshape(n, b, c)
    out = np.moveaxis(out, 1, 0)
    if not batched:
        out = out[0]
    out = np.ascontiguousarray(out)

    def bw(g):
        gb = g if batched else g[None]
        gflat = np.moveaxis(gb, 0, 1).reshape(n, b * c)
        gp = np.asarray(mt @ gflat).reshape(h * w, b, c)
        gp = np.moveaxis(gp, 1, 0).reshape(b, h, w, c)
        return (gp if batched else gp[0],)

    return make_result("bilinear_sample_2d", out, (plane,), bw)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv3d(x, weight, bias=None, stride: int = 1, padding: int = 1) -> Tensor:
    """3-D convolution in channels-last layout.

    ``x``: B x X x Y x Z x Cin, ``weight``: kx x ky x kz x Cin x Cout.
    Implemented as one matrix product per kernel offset, which keeps the
    reduction order fixed.
    """
    x, weight = _t(x), _t(weight)
    parents = [x, weight]
    if bias is not None:
        bias = _t(bias)
        parents.append(bias)
    bsz, sx, sy, sz, cin = x.shape
    kx, ky, kz, wcin, cout = weight.shape
    if wcin != cin:
        raise ValueError(f"conv3d channel mismatch: input {cin}, kernel {wcin}")
    p, s = padding, stride
    ox, oy, oz = _conv_out(sx, kx, s, p), _conv_out(sy, ky, s, p), _conv_out(sz, kz, s, p)
    if min(ox, oy, oz) < 1:
        raise ValueError("conv3d output would be empty")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    wd = weight.data
    out = np.zeros((bsz, ox, oy, oz, cout), dtype=np.result_type(x.dtype, wd.dtype))
    offsets = [(i, j, k) for i in range(kx) for j in range(ky) for k in range(kz)]

    def window(i, j, k):
        return (
            slice(None),
            slice(i, i + s * (ox - 1) + 1, s),
            slice(j, j + s * (oy - 1) + 1, s),
            slice(k, k + s * (oz - 1) + 1, s),
        )

    for i, j, k in offsets:
        out += xp[window(i, j, k)] @ wd[i, j, k]
    if bias is not None:
        out += bias.data

    def bw(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        g2 = g.reshape(-1, cout)
        for i, j, k in offsets:
            win = window(i, j, k)
            if gw is not None:
                gw[i, j, k] = xp[win].reshape(-1, cin).T @ g2
            if gx is not None:
                gx[win] += g @ wd[i, j, k].T
        if gx is not None:
            gx = gx[:, p:p + sx, p:p + sy, p:p + sz]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_result("conv3d", out, parents, bw)


# ---------------------------------------------------------------------------
# operator overloads
# ---------------------------------------------------------------------------

def _install() -> None:
    T = Tensor
    T.__add__ = lambda a, b: add(a, b)
    T.__radd__ = lambda a, b: add(b, a)
    T.__sub__ = lambda a, b: sub(a, b)
    T.__rsub__ = lambda a, b: sub(b, a)
    T.__mul__ = lambda a, b: mul(a, b)
    T.__rmul__ = lambda a, b: mul(b, a)
    T.__truediv__ = lambda a, b: div(a, b)
    T.__rtruediv__ = lambda a, b: div(b, a)
    T.__neg__ = lambda a: neg(a)
    T.__pow__ = lambda a, e: power(a, e)
    T.__matmul__ = lambda a, b: matmul(a, b)
    T.__getitem__ = lambda a, idx: getitem(a, idx)
    T.sum = lambda a, axis=None, keepdims=False: sum(a, axis, keepdims)
    T.mean = lambda a, axis=None, keepdims=False: mean(a, axis, keepdims)
    T.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)
    T.transpose = lambda a, *axes: transpose(a, axes[0] if len(axes) == 1 and not isinstance(axes[0], int) else (axes or None))
    T.exp = lambda a: exp(a)
    T.log = lambda a: log(a)


_install()
