"""Differentiable primitives.

Broadcasting is limited to leading batch dimensions: two operands conform if
their shapes are equal, one of them is a scalar, or the shorter shape equals
the trailing part of the longer one. Anything else needs an explicit reshape.
"""

from __future__ import annotations

import builtins
import math

import numpy as np

from .tensor import ShapeError, SingularMatrixError, Tensor, as_tensor

ACOS_CLAMP = 1e-7
SINGULAR_DET = 1e-12


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _check_leading(sa: tuple, sb: tuple, op: str) -> None:
    if sa == sb or len(sa) == 0 or len(sb) == 0:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {sa} and {sb} differ beyond leading batch dims")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    if g.shape != shape:  # scalar operand
        g = g.sum().reshape(shape)
    return g


# -- elementwise binary ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_leading(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_leading(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb) if b.requires_grad else None

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_leading(a.shape, b.shape, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_leading(a.shape, b.shape, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,), "neg")


# -- elementwise unary ----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask
    return Tensor._from_op(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split on sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sin(x: Tensor) -> Tensor:
    return Tensor._from_op(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x: Tensor) -> Tensor:
    return Tensor._from_op(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def acos(x: Tensor) -> Tensor:
    """Inverse cosine of the input clamped to [-1 + 1e-7, 1 - 1e-7].

    The derivative is that of the clamped composite: zero where the clamp is
    active, ``-1/sqrt(1 - x^2)`` elsewhere.
    """
    lo, hi = -1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP
    clamped = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        return (np.where(inside, -g / np.sqrt(1.0 - clamped * clamped), 0.0).astype(g.dtype, copy=False),)

    return Tensor._from_op(np.arccos(clamped), (x,), backward, "acos")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, "softmax")


# -- shape manipulation ---------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, builtins.slice, type(None), type(Ellipsis))) for i in items)


def slice(x: Tensor, index) -> Tensor:
    """``x[index]`` with any numpy index; repeated integer indices accumulate."""
    out = x.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return Tensor._from_op(out if basic else np.asarray(out), (x,), backward, "slice")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    src = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._from_op(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


# -- linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two dims."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    _check_leading(a.shape[:-2], b.shape[:-2], "matmul")
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), sa)
        if b.requires_grad:
            if b.ndim == 2:
                # fold batch dims into one GEMM instead of summing B small ones
                gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, sb)
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


def _check_2x2(m: Tensor, op: str) -> None:
    if m.ndim < 2 or m.shape[-2:] != (2, 2):
        raise ShapeError(f"{op}: trailing dims must be 2x2, got {m.shape}")


def det2x2(m: Tensor) -> Tensor:
    _check_2x2(m, "det2x2")
    d = m.data
    out = d[..., 0, 0] * d[..., 1, 1] - d[..., 0, 1] * d[..., 1, 0]

    def backward(g):
        cof = np.empty_like(d)
        cof[..., 0, 0] = d[..., 1, 1]
        cof[..., 0, 1] = -d[..., 1, 0]
        cof[..., 1, 0] = -d[..., 0, 1]
        cof[..., 1, 1] = d[..., 0, 0]
        return (cof * g[..., None, None],)

    return Tensor._from_op(np.asarray(out), (m,), backward, "det2x2")


def inverse2x2(m: Tensor) -> Tensor:
    """Closed-form inverse via the adjugate; raises on ``|det| < 1e-12``."""
    _check_2x2(m, "inverse2x2")
    d = m.data
    det = d[..., 0, 0] * d[..., 1, 1] - d[..., 0, 1] * d[..., 1, 0]
    if np.any(np.abs(det) < SINGULAR_DET):
        raise SingularMatrixError("inverse2x2: determinant below 1e-12")
    inv = np.empty_like(d)
    inv[..., 0, 0] = d[..., 1, 1]
    inv[..., 0, 1] = -d[..., 0, 1]
    inv[..., 1, 0] = -d[..., 1, 0]
    inv[..., 1, 1] = d[..., 0, 0]
    inv /= det[..., None, None]

    def backward(g):
        inv_t = np.swapaxes(inv, -1, -2)
        return (-(inv_t @ g @ inv_t),)

    return Tensor._from_op(inv, (m,), backward, "inverse2x2")


def trace(m: Tensor) -> Tensor:
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ShapeError(f"trace: trailing dims must be square, got {m.shape}")
    eye = np.eye(m.shape[-1], dtype=m.dtype)
    out = np.trace(m.data, axis1=-2, axis2=-1)
    return Tensor._from_op(np.asarray(out), (m,), lambda g: (g[..., None, None] * eye,), "trace")


# -- network layers ---------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' cross-correlation in channels-last layout.

    Args:
        x: input of shape (B, H, W, C_in).
        w: kernel of shape (kh, kw, C_in, C_out), odd kh and kw.
        bias: optional (C_out,).

    Returns:
        Tensor of shape (B, H, W, C_out).

    The padded images are laid out as one flat (rows, C) matrix. Shifting the
    kernel by (dk, dl) is then a constant row offset ``dk*Wp + dl``, so each
    kernel row becomes one GEMM over a contiguous view. Rows that land in the
    padding are computed and discarded.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    B, H, W, C = x.shape
    kh, kw, cin, cout = w.shape
    if cin != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel extents must be odd for same padding")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ph, pw = kh // 2, kw // 2
    Hp, Wp = H + 2 * ph, W + 2 * pw
    rows = B * Hp * Wp
    valid_rows = rows - (kh - 1) * Wp
    dtype = np.result_type(x.dtype, w.dtype)

    padded = np.zeros((rows + kw - 1, C), dtype=dtype)
    padded[:rows].reshape(B, Hp, Wp, C)[:, ph:ph + H, pw:pw + W, :] = x.data
    # column block dl holds the image shifted left by dl
    shifted = np.empty((rows, kw * C), dtype=dtype)
    for dl in range(kw):
        shifted[:, dl * C:(dl + 1) * C] = padded[dl:dl + rows]
    del padded
    wmat = w.data.reshape(kh, kw * C, cout)

    flat = np.zeros((rows, cout), dtype=dtype)
    for dk in range(kh):
        flat[:valid_rows] += shifted[dk * Wp:dk * Wp + valid_rows] @ wmat[dk]
    out = flat.reshape(B, Hp, Wp, cout)[:, :H, :W, :]
    if bias is not None:
        out = out + bias.data
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        gflat = np.zeros((rows, cout), dtype=g.dtype)
        gflat.reshape(B, Hp, Wp, cout)[:, :H, :W, :] = g
        gv = gflat[:valid_rows]
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.stack([shifted[dk * Wp:dk * Wp + valid_rows].T @ gv for dk in range(kh)])
            gw = gw.reshape(kh, kw, C, cout)
        if x.requires_grad:
            gshift = np.zeros((rows, kw * C), dtype=g.dtype)
            for dk in range(kh):
                gshift[dk * Wp:dk * Wp + valid_rows] += gv @ wmat[dk].T
            gpad = np.zeros((rows + kw - 1, C), dtype=g.dtype)
            for dl in range(kw):
                gpad[dl:dl + rows] += gshift[:, dl * C:(dl + 1) * C]
            gx = np.ascontiguousarray(gpad[:rows].reshape(B, Hp, Wp, C)[:, ph:ph + H, pw:pw + W, :])
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._from_op(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor, kernel: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling over axes 1 and 2 of a (B, H, W, C) tensor.

    On ties the gradient goes to the first maximal element of the window.
    """
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected (B, H, W, C), got {x.shape}")
    B, H, W, C = x.shape
    ph, pw = kernel
    if H % ph or W % pw:
        raise ShapeError(f"max_pool2d: {kernel} does not tile spatial dims {(H, W)}")
    Ho, Wo = H // ph, W // pw
    # (B, Ho, ph, Wo, pw, C) is a free view; window element (i, j) is [:, :, i, :, j, :]
    windows = x.data.reshape(B, Ho, ph, Wo, pw, C)
    out = windows[:, :, 0, :, 0, :].copy()
    for i in range(ph):
        for j in range(pw):
            if i or j:
                np.maximum(out, windows[:, :, i, :, j, :], out=out)

    def backward(g):
        gx = np.zeros(windows.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for i in range(ph):
            for j in range(pw):
                hit = windows[:, :, i, :, j, :] == out
                hit &= ~taken
                taken |= hit
                np.multiply(g, hit, out=gx[:, :, i, :, j, :])
        return (gx.reshape(B, H, W, C),)

    return Tensor._from_op(out, (x,), backward, "max_pool2d")


def _colsum(a: np.ndarray) -> np.ndarray:
    # GEMV reduction; an order of magnitude faster than a.sum(axis=0) on tall arrays
    return np.ones(a.shape[0], dtype=a.dtype) @ a


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of a channels-last tensor.

    In training mode the batch statistics over all non-channel axes are used
    and the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm2d: affine params must be ({C},)")
    flat = x.data.reshape(-1, C)
    m = flat.shape[0]
    if training:
        mu = _colsum(flat) / m
        xhat = flat - mu
        var = np.einsum("ij,ij->j", xhat, xhat) / m
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        xhat = flat - running_mean.astype(flat.dtype)
        var = running_var.astype(flat.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(flat.dtype)
    xhat *= inv_std
    out = xhat * gamma.data
    out += beta.data

    def backward(g):
        g2 = g.reshape(-1, C)
        gsum = _colsum(g2)
        gxhat_sum = np.einsum("ij,ij->j", g2, xhat)
        gx = None
        if x.requires_grad:
            scale = gamma.data * inv_std
            if training:
                gx = g2 * scale
                gx -= xhat * (scale * gxhat_sum / m)
                gx -= scale * gsum / m
            else:
                gx = g2 * scale
            gx = gx.reshape(x.shape)
        return gx, gxhat_sum if gamma.requires_grad else None, gsum if beta.requires_grad else None

    return Tensor._from_op(out.reshape(x.shape), (x, gamma, beta), backward, "batch_norm2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: affine params must be ({D},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        ggamma = _unbroadcast(g * xhat, (D,)) if gamma.requires_grad else None
        gbeta = _unbroadcast(g, (D,)) if beta.requires_grad else None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = (gxhat - gxhat.mean(axis=-1, keepdims=True)
                  - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)) * inv_std
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward, "layer_norm")
