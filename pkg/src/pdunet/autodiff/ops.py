"""Differentiable operators on NCHW tensors."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, grad_enabled


def _result(data, parents, backward_fn, op):
    req = grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=parents if req else (), backward_fn=backward_fn if req else None, op=op)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ------------------------------------------------------------ elementwise


def add(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return _result(a.data + b, (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b, a.dtype)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add(a, -b)
    return add(a, neg(as_tensor(b)))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        try:
            out = a.data * c
        except ValueError as exc:
            raise ShapeError(f"mul: cannot combine {a.shape} with constant {c.shape}") from exc
        if out.shape != a.shape:
            raise ShapeError(f"mul: constant of shape {c.shape} would broadcast {a.shape} to {out.shape}")
        return _result(out, (a,), lambda g: (g * c,), "mul_const")
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def affine(x, scale, shift):
    """``x * scale + shift`` with constant (non-differentiable) broadcastable arrays."""
    scale = np.asarray(scale, dtype=x.dtype)
    shift = np.asarray(shift, dtype=x.dtype)
    out = x.data * scale + shift
    if out.shape != x.shape:
        raise ShapeError(f"affine: constants broadcast {x.shape} to {out.shape}")
    return _result(out, (x,), lambda g: (g * scale,), "affine")


def bias_add(x, b):
    """Add a per-channel bias ``b[C]`` to ``x[B, C, ...]``."""
    if b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias {b.shape} does not match channels of {x.shape}")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return _result(x.data + b.data.reshape(shape), (x, b), lambda g: (g, g.sum(axis=axes)), "bias_add")


def relu(x):
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def prelu(x, alpha):
    """Per-channel parametric ReLU."""
    if alpha.ndim != 1 or alpha.shape[0] != x.shape[1]:
        raise ShapeError(f"prelu slope {alpha.shape} does not match channels of {x.shape}")
    a = alpha.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)
    axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        return np.where(pos, g, a * g), np.where(pos, 0, g * x.data).sum(axis=axes)

    return _result(out, (x, alpha), backward, "prelu")


def sum(x):  # noqa: A001 - mirrors numpy naming
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x):
    n = x.data.size
    return _result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean"
    )


def l1_loss(pred, target):
    """Mean absolute error; the subgradient at zero residual is 0."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"l1_loss: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size
    sign = np.sign(diff)
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def backward(g):
        gp = g * sign / n
        return (gp, -gp) if len(parents) == 2 else (gp,)

    return _result(np.asarray(np.abs(diff).mean(), dtype=pred.dtype), parents, backward, "l1_loss")


# ------------------------------------------------------------ structural


def getitem(x, index):
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        if _has_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _result(np.array(out, copy=True), (x,), backward, "getitem")


def _has_advanced(index):
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _result(out, tuple(tensors), backward, "concat")


def pad2d(x, pad_h: int, pad_w: int):
    """Zero-pad the last two axes at the end (bottom/right)."""
    width = [(0, 0)] * (x.ndim - 2) + [(0, pad_h), (0, pad_w)]
    h, w = x.shape[-2:]
    return _result(np.pad(x.data, width), (x,), lambda g: (g[..., :h, :w],), "pad2d")


def reshape(x, shape):
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# ------------------------------------------------------------ convolutions


def _im2col(xp, k, h, w):
    # xp: [B, C, H+k-1, W+k-1] -> [B, C*k*k, H*W]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # [B, C, H, W, k, k]
    b, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, h * w)


def _col2im(cols, c, k, h, w):
    b = cols.shape[0]
    cols = cols.reshape(b, c, k, k, h, w)
    xp = np.zeros((b, c, h + k - 1, w + k - 1), cols.dtype)
    for dy in range(k):
        for dx in range(k):
            xp[:, :, dy : dy + h, dx : dx + w] += cols[:, :, dy, dx]
    p = (k - 1) // 2
    return xp[:, :, p : p + h, p : p + w]


def _weight_grad(g2, cols):
    gw = g2[0] @ cols[0].T
    for i in range(1, g2.shape[0]):
        gw += g2[i] @ cols[i].T
    return gw


def conv2d(x, weight, bias=None):
    """Stride-1 convolution with zero 'same' padding; ``weight[O, C, k, k]`` with odd ``k``."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    o, c, k, k2 = weight.shape
    if k != k2 or k % 2 != 1:
        raise ShapeError("conv2d needs a square odd kernel")
    b, _, h, w = x.shape
    p = k // 2
    wmat = weight.data.reshape(o, c * k * k)
    if k == 1:
        cols = x.data.reshape(b, c, h * w)
    else:
        cols = _im2col(np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))), k, h, w)
    out = (wmat @ cols).reshape(b, o, h, w)

    def backward(g):
        g2 = g.reshape(b, o, h * w)
        # the forward columns are reused; a per-sample BLAS product avoids the
        # large transposed copy a batched einsum would make
        gw = _weight_grad(g2, cols).reshape(weight.shape)
        gcols = wmat.T @ g2
        gx = gcols.reshape(b, c, h, w) if k == 1 else _col2im(gcols, c, k, h, w)
        return gx, gw

    y = _result(out, (x, weight), backward, "conv2d")
    return bias_add(y, bias) if bias is not None else y


def conv2d_stride2(x, weight, bias=None):
    """2x2 convolution with stride 2 (halves H and W); ``weight[O, C, 2, 2]``."""
    if x.ndim != 4 or weight.shape[1:] != (x.shape[1], 2, 2):
        raise ShapeError(f"conv2d_stride2: input {x.shape} vs weight {weight.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"conv2d_stride2 needs even spatial size, got {(h, w)}")
    o = weight.shape[0]
    h2, w2 = h // 2, w // 2
    cols = x.data.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * 4, h2 * w2)
    wmat = weight.data.reshape(o, c * 4)
    out = (wmat @ cols).reshape(b, o, h2, w2)

    def backward(g):
        g2 = g.reshape(b, o, h2 * w2)
        gw = _weight_grad(g2, cols).reshape(weight.shape)
        gcols = (wmat.T @ g2).reshape(b, c, 2, 2, h2, w2)
        gx = gcols.transpose(0, 1, 4, 2, 5, 3).reshape(b, c, h, w)
        return gx, gw

    y = _result(out, (x, weight), backward, "conv2d_stride2")
    return bias_add(y, bias) if bias is not None else y


def conv_transpose2d_stride2(x, weight, bias=None):
    """2x2 transposed convolution with stride 2 (doubles H and W); ``weight[C, O, 2, 2]``."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != x.shape[1] or weight.shape[2:] != (2, 2):
        raise ShapeError(f"conv_transpose2d_stride2: input {x.shape} vs weight {weight.shape}")
    b, c, h, w = x.shape
    o = weight.shape[1]
    xm = x.data.reshape(b, c, h * w)
    wmat = weight.data.reshape(c, o * 4)
    cols = wmat.T @ xm  # [B, O*4, HW]
    out = cols.reshape(b, o, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, o, 2 * h, 2 * w)

    def backward(g):
        gc = g.reshape(b, o, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4).reshape(b, o * 4, h * w)
        gx = (wmat @ gc).reshape(b, c, h, w)
        gw = _weight_grad(xm, gc).reshape(weight.shape)
        return gx, gw

    y = _result(out, (x, weight), backward, "conv_transpose2d_stride2")
    return bias_add(y, bias) if bias is not None else y


def max_pool2(x):
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial size, got {(h, w)}")
    blocks = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return _result(out, (x,), backward, "max_pool2")


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    # half-pixel-centred linear interpolation n -> 2n with edge clamping
    pos = (np.arange(2 * n) + 0.5) / 2 - 0.5
    lo = np.floor(pos).astype(int)
    f = pos - lo
    m = np.zeros((2 * n, n), dtype)
    rows = np.arange(2 * n)
    np.add.at(m, (rows, np.clip(lo, 0, n - 1)), 1 - f)
    np.add.at(m, (rows, np.clip(lo + 1, 0, n - 1)), f)
    return m


def bilinear_upsample2(x):
    h, w = x.shape[-2:]
    uh = _upsample_matrix(h, x.dtype)
    uw = _upsample_matrix(w, x.dtype)
    out = uh @ x.data @ uw.T
    return _result(out, (x,), lambda g: (uh.T @ g @ uw,), "bilinear_upsample2")


# ------------------------------------------------------------ projector nodes


def project(x, geom):
    """Forward projection node: ``[B, 1, N, N] -> [B, 1, A, D]``; backward is back-projection."""
    from ..projectors import get_projector

    n = x.shape[-1]
    proj = get_projector(geom, n)
    out = proj.forward(x.data)
    return _result(out.astype(x.dtype, copy=False), (x,), lambda g: (proj.adjoint(g).astype(x.dtype, copy=False),), "project")


def backproject(y, geom, size: int):
    """Back-projection node: ``[B, 1, A, D] -> [B, 1, N, N]``; backward is forward projection."""
    from ..projectors import get_projector

    proj = get_projector(geom, size)
    out = proj.adjoint(y.data)
    return _result(out.astype(y.dtype, copy=False), (y,), lambda g: (proj.forward(g).astype(y.dtype, copy=False),), "backproject")
