"""Structured differentiable kernels: convolution, pooling, resampling.

All kernels take NCHW tensors, run on numpy (im2col + BLAS for the
convolution), and register hand-derived backward rules with the graph.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DomainError, ShapeError, Tensor

__all__ = [
    "conv2d",
    "avg_pool3x3",
    "bilinear_resize",
    "grid_sample",
    "softmax_cross_entropy_map",
    "gradient_reversal",
]


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlate ``x`` [N,C,H,W] with ``weight`` [F,C,k,k].

    Output spatial size is (H + 2*padding - k) / stride + 1, which must be
    integral; the kernel size must be odd. Backward produces gradients
    for the input, the weight, and the bias.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and FCkk weight")
    n, c, h, w = xd.shape
    f, cw, kh, kw = wd.shape
    if cw != c:
        raise ShapeError(f"channel mismatch: input {c}, weight {cw}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError("kernel must be square with odd size")
    k, s, p = kh, int(stride), int(padding)
    if (h + 2 * p - k) % s or (w + 2 * p - k) % s:
        raise ShapeError(f"non-integral conv output for H,W=({h},{w}) k={k} s={s} p={p}")
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    # [N,C,OH,OW,k,k] -> [C*k*k, N*OH*OW]; this layout keeps both matmul
    # operands and the col2im slices contiguous.
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * oh * ow)
    wmat = wd.reshape(f, c * k * k)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(f, n, oh, ow).transpose(1, 0, 2, 3))

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * oh * ow)
        gw = (gmat @ cols.T).reshape(f, c, k, k)
        gcols = (wmat.T @ gmat).reshape(c, k, k, n, oh, ow)
        gxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=xd.dtype)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki : ki + s * (oh - 1) + 1 : s, kj : kj + s * (ow - 1) + 1 : s] += gcols[
                    :, ki, kj
                ]
        gxp = gxp[:, :, p : p + h, p : p + w] if p else gxp
        gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bwd, "conv2d")


def _box3_rows(a):
    """Sum of each row with its replicate-padded neighbors (axis 2)."""
    out = a.copy()
    out += np.concatenate([a[:, :, :1], a[:, :, :-1]], axis=2)
    out += np.concatenate([a[:, :, 1:], a[:, :, -1:]], axis=2)
    return out


def _box3_cols(a):
    out = a.copy()
    out += np.concatenate([a[:, :, :, :1], a[:, :, :, :-1]], axis=3)
    out += np.concatenate([a[:, :, :, 1:], a[:, :, :, -1:]], axis=3)
    return out


def _box3_rows_t(g):
    """Transpose of _box3_rows (scatter with replicate-edge folding)."""
    out = g.copy()
    shifted_down = np.concatenate([g[:, :, 1:], np.zeros_like(g[:, :, :1])], axis=2)
    shifted_down[:, :, 0] += g[:, :, 0]
    out += shifted_down
    shifted_up = np.concatenate([np.zeros_like(g[:, :, :1]), g[:, :, :-1]], axis=2)
    shifted_up[:, :, -1] += g[:, :, -1]
    return out + shifted_up


def _box3_cols_t(g):
    out = g.copy()
    shifted_right = np.concatenate([g[:, :, :, 1:], np.zeros_like(g[:, :, :, :1])], axis=3)
    shifted_right[:, :, :, 0] += g[:, :, :, 0]
    out += shifted_right
    shifted_left = np.concatenate([np.zeros_like(g[:, :, :, :1]), g[:, :, :, :-1]], axis=3)
    shifted_left[:, :, :, -1] += g[:, :, :, -1]
    return out + shifted_left


def avg_pool3x3(x):
    """3x3 mean filter with replicate padding (same output size).

    Separable two-pass box filter; constant regions stay constant up to
    the border, which is what the SSIM statistics need.
    """
    xd = x.data
    ninth = np.asarray(1.0 / 9.0, dtype=xd.dtype)
    out = _box3_cols(_box3_rows(xd)) * ninth

    def bwd(g):
        return (_box3_rows_t(_box3_cols_t(g * ninth)),)

    return Tensor._from_op(out, (x,), bwd, "avg_pool3x3")


def _interp_matrix(out_size, in_size, dtype):
    """Row-stochastic 1-D linear interpolation matrix, half-pixel centers."""
    a = np.zeros((out_size, in_size), dtype=dtype)
    pos = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    pos = np.clip(pos, 0.0, in_size - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = (pos - i0).astype(dtype)
    rows = np.arange(out_size)
    np.add.at(a, (rows, i0), 1.0 - frac)
    np.add.at(a, (rows, i1), frac)
    return a


def bilinear_resize(x, out_h, out_w):
    """Resize NCHW tensor with bilinear interpolation, half-pixel convention."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("output size must be >= 1")
    xd = x.data
    n, c, h, w = xd.shape
    if (out_h, out_w) == (h, w):
        return Tensor._from_op(xd, (x,), lambda g: (g,), "resize_id")
    ah = _interp_matrix(out_h, h, xd.dtype)
    aw = _interp_matrix(out_w, w, xd.dtype)
    flat = xd.reshape(n * c, h, w)
    out = (ah[None] @ flat @ aw.T[None]).reshape(n, c, out_h, out_w)

    def bwd(g):
        gflat = g.reshape(n * c, out_h, out_w)
        return ((ah.T[None] @ gflat @ aw[None]).reshape(n, c, h, w),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bwd, "resize")


def grid_sample(x, grid):
    """Bilinearly sample ``x`` [N,C,H,W] at pixel coordinates ``grid`` [N,Hg,Wg,2].

    grid[..., 0] is the column (u) and grid[..., 1] the row (v), both in
    the input's pixel frame. Returns ``(samples, valid)`` where ``valid``
    marks points whose bilinear support lies inside the image; samples
    outside are zero and masked invalid rather than an error.
    Differentiable with respect to both the image and the grid.
    """
    xd, gd = x.data, grid.data
    if gd.shape[-1] != 2 or gd.ndim != 4:
        raise ShapeError("grid must be [N,Hg,Wg,2]")
    n, c, h, w = xd.shape
    if gd.shape[0] != n:
        raise ShapeError("batch mismatch between input and grid")
    hg, wg = gd.shape[1:3]
    u = gd[..., 0]
    v = gd[..., 1]
    with np.errstate(invalid="ignore"):
        valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)

    x0 = np.clip(np.floor(u), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, h - 2).astype(np.int64)
    fu = (u - x0).astype(xd.dtype)
    fv = (v - y0).astype(xd.dtype)

    flat = xd.reshape(n, c, h * w)
    base = (y0 * w + x0).reshape(n, 1, hg * wg)

    def gather(offset):
        got = np.take_along_axis(flat, base + offset, axis=2)
        return got.reshape(n, c, hg, wg)

    v00 = gather(0)
    v01 = gather(1)
    v10 = gather(w)
    v11 = gather(w + 1)

    fu4 = fu[:, None]
    fv4 = fv[:, None]
    m = valid[:, None].astype(xd.dtype)
    w00 = (1 - fu4) * (1 - fv4) * m
    w01 = fu4 * (1 - fv4) * m
    w10 = (1 - fu4) * fv4 * m
    w11 = fu4 * fv4 * m
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bwd(g):
        grads = []
        if x.requires_grad:
            idx = base + np.array([0, 1, w, w + 1]).reshape(4, 1, 1, 1)
            idx = (idx + (np.arange(n) * c * h * w).reshape(1, n, 1, 1)).reshape(4, n, 1, -1)
            idx = idx + (np.arange(c) * h * w).reshape(1, 1, c, 1)
            vals = np.stack(
                [
                    (g * w00).reshape(n, c, -1),
                    (g * w01).reshape(n, c, -1),
                    (g * w10).reshape(n, c, -1),
                    (g * w11).reshape(n, c, -1),
                ]
            )
            gx = np.bincount(
                idx.reshape(-1), weights=vals.reshape(-1), minlength=n * c * h * w
            )
            grads.append(gx.reshape(n, c, h, w).astype(xd.dtype))
        else:
            grads.append(None)
        if grid.requires_grad:
            du = ((1 - fv4) * (v01 - v00) + fv4 * (v11 - v10)) * m
            dv = ((1 - fu4) * (v10 - v00) + fu4 * (v11 - v01)) * m
            gu = (g * du).sum(axis=1)
            gv = (g * dv).sum(axis=1)
            grads.append(np.stack([gu, gv], axis=-1))
        else:
            grads.append(None)
        return tuple(grads)

    out_t = Tensor._from_op(out, (x, grid), bwd, "grid_sample")
    return out_t, valid


def softmax_cross_entropy_map(logits, labels, ignore_index=255):
    """Per-pixel -log softmax probability of the labeled class.

    ``logits`` is [N,C,H,W]; ``labels`` is an integer [N,H,W] array whose
    entries are class ids or ``ignore_index``. Ignored pixels contribute
    exactly 0. Returns ``(ce_map, valid)`` with ce_map [N,H,W].
    """
    ld = logits.data
    n, c, h, w = ld.shape
    lab = np.asarray(labels)
    if lab.shape != (n, h, w):
        raise ShapeError(f"labels shape {lab.shape} != {(n, h, w)}")
    valid = lab != ignore_index
    if np.any((lab < 0) | (lab >= c), where=valid):
        raise ValueError("label out of range")
    safe = np.where(valid, lab, 0).astype(np.int64)

    m = ld.max(axis=1, keepdims=True)
    z = ld - m
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    lse = np.log(denom)
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    ce = (lse[:, 0] - picked) * valid

    def bwd(g):
        gv = (g * valid).astype(ld.dtype)
        gl = (ez / denom) * gv[:, None]
        iy, ih, iw = np.nonzero(valid)
        gl[iy, safe[iy, ih, iw], ih, iw] -= gv[iy, ih, iw]
        return (gl,)

    return Tensor._from_op(ce.astype(ld.dtype), (logits,), bwd, "softmax_ce"), valid


def gradient_reversal(x, lam):
    """Identity in the forward pass; backward multiplies the gradient by -lam."""
    lam = float(lam)

    def bwd(g):
        return (-lam * g,)

    return Tensor._from_op(x.data, (x,), bwd, "grad_reverse")
