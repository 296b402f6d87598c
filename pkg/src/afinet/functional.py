"""Differentiable network operations.

Boundary convention used throughout: the horizontal axis of every spatial
tensor is angular and wraps (circular padding / modular indexing), the
vertical axis is radial and is zero-padded / clamped. This makes stride-1
convolutions exactly equivariant to circular column shifts, which is the
property the whole model is built around.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeMismatchError, Tensor, _make

# -- padding helpers ---------------------------------------------------------


def _same_pads(k: int):
    # total pad k-1; even kernels put the extra pad on the trailing side
    lead = (k - 1) // 2
    return lead, k - 1 - lead


def pad_zero_vert_circ_horz(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Pad [N,C,H,W]: zeros above/below, circular wrap left/right."""
    ph0, ph1 = _same_pads(kh)
    pw0, pw1 = _same_pads(kw)
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + ph0 + ph1, w + pw0 + pw1), dtype=x.dtype)
    out[:, :, ph0:ph0 + h, pw0:pw0 + w] = x
    if pw0:
        out[:, :, ph0:ph0 + h, :pw0] = x[:, :, :, w - pw0:]
    if pw1:
        out[:, :, ph0:ph0 + h, pw0 + w:] = x[:, :, :, :pw1]
    return out


def _unpad_grad(gp: np.ndarray, h: int, w: int, kh: int, kw: int) -> np.ndarray:
    """Fold a padded-gradient back: drop zero rows, wrap circular columns."""
    ph0, _ = _same_pads(kh)
    pw0, pw1 = _same_pads(kw)
    core = gp[:, :, ph0:ph0 + h, pw0:pw0 + w].copy()
    if pw0:
        core[:, :, :, w - pw0:] += gp[:, :, ph0:ph0 + h, :pw0]
    if pw1:
        core[:, :, :, :pw1] += gp[:, :, ph0:ph0 + h, pw0 + w:]
    return core


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """[N,C,Hp,Wp] -> (col [N*Ho*Wo, C*kh*kw], Ho, Wo)."""
    n, c, hp, wp = xp.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(col), ho, wo


# -- convolution -------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation of [N,C,H,W] with [Co,C,kh,kw].

    Same-size output at stride 1 (asymmetric same-padding for even
    kernels); rows zero-padded, columns wrapped circularly.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeMismatchError("conv2d expects 4D input and kernel",
                                 x.shape, kernel.shape)
    if x.shape[1] != kernel.shape[1]:
        raise ShapeMismatchError("conv2d channel mismatch", x.shape,
                                 kernel.shape)
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    co, _, kh, kw = kernel.shape
    if h < 1 or w < 1 or kh < 1 or kw < 1:
        raise ShapeMismatchError("conv2d empty spatial extent", x.shape,
                                 kernel.shape)

    xp = pad_zero_vert_circ_horz(x.data, kh, kw)
    col, ho, wo = _im2col(xp, kh, kw, stride)
    kr = kernel.data.reshape(co, c * kh * kw)
    out = (col @ kr.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    def bw(g):
        gf = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
        if kernel.requires_grad:
            col_b, _, _ = _im2col(pad_zero_vert_circ_horz(x.data, kh, kw),
                                  kh, kw, stride)
            kernel._accumulate((gf.T @ col_b).reshape(kernel.shape))
        if x.requires_grad:
            dcol = (gf @ kr).reshape(n, ho, wo, c, kh, kw)
            dcol = dcol.transpose(0, 3, 1, 2, 4, 5)  # [N,C,Ho,Wo,kh,kw]
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i:i + stride * ho:stride,
                       j:j + stride * wo:stride] += dcol[:, :, :, :, i, j]
            x._accumulate(_unpad_grad(gp, h, w, kh, kw))

    return _make(np.ascontiguousarray(out), (x, kernel), "conv2d", bw)


# -- pooling and maxout -------------------------------------------------------


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2):
    """2x2/stride-2 max pooling. Returns (output, argmax in window 0..3).

    Gradient is routed to the argmax position only; ties go to the first
    position in row-major window order.
    """
    if window != 2 or stride != 2:
        raise ValueError("maxpool2d supports window=2, stride=2 only")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError("maxpool2d needs even extents", x.shape,
                                 (n, c, 2, 2))
    h2, w2 = h // 2, w // 2
    xr = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    xr = np.ascontiguousarray(xr).reshape(n, c, h2, w2, 4)
    arg = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        if not x.requires_grad:
            return
        gr = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gr, arg[..., None], g[..., None], axis=-1)
        gr = gr.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accumulate(gr.reshape(n, c, h, w))

    return _make(out, (x,), "maxpool2d", bw), arg


def maxout(x: Tensor) -> Tensor:
    """Pairwise channel max: out[c] = max(in[2c], in[2c+1]).

    Gradient goes to the winning piece; on ties, the even (first) piece.
    """
    n, ch = x.shape[0], x.shape[1]
    if ch % 2:
        raise ShapeMismatchError("maxout needs an even channel count",
                                 x.shape, (n, 2))
    a = x.data[:, 0::2]
    b = x.data[:, 1::2]
    win_b = b > a
    out = np.where(win_b, b, a)

    def bw(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        gx[:, 0::2] = np.where(win_b, 0, g)
        gx[:, 1::2] = np.where(win_b, g, 0)
        x._accumulate(gx)

    return _make(out, (x,), "maxout", bw)


# -- bilinear sampling ---------------------------------------------------------


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample [N,C,H,W] at fractional (row, col) positions [N,2,Hc,Wc].

    Rows clamp to [0, H-1]; columns wrap modulo W. Differentiable in both
    the image and the coordinates (coordinate gradient is zero wherever the
    row clamp is active).
    """
    if coords.shape[1] != 2 or coords.data.ndim != 4:
        raise ShapeMismatchError("coords must be [N,2,H,W]", coords.shape,
                                 x.shape)
    if coords.shape[0] != x.shape[0]:
        raise ShapeMismatchError("batch mismatch", x.shape, coords.shape)
    n, c, h, w = x.shape
    hc, wc = coords.shape[2], coords.shape[3]

    r_raw = coords.data[:, 0]
    c_raw = coords.data[:, 1]
    unclamped = (r_raw > 0) & (r_raw < h - 1)
    r = np.clip(r_raw, 0, h - 1)
    cm = np.mod(c_raw, w)
    r0 = np.floor(r)
    wr = (r - r0)
    c0 = np.floor(cm)
    wcf = (cm - c0)
    r0i = r0.astype(np.int64)
    r1i = np.minimum(r0i + 1, h - 1)
    c0i = c0.astype(np.int64) % w
    c1i = (c0i + 1) % w

    xf = x.data.reshape(n, c, h * w)
    chan = np.arange(c)[None, :, None]

    def gather(ri, ci):
        sidx = (ri * w + ci).reshape(n, 1, hc * wc)
        idx = np.broadcast_to(sidx, (n, c, hc * wc))
        return np.take_along_axis(xf, idx, axis=2).reshape(n, c, hc, wc)

    v00 = gather(r0i, c0i)
    v01 = gather(r0i, c1i)
    v10 = gather(r1i, c0i)
    v11 = gather(r1i, c1i)
    wre = wr[:, None]
    wce = wcf[:, None]
    out = ((1 - wre) * ((1 - wce) * v00 + wce * v01)
           + wre * ((1 - wce) * v10 + wce * v11))

    def bw(g):
        if x.requires_grad:
            gflat = np.zeros(n * c * h * w, dtype=g.dtype)
            base = (np.arange(n)[:, None, None, None] * c + chan[..., None]) \
                * (h * w)
            for ri, ci, wgt in (
                    (r0i, c0i, (1 - wre) * (1 - wce)),
                    (r0i, c1i, (1 - wre) * wce),
                    (r1i, c0i, wre * (1 - wce)),
                    (r1i, c1i, wre * wce)):
                gi = base + (ri * w + ci)[:, None]
                gflat += np.bincount(gi.ravel(),
                                     weights=(wgt * g).ravel(),
                                     minlength=n * c * h * w)
            x._accumulate(gflat.reshape(n, c, h, w).astype(x.dtype))
        if coords.requires_grad:
            dr = (((1 - wce) * (v10 - v00) + wce * (v11 - v01)) * g).sum(axis=1)
            dc = (((1 - wre) * (v01 - v00) + wre * (v11 - v10)) * g).sum(axis=1)
            dr *= unclamped
            gc = np.stack([dr, dc], axis=1)
            coords._accumulate(gc.astype(coords.dtype))

    return _make(out, (x, coords), "bilinear_sample", bw)


def pad_rows_zero(x: Tensor, top: int, bottom: int) -> Tensor:
    """Zero-pad the row axis of [N,C,H,W] (columns untouched)."""
    n, c, h, w = x.shape
    data = np.zeros((n, c, h + top + bottom, w), dtype=x.dtype)
    data[:, :, top:top + h] = x.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(g[:, :, top:top + h])

    return _make(data, (x,), "pad_rows_zero", bw)


# -- dense / classification ops -----------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x [N,D] @ weight [D,E] (+ bias [E])."""
    if x.data.ndim != 2 or weight.data.ndim != 2 \
            or x.shape[1] != weight.shape[0]:
        raise ShapeMismatchError("linear dimensions", x.shape, weight.shape)
    data = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatchError("linear bias", bias.shape,
                                     (weight.shape[1],))
        data = data + bias.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, parents, "linear", bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            x._accumulate(s * (g - dot))

    return _make(s, (x,), "softmax", bw)


def l2_normalize(x: Tensor, axis: int = -1, epsilon: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, epsilon)
    y = x.data / denom

    def bw(g):
        if not x.requires_grad:
            return
        live = norm > epsilon
        dot = (g * y).sum(axis=axis, keepdims=True)
        gx = np.where(live, (g - y * dot) / denom, g / epsilon)
        x._accumulate(gx.astype(x.dtype))

    return _make(y, (x,), "l2_normalize", bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Log-sum-exp stabilized (row max subtracted before exponentiation).
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeMismatchError("cross_entropy expects [N,K] logits",
                                 logits.shape, (len(labels),))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatchError("labels must be [N]", labels.shape, (n,))
    if labels.min() < 0 or labels.max() >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    loss = (lse - picked).mean()

    def bw(g):
        if not logits.requires_grad:
            return
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate((g * p / n).astype(logits.dtype))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,),
                 "cross_entropy", bw)


# -- VLAD aggregation -----------------------------------------------------------


def vlad_aggregate(assign: Tensor, v: Tensor, centers: Tensor) -> Tensor:
    """Soft-assigned residual aggregation: out[n,k,:] = sum_i a[n,i,k]*(v[n,i,:]-c[k,:]).

    The reduction over descriptors i sums the addends in sorted-value order,
    so any permutation of the descriptors yields a bitwise-identical result
    (plain left-to-right or pairwise summation would not).
    """
    if assign.data.ndim != 3 or v.data.ndim != 3 or centers.data.ndim != 2:
        raise ShapeMismatchError("vlad_aggregate arity", assign.shape, v.shape)
    n, i, k = assign.shape
    if v.shape[0] != n or v.shape[1] != i:
        raise ShapeMismatchError("assign/descriptor mismatch", assign.shape,
                                 v.shape)
    c = v.shape[2]
    if centers.shape != (k, c):
        raise ShapeMismatchError("centers shape", centers.shape, (k, c))

    addends = assign.data[:, :, :, None] * (v.data[:, :, None, :]
                                            - centers.data[None, None])
    addends.sort(axis=1)
    out = addends.sum(axis=1)

    def bw(g):
        if assign.requires_grad:
            da = np.einsum('nkj,nij->nik', g, v.data) \
                - np.einsum('nkj,kj->nk', g, centers.data)[:, None, :]
            assign._accumulate(da.astype(assign.dtype))
        if v.requires_grad:
            v._accumulate(np.einsum('nik,nkj->nij', assign.data,
                                    g).astype(v.dtype))
        if centers.requires_grad:
            s = assign.data.sum(axis=1)
            centers._accumulate((-(s[:, :, None] * g).sum(axis=0))
                                .astype(centers.dtype))

    return _make(out, (assign, v, centers), "vlad_aggregate", bw)
