"""Hot inner loops with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``PEDATTACK_NUMBA`` is not
set to ``0``. Both paths compute the same quantities; results agree to
floating-point summation order.
"""
import os

import numpy as np

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("PEDATTACK_NUMBA", "1") != "0"


# ---------------------------------------------------------------- numpy path

def im2col_np(x, k, stride, pad):
    """(N, C, H, W) -> (N, Ho, Wo, C*k*k) patch matrix."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * k * k)


def col2im_np(cols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    ho, wo = cols.shape[1], cols.shape[2]
    cols = cols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dx)


def im2col_hwc_np(x, k, stride, pad):
    """(N, H, W, C) -> (N, Ho, Wo, C*k*k), column order (C, ky, kx)."""
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.reshape(n, ho, wo, c * k * k)


def col2im_hwc_np(cols, x_shape, k, stride, pad):
    n, h, w, c = x_shape
    ho, wo = cols.shape[1], cols.shape[2]
    cols = cols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols[..., i, j]
    if pad:
        dx = dx[:, pad:-pad, pad:-pad, :]
    return np.ascontiguousarray(dx)


def maxpool2_hwc_np(x):
    """2x2 max pool over axes 1, 2 of (N, H, W, C); argmax in 0..3."""
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2_hwc_back_np(grad, arg, x_shape):
    n, h, w, c = x_shape
    g = np.zeros((n, h // 2, w // 2, c, 4), dtype=grad.dtype)
    np.put_along_axis(g, arg[..., None], grad[..., None], axis=-1)
    g = g.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(g.reshape(x_shape))


def maxpool2_np(x):
    """2x2/stride-2 max pool over the last two axes; returns (out, argmax in 0..3)."""
    *lead, h, w = x.shape
    blocks = x.reshape(*lead, h // 2, 2, w // 2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2_back_np(grad, arg, x_shape):
    *lead, h, w = x_shape
    g = np.zeros(tuple(lead) + (h // 2, w // 2, 4))
    np.put_along_axis(g, arg[..., None], grad[..., None], axis=-1)
    g = g.reshape(*lead, h // 2, w // 2, 2, 2)
    g = np.moveaxis(g, -2, -3).reshape(x_shape)
    return g


def bilinear_np(tex, coords):
    """Sample tex (H, W, C) at continuous (x, y) coords (N, 2)."""
    h, w, c = tex.shape
    idx, wts = bilinear_weights(coords, h, w)
    return np.einsum("nk,nkc->nc", wts, tex.reshape(h * w, c)[idx])


def bilinear_back_np(grad, coords, tex_shape):
    h, w, c = tex_shape
    idx, wts = bilinear_weights(coords, h, w)
    out = np.zeros((h * w, c))
    for ch in range(c):
        out[:, ch] = np.bincount(idx.ravel(), weights=(wts * grad[:, ch : ch + 1]).ravel(),
                                 minlength=h * w)
    return out.reshape(tex_shape)


def bilinear_weights(coords, h, w):
    """Flat texel indices (N, 4) and weights (N, 4) of bilinear sampling."""
    x, y = coords[:, 0], coords[:, 1]
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=1)
    wts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=1)
    return idx, wts


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, k, stride, pad, ho, wo):
        n, c, h, w = x.shape
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        xp[:, :, pad:pad + h, pad:pad + w] = x
        out = np.empty((n, ho, wo, c * k * k))
        for b in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                out[b, oi, oj, col] = xp[b, ch, oi * stride + i, oj * stride + j]
                                col += 1
        return out

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, k, stride, pad):
        ho, wo = cols.shape[1], cols.shape[2]
        dx = np.zeros((n, c, h, w))
        for b in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            ii = oi * stride + i - pad
                            for j in range(k):
                                jj = oj * stride + j - pad
                                if 0 <= ii < h and 0 <= jj < w:
                                    dx[b, ch, ii, jj] += cols[b, oi, oj, col]
                                col += 1
        return dx

    @njit(cache=True)
    def _maxpool2_nb(x):
        m, h, w = x.shape
        out = np.empty((m, h // 2, w // 2))
        arg = np.empty((m, h // 2, w // 2), dtype=np.int64)
        for a in range(m):
            for i in range(h // 2):
                for j in range(w // 2):
                    best = x[a, 2 * i, 2 * j]
                    bi = 0
                    for q in range(1, 4):
                        v = x[a, 2 * i + q // 2, 2 * j + q % 2]
                        if v > best:
                            best = v
                            bi = q
                    out[a, i, j] = best
                    arg[a, i, j] = bi
        return out, arg

    @njit(cache=True)
    def _maxpool2_back_nb(grad, arg, h, w):
        m = grad.shape[0]
        g = np.zeros((m, h, w))
        for a in range(m):
            for i in range(h // 2):
                for j in range(w // 2):
                    q = arg[a, i, j]
                    g[a, 2 * i + q // 2, 2 * j + q % 2] = grad[a, i, j]
        return g

    @njit(cache=True)
    def _col2im_hwc_nb(cols, n, h, w, c, k, stride, pad):
        ho, wo = cols.shape[1], cols.shape[2]
        dx = np.zeros((n, h + 2 * pad, w + 2 * pad, c), cols.dtype)
        for b in range(n):
            for oi in range(ho):
                for oj in range(wo):
                    for ch in range(c):
                        base = ch * k * k
                        for i in range(k):
                            for j in range(k):
                                dx[b, oi * stride + i, oj * stride + j, ch] += cols[b, oi, oj, base + i * k + j]
        return dx[:, pad:pad + h, pad:pad + w, :].copy()

    @njit(cache=True)
    def _maxpool2_hwc_nb(x):
        n, h, w, c = x.shape
        out = np.empty((n, h // 2, w // 2, c), x.dtype)
        arg = np.empty((n, h // 2, w // 2, c), dtype=np.int64)
        for b in range(n):
            for i in range(h // 2):
                for j in range(w // 2):
                    for ch in range(c):
                        best = x[b, 2 * i, 2 * j, ch]
                        bi = 0
                        for q in range(1, 4):
                            v = x[b, 2 * i + q // 2, 2 * j + q % 2, ch]
                            if v > best:
                                best = v
                                bi = q
                        out[b, i, j, ch] = best
                        arg[b, i, j, ch] = bi
        return out, arg

    @njit(cache=True)
    def _maxpool2_hwc_back_nb(grad, arg, h, w):
        n, _, _, c = grad.shape
        g = np.zeros((n, h, w, c), grad.dtype)
        for b in range(n):
            for i in range(h // 2):
                for j in range(w // 2):
                    for ch in range(c):
                        q = arg[b, i, j, ch]
                        g[b, 2 * i + q // 2, 2 * j + q % 2, ch] = grad[b, i, j, ch]
        return g

    @njit(cache=True)
    def _bilinear_nb(tex, coords):
        h, w, c = tex.shape
        n = coords.shape[0]
        out = np.zeros((n, c))
        for p in range(n):
            x = coords[p, 0]
            y = coords[p, 1]
            x0 = min(int(np.floor(x)), max(w - 2, 0))
            y0 = min(int(np.floor(y)), max(h - 2, 0))
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            fx = x - x0
            fy = y - y0
            for ch in range(c):
                out[p, ch] = ((1 - fy) * ((1 - fx) * tex[y0, x0, ch] + fx * tex[y0, x1, ch])
                              + fy * ((1 - fx) * tex[y1, x0, ch] + fx * tex[y1, x1, ch]))
        return out

    @njit(cache=True)
    def _bilinear_back_nb(grad, coords, h, w, c):
        out = np.zeros((h, w, c))
        for p in range(coords.shape[0]):
            x = coords[p, 0]
            y = coords[p, 1]
            x0 = min(int(np.floor(x)), max(w - 2, 0))
            y0 = min(int(np.floor(y)), max(h - 2, 0))
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            fx = x - x0
            fy = y - y0
            for ch in range(c):
                g = grad[p, ch]
                out[y0, x0, ch] += (1 - fy) * (1 - fx) * g
                out[y0, x1, ch] += (1 - fy) * fx * g
                out[y1, x0, ch] += fy * (1 - fx) * g
                out[y1, x1, ch] += fy * fx * g
        return out


# ---------------------------------------------------------------- dispatch

def im2col(x, k, stride, pad):
    # the strided-view copy beats the jitted loop on every shape we use
    # (see benchmarks/bench_kernels.py), so both modes take the numpy path
    return im2col_np(x, k, stride, pad)


def col2im(cols, x_shape, k, stride, pad):
    if USE_NUMBA:
        n, c, h, w = x_shape
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, k, stride, pad)
    return col2im_np(cols, x_shape, k, stride, pad)


def maxpool2(x):
    if USE_NUMBA:
        *lead, h, w = x.shape
        out, arg = _maxpool2_nb(np.ascontiguousarray(x).reshape(-1, h, w))
        return out.reshape(*lead, h // 2, w // 2), arg.reshape(*lead, h // 2, w // 2)
    return maxpool2_np(x)


def maxpool2_back(grad, arg, x_shape):
    if USE_NUMBA:
        *lead, h, w = x_shape
        g = _maxpool2_back_nb(np.ascontiguousarray(grad).reshape(-1, h // 2, w // 2),
                              arg.reshape(-1, h // 2, w // 2), h, w)
        return g.reshape(x_shape)
    return maxpool2_back_np(grad, arg, x_shape)


def bilinear(tex, coords):
    if USE_NUMBA:
        return _bilinear_nb(np.ascontiguousarray(tex), np.ascontiguousarray(coords))
    return bilinear_np(tex, coords)


def bilinear_back(grad, coords, tex_shape):
    if USE_NUMBA:
        h, w, c = tex_shape
        return _bilinear_back_nb(np.ascontiguousarray(grad), np.ascontiguousarray(coords), h, w, c)
    return bilinear_back_np(grad, coords, tex_shape)


def im2col_hwc(x, k, stride, pad):
    return im2col_hwc_np(x, k, stride, pad)


def col2im_hwc(cols, x_shape, k, stride, pad):
    if USE_NUMBA:
        n, h, w, c = x_shape
        return _col2im_hwc_nb(np.ascontiguousarray(cols), n, h, w, c, k, stride, pad)
    return col2im_hwc_np(cols, x_shape, k, stride, pad)


def maxpool2_hwc(x):
    if USE_NUMBA:
        return _maxpool2_hwc_nb(np.ascontiguousarray(x))
    return maxpool2_hwc_np(x)


def maxpool2_hwc_back(grad, arg, x_shape):
    if USE_NUMBA:
        return _maxpool2_hwc_back_nb(np.ascontiguousarray(grad), arg, x_shape[1], x_shape[2])
    return maxpool2_hwc_back_np(grad, arg, x_shape)
