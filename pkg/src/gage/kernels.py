"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The public names at the bottom of the module resolve to one implementation or
the other according to :data:`gage._accel.NUMBA_ENABLED`. Both twins are kept
importable (``*_nb`` / ``*_np``) so tests and ``benchmarks/bench_kernels.py``
can compare them directly.
"""
import numpy as np

from ._accel import NUMBA_ENABLED, njit, select

# --------------------------------------------------------------------------
# im2col / col2im
#
# Column layout: rows are (c, i, j) in C-order, columns are (n, y, x).  This
# makes the forward convolution a single (K, C*kh*kw) @ (C*kh*kw, N*Ho*Wo)
# BLAS call.
# --------------------------------------------------------------------------


@njit
def _valid_span(wo, w, stride, off):
    # output columns xo with 0 <= xo*stride + off < w
    lo = 0
    while lo < wo and lo * stride + off < 0:
        lo += 1
    hi = wo
    while hi > lo and (hi - 1) * stride + off >= w:
        hi -= 1
    return lo, hi


def _im2col_np(x, kh, kw, stride, pad, ho, wo):
    n_, c_, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c_, kh, kw, n_, ho, wo), dtype=x.dtype)
    ye = stride * (ho - 1) + 1
    xe = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, :, i:i + ye:stride, j:j + xe:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c_ * kh * kw, n_ * ho * wo)


@njit
def _col2im_nb(cols, n_, c_, h, w, kh, kw, stride, pad, ho, wo):
    out = np.zeros((n_, c_, h, w), dtype=cols.dtype)
    for c in range(c_):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                lo, hi = _valid_span(wo, w, stride, j - pad)
                for n in range(n_):
                    base = n * ho * wo
                    for y in range(ho):
                        yy = y * stride + i - pad
                        if yy < 0 or yy >= h:
                            continue
                        off = base + y * wo
                        for xo in range(lo, hi):
                            out[n, c, yy, xo * stride + j - pad] += cols[row, off + xo]
    return out


def _col2im_np(cols, n_, c_, h, w, kh, kw, stride, pad, ho, wo):
    out = np.zeros((n_, c_, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    view = cols.reshape(c_, kh, kw, n_, ho, wo)
    ye = stride * (ho - 1) + 1
    xe = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ye:stride, j:j + xe:stride] += view[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


# --------------------------------------------------------------------------
# max pooling; argmax is the flat (y*W + x) index into the unpadded input,
# first occurrence in row-major window order on ties.
# --------------------------------------------------------------------------


@njit
def _maxpool_fwd_nb(x, k, stride, pad, ho, wo):
    n_, c_, h, w = x.shape
    out = np.empty((n_, c_, ho, wo), dtype=x.dtype)
    arg = np.empty((n_, c_, ho, wo), dtype=np.int64)
    for n in range(n_):
        for c in range(c_):
            for y in range(ho):
                for xo in range(wo):
                    best = -np.inf
                    bi = -1
                    for i in range(k):
                        yy = y * stride + i - pad
                        if yy < 0 or yy >= h:
                            continue
                        for j in range(k):
                            xx = xo * stride + j - pad
                            if xx < 0 or xx >= w:
                                continue
                            v = x[n, c, yy, xx]
                            if bi < 0 or v > best:
                                best = v
                                bi = yy * w + xx
                    out[n, c, y, xo] = best
                    arg[n, c, y, xo] = bi
    return out, arg


def _maxpool_fwd_np(x, k, stride, pad, ho, wo):
    n_, c_, h, w = x.shape
    xp = x
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n_, c_, ho, wo, k * k)
    local = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    yy = np.arange(ho)[:, None] * stride + local // k - pad
    xx = np.arange(wo)[None, :] * stride + local % k - pad
    return np.ascontiguousarray(out), (yy * w + xx).astype(np.int64)


@njit
def _maxpool_bwd_nb(g, arg, h, w):
    n_, c_, ho, wo = g.shape
    out = np.zeros((n_, c_, h * w), dtype=g.dtype)
    for n in range(n_):
        for c in range(c_):
            for y in range(ho):
                for xo in range(wo):
                    out[n, c, arg[n, c, y, xo]] += g[n, c, y, xo]
    return out.reshape(n_, c_, h, w)


def _maxpool_bwd_np(g, arg, h, w):
    n_, c_ = g.shape[:2]
    out = np.zeros((n_ * c_, h * w), dtype=g.dtype)
    rows = np.repeat(np.arange(n_ * c_), arg.shape[2] * arg.shape[3])
    np.add.at(out, (rows, arg.reshape(-1)), g.reshape(-1))
    return out.reshape(n_, c_, h, w)


# --------------------------------------------------------------------------
# Minimum-perimeter covering box over a 2D prefix-sum table.
#
# ``table`` has shape (H+1, W+1) with table[r, c] = count of active cells in
# rows < r and cols < c.  Candidates are all boxes inside the active extent
# [rlo, rhi] x [clo, chi].  Ordering key: (perimeter, area, r0, c0, r1).
# --------------------------------------------------------------------------


@njit
def _box_search_nb(table, need, rlo, rhi, clo, chi):
    best_p = 1 << 62
    best_a = 1 << 62
    b0 = -1
    b1 = -1
    b2 = -1
    b3 = -1
    for r0 in range(rlo, rhi + 1):
        for r1 in range(r0, rhi + 1):
            hgt = r1 - r0 + 1
            for c0 in range(clo, chi + 1):
                for c1 in range(c0, chi + 1):
                    wid = c1 - c0 + 1
                    p = 2 * (hgt + wid)
                    if p > best_p:
                        # wider boxes only grow the perimeter
                        break
                    cnt = (table[r1 + 1, c1 + 1] - table[r0, c1 + 1]
                           - table[r1 + 1, c0] + table[r0, c0])
                    if cnt < need:
                        continue
                    a = hgt * wid
                    better = p < best_p or (p == best_p and (
                        a < best_a or (a == best_a and (
                            r0 < b0 or (r0 == b0 and (
                                c0 < b1 or (c0 == b1 and r1 < b2)))))))
                    if better:
                        best_p = p
                        best_a = a
                        b0 = r0
                        b1 = c0
                        b2 = r1
                        b3 = c1
    return b0, b1, b2, b3


def _box_search_np(table, need, rlo, rhi, clo, chi):
    rs = np.arange(rlo, rhi + 1)
    cs = np.arange(clo, chi + 1)
    r0, r1 = np.meshgrid(rs, rs, indexing="ij")
    keep = r1 >= r0
    r0, r1 = r0[keep], r1[keep]
    c0, c1 = np.meshgrid(cs, cs, indexing="ij")
    keep = c1 >= c0
    c0, c1 = c0[keep], c1[keep]
    R0, C0 = r0[:, None], c0[None, :]
    R1, C1 = r1[:, None], c1[None, :]
    cnt = table[R1 + 1, C1 + 1] - table[R0, C1 + 1] - table[R1 + 1, C0] + table[R0, C0]
    hgt = R1 - R0 + 1
    wid = C1 - C0 + 1
    ok = cnt >= need
    ii, jj = np.nonzero(ok)
    perim = 2 * (hgt + wid)[ii, jj]
    area = (hgt * wid)[ii, jj]
    # np.lexsort: last key is primary
    order = np.lexsort((r1[ii], c0[jj], r0[ii], area, perim))
    k = order[0]
    return int(r0[ii[k]]), int(c0[jj[k]]), int(r1[ii[k]]), int(c1[jj[k]])


# --------------------------------------------------------------------------
# Align-corners bilinear resampling of a rectangular crop.
# --------------------------------------------------------------------------


@njit
def _crop_bilinear_nb(img, r0, c0, r1, c1, out_size):
    out = np.empty((out_size, out_size), dtype=np.float64)
    bh = r1 - r0 + 1
    bw = c1 - c0 + 1
    sy = (bh - 1) / (out_size - 1) if out_size > 1 else 0.0
    sx = (bw - 1) / (out_size - 1) if out_size > 1 else 0.0
    for i in range(out_size):
        fy = r0 + i * sy
        y0 = min(int(np.floor(fy)), r1)
        y1 = min(y0 + 1, r1)
        ty = fy - y0
        for j in range(out_size):
            fx = c0 + j * sx
            x0 = min(int(np.floor(fx)), c1)
            x1 = min(x0 + 1, c1)
            tx = fx - x0
            top = img[y0, x0] * (1.0 - tx) + img[y0, x1] * tx
            bot = img[y1, x0] * (1.0 - tx) + img[y1, x1] * tx
            out[i, j] = top * (1.0 - ty) + bot * ty
    return out


def _crop_bilinear_np(img, r0, c0, r1, c1, out_size):
    img = np.asarray(img, dtype=np.float64)
    bh = r1 - r0 + 1
    bw = c1 - c0 + 1
    idx = np.arange(out_size, dtype=np.float64)
    sy = (bh - 1) / (out_size - 1) if out_size > 1 else 0.0
    sx = (bw - 1) / (out_size - 1) if out_size > 1 else 0.0
    fy = r0 + idx * sy
    fx = c0 + idx * sx
    y0 = np.minimum(np.floor(fy).astype(np.int64), r1)
    x0 = np.minimum(np.floor(fx).astype(np.int64), c1)
    y1 = np.minimum(y0 + 1, r1)
    x1 = np.minimum(x0 + 1, c1)
    ty = (fy - y0)[:, None]
    tx = (fx - x0)[None, :]
    top = img[y0][:, x0] * (1.0 - tx) + img[y0][:, x1] * tx
    bot = img[y1][:, x0] * (1.0 - tx) + img[y1][:, x1] * tx
    return top * (1.0 - ty) + bot * ty


# --------------------------------------------------------------------------
# SplitMix64 block generation: output i of a stream with state s is
# mix(s + (i+1) * GAMMA), so a block is embarrassingly vectorizable.
# --------------------------------------------------------------------------

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1


@njit
def _splitmix_block_nb(state, n):
    out = np.empty(n, dtype=np.uint64)
    s = np.uint64(state)
    g = np.uint64(GAMMA)
    m1 = np.uint64(MIX1)
    m2 = np.uint64(MIX2)
    for i in range(n):
        s = s + g
        z = s
        z = (z ^ (z >> np.uint64(30))) * m1
        z = (z ^ (z >> np.uint64(27))) * m2
        out[i] = z ^ (z >> np.uint64(31))
    return out


def _splitmix_block_np(state, n):
    with np.errstate(over="ignore"):
        z = np.uint64(state) + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        return z ^ (z >> np.uint64(31))



# --------------------------------------------------------------------------
# Direct stride-1 convolution for low channel counts, where im2col is
# memory-bound.  ``xp`` is already zero-padded.  One output row for all K
# channels is accumulated in a small buffer that stays in L1.
# --------------------------------------------------------------------------


@njit
def conv_direct_nb(xp, w, ho, wo):
    n_, c_ = xp.shape[0], xp.shape[1]
    k_, _, kh, kw = w.shape
    out = np.empty((n_, k_, ho, wo), dtype=xp.dtype)
    acc = np.empty((k_, wo), dtype=xp.dtype)
    for n in range(n_):
        for y in range(ho):
            acc[:] = 0
            for c in range(c_):
                for i in range(kh):
                    for j in range(kw):
                        for k in range(k_):
                            wv = w[k, c, i, j]
                            for x in range(wo):
                                acc[k, x] += wv * xp[n, c, y + i, x + j]
            out[n, :, y, :] = acc
    return out


# --------------------------------------------------------------------------
# Batch-norm statistics and fused normalize / backward passes.
# --------------------------------------------------------------------------


@njit
def _bn_stats_nb(x):
    n_, c_, h, w = x.shape
    mean = np.zeros(c_, dtype=np.float64)
    var = np.zeros(c_, dtype=np.float64)
    m = n_ * h * w
    for c in range(c_):
        s = 0.0
        for n in range(n_):
            for y in range(h):
                for xx in range(w):
                    s += x[n, c, y, xx]
        mu = s / m
        q = 0.0
        for n in range(n_):
            for y in range(h):
                for xx in range(w):
                    d = x[n, c, y, xx] - mu
                    q += d * d
        mean[c] = mu
        var[c] = q / m
    return mean, var


def _bn_stats_np(x):
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    d = x - mean.astype(x.dtype).reshape(1, -1, 1, 1)
    var = np.einsum("nchw,nchw->c", d, d, dtype=np.float64) / (x.size // x.shape[1])
    return mean, var


@njit
def _bn_apply_nb(x, mean, invstd, gamma, beta):
    n_, c_, h, w = x.shape
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for n in range(n_):
        for c in range(c_):
            mu = mean[c]
            s = invstd[c]
            gm = gamma[c]
            bt = beta[c]
            for y in range(h):
                for xx in range(w):
                    v = (x[n, c, y, xx] - mu) * s
                    xhat[n, c, y, xx] = v
                    out[n, c, y, xx] = v * gm + bt
    return xhat, out


def _bn_apply_np(x, mean, invstd, gamma, beta):
    c = x.shape[1]
    xhat = (x - mean.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
    return xhat, xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


@njit
def _bn_backward_nb(g, xhat, gamma, invstd, training):
    n_, c_, h, w = g.shape
    m = n_ * h * w
    gx = np.empty_like(g)
    ggamma = np.zeros(c_, dtype=g.dtype)
    gbeta = np.zeros(c_, dtype=g.dtype)
    for c in range(c_):
        sg = 0.0
        sgx = 0.0
        for n in range(n_):
            for y in range(h):
                for xx in range(w):
                    gv = g[n, c, y, xx]
                    sg += gv
                    sgx += gv * xhat[n, c, y, xx]
        gbeta[c] = sg
        ggamma[c] = sgx
        k = gamma[c] * invstd[c]
        if training:
            a = sg / m
            b = sgx / m
            for n in range(n_):
                for y in range(h):
                    for xx in range(w):
                        gx[n, c, y, xx] = k * (g[n, c, y, xx] - a - xhat[n, c, y, xx] * b)
        else:
            for n in range(n_):
                for y in range(h):
                    for xx in range(w):
                        gx[n, c, y, xx] = k * g[n, c, y, xx]
    return gx, ggamma, gbeta


def _bn_backward_np(g, xhat, gamma, invstd, training):
    c = g.shape[1]
    gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64)
    ggamma = np.einsum("nchw,nchw->c", g, xhat, dtype=np.float64)
    k = (gamma * invstd).reshape(1, c, 1, 1)
    if training:
        m = g.size // c
        a = (gbeta / m).astype(g.dtype).reshape(1, c, 1, 1)
        b = (ggamma / m).astype(g.dtype).reshape(1, c, 1, 1)
        gx = k * (g - a - xhat * b)
    else:
        gx = k * g
    return gx.astype(g.dtype, copy=False), ggamma.astype(g.dtype), gbeta.astype(g.dtype)


# strided numpy slice copies beat a compiled gather here
im2col = _im2col_np
col2im = select(_col2im_nb, _col2im_np)
maxpool_forward = select(_maxpool_fwd_nb, _maxpool_fwd_np)
maxpool_backward = select(_maxpool_bwd_nb, _maxpool_bwd_np)
box_search = select(_box_search_nb, _box_search_np)
crop_bilinear = select(_crop_bilinear_nb, _crop_bilinear_np)
splitmix_block = select(_splitmix_block_nb, _splitmix_block_np)
bn_stats = select(_bn_stats_nb, _bn_stats_np)
bn_apply = select(_bn_apply_nb, _bn_apply_np)
bn_backward = select(_bn_backward_nb, _bn_backward_np)
