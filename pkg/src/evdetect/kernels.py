"""Hot inner loops, each with a numba and a numpy implementation.

The public names at the bottom of the module pick the implementation at
call time via :func:`evdetect._accel.dispatch`. Arrays are assumed
C-contiguous; callers in :mod:`evdetect.ndkernel` guarantee it.
"""

import numpy as np

from ._accel import dispatch, njit


# --------------------------------------------------------------------------
# im2col / col2im for stride-1 2-D convolution on a pre-padded input


@njit
def _im2col_nb(xp, kh, kw):
    n, c, hp, wp = xp.shape
    ho = hp - kh + 1
    wo = wp - kw + 1
    k = c * kh * kw
    cols = np.empty((n * ho * wo, k), dtype=xp.dtype)
    for b in range(n):
        for h in range(ho):
            for w in range(wo):
                row = (b * ho + h) * wo + w
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            cols[row, col] = xp[b, ch, h + i, w + j]
                            col += 1
    return cols


def _im2col_np(xp, kh, kw):
    """Unfold ``xp`` (N, C, Hp, Wp) into rows of (C*kh*kw) patch values."""
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw
    )


@njit
def _col2im_nb(cols, n, c, hp, wp, kh, kw):
    ho = hp - kh + 1
    wo = wp - kw + 1
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for b in range(n):
        for h in range(ho):
            for w in range(wo):
                row = (b * ho + h) * wo + w
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[b, ch, h + i, w + j] += cols[row, col]
                            col += 1
    return out


def _col2im_np(cols, n, c, hp, wp, kh, kw):
    """Scatter-add patch rows back onto a padded (N, C, Hp, Wp) grid."""
    ho, wo = hp - kh + 1, wp - kw + 1
    patches = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ho, j : j + wo] += patches[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    return out


# --------------------------------------------------------------------------
# temporal max pooling, kernel (1, 2), stride 2


@njit
def _maxpool_time_nb(x):
    n, c, h, w = x.shape
    wo = w // 2
    out = np.empty((n, c, h, wo), dtype=x.dtype)
    arg = np.empty((n, c, h, wo), dtype=np.uint8)
    for b in range(n):
        for ch in range(c):
            for r in range(h):
                for t in range(wo):
                    a0 = x[b, ch, r, 2 * t]
                    a1 = x[b, ch, r, 2 * t + 1]
                    if a1 > a0:
                        out[b, ch, r, t] = a1
                        arg[b, ch, r, t] = 1
                    else:
                        out[b, ch, r, t] = a0
                        arg[b, ch, r, t] = 0
    return out, arg


def _maxpool_time_np(x):
    """Max over consecutive time pairs; ties pick the earlier sample."""
    n, c, h, w = x.shape
    pairs = x.reshape(n, c, h, w // 2, 2)
    arg = (pairs[..., 1] > pairs[..., 0]).astype(np.uint8)
    out = np.where(arg == 1, pairs[..., 1], pairs[..., 0])
    return out, arg


@njit
def _maxpool_time_backward_nb(grad, arg):
    n, c, h, wo = grad.shape
    dx = np.zeros((n, c, h, 2 * wo), dtype=grad.dtype)
    for b in range(n):
        for ch in range(c):
            for r in range(h):
                for t in range(wo):
                    dx[b, ch, r, 2 * t + arg[b, ch, r, t]] = grad[b, ch, r, t]
    return dx


def _maxpool_time_backward_np(grad, arg):
    n, c, h, wo = grad.shape
    dx = np.zeros((n, c, h, wo, 2), dtype=grad.dtype)
    sel = arg.astype(bool)
    dx[..., 0] = np.where(sel, 0, grad)
    dx[..., 1] = np.where(sel, grad, 0)
    return dx.reshape(n, c, h, 2 * wo)


# --------------------------------------------------------------------------
# batch-norm per-channel reductions over (N, H, W)


@njit
def _channel_moments_nb(x):
    n, c, h, w = x.shape
    m = n * h * w
    mean = np.zeros(c, dtype=np.float64)
    var = np.zeros(c, dtype=np.float64)
    for ch in range(c):
        s = 0.0
        for b in range(n):
            for r in range(h):
                for t in range(w):
                    s += x[b, ch, r, t]
        mu = s / m
        q = 0.0
        for b in range(n):
            for r in range(h):
                for t in range(w):
                    d = x[b, ch, r, t] - mu
                    q += d * d
        mean[ch] = mu
        var[ch] = q / m
    return mean, var


def _channel_moments_np(x):
    """Biased per-channel mean and variance, accumulated in float64."""
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    centered = x - mean.astype(x.dtype)[None, :, None, None]
    var = np.einsum("nchw,nchw->c", centered, centered, dtype=np.float64)
    var /= x.shape[0] * x.shape[2] * x.shape[3]
    return mean, var


@njit
def _bn_backward_sums_nb(grad, xhat):
    n, c, h, w = grad.shape
    sg = np.zeros(c, dtype=np.float64)
    sgx = np.zeros(c, dtype=np.float64)
    for ch in range(c):
        a = 0.0
        bsum = 0.0
        for b in range(n):
            for r in range(h):
                for t in range(w):
                    g = grad[b, ch, r, t]
                    a += g
                    bsum += g * xhat[b, ch, r, t]
        sg[ch] = a
        sgx[ch] = bsum
    return sg, sgx


def _bn_backward_sums_np(grad, xhat):
    """Per-channel sum of ``grad`` and of ``grad * xhat``."""
    sg = grad.sum(axis=(0, 2, 3), dtype=np.float64)
    sgx = np.einsum("nchw,nchw->c", grad, xhat, dtype=np.float64)
    return sg, sgx


# --------------------------------------------------------------------------
# interval geometry


@njit
def _iou_matrix_nb(s1, e1, s2, e2):
    n1 = s1.shape[0]
    n2 = s2.shape[0]
    out = np.zeros((n1, n2), dtype=np.float64)
    for i in range(n1):
        for j in range(n2):
            inter = min(e1[i], e2[j]) - max(s1[i], s2[j])
            if inter > 0.0:
                out[i, j] = inter / (max(e1[i], e2[j]) - min(s1[i], s2[j]))
    return out


def _iou_matrix_np(s1, e1, s2, e2):
    """Pairwise Jaccard index of half-open intervals [s, e)."""
    inter = np.minimum(e1[:, None], e2[None, :]) - np.maximum(s1[:, None], s2[None, :])
    hull = np.maximum(e1[:, None], e2[None, :]) - np.minimum(s1[:, None], s2[None, :])
    return np.where(inter > 0.0, inter / np.where(inter > 0.0, hull, 1.0), 0.0)


@njit
def _argmax_match_nb(iou, eta):
    n_def, n_true = iou.shape
    out = np.full(n_def, -1, dtype=np.int64)
    for i in range(n_def):
        best = -1.0
        for j in range(n_true):
            v = iou[i, j]
            if v >= eta and v > best:
                best = v
                out[i] = j
    return out


def _argmax_match_np(iou, eta):
    """Row-wise argmax over entries >= eta; -1 where none qualifies."""
    if iou.shape[1] == 0:
        return np.full(iou.shape[0], -1, dtype=np.int64)
    masked = np.where(iou >= eta, iou, -1.0)
    best = masked.argmax(axis=1)
    hit = masked[np.arange(iou.shape[0]), best] >= eta
    return np.where(hit, best, -1).astype(np.int64)


@njit
def _nms_nb(starts, ends, scores, order, threshold):
    n = starts.shape[0]
    alive = np.ones(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    nk = 0
    for a in range(n):
        i = order[a]
        if not alive[i]:
            continue
        keep[nk] = i
        nk += 1
        for b in range(a + 1, n):
            j = order[b]
            if not alive[j]:
                continue
            inter = min(ends[i], ends[j]) - max(starts[i], starts[j])
            if inter > 0.0:
                hull = max(ends[i], ends[j]) - min(starts[i], starts[j])
                if inter / hull >= threshold:
                    alive[j] = False
    return keep[:nk]


def _nms_np(starts, ends, scores, order, threshold):
    """Greedy suppression visiting candidates in ``order``; returns kept ids."""
    iou = _iou_matrix_np(starts, ends, starts, ends)
    alive = np.ones(starts.shape[0], dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        alive &= iou[i] < threshold
    return np.asarray(keep, dtype=np.int64)


@njit
def _greedy_pairs_nb(iou, delta):
    n_p, n_t = iou.shape
    m = 0
    for i in range(n_p):
        for j in range(n_t):
            if iou[i, j] >= delta:
                m += 1
    vals = np.empty(m, dtype=np.float64)
    pi = np.empty(m, dtype=np.int64)
    tj = np.empty(m, dtype=np.int64)
    m = 0
    for i in range(n_p):
        for j in range(n_t):
            if iou[i, j] >= delta:
                vals[m] = -iou[i, j]
                pi[m] = i
                tj[m] = j
                m += 1
    order = np.argsort(vals, kind="mergesort")
    used_p = np.zeros(n_p, dtype=np.bool_)
    used_t = np.zeros(n_t, dtype=np.bool_)
    out_p = np.empty(min(n_p, n_t), dtype=np.int64)
    out_t = np.empty(min(n_p, n_t), dtype=np.int64)
    k = 0
    for a in range(m):
        i = pi[order[a]]
        j = tj[order[a]]
        if used_p[i] or used_t[j]:
            continue
        used_p[i] = True
        used_t[j] = True
        out_p[k] = i
        out_t[k] = j
        k += 1
    return out_p[:k], out_t[:k]


def _greedy_pairs_np(iou, delta):
    """One-to-one pairing in descending IoU among pairs with IoU >= delta."""
    pi, tj = np.nonzero(iou >= delta)
    order = np.argsort(-iou[pi, tj], kind="stable")
    used_p, used_t = set(), set()
    out_p, out_t = [], []
    for a in order:
        i, j = int(pi[a]), int(tj[a])
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        out_p.append(i)
        out_t.append(j)
    return np.asarray(out_p, dtype=np.int64), np.asarray(out_t, dtype=np.int64)


im2col = dispatch(_im2col_nb, _im2col_np)
col2im = dispatch(_col2im_nb, _col2im_np)
maxpool_time = dispatch(_maxpool_time_nb, _maxpool_time_np)
maxpool_time_backward = dispatch(_maxpool_time_backward_nb, _maxpool_time_backward_np)
channel_moments = dispatch(_channel_moments_nb, _channel_moments_np)
bn_backward_sums = dispatch(_bn_backward_sums_nb, _bn_backward_sums_np)
iou_matrix = dispatch(_iou_matrix_nb, _iou_matrix_np)
argmax_match = dispatch(_argmax_match_nb, _argmax_match_np)
nms_order = dispatch(_nms_nb, _nms_np)
greedy_pairs = dispatch(_greedy_pairs_nb, _greedy_pairs_np)
