"""Numeric kernels shared by the numpy-level API.

Each kernel has two implementations: an explicit loop compiled with numba
and a vectorised numpy version. ``dcp._accel.USE_NUMBA`` picks which one the
public names below point to; both stay importable for benchmarking and for
cross-checking in the tests.
"""

import numpy as np

from dcp import _accel

_jit = _accel.numba.njit(cache=False, nogil=True) if _accel.HAVE_NUMBA else (lambda f: f)


# ---------------------------------------------------------------- divide


@_jit
def _divide_loop(pred, gt):
    h, w = gt.shape
    alpha = np.zeros((h, w), np.int64)
    beta = np.zeros((h, w), np.int64)
    gamma = np.zeros((h, w), np.int64)
    delta = np.zeros((h, w), np.int64)
    for i in range(h):
        for j in range(w):
            p = pred[i, j]
            g = gt[i, j]
            if p == 1 and g == 1:
                alpha[i, j] = 1
            elif p == 0 and g == 0:
                gamma[i, j] = 1
            # complements taken by subtraction so the identities hold by construction
            beta[i, j] = g - alpha[i, j]
            delta[i, j] = 1 - g - gamma[i, j]
    return alpha, beta, gamma, delta


def _divide_numpy(pred, gt):
    alpha = ((pred == 1) & (gt == 1)).astype(np.int64)
    gamma = ((pred == 0) & (gt == 0)).astype(np.int64)
    beta = gt.astype(np.int64) - alpha
    delta = 1 - gt.astype(np.int64) - gamma
    return alpha, beta, gamma, delta


# ---------------------------------------------------------------- pooling


@_jit
def _masked_pool_loop(features, mask):
    c, h, w = features.shape
    out = np.zeros(c, np.float64)
    count = 0
    total = 0.0
    for i in range(h):
        for j in range(w):
            if mask[i, j] != 0:
                count += 1
                total += mask[i, j]
    if count == 0:
        return out, count
    # channel-outer order walks each feature plane contiguously
    for k in range(c):
        acc = 0.0
        for i in range(h):
            for j in range(w):
                if mask[i, j] != 0:
                    acc += features[k, i, j] * mask[i, j]
        out[k] = acc / total
    return out, count


def _masked_pool_numpy(features, mask):
    m = mask.astype(np.float64)
    total = m.sum()
    count = int(np.count_nonzero(mask))
    if count == 0:
        return np.zeros(features.shape[0], np.float64), 0
    out = np.tensordot(features.astype(np.float64), m, axes=([1, 2], [0, 1])) / total
    return out, count


# ---------------------------------------------------------------- cosine


@_jit
def _cosine_loop(features, vec):
    c, h, w = features.shape
    out = np.zeros((h, w), np.float64)
    vnorm = 0.0
    for k in range(c):
        vnorm += vec[k] * vec[k]
    vnorm = np.sqrt(vnorm)
    if vnorm == 0.0:
        return out, h * w
    dot = np.zeros((h, w), np.float64)
    fsq = np.zeros((h, w), np.float64)
    for k in range(c):
        v = vec[k]
        for i in range(h):
            for j in range(w):
                f = features[k, i, j]
                dot[i, j] += f * v
                fsq[i, j] += f * f
    zero_cols = 0
    for i in range(h):
        for j in range(w):
            if fsq[i, j] == 0.0:
                zero_cols += 1
            else:
                out[i, j] = dot[i, j] / (vnorm * np.sqrt(fsq[i, j]))
    return out, zero_cols


def _cosine_numpy(features, vec):
    f = features.astype(np.float64)
    v = vec.astype(np.float64)
    vnorm = np.linalg.norm(v)
    h, w = f.shape[1:]
    if vnorm == 0.0:
        return np.zeros((h, w)), h * w
    dot = np.tensordot(v, f, axes=(0, 0))
    fnorm = np.sqrt((f * f).sum(axis=0))
    zero = fnorm == 0.0
    out = np.zeros((h, w))
    np.divide(dot, vnorm * fnorm, out=out, where=~zero)
    return out, int(zero.sum())


# ---------------------------------------------------------------- counting


@_jit
def _inter_union_loop(pred, gt):
    inter = 0
    union = 0
    h, w = pred.shape
    for i in range(h):
        for j in range(w):
            p = pred[i, j] != 0
            g = gt[i, j] != 0
            if p and g:
                inter += 1
            if p or g:
                union += 1
    return inter, union


def _inter_union_numpy(pred, gt):
    p = pred != 0
    g = gt != 0
    return int((p & g).sum()), int((p | g).sum())


@_jit
def _confusion_loop(confusion, label, pred, target_class):
    h, w = label.shape
    for i in range(h):
        for j in range(w):
            if pred[i, j] != 0:
                g = label[i, j]
                if 0 <= g < confusion.shape[0]:
                    confusion[g, target_class] += 1
    return confusion


def _confusion_numpy(confusion, label, pred, target_class):
    sel = (pred != 0) & (label >= 0) & (label < confusion.shape[0])
    counts = np.bincount(label[sel].astype(np.int64), minlength=confusion.shape[0])
    confusion[:, target_class] += counts[: confusion.shape[0]]
    return confusion


if _accel.USE_NUMBA:
    divide_kernel = _divide_loop
    masked_pool_kernel = _masked_pool_loop
    cosine_kernel = _cosine_loop
    inter_union_kernel = _inter_union_loop
    confusion_kernel = _confusion_loop
else:
    divide_kernel = _divide_numpy
    masked_pool_kernel = _masked_pool_numpy
    cosine_kernel = _cosine_numpy
    inter_union_kernel = _inter_union_numpy
    confusion_kernel = _confusion_numpy

IMPLEMENTATIONS = {
    "divide": (_divide_loop, _divide_numpy),
    "masked_pool": (_masked_pool_loop, _masked_pool_numpy),
    "cosine": (_cosine_loop, _cosine_numpy),
    "inter_union": (_inter_union_loop, _inter_union_numpy),
    "confusion": (_confusion_loop, _confusion_numpy),
}
