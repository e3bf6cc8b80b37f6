# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled training kernels.

Drop-in replacement for splitnn.kernels.numpy_backend: same signatures,
same task/act/head codes, same update rule. All math is float64; the
small-matrix loops here beat BLAS dispatch overhead at the batch sizes
this package trains with.
"""

import numpy as np

from libc.math cimport exp, log, isfinite

NAME = "cython"
TASK_CLASSIFICATION = 0
TASK_REGRESSION = 1
ACT_RELU = 0
ACT_IDENTITY = 1
HEAD_PER_BRANCH = 0
HEAD_FUSED = 1


cdef class _Branch:
    cdef double[:, ::1] xc      # full gathered input block (N x m)
    cdef double[:, ::1] w1      # h x m
    cdef double[::1] b1         # h
    cdef double[:, ::1] w2      # head weights (own, or the shared fused head)
    cdef double[::1] b2         # head bias (own, or shared)
    cdef Py_ssize_t col_off     # column offset of this branch inside w2
    cdef Py_ssize_t m
    cdef Py_ssize_t width
    cdef double[:, ::1] xb      # batch scratch (bs x m)
    cdef double[:, ::1] h       # batch scratch (bs x h)
    cdef double[:, ::1] dh      # batch scratch (bs x h)


cdef void _gather(double[:, ::1] src, long[::1] order, Py_ssize_t start,
                  Py_ssize_t bs, double[:, ::1] dst) noexcept:
    cdef Py_ssize_t b, c, r, m = src.shape[1]
    for b in range(bs):
        r = order[start + b]
        for c in range(m):
            dst[b, c] = src[r, c]


cdef void _forward(_Branch br, Py_ssize_t bs, int act) noexcept:
    cdef Py_ssize_t b, u, c
    cdef double acc
    for b in range(bs):
        for u in range(br.width):
            acc = br.b1[u]
            for c in range(br.m):
                acc += br.xb[b, c] * br.w1[u, c]
            if act == ACT_RELU and acc < 0.0:
                acc = 0.0
            br.h[b, u] = acc


cdef void _head_accumulate(_Branch br, Py_ssize_t bs, Py_ssize_t out_dim,
                           double[:, ::1] logits) noexcept:
    cdef Py_ssize_t b, o, u
    cdef double acc
    for b in range(bs):
        for o in range(out_dim):
            acc = 0.0
            for u in range(br.width):
                acc += br.h[b, u] * br.w2[o, br.col_off + u]
            logits[b, o] += acc


cdef double _ce_loss_grad(double[:, ::1] logits, Py_ssize_t bs, Py_ssize_t out_dim,
                          long[::1] y, double gscale, double[:, ::1] g) noexcept:
    """Mean cross-entropy; g = (softmax - onehot) * gscale."""
    cdef Py_ssize_t b, o
    cdef double mx, s, p, loss = 0.0
    for b in range(bs):
        mx = logits[b, 0]
        for o in range(1, out_dim):
            if logits[b, o] > mx:
                mx = logits[b, o]
        s = 0.0
        for o in range(out_dim):
            p = exp(logits[b, o] - mx)
            g[b, o] = p
            s += p
        loss += log(s) + mx - logits[b, y[b]]
        for o in range(out_dim):
            g[b, o] = g[b, o] / s * gscale
        g[b, y[b]] -= gscale
    return loss / bs


cdef double _mse_loss_grad(double[:, ::1] logits, Py_ssize_t bs, double[::1] y,
                           double gscale, double[:, ::1] g) noexcept:
    cdef Py_ssize_t b
    cdef double err, loss = 0.0
    for b in range(bs):
        err = logits[b, 0] - y[b]
        loss += err * err
        g[b, 0] = 2.0 * err * gscale
    return loss / bs


cdef void _compute_dh(_Branch br, Py_ssize_t bs, Py_ssize_t out_dim,
                      double[:, ::1] g) noexcept:
    cdef Py_ssize_t b, u, o
    cdef double acc
    for b in range(bs):
        for u in range(br.width):
            acc = 0.0
            for o in range(out_dim):
                acc += g[b, o] * br.w2[o, br.col_off + u]
            br.dh[b, u] = acc


cdef void _update_head_block(_Branch br, Py_ssize_t bs, Py_ssize_t out_dim,
                             double[:, ::1] g, double lr) noexcept:
    cdef Py_ssize_t o, u, b
    cdef double acc
    for o in range(out_dim):
        for u in range(br.width):
            acc = 0.0
            for b in range(bs):
                acc += g[b, o] * br.h[b, u]
            br.w2[o, br.col_off + u] -= lr * acc


cdef void _update_bias2(double[::1] b2, Py_ssize_t bs, Py_ssize_t out_dim,
                        double[:, ::1] g, double lr) noexcept:
    cdef Py_ssize_t o, b
    cdef double acc
    for o in range(out_dim):
        acc = 0.0
        for b in range(bs):
            acc += g[b, o]
        b2[o] -= lr * acc


cdef void _update_hidden(_Branch br, Py_ssize_t bs, int act, double lr) noexcept:
    cdef Py_ssize_t b, u, c
    cdef double acc
    if act == ACT_RELU:
        for b in range(bs):
            for u in range(br.width):
                if br.h[b, u] <= 0.0:
                    br.dh[b, u] = 0.0
    for u in range(br.width):
        acc = 0.0
        for b in range(bs):
            acc += br.dh[b, u]
        br.b1[u] -= lr * acc
        for c in range(br.m):
            acc = 0.0
            for b in range(bs):
                acc += br.dh[b, u] * br.xb[b, c]
            br.w1[u, c] -= lr * acc


cdef _setup(list xcs, list w1s, list b1s, list w2s, list b2s, int head_mode,
            Py_ssize_t batch_size):
    cdef list branches = []
    cdef Py_ssize_t i, off = 0
    cdef _Branch br
    for i in range(len(xcs)):
        br = _Branch()
        br.xc = xcs[i]
        br.w1 = w1s[i]
        br.b1 = b1s[i]
        if head_mode == HEAD_FUSED:
            br.w2 = w2s[0]
            br.b2 = b2s[0]
            br.col_off = off
        else:
            br.w2 = w2s[i]
            br.b2 = b2s[i]
            br.col_off = 0
        br.m = br.xc.shape[1]
        br.width = br.w1.shape[0]
        off += br.width
        br.xb = np.empty((batch_size, br.m))
        br.h = np.empty((batch_size, br.width))
        br.dh = np.empty((batch_size, br.width))
        branches.append(br)
    return branches


cdef double _step(list branches, Py_ssize_t k, long[::1] order, Py_ssize_t start,
                  Py_ssize_t bs, long[::1] yi, double[::1] yf, int act, int task,
                  int head_mode, double lr, Py_ssize_t out_dim,
                  double[:, ::1] logits, double[:, ::1] g):
    """One SGD step on order[start:start+bs]; returns the pre-update loss."""
    cdef _Branch br
    cdef Py_ssize_t i, b, o
    cdef double loss = 0.0, gscale

    if head_mode == HEAD_PER_BRANCH:
        gscale = 1.0 / (k * bs)
        for i in range(k):
            br = branches[i]
            _gather(br.xc, order, start, bs, br.xb)
            _forward(br, bs, act)
            for b in range(bs):
                for o in range(out_dim):
                    logits[b, o] = br.b2[o]
            _head_accumulate(br, bs, out_dim, logits)
            if task == TASK_CLASSIFICATION:
                loss += _ce_loss_grad(logits, bs, out_dim, yi, gscale, g)
            else:
                loss += _mse_loss_grad(logits, bs, yf, gscale, g)
            _compute_dh(br, bs, out_dim, g)
            _update_head_block(br, bs, out_dim, g, lr)
            _update_bias2(br.b2, bs, out_dim, g, lr)
            _update_hidden(br, bs, act, lr)
        return loss / k

    gscale = 1.0 / bs
    br = branches[0]
    for b in range(bs):
        for o in range(out_dim):
            logits[b, o] = br.b2[o]
    for i in range(k):
        br = branches[i]
        _gather(br.xc, order, start, bs, br.xb)
        _forward(br, bs, act)
        _head_accumulate(br, bs, out_dim, logits)
    if task == TASK_CLASSIFICATION:
        loss = _ce_loss_grad(logits, bs, out_dim, yi, gscale, g)
    else:
        loss = _mse_loss_grad(logits, bs, yf, gscale, g)
    for i in range(k):
        br = branches[i]
        _compute_dh(br, bs, out_dim, g)
        _update_head_block(br, bs, out_dim, g, lr)
    _update_bias2((<_Branch>branches[0]).b2, bs, out_dim, g, lr)
    for i in range(k):
        _update_hidden(<_Branch>branches[i], bs, act, lr)
    return loss


def sgd_epoch(list xcs, y, list w1s, list b1s, list w2s, list b2s,
              int act, int task, int head_mode, long[::1] order,
              int batch_size, double lr):
    """Same contract as numpy_backend.sgd_epoch."""
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t k = len(xcs)
    cdef Py_ssize_t out_dim = w2s[0].shape[0]
    cdef Py_ssize_t bsize = batch_size if batch_size < n else n
    cdef list branches = _setup(xcs, w1s, b1s, w2s, b2s, head_mode, bsize)
    cdef double[:, ::1] logits = np.empty((bsize, out_dim))
    cdef double[:, ::1] g = np.empty((bsize, out_dim))
    cdef long[::1] yi = None
    cdef double[::1] yf = None
    cdef long[::1] ybi = None
    cdef double[::1] ybf = None
    cdef Py_ssize_t start, bs, b, batches = 0
    cdef double total = 0.0, loss

    if task == TASK_CLASSIFICATION:
        yi = y
        ybi = np.empty(bsize, dtype=np.int64)
    else:
        yf = y
        ybf = np.empty(bsize)

    start = 0
    while start < n:
        bs = n - start if n - start < batch_size else batch_size
        if task == TASK_CLASSIFICATION:
            for b in range(bs):
                ybi[b] = yi[order[start + b]]
        else:
            for b in range(bs):
                ybf[b] = yf[order[start + b]]
        loss = _step(branches, k, order, start, bs, ybi, ybf, act, task,
                     head_mode, lr, out_dim, logits, g)
        if not isfinite(loss):
            return total / (batches if batches > 0 else 1), batches
        total += loss
        batches += 1
        start += batch_size
    return total / batches, -1


def sgd_batch(list xcs, y, list w1s, list b1s, list w2s, list b2s,
              int act, int task, int head_mode, double lr):
    """Same contract as numpy_backend.sgd_batch (one full-batch step)."""
    cdef Py_ssize_t n = xcs[0].shape[0]
    order = np.arange(n, dtype=np.int64)
    loss, bad = sgd_epoch(xcs, y, w1s, b1s, w2s, b2s, act, task, head_mode,
                          order, n, lr)
    if bad >= 0:
        return float("nan")
    return loss
