"""Pure-numpy training kernels (fallback backend).

Mirrors the compiled extension in splitnn.kernels._fast: same call
signatures, same update rule, same loss bookkeeping. Parameter arrays are
updated in place. Shared integer codes:

    task:      0 = classification (softmax cross-entropy), 1 = regression (MSE)
    act:       0 = relu hidden units, 1 = identity hidden units
    head_mode: 0 = one head per branch (joint loss averages the k per-head
                   losses), 1 = single fused head over the concatenated
                   hidden layer
"""

import numpy as np

NAME = "numpy"

TASK_CLASSIFICATION = 0
TASK_REGRESSION = 1
ACT_RELU = 0
ACT_IDENTITY = 1
HEAD_PER_BRANCH = 0
HEAD_FUSED = 1


def _branch_hidden(xb, w1, b1, act):
    z = xb @ w1.T + b1
    if act == ACT_RELU:
        np.maximum(z, 0.0, out=z)
    return z


def _softmax_ce(logits, y):
    """(mean cross-entropy, softmax probabilities); log-sum-exp stabilized."""
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    n = logits.shape[0]
    loss = float(np.mean(np.log(s[:, 0]) + mx[:, 0] - logits[np.arange(n), y]))
    return loss, p


def _loss_and_logit_grads(heads_out, y, task, loss_scale):
    """Per-head (loss, dL/dlogits) under the joint loss.

    loss_scale is 1/#heads; each head's gradient carries the scale so the
    summed contributions differentiate the averaged loss.
    """
    n = heads_out[0].shape[0]
    losses = []
    grads = []
    for out in heads_out:
        if task == TASK_CLASSIFICATION:
            loss, p = _softmax_ce(out, y)
            g = p
            g[np.arange(n), y] -= 1.0
            g *= loss_scale / n
        else:
            err = out[:, 0] - y
            loss = float(np.mean(err * err))
            g = (2.0 * loss_scale / n) * err[:, None]
        losses.append(loss)
        grads.append(g)
    return losses, grads


def batch_gradients(xcs, y, w1s, b1s, w2s, b2s, act, task, head_mode):
    """Joint loss and full analytic gradients for one batch (no update)."""
    k = len(xcs)
    hs = [_branch_hidden(xcs[i], w1s[i], b1s[i], act) for i in range(k)]
    if head_mode == HEAD_FUSED:
        h_cat = np.concatenate(hs, axis=1)
        heads_out = [h_cat @ w2s[0].T + b2s[0]]
        loss_scale = 1.0
    else:
        heads_out = [hs[i] @ w2s[i].T + b2s[i] for i in range(k)]
        loss_scale = 1.0 / k
    losses, logit_grads = _loss_and_logit_grads(heads_out, y, task, loss_scale)
    loss = float(sum(losses) * loss_scale)

    gw1s, gb1s, gw2s, gb2s = [], [], [], []
    if head_mode == HEAD_FUSED:
        g = logit_grads[0]
        gw2s.append(g.T @ h_cat)
        gb2s.append(g.sum(axis=0))
        dh_cat = g @ w2s[0]
        offset = 0
        for i in range(k):
            h = hs[i]
            dh = dh_cat[:, offset:offset + h.shape[1]]
            if act == ACT_RELU:
                dh = dh * (h > 0)
            gw1s.append(dh.T @ xcs[i])
            gb1s.append(dh.sum(axis=0))
            offset += h.shape[1]
    else:
        for i in range(k):
            g = logit_grads[i]
            h = hs[i]
            gw2s.append(g.T @ h)
            gb2s.append(g.sum(axis=0))
            dh = g @ w2s[i]
            if act == ACT_RELU:
                dh = dh * (h > 0)
            gw1s.append(dh.T @ xcs[i])
            gb1s.append(dh.sum(axis=0))
    return loss, gw1s, gb1s, gw2s, gb2s


def sgd_batch(xcs, y, w1s, b1s, w2s, b2s, act, task, head_mode, lr):
    """One SGD step on one batch; returns the pre-update joint loss."""
    loss, gw1s, gb1s, gw2s, gb2s = batch_gradients(
        xcs, y, w1s, b1s, w2s, b2s, act, task, head_mode
    )
    for i in range(len(w1s)):
        w1s[i] -= lr * gw1s[i]
        b1s[i] -= lr * gb1s[i]
    for i in range(len(w2s)):
        w2s[i] -= lr * gw2s[i]
        b2s[i] -= lr * gb2s[i]
    return loss


def sgd_epoch(xcs, y, w1s, b1s, w2s, b2s, act, task, head_mode, order, batch_size, lr):
    """One pass over ``order`` in batches; final partial batch kept.

    Returns (mean pre-update batch loss, index of the first batch whose
    loss went non-finite, or -1). On a non-finite loss the epoch stops
    immediately so the caller can surface a divergence error.
    """
    n = len(order)
    total = 0.0
    batches = 0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        xb = [xc[idx] for xc in xcs]
        yb = y[idx]
        loss = sgd_batch(xb, yb, w1s, b1s, w2s, b2s, act, task, head_mode, lr)
        if not np.isfinite(loss):
            return total / max(batches, 1), batches
        total += loss
        batches += 1
    return total / batches, -1
