"""Pure-Python/numpy versions of the compiled kernels; same signatures and results."""

import numpy as np


def ctc_forward_backward(logp, target, blank):
    logp = np.asarray(logp, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    T, C = logp.shape
    L = target.shape[0]
    S = 2 * L + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = target
    # skip transition s-2 -> s allowed for labels differing from the label two back
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    emit = logp[:, ext]  # (T, S)
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            a = prev.copy()
            a[1:] = np.logaddexp(a[1:], prev[:-1])
            a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
            alpha[t] = a + emit[t]
        ll = alpha[T - 1, S - 1]
        if S > 1:
            ll = np.logaddexp(ll, alpha[T - 1, S - 2])

        beta = np.full((T, S), -np.inf)
        beta[T - 1, S - 1] = 0.0
        if S > 1:
            beta[T - 1, S - 2] = 0.0
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            b = nxt.copy()
            b[:-1] = np.logaddexp(b[:-1], nxt[1:])
            b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
            beta[t] = b

    grad = np.zeros((T, C))
    if np.isfinite(ll):
        occ = np.exp(alpha + beta - ll)
        for s in range(S):
            grad[:, ext[s]] -= occ[:, s]
    return float(-ll), grad


def edit_ops(ref, hyp):
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, up = d[i], d[i - 1]
        for j in range(1, m + 1):
            row[j] = min(up[j - 1] + (ri != hyp[j - 1]), row[j - 1] + 1, up[j] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i -= 1
            j -= 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return d[n][m], int(subs), ins, dels
