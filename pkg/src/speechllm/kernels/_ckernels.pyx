# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled dynamic-programming kernels: CTC forward-backward and Levenshtein alignment."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY

cnp.import_array()


cdef inline double _lae(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def ctc_forward_backward(const double[:, ::1] logp, const cnp.int64_t[::1] target, long blank):
    """Negative log-likelihood of ``target`` and its gradient w.r.t. ``logp`` (T x C).

    Returns (nll, grad) with grad[t, c] = -sum of state occupancies emitting c at t.
    nll is +inf when no alignment exists.
    """
    cdef Py_ssize_t T = logp.shape[0]
    cdef Py_ssize_t C = logp.shape[1]
    cdef Py_ssize_t L = target.shape[0]
    cdef Py_ssize_t S = 2 * L + 1
    cdef Py_ssize_t t, s
    cdef double a, ll, occ
    ext_arr = np.empty(S, dtype=np.int64)
    cdef cnp.int64_t[::1] ext = ext_arr
    for s in range(S):
        ext[s] = blank if s % 2 == 0 else target[(s - 1) // 2]
    alpha_arr = np.full((T, S), -np.inf)
    beta_arr = np.full((T, S), -np.inf)
    grad_arr = np.zeros((T, C))
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef double[:, ::1] grad = grad_arr

    with nogil:
        alpha[0, 0] = logp[0, ext[0]]
        if S > 1:
            alpha[0, 1] = logp[0, ext[1]]
        for t in range(1, T):
            for s in range(S):
                a = alpha[t - 1, s]
                if s >= 1:
                    a = _lae(a, alpha[t - 1, s - 1])
                if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                    a = _lae(a, alpha[t - 1, s - 2])
                if a != -INFINITY:
                    alpha[t, s] = a + logp[t, ext[s]]
        ll = alpha[T - 1, S - 1]
        if S > 1:
            ll = _lae(ll, alpha[T - 1, S - 2])

        beta[T - 1, S - 1] = 0.0
        if S > 1:
            beta[T - 1, S - 2] = 0.0
        for t in range(T - 2, -1, -1):
            for s in range(S):
                a = beta[t + 1, s] + logp[t + 1, ext[s]]
                if s + 1 < S:
                    a = _lae(a, beta[t + 1, s + 1] + logp[t + 1, ext[s + 1]])
                if s + 2 < S and ext[s + 2] != blank and ext[s + 2] != ext[s]:
                    a = _lae(a, beta[t + 1, s + 2] + logp[t + 1, ext[s + 2]])
                beta[t, s] = a

        if ll != -INFINITY:
            for t in range(T):
                for s in range(S):
                    occ = alpha[t, s] + beta[t, s] - ll
                    if occ != -INFINITY:
                        grad[t, ext[s]] -= exp(occ)
    return -ll, grad_arr


def edit_ops(ref, hyp):
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    Accepts any integer sequences. Returns (distance, substitutions,
    insertions, deletions). On ties the backtrace prefers the diagonal move,
    then insertion, then deletion.
    """
    return _edit_ops(np.ascontiguousarray(ref, dtype=np.int64).reshape(-1),
                     np.ascontiguousarray(hyp, dtype=np.int64).reshape(-1))


cdef tuple _edit_ops(const cnp.int64_t[::1] ref, const cnp.int64_t[::1] hyp):
    cdef Py_ssize_t n = ref.shape[0]
    cdef Py_ssize_t m = hyp.shape[0]
    cdef Py_ssize_t i, j
    cdef long best, c
    table_arr = np.empty((n + 1, m + 1), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] d = table_arr
    cdef long subs = 0, ins = 0, dels = 0
    with nogil:
        for i in range(n + 1):
            d[i, 0] = i
        for j in range(m + 1):
            d[0, j] = j
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                best = d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
                c = d[i, j - 1] + 1
                if c < best:
                    best = c
                c = d[i - 1, j] + 1
                if c < best:
                    best = c
                d[i, j] = best
        i = n
        j = m
        while i > 0 or j > 0:
            if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
                if ref[i - 1] != hyp[j - 1]:
                    subs += 1
                i -= 1
                j -= 1
            elif j > 0 and d[i, j] == d[i, j - 1] + 1:
                ins += 1
                j -= 1
            else:
                dels += 1
                i -= 1
    return int(d[n, m]), subs, ins, dels
