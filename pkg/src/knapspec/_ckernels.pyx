# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled DP kernels: row-mean cosine, row argmax, and the execute/skip relaxation."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, NAN, isnan

cnp.import_array()


def cos_rows_batch(const float[:, :, ::1] A, const float[:, ::1] B):
    cdef Py_ssize_t c = A.shape[0], r = A.shape[1], d = A.shape[2]
    cdef Py_ssize_t k, i, t
    cdef double dot, na, nb, acc, a, b
    if B.shape[0] != r or B.shape[1] != d:
        raise ValueError("shape mismatch between candidate and reference rows")
    out = np.empty(c, dtype=np.float64)
    cdef double[::1] res = out
    cdef double[::1] bnorm = np.empty(r, dtype=np.float64)
    for i in range(r):
        nb = 0.0
        for t in range(d):
            b = B[i, t]
            nb += b * b
        if nb <= 0.0:
            raise ValueError("zero-norm reference row")
        bnorm[i] = sqrt(nb)
    for k in range(c):
        acc = 0.0
        for i in range(r):
            dot = 0.0
            na = 0.0
            for t in range(d):
                a = A[k, i, t]
                dot += a * B[i, t]
                na += a * a
            if na <= 0.0:
                raise ValueError("zero-norm candidate row")
            acc += dot / (sqrt(na) * bnorm[i])
        res[k] = acc / r
    return out


def argmax_rows(const float[:, ::1] S):
    cdef Py_ssize_t r = S.shape[0], V = S.shape[1], i, j, best
    cdef float m
    out = np.empty(r, dtype=np.int64)
    cdef long long[::1] res = out
    for i in range(r):
        best = 0
        m = S[i, 0]
        for j in range(1, V):
            if S[i, j] > m:
                m = S[i, j]
                best = j
        res[i] = best
    return out


def relax_row(const double[::1] exec_score, const double[::1] skip_score, Py_ssize_t w,
              double tau, Py_ssize_t cap):
    cdef Py_ssize_t n = exec_score.shape[0], j
    cdef double se, ss, s
    cdef signed char ch
    choice = np.zeros(n, dtype=np.int8)
    score = np.full(n, np.nan)
    cdef signed char[::1] cv = choice
    cdef double[::1] sv = score
    for j in range(n):
        se = exec_score[j]
        ss = skip_score[j - w] if j >= w else NAN
        ch = 0
        if not isnan(se) and (isnan(ss) or se >= ss):
            ch = 1
            s = se
        elif not isnan(ss):
            ch = 2
            s = ss
        if ch != 0 and (s < tau or j > cap):
            ch = 0
        if ch != 0:
            cv[j] = ch
            sv[j] = s
    return choice, score
