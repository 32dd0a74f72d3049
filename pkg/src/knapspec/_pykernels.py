"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""

import numpy as np


def cos_rows_batch(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[1:] != B.shape:
        raise ValueError("shape mismatch between candidate and reference rows")
    bn = np.sqrt((B * B).sum(-1))
    an = np.sqrt((A * A).sum(-1))
    if np.any(bn <= 0):
        raise ValueError("zero-norm reference row")
    if np.any(an <= 0):
        raise ValueError("zero-norm candidate row")
    return ((A * B).sum(-1) / (an * bn)).mean(-1)


def argmax_rows(S):
    return np.argmax(np.asarray(S), axis=-1).astype(np.int64)


def relax_row(exec_score, skip_score, w, tau, cap):
    n = exec_score.shape[0]
    ss = np.full(n, np.nan)
    ss[w:] = skip_score[: n - w]
    has_e = ~np.isnan(exec_score)
    has_s = ~np.isnan(ss)
    take_e = has_e & (~has_s | (exec_score >= ss))
    take_s = has_s & ~take_e
    choice = np.where(take_e, 1, np.where(take_s, 2, 0)).astype(np.int8)
    score = np.where(take_e, exec_score, np.where(take_s, ss, np.nan))
    drop = (score < tau) | (np.arange(n) > cap)
    choice[drop] = 0
    score[choice == 0] = np.nan
    return choice, score
