# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled transcript-constrained Viterbi recursion.

Mirrors ``_viterbi_py.viterbi_states`` operation for operation so that both
backends return bitwise-identical scores.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def viterbi_states(const double[:, ::1] logp, const cnp.int64_t[::1] transcript, Py_ssize_t min_len):
    cdef Py_ssize_t T = logp.shape[0]
    cdef Py_ssize_t M = transcript.shape[0]
    cdef Py_ssize_t L = min_len
    cdef Py_ssize_t S = M * L
    cdef Py_ssize_t t, s, j
    cdef double stay, adv, best

    cls_np = np.empty(S, dtype=np.int64)
    loop_np = np.zeros(S, dtype=np.uint8)
    cdef cnp.int64_t[::1] cls = cls_np
    cdef unsigned char[::1] is_loop = loop_np
    for s in range(S):
        cls[s] = transcript[s // L]
        is_loop[s] = (s % L) == L - 1

    prev_np = np.full(S, -INFINITY)
    cur_np = np.full(S, -INFINITY)
    bp_np = np.zeros((T, S), dtype=np.uint8)
    cdef double[::1] prev = prev_np
    cdef double[::1] cur = cur_np
    cdef double[::1] tmp
    cdef unsigned char[:, ::1] bp = bp_np

    prev[0] = logp[0, cls[0]]
    for t in range(1, T):
        for s in range(S):
            stay = prev[s] if is_loop[s] else -INFINITY
            adv = prev[s - 1] if s > 0 else -INFINITY
            # ties keep the current segment, pushing the boundary earlier
            if stay >= adv:
                best = stay
                bp[t, s] = 1
            else:
                best = adv
                bp[t, s] = 0
            cur[s] = best + logp[t, cls[s]]
        tmp = prev
        prev = cur
        cur = tmp

    cdef double score = prev[S - 1]
    seg_np = np.empty(T, dtype=np.int64)
    cdef cnp.int64_t[::1] seg = seg_np
    s = S - 1
    for j in range(T):
        t = T - 1 - j
        seg[t] = s // L
        if t > 0 and bp[t, s] == 0:
            s -= 1
    return seg_np, score
