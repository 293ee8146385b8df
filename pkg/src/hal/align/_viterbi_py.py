"""Pure-Python/NumPy transcript-constrained Viterbi recursion.

Each transcript entry expands into ``min_len`` chained states; only the last
one may repeat. Scores are accumulated frame by frame so a path's score is the
left-to-right sum of its log posteriors.
"""
import numpy as np


def viterbi_states(logp: np.ndarray, transcript: np.ndarray, min_len: int):
    T = logp.shape[0]
    M = transcript.shape[0]
    L = int(min_len)
    S = M * L
    cls = np.repeat(transcript, L)
    is_loop = (np.arange(S) % L) == L - 1

    prev = np.full(S, -np.inf)
    prev[0] = logp[0, cls[0]]
    bp = np.zeros((T, S), dtype=np.uint8)
    stay = np.empty(S)
    adv = np.empty(S)
    for t in range(1, T):
        stay.fill(-np.inf)
        stay[is_loop] = prev[is_loop]
        adv[0] = -np.inf
        adv[1:] = prev[:-1]
        take_stay = stay >= adv
        bp[t] = take_stay
        prev = np.where(take_stay, stay, adv) + logp[t, cls]

    score = float(prev[S - 1])
    seg = np.empty(T, dtype=np.int64)
    s = S - 1
    for t in range(T - 1, -1, -1):
        seg[t] = s // L
        if t > 0 and not bp[t, s]:
            s -= 1
    return seg, score
