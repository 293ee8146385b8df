
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hal import align
from hal.align import _viterbi_py
from hal.core import ValidationError, labels_to_segments

BACKENDS = ["python"] + (["cython"] if align.BACKEND == "cython" else [])
A, B, C = 0, 1, 2


def random_posteriors(rng, T, U, sharp=1.0):
    z = sharp * rng.normal(size=(T, U))
    p = np.exp(z - z.max(1, keepdims=True))
    return p / p.sum(1, keepdims=True)


def random_transcript(rng, M, U):
    t = [int(rng.integers(U))]
    while len(t) < M:
        nxt = int(rng.integers(U))
        if nxt != t[-1]:
            t.append(nxt)
    return t


def path_score(logp, labels):
    # left-to-right sum, the same order the DP accumulates in
    s = 0.0
    for t, u in enumerate(labels):
        s += logp[t, u]
    return s


def brute_force(post, transcript, min_len):
    logp = align.log_posteriors(post)
    best, best_labels = -np.inf, []
    for lab in align.enumerate_alignments(len(post), transcript, min_len):
        s = path_score(logp, lab)
        if s > best:
            best, best_labels = s, [lab]
        elif s == best:
            best_labels.append(lab)
    return best, best_labels


def boundaries_of(labels):
    return tuple(s.start for s in labels_to_segments(labels))[1:]


def earliest(labelings):
    # decide from the last boundary backwards: smallest reversed boundary tuple
    return min(labelings, key=lambda lab: boundaries_of(lab)[::-1])


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_entry_transcript(backend):
    post = random_posteriors(np.random.default_rng(0), 6, 3)
    res = align.viterbi_align(post, [B], backend=backend)
    assert res.labels.tolist() == [B] * 6 and res.boundaries == ()
    assert res.score == pytest.approx(np.log(post[:, B]).sum(), abs=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_one_hot_posteriors_returned_exactly(backend):
    labels = np.array([A, A, B, B, B, C])
    post = np.eye(3)[labels]
    res = align.viterbi_align(post, [A, B, C], backend=backend)
    assert res.labels.tolist() == labels.tolist()
    assert res.score == 0.0


@pytest.mark.parametrize("backend", BACKENDS)
def test_hand_instance(backend):
    post = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]])
    res = align.viterbi_align(post, [A, B], backend=backend)
    assert res.boundaries == (2,)
    best, labs = brute_force(post, [A, B], 1)
    assert len(list(align.enumerate_alignments(4, [A, B]))) == 3
    assert res.score == best and res.labels.tolist() == labs[0].tolist()


def test_enumeration_counts_and_guards():
    assert len(list(align.enumerate_alignments(3, [A, B], 1))) == 2
    assert len(list(align.enumerate_alignments(4, [A, B], 2))) == 1
    with pytest.raises(ValidationError):
        align.enumerate_alignments(2, [A, B, C])
    with pytest.raises(ValidationError, match="guard"):
        align.enumerate_alignments(17, [A])
    with pytest.raises(ValidationError, match="guard"):
        align.enumerate_alignments(8, [A, B, A, B, A])


def test_infeasible_and_bad_ids():
    post = np.full((3, 2), 0.5)
    with pytest.raises(ValidationError, match="transcript does not fit"):
        align.viterbi_align(post, [A, B], min_segment_len=2)
    with pytest.raises(ValidationError):
        align.viterbi_align(post, [A, 5])


@pytest.mark.parametrize("backend", BACKENDS)
def test_oracle_equivalence_random(backend):
    rng = np.random.default_rng(42)
    for _ in range(100):
        T = int(rng.integers(1, 9))
        U = int(rng.integers(2, 5))
        M = int(rng.integers(1, min(3, T) + 1))
        L = int(rng.integers(1, T // M + 1))
        tr = random_transcript(rng, M, U)
        post = random_posteriors(rng, T, U, sharp=float(rng.uniform(0.5, 3)))
        res = align.viterbi_align(post, tr, L, backend=backend)
        best, labs = brute_force(post, tr, L)
        assert res.score == best
        assert path_score(align.log_posteriors(post), res.labels) == best
        assert res.labels.tolist() == earliest(labs).tolist()


@pytest.mark.parametrize("backend", BACKENDS)
def test_ties_break_toward_earliest_boundary(backend):
    # uniform rows: every labeling ties, the earliest boundaries win
    post = np.full((7, 3), 1.0 / 3)
    res = align.viterbi_align(post, [A, B, C], 1, backend=backend)
    assert res.boundaries == (1, 2)
    res = align.viterbi_align(post, [A, B, C], 2, backend=backend)
    assert res.boundaries == (2, 4)
    # two-way tie between boundary 1 and 3, frame 1..2 indifferent
    post = np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5], [0.0, 1.0]])
    res = align.viterbi_align(post, [A, B], backend=backend)
    assert res.boundaries == (1,)


def test_tie_instances_match_oracle_rule():
    rng = np.random.default_rng(7)
    for _ in range(60):
        T = int(rng.integers(2, 9))
        M = int(rng.integers(1, min(3, T) + 1))
        U = 3
        tr = random_transcript(rng, M, U)
        # quantized posteriors produce many exact ties
        post = rng.choice([0.25, 0.5], size=(T, U))
        post /= post.sum(1, keepdims=True)
        res = align.viterbi_align(post, tr, 1, backend="python")
        _, labs = brute_force(post, tr, 1)
        assert res.labels.tolist() == earliest(labs).tolist()


@pytest.mark.skipif(align.BACKEND != "cython", reason="compiled extension not built")
def test_backends_agree_on_large_instances():
    rng = np.random.default_rng(3)
    for _ in range(20):
        T, U = int(rng.integers(50, 300)), 6
        M = int(rng.integers(1, 8))
        tr = random_transcript(rng, M, U)
        post = random_posteriors(rng, T, U)
        a = align.viterbi_align(post, tr, 3, backend="python")
        b = align.viterbi_align(post, tr, 3, backend="cython")
        assert a.score == b.score and np.array_equal(a.labels, b.labels)


def test_zero_posteriors_are_floored():
    post = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    res = align.viterbi_align(post, [B, A])
    # B must take frame 0 and A frame 2: two floored entries at best
    assert res.boundaries == (1,)
    assert res.score == pytest.approx(2 * np.log(1e-12), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(-5, 5))
def test_alignment_invariants(seed, shift):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 30))
    U = 4
    M = int(rng.integers(1, min(5, T) + 1))
    L = int(rng.integers(1, T // M + 1))
    tr = random_transcript(rng, M, U)
    post = random_posteriors(rng, T, U)
    res = align.viterbi_align(post, tr, L)
    segs = labels_to_segments(res.labels)
    assert [s.label for s in segs] == tr
    assert min(s.length for s in segs) >= L
    assert len(res.boundaries) == M - 1
    # adding a constant to every log posterior shifts the score by T * const
    logp = align.log_posteriors(post)
    shifted = align.viterbi_align_logp(logp + shift, tr, L)
    assert np.array_equal(shifted.labels, res.labels)
    assert shifted.score == pytest.approx(res.score + T * shift, abs=1e-9)


def test_boundary_mask_examples():
    assert align.boundary_mask(10, [5], 0).all()
    mask = align.boundary_mask(10, [5], 2)
    assert np.flatnonzero(~mask).tolist() == [3, 4, 5, 6]
    assert not align.boundary_mask(10, [5], 10).any()


def test_pseudo_labels_and_prior_correction():
    post = np.array([[0.6, 0.4]] * 4 + [[0.45, 0.55]] * 4)
    labels, mask = align.pseudo_labels(post, [A, B], 2, 1)
    assert labels.tolist() == [A] * 4 + [B] * 4
    assert mask.tolist() == [True] * 3 + [False, False] + [True] * 3
    # dividing by a prior that favours A moves the boundary earlier
    labels, _ = align.pseudo_labels(post, [A, B], 2, 0, class_prior=[0.9, 0.1])
    assert labels.tolist() == [A] * 2 + [B] * 6
    with pytest.raises(ValidationError):
        align.pseudo_labels(post, [A, B], class_prior=[1.0])


def test_uniform_alignment():
    assert align.uniform_alignment(7, [A, B, C]).tolist() == [A, A, B, B, C, C, C]
    with pytest.raises(ValidationError):
        align.uniform_alignment(2, [A, B, C])


def test_python_kernel_matches_reference_loop():
    # plain nested-loop DP, independent of the vectorized kernel
    rng = np.random.default_rng(11)
    for _ in range(30):
        T, U, M, L = 12, 3, 3, 2
        tr = np.array(random_transcript(rng, M, U))
        logp = np.log(random_posteriors(rng, T, U))
        S = M * L
        score = np.full((T, S), -np.inf)
        score[0, 0] = logp[0, tr[0]]
        for t in range(1, T):
            for s in range(S):
                stay = score[t - 1, s] if s % L == L - 1 else -np.inf
                adv = score[t - 1, s - 1] if s else -np.inf
                score[t, s] = max(stay, adv) + logp[t, tr[s // L]]
        seg, sc = _viterbi_py.viterbi_states(logp, tr, L)
        assert sc == score[T - 1, S - 1]
