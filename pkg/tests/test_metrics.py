import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hal.core import ValidationError, labels_to_segments
from hal.metrics import evaluate_corpus, iou_iod, mof, mof_bg, segment_scores

BG, A, B = 0, 1, 2


def test_mof_examples():
    assert mof([A, B, A], [A, B, A]) == 1.0
    assert mof([A, A], [B, B]) == 0.0
    assert mof([A, A, B, B], [A, B, B, B]) == 0.75
    with pytest.raises(ValidationError, match="length mismatch"):
        mof([A], [A, B])


def test_mof_bg_examples():
    assert mof_bg([A, B], [BG, BG]) == 1.0
    assert mof_bg([BG, A, A, B], [BG, A, A, B]) == 1.0
    assert mof_bg([BG, A, A, B], [BG, A, B, B]) == pytest.approx(2 / 3)
    with pytest.raises(ValidationError):
        mof_bg([A], [A, B])


def test_iou_iod_examples():
    gt = labels_to_segments([A] * 4)
    assert iou_iod(gt, gt) == (1.0, 1.0)
    assert iou_iod([(A, 0, 2), (B, 2, 4)], [(A, 0, 4)]) == (0.5, 1.0)
    assert iou_iod([(B, 0, 4)], [(A, 0, 4)]) == (0.0, 0.0)
    with pytest.raises(ValidationError, match="different lengths"):
        iou_iod([(A, 0, 3)], [(A, 0, 4)])


def test_background_segments_excluded_by_default():
    gt = [(BG, 0, 2), (A, 2, 4)]
    pred = [(A, 0, 4)]
    assert segment_scores(pred, gt) == [(0.5, 0.5)]
    assert len(segment_scores(pred, gt, include_background=True)) == 2


def test_ties_pick_earliest_candidate():
    # both predicted A segments overlap the gt segment by 2 frames
    pred = [(A, 0, 2), (B, 2, 4), (A, 4, 8)]
    gt = [(A, 0, 6), (B, 6, 8)]
    assert segment_scores(pred, gt)[0] == (2 / 6, 1.0)
    # the later candidate would have given (2/8, 2/4)


def _rand_labels(rng, T, U):
    return rng.integers(0, U, size=T)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_iod_at_least_iou(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 40))
    pred = labels_to_segments(_rand_labels(rng, T, 3))
    gt = labels_to_segments(_rand_labels(rng, T, 3))
    for iou, iod in segment_scores(pred, gt, include_background=True):
        assert 0.0 <= iou <= iod <= 1.0


def test_corpus_single_and_identical_pairs():
    pred, gt = [A, A, B, B], [A, B, B, B]
    one = evaluate_corpus([(pred, gt)])
    v = one.per_video[0]
    assert (one.mof, one.mof_bg, one.iou, one.iod) == (v.mof, v.mof_bg, v.iou, v.iod)
    two = evaluate_corpus([(pred, gt), (pred, gt)])
    assert (two.mof, two.mof_bg, two.iou, two.iod) == (v.mof, v.mof_bg, v.iou, v.iod)


def test_corpus_frame_weighting_against_loop():
    rng = np.random.default_rng(5)
    pairs = [(_rand_labels(rng, T, 3), _rand_labels(rng, T, 3)) for T in (5, 17, 40)]
    rep = evaluate_corpus(pairs, video_ids=["a", "b", "c"])
    correct = frames = 0
    for p, g in pairs:
        for x, y in zip(p, g):
            correct += x == y
            frames += 1
    assert rep.mof == correct / frames
    lines = rep.to_csv().strip().split("\n")
    assert len(lines) == 1 + len(pairs) + 1
    assert lines[-1].startswith("__corpus__")


def test_corpus_vacuous_background_video():
    rep = evaluate_corpus([([A, A], [BG, BG]), ([A, B], [A, A])])
    assert rep.per_video[0].mof_bg == 1.0
    assert rep.mof_bg == 0.5  # only the second video's frames count
    assert rep.counts["videos_without_foreground"] == 1
    with pytest.raises(ValidationError):
        evaluate_corpus([])
