"""Frame and segment metrics for temporal action segmentation.

Conventions
-----------
* MoF is pooled over every frame of the corpus.
* MoF-bg is pooled over frames whose ground truth is not background. A video
  with no such frame scores 1.0 on its own but contributes zero frames to the
  corpus value.
* IoU / IoD are computed per non-background ground-truth segment ``s`` of class
  ``u`` against the predicted segment of class ``u`` with the largest overlap
  (earliest on ties); no candidate scores 0. The corpus value is the unweighted
  mean over all such ground-truth segments of all videos.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .core import BACKGROUND_ID, SegmentList, ValidationError, labels_to_segments


def _pair(pred, gt):
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValidationError(f"length mismatch: pred {pred.size} vs gt {gt.size}")
    return pred, gt


def mof(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    if gt.size == 0:
        raise ValidationError("empty sequences")
    return float(np.mean(pred == gt))


def mof_bg_counts(pred, gt, bg_id: int = BACKGROUND_ID) -> Tuple[int, int]:
    """``(correct, evaluated)`` frame counts over non-background ground truth."""
    pred, gt = _pair(pred, gt)
    keep = gt != bg_id
    return int(np.sum(pred[keep] == gt[keep])), int(keep.sum())


def mof_bg(pred, gt, bg_id: int = BACKGROUND_ID) -> float:
    correct, n = mof_bg_counts(pred, gt, bg_id)
    return 1.0 if n == 0 else correct / n


def segment_scores(pred_segs, gt_segs, bg_id: int = BACKGROUND_ID,
                   include_background: bool = False) -> List[Tuple[float, float]]:
    """Per ground-truth segment ``(iou, iod)`` pairs."""
    if not isinstance(pred_segs, SegmentList):
        pred_segs = SegmentList(tuple(pred_segs))
    if not isinstance(gt_segs, SegmentList):
        gt_segs = SegmentList(tuple(gt_segs))
    if pred_segs.T != gt_segs.T:
        raise ValidationError(f"segmentations tile different lengths: {pred_segs.T} vs {gt_segs.T}")
    out = []
    for s in gt_segs:
        if s.label == bg_id and not include_background:
            continue
        best, best_inter = None, -1
        for p in pred_segs:
            if p.label != s.label:
                continue
            inter = max(0, min(s.end, p.end) - max(s.start, p.start))
            if inter > best_inter:
                best, best_inter = p, inter
        if best is None or best_inter == 0:
            out.append((0.0, 0.0))
            continue
        union = max(s.end, best.end) - min(s.start, best.start)
        out.append((best_inter / union, best_inter / best.length))
    return out


def iou_iod(pred_segs, gt_segs, bg_id: int = BACKGROUND_ID,
            include_background: bool = False) -> Tuple[float, float]:
    scores = segment_scores(pred_segs, gt_segs, bg_id, include_background)
    if not scores:
        return 1.0, 1.0
    arr = np.asarray(scores)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


@dataclass
class VideoScores:
    video_id: str
    mof: float
    mof_bg: float
    iou: float
    iod: float
    frames: int
    frames_bg_excluded: int
    segments: int


@dataclass
class EvalReport:
    mof: float
    mof_bg: float
    iou: float
    iod: float
    per_video: List[VideoScores] = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"mof": self.mof, "mof_bg": self.mof_bg, "iou": self.iou, "iod": self.iod}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["video", "mof", "mof_bg", "iou", "iod", "frames", "frames_no_bg", "gt_segments"])
        for v in self.per_video:
            w.writerow([v.video_id, f"{v.mof:.6f}", f"{v.mof_bg:.6f}", f"{v.iou:.6f}", f"{v.iod:.6f}",
                        v.frames, v.frames_bg_excluded, v.segments])
        c = self.counts
        w.writerow(["__corpus__", f"{self.mof:.6f}", f"{self.mof_bg:.6f}", f"{self.iou:.6f}",
                    f"{self.iod:.6f}", c.get("frames", 0), c.get("frames_no_bg", 0), c.get("segments", 0)])
        return buf.getvalue()

    def table(self) -> str:
        return ("  MoF     MoF-bg  IoU     IoD\n"
                f"  {100 * self.mof:6.2f}  {100 * self.mof_bg:6.2f}  "
                f"{100 * self.iou:6.2f}  {100 * self.iod:6.2f}  "
                f"({len(self.per_video)} videos)")


def evaluate_corpus(pairs: Sequence, bg_id: int = BACKGROUND_ID, video_ids=None,
                    include_background: bool = False) -> EvalReport:
    """``pairs`` is a sequence of ``(pred_labels, gt_labels)``."""
    per_video = []
    correct = frames = correct_nb = frames_nb = 0
    seg_scores = []
    vacuous = 0
    for i, (pred, gt) in enumerate(pairs):
        pred, gt = _pair(pred, gt)
        c = int(np.sum(pred == gt))
        cnb, nnb = mof_bg_counts(pred, gt, bg_id)
        scores = segment_scores(labels_to_segments(pred), labels_to_segments(gt), bg_id,
                                include_background)
        correct += c
        frames += gt.size
        correct_nb += cnb
        frames_nb += nnb
        vacuous += nnb == 0
        seg_scores.extend(scores)
        arr = np.asarray(scores) if scores else np.ones((1, 2))
        vid = video_ids[i] if video_ids is not None else str(i)
        per_video.append(VideoScores(vid, c / gt.size, cnb / nnb if nnb else 1.0,
                                     float(arr[:, 0].mean()), float(arr[:, 1].mean()),
                                     int(gt.size), nnb, len(scores)))
    if not per_video:
        raise ValidationError("no videos to evaluate")
    seg = np.asarray(seg_scores) if seg_scores else np.ones((1, 2))
    return EvalReport(
        mof=correct / frames,
        mof_bg=correct_nb / frames_nb if frames_nb else 1.0,
        iou=float(seg[:, 0].mean()),
        iod=float(seg[:, 1].mean()),
        per_video=per_video,
        counts={"frames": frames, "frames_no_bg": frames_nb, "segments": len(seg_scores),
                "videos_without_foreground": vacuous},
    )
