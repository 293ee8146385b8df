"""Transcript-constrained decoding.

The inner recursion runs in a compiled extension when it was built; otherwise
(or with ``HAL_PURE_PYTHON=1``) a NumPy implementation with identical
semantics is used. ``BACKEND`` names the active one.
"""
from __future__ import annotations

import itertools
import os
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from ..core import PosteriorMatrix, Transcript, ValidationError
from . import _viterbi_py

PROB_FLOOR = 1e-12
ENUM_MAX_T = 16
ENUM_MAX_M = 4

_ext = None
if not os.environ.get("HAL_PURE_PYTHON"):
    try:
        from . import _viterbi_ext as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"


def get_kernel(backend: Optional[str] = None):
    backend = backend or BACKEND
    if backend == "cython":
        if _ext is None:
            raise RuntimeError("compiled Viterbi extension is not available")
        return _ext.viterbi_states
    if backend == "python":
        return _viterbi_py.viterbi_states
    raise ValueError(f"unknown backend {backend!r}")


@dataclass(frozen=True)
class AlignmentResult:
    labels: np.ndarray
    boundaries: Tuple[int, ...]
    score: float
    segment_index: np.ndarray


def _as_transcript(transcript) -> Transcript:
    if isinstance(transcript, Transcript):
        return transcript
    return Transcript(tuple(transcript), allow_repeats=True)


def log_posteriors(posteriors) -> np.ndarray:
    probs = posteriors.probs if isinstance(posteriors, PosteriorMatrix) else np.asarray(posteriors, float)
    return np.log(np.maximum(probs, PROB_FLOOR))


def viterbi_align(posteriors, transcript, min_segment_len: int = 1,
                  backend: Optional[str] = None) -> AlignmentResult:
    """Best monotone labeling realizing ``transcript`` with segments >= ``min_segment_len``.

    Maximizes the summed log posterior. Among equally scoring labelings the
    boundaries are placed as early as possible, deciding from the last
    boundary backwards. Probabilities are floored at 1e-12 before the log.
    """
    if not isinstance(posteriors, PosteriorMatrix):
        posteriors = PosteriorMatrix(posteriors)
    return viterbi_align_logp(log_posteriors(posteriors), transcript, min_segment_len, backend)


def viterbi_align_logp(logp: np.ndarray, transcript, min_segment_len: int = 1,
                       backend: Optional[str] = None) -> AlignmentResult:
    transcript = _as_transcript(transcript)
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    T, U = logp.shape
    M = len(transcript)
    if min_segment_len < 1:
        raise ValidationError("min_segment_len must be >= 1")
    if M * min_segment_len > T:
        raise ValidationError("transcript does not fit")
    if max(transcript) >= U:
        raise ValidationError(f"transcript id {max(transcript)} >= number of classes {U}")
    trans = np.asarray(transcript.entries, dtype=np.int64)
    seg, score = get_kernel(backend)(logp, trans, int(min_segment_len))
    seg = np.asarray(seg, dtype=np.int64)
    labels = trans[seg]
    boundaries = tuple(int(b) for b in np.flatnonzero(np.diff(seg)) + 1)
    return AlignmentResult(labels, boundaries, float(score), seg)


def uniform_alignment(T: int, transcript) -> np.ndarray:
    """Split ``T`` frames into ``len(transcript)`` near-equal consecutive segments."""
    transcript = _as_transcript(transcript)
    M = len(transcript)
    if M > T:
        raise ValidationError("transcript does not fit")
    edges = np.floor(np.linspace(0, T, M + 1)).astype(int)
    seg = np.repeat(np.arange(M), np.diff(edges))
    return np.asarray(transcript.entries, dtype=np.int64)[seg]


def enumerate_alignments(T: int, transcript, min_segment_len: int = 1) -> Iterator[np.ndarray]:
    """Every valid monotone labeling, each exactly once (test oracle)."""
    transcript = _as_transcript(transcript)
    M = len(transcript)
    if T > ENUM_MAX_T or M > ENUM_MAX_M:
        raise ValidationError(f"enumeration guard: need T <= {ENUM_MAX_T} and M <= {ENUM_MAX_M}")
    if M * min_segment_len > T:
        raise ValidationError("transcript does not fit")
    return _enumerate(T, transcript.entries, min_segment_len)


def _enumerate(T, entries, min_len):
    M = len(entries)
    for cuts in itertools.combinations(range(1, T), M - 1):
        edges = (0,) + cuts + (T,)
        if any(edges[i + 1] - edges[i] < min_len for i in range(M)):
            continue
        out = np.empty(T, dtype=np.int64)
        for m in range(M):
            out[edges[m]:edges[m + 1]] = entries[m]
        yield out


def boundary_mask(T: int, boundaries, margin: int) -> np.ndarray:
    """False within ``margin`` frames of each boundary ``b``: frames ``b-margin .. b+margin-1``."""
    mask = np.ones(T, dtype=bool)
    if margin <= 0:
        return mask
    if margin >= T:
        mask[:] = False
        return mask
    for b in boundaries:
        mask[max(0, b - margin):min(T, b + margin)] = False
    return mask


def pseudo_labels(posteriors, transcript, min_segment_len: int = 2, boundary_margin: int = 2,
                  backend: Optional[str] = None, class_prior=None):
    """Viterbi labels plus a confidence mask that drops frames near boundaries.

    With ``class_prior`` the alignment scores ``log p(u|x) - log prior(u)``
    (posteriors turned into scaled likelihoods), which keeps frequent classes
    from absorbing their neighbours over repeated refreshes.
    """
    if not isinstance(posteriors, PosteriorMatrix):
        posteriors = PosteriorMatrix(posteriors)
    logp = log_posteriors(posteriors)
    if class_prior is not None:
        prior = np.asarray(class_prior, dtype=np.float64)
        if prior.shape != (logp.shape[1],):
            raise ValidationError("class_prior must have one entry per class")
        logp = logp - np.log(np.maximum(prior, PROB_FLOOR))
    res = viterbi_align_logp(logp, transcript, min_segment_len, backend)
    return res.labels, boundary_mask(len(res.labels), res.boundaries, boundary_margin)
