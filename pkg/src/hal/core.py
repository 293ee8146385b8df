"""Shared domain types, seeding and validation."""
from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

BACKGROUND_ID = 0
ROW_SUM_TOL = 1e-6


class ValidationError(ValueError):
    """Raised when an input violates a documented contract."""


def _as_matrix(a, name: str) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D matrix, got shape {m.shape}")
    return m


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    frame_rate_hint: Optional[float] = None

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValidationError(f"features must be T x d with T, d >= 1, got {frames.shape}")
        bad = np.flatnonzero(~np.isfinite(frames))
        if bad.size:
            raise ValidationError(f"nonfinite feature value at flat index {int(bad[0])}")
        if self.frame_rate_hint is not None and not self.frame_rate_hint > 0:
            raise ValidationError("frame_rate_hint must be positive")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def d(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class LatentPair:
    visual: np.ndarray
    action: np.ndarray
    regimes: Optional[np.ndarray] = None

    def __post_init__(self):
        v = _as_matrix(self.visual, "visual")
        c = _as_matrix(self.action, "action")
        if v.shape[0] != c.shape[0]:
            raise ValidationError("visual and action latents must share T")
        if not (np.isfinite(v).all() and np.isfinite(c).all()):
            raise ValidationError("latents must be finite")
        object.__setattr__(self, "visual", v)
        object.__setattr__(self, "action", c)
        if self.regimes is not None:
            r = np.asarray(self.regimes, dtype=np.int64)
            if r.shape != (v.shape[0],):
                raise ValidationError("regimes must have length T")
            # block indices: each new block introduces a fresh value
            starts = np.flatnonzero(np.diff(r) != 0)
            if len(set(r[np.r_[0, starts + 1]].tolist())) != len(starts) + 1:
                raise ValidationError("regimes must be piecewise constant blocks")
            object.__setattr__(self, "regimes", r)


@dataclass(frozen=True)
class Transcript:
    entries: tuple
    allow_repeats: bool = False

    def __post_init__(self):
        entries = tuple(int(e) for e in self.entries)
        if not entries:
            raise ValidationError("transcript must have at least one entry")
        if min(entries) < 0:
            raise ValidationError("transcript ids must be nonnegative")
        if not self.allow_repeats:
            for i in range(1, len(entries)):
                if entries[i] == entries[i - 1]:
                    raise ValidationError(f"adjacent repeat of class {entries[i]} at position {i}")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


@dataclass(frozen=True)
class Segment:
    label: int
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SegmentList:
    segments: tuple

    def __post_init__(self):
        segs = tuple(s if isinstance(s, Segment) else Segment(int(s[0]), int(s[1]), int(s[2]))
                     for s in self.segments)
        if not segs:
            raise ValidationError("segment list is empty")
        if segs[0].start != 0:
            raise ValidationError("first segment must start at frame 0")
        for i, s in enumerate(segs):
            if s.end <= s.start:
                raise ValidationError(f"segment {i} is empty or reversed")
            if i:
                prev = segs[i - 1]
                if s.start != prev.end:
                    kind = "gap" if s.start > prev.end else "overlap"
                    raise ValidationError(f"{kind} between segments {i - 1} and {i}")
                if s.label == prev.label:
                    raise ValidationError(f"adjacent segments {i - 1} and {i} share class {s.label}")
        object.__setattr__(self, "segments", segs)

    @property
    def T(self) -> int:
        return self.segments[-1].end

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def as_tuples(self):
        return [(s.label, s.start, s.end) for s in self.segments]


@dataclass(frozen=True)
class PosteriorMatrix:
    probs: np.ndarray

    def __post_init__(self):
        p = _as_matrix(self.probs, "posteriors")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValidationError("posterior matrix must be non-empty")
        if not np.isfinite(p).all() or (p < 0).any() or (p > 1).any():
            raise ValidationError("posterior entries must lie in [0, 1]")
        dev = np.abs(p.sum(axis=1) - 1.0)
        if (dev > ROW_SUM_TOL).any():
            row = int(np.argmax(dev))
            raise ValidationError(f"posterior row {row} sums to {p[row].sum():.9f}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def T(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


# ablation grid: EXP -> (use_Lr, use_Ls, use_LKL, use_delta)
ABLATION_GRID = {
    1: (False, False, False, False),
    2: (True, False, False, False),
    3: (False, True, False, False),
    4: (False, False, True, False),
    5: (False, False, False, True),
    6: (False, True, True, False),
    7: (True, False, True, False),
    8: (True, True, False, False),
    9: (False, True, True, True),
    10: (True, True, False, True),
    11: (True, True, True, False),
    12: (True, True, True, True),
}


@dataclass
class ExperimentConfig:
    """Every knob of one run. Serialized verbatim into the run manifest."""

    # loss weights
    alpha: float = 0.1
    beta: float = 1.0
    delta: float = 0.1
    # ablation switches
    use_Lr: bool = True
    use_Ls: bool = True
    use_LKL: bool = True
    use_delta: bool = True
    # model
    n_v: int = 4
    n_c: int = 2
    d: int = 8
    hidden_width: int = 256
    num_layers: int = 2
    num_heads: int = 4
    encoder_layers: int = 1
    causal_attention: bool = False
    pyramid: bool = False
    # absolute sinusoidal positions in the backbone; off by default because
    # they let the classifier memorize the uniform initial pseudo labels
    positional_encoding: bool = False
    # optimisation
    learning_rate: float = 5e-4
    weight_decay: float = 1e-4
    epochs: int = 60
    grad_clip: float = 5.0
    refresh_every: int = 5
    boundary_margin: int = 2
    min_segment_len: int = 2
    min_segment_len_eval: int = 1
    seed: int = 0
    # synthetic generator (used by `hal synth`)
    synth_T: int = 100
    synth_K: int = 4
    synth_min_segment_len: int = 10
    synth_num_classes: int = 6
    synth_noise_scale_v: float = 0.3
    synth_noise_scale_c: float = 0.05
    synth_mixing_depth: int = 2
    synth_seed: int = 0
    synth_train_count: int = 200
    synth_test_count: int = 50
    # data and outputs
    data_dir: str = "data"
    train_index: str = "train.index"
    test_index: str = "test.index"
    class_map: str = "mapping.txt"
    out_dir: str = "runs/default"
    allow_repeats: bool = False
    strict_lengths: bool = False
    ablation_rows: list = field(default_factory=lambda: [1, 7, 12])
    ablation_seeds: list = field(default_factory=lambda: [0])
    sensitivity_betas: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("alpha", "beta", "delta"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name}: must be nonnegative")
        for name in ("n_v", "n_c", "d", "hidden_width", "num_layers", "num_heads",
                     "min_segment_len", "min_segment_len_eval", "refresh_every",
                     "synth_T", "synth_K", "synth_min_segment_len", "synth_mixing_depth"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name}: must be a positive integer")
        for name in ("learning_rate", "weight_decay"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name}: must be positive")
        if self.epochs < 0:
            raise ValidationError("epochs: must be nonnegative")
        if self.boundary_margin < 0:
            raise ValidationError("boundary_margin: must be nonnegative")
        if self.hidden_width % self.num_heads:
            raise ValidationError("hidden_width: must be divisible by num_heads")
        for row in self.ablation_rows:
            if row not in ABLATION_GRID:
                raise ValidationError(f"ablation_rows: unknown EXP {row}")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown config key(s): {', '.join(unknown)}")
        for f in dataclasses.fields(cls):
            default = f.default_factory() if f.default is dataclasses.MISSING else f.default
            if f.name not in data:
                continue
            val = data[f.name]
            kind = type(default)
            ok = isinstance(val, kind) and not (kind is not bool and isinstance(val, bool))
            if kind is float and isinstance(val, int) and not isinstance(val, bool):
                ok = True
            if not ok:
                raise ValidationError(f"{f.name}: expected {kind.__name__}, got {type(val).__name__}")
        return cls(**{k: (float(v) if isinstance(getattr(cls, k, None), float) else v)
                      for k, v in data.items()})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_ablation(self, exp: int) -> "ExperimentConfig":
        lr, ls, lkl, dl = ABLATION_GRID[exp]
        return dataclasses.replace(self, use_Lr=lr, use_Ls=ls, use_LKL=lkl, use_delta=dl)


def labels_to_segments(labels: Sequence[int]) -> SegmentList:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size == 0:
        raise ValidationError("empty label sequence")
    cuts = np.flatnonzero(np.diff(labels) != 0) + 1
    starts = np.r_[0, cuts]
    ends = np.r_[cuts, labels.size]
    return SegmentList(tuple(Segment(int(labels[s]), int(s), int(e)) for s, e in zip(starts, ends)))


def segments_to_labels(segs) -> np.ndarray:
    if not isinstance(segs, SegmentList):
        segs = SegmentList(tuple(segs))
    out = np.empty(segs.T, dtype=np.int64)
    for s in segs:
        out[s.start:s.end] = s.label
    return out


def derive_seed(master_seed: int, stream_tag: str, index: int = 0) -> int:
    """Stable 64-bit seed for a named random stream.

    Uses BLAKE2b over a fixed little-endian packing so results agree across
    platforms and Python versions.
    """
    payload = struct.pack("<Q", master_seed & 0xFFFFFFFFFFFFFFFF)
    payload += stream_tag.encode("utf-8") + b"\x00"
    payload += struct.pack("<q", index)
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(master_seed: int, stream_tag: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, stream_tag, index))
