"""File formats and loaders.

HSEQ feature files::

    offset 0   b"HSEQ"
    offset 4   uint32 LE  T
    offset 8   uint32 LE  d
    offset 12  T*d float32 LE, frame-major

Label and transcript files hold one class name per line (UTF-8, trailing
newline optional). A split index holds tab-separated lines
``video_id, features, labels, transcript`` with paths relative to the index.
The class map file holds ``<id> <name>`` per line with contiguous ids from 0.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .core import FeatureSequence, Transcript, ValidationError

log = logging.getLogger(__name__)

MAGIC = b"HSEQ"
HEADER = struct.Struct("<4sII")


class FormatError(ValidationError):
    pass


def write_features(path, frames) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise FormatError("features must be a 2-D matrix")
    T, d = frames.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, T, d))
        fh.write(frames.tobytes(order="C"))


def read_features(path) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated feature file")
    magic, T, d = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a HSEQ file")
    if len(raw) != HEADER.size + 4 * T * d:
        raise FormatError(f"{path}: truncated feature file")
    frames = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(T, d)
    bad = np.flatnonzero(~np.isfinite(frames))
    if bad.size:
        t, j = divmod(int(bad[0]), d)
        raise FormatError(f"{path}: nonfinite value at frame {t}, dim {j}")
    return FeatureSequence(frames.copy())


def convert_raw_features(src, dst, d: int, dtype: str = "<f4") -> FeatureSequence:
    """Convert a headerless float dump with known width ``d`` into HSEQ."""
    flat = np.fromfile(src, dtype=dtype)
    if flat.size % d:
        raise FormatError(f"{src}: {flat.size} values do not divide into rows of {d}")
    frames = flat.reshape(-1, d).astype("<f4")
    write_features(dst, frames)
    return FeatureSequence(frames)


def _read_lines(path) -> List[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: empty file")
    for i, line in enumerate(lines, 1):
        if not line.strip():
            raise FormatError(f"{path}: blank line {i}")
    return [ln.strip() for ln in lines]


def _write_lines(path, items) -> None:
    Path(path).write_text("".join(f"{x}\n" for x in items), encoding="utf-8")


class ClassMap:
    """Bijection between contiguous class ids and names."""

    def __init__(self, names: List[str]):
        if len(set(names)) != len(names):
            raise FormatError("duplicate class names in class map")
        self.names = list(names)
        self.ids = {n: i for i, n in enumerate(self.names)}

    def __len__(self):
        return len(self.names)

    def id_of(self, name: str) -> int:
        return self.ids[name]

    @classmethod
    def read(cls, path) -> "ClassMap":
        pairs = []
        for i, line in enumerate(_read_lines(path), 1):
            parts = line.split(maxsplit=1)
            if len(parts) != 2 or not parts[0].isdigit():
                raise FormatError(f"{path}: line {i} is not '<id> <name>'")
            pairs.append((int(parts[0]), parts[1]))
        pairs.sort()
        if [p[0] for p in pairs] != list(range(len(pairs))):
            raise FormatError(f"{path}: class ids must be contiguous from 0")
        return cls([p[1] for p in pairs])

    def write(self, path) -> None:
        _write_lines(path, [f"{i} {n}" for i, n in enumerate(self.names)])


def _map_names(path, names, class_map: ClassMap) -> List[int]:
    out = []
    for i, name in enumerate(names, 1):
        if name not in class_map.ids:
            raise FormatError(f"{path}: unknown class '{name}' on line {i}")
        out.append(class_map.ids[name])
    return out


def read_frame_labels(path, class_map: ClassMap) -> np.ndarray:
    return np.asarray(_map_names(path, _read_lines(path), class_map), dtype=np.int64)


def write_frame_labels(path, labels, class_map: ClassMap) -> None:
    _write_lines(path, [class_map.names[int(i)] for i in labels])


def read_transcript(path, class_map: ClassMap, allow_repeats: bool = False) -> Transcript:
    ids = _map_names(path, _read_lines(path), class_map)
    try:
        return Transcript(tuple(ids), allow_repeats=allow_repeats)
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_transcript(path, transcript, class_map: ClassMap) -> None:
    _write_lines(path, [class_map.names[int(i)] for i in transcript])


def read_regimes(path) -> np.ndarray:
    try:
        return np.asarray([int(x) for x in _read_lines(path)], dtype=np.int64)
    except ValueError:
        raise FormatError(f"{path}: regimes must be integers") from None


def write_regimes(path, regimes) -> None:
    _write_lines(path, [int(r) for r in regimes])


@dataclass
class IndexEntry:
    video_id: str
    features: Path
    labels: Path
    transcript: Path

    def sidecar(self, suffix: str) -> Path:
        """Path of a synthetic ground-truth sidecar next to the feature file."""
        return self.features.with_name(self.video_id + suffix)

    @property
    def has_sidecars(self) -> bool:
        return all(self.sidecar(s).exists() for s in (".lat.v", ".lat.c", ".regimes"))


@dataclass
class DatasetIndex:
    root: Path
    split: str
    entries: List[IndexEntry]
    class_map: Optional[ClassMap] = None

    def __len__(self):
        return len(self.entries)


def load_split(index_path, class_map=None) -> DatasetIndex:
    """Parse and validate a split index; entry order is file order.

    ``class_map`` may be a :class:`ClassMap`, a path, or None to pick up
    ``mapping.txt`` next to the index (id 0 is the background class).
    """
    index_path = Path(index_path)
    root = index_path.parent
    text = index_path.read_text(encoding="utf-8")
    entries, seen = [], set()
    for i, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{index_path}: line {i} must have 4 tab-separated fields")
        vid = parts[0]
        if vid in seen:
            raise FormatError(f"{index_path}: duplicate video id '{vid}'")
        seen.add(vid)
        paths = [root / p for p in parts[1:]]
        for p in paths:
            if not p.exists():
                raise FormatError(f"{index_path}: line {i} references missing file {p}")
        entries.append(IndexEntry(vid, *paths))
    if class_map is None and (root / "mapping.txt").exists():
        class_map = ClassMap.read(root / "mapping.txt")
    elif class_map is not None and not isinstance(class_map, ClassMap):
        class_map = ClassMap.read(class_map)
    return DatasetIndex(root, index_path.stem, entries, class_map)


def write_split(index_path, rows) -> None:
    """``rows`` are ``(video_id, feature_rel, labels_rel, transcript_rel)``."""
    Path(index_path).write_text("".join("\t".join(map(str, r)) + "\n" for r in rows),
                                encoding="utf-8")


@dataclass
class Video:
    video_id: str
    features: FeatureSequence
    labels: np.ndarray
    transcript: Transcript
    latents: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)


def load_video(entry: IndexEntry, class_map: ClassMap, allow_repeats: bool = False,
               strict: bool = False, with_sidecars: bool = False) -> Video:
    feats = read_features(entry.features)
    labels = read_frame_labels(entry.labels, class_map)
    if feats.T != len(labels):
        msg = f"{entry.video_id}: feature T={feats.T} but {len(labels)} labels"
        if strict:
            raise FormatError(msg)
        log.warning("%s; truncating to the shorter", msg)
        n = min(feats.T, len(labels))
        feats = FeatureSequence(feats.frames[:n])
        labels = labels[:n]
    transcript = read_transcript(entry.transcript, class_map, allow_repeats)
    latents = None
    if with_sidecars:
        if not entry.has_sidecars:
            raise FormatError("identifiability requires synthetic data")
        latents = {
            "visual": read_features(entry.sidecar(".lat.v")).frames.astype(np.float64),
            "action": read_features(entry.sidecar(".lat.c")).frames.astype(np.float64),
            "regimes": read_regimes(entry.sidecar(".regimes")),
        }
    return Video(entry.video_id, feats, labels, transcript, latents)


def load_videos(index: DatasetIndex, class_map: ClassMap, **kw) -> List[Video]:
    return [load_video(e, class_map, **kw) for e in index.entries]


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
