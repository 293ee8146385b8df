"""Sampling from the two-level causal process with known ground truth.

Frames are produced as ``x_t = g(v_t)`` with visual latents following
``v_t = f_v(v_{t-1}, c_t) + eps_v`` and action latents held constant inside a
segment (deterministic pseudo-states) and moved by ``c' = f_c(c) + eps_c`` only
at segment boundaries.

All sequences drawn from one :class:`GeneratorSpec` share ``f_v``, ``f_c`` and
``g``; they differ only in noise, boundary placement and starting phase.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from math import comb
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import (FeatureSequence, LatentPair, Transcript, ValidationError,
                   derive_seed, labels_to_segments, rng_for)

LEAK_SLOPE_RANGE = (0.1, 1.0)
CONTRACTION = 0.85


def _orthonormal_columns(rng, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def _spectral_scale(rng, shape, target) -> np.ndarray:
    w = rng.standard_normal(shape)
    return w * (target / np.linalg.norm(w, 2))


@dataclass(frozen=True)
class MixingFunction:
    """Injective map ``R^n_v -> R^d``.

    Each layer is an orthonormal-column matrix followed by a leaky
    piecewise-linear activation with negative-side slope in [0.1, 1], so the
    left inverse is available in closed form.
    """

    weights: Tuple[np.ndarray, ...]
    slopes: Tuple[float, ...]
    in_width: int
    out_width: int

    @classmethod
    def random(cls, n_v: int, d: int, depth: int, rng: np.random.Generator) -> "MixingFunction":
        if n_v > d:
            raise ValidationError("mixing must be injective: need n_v <= d")
        if depth < 0:
            raise ValidationError("mixing depth must be >= 0")
        weights, slopes = [], []
        width = n_v
        for _ in range(depth):
            weights.append(_orthonormal_columns(rng, d, width))
            slopes.append(float(rng.uniform(*LEAK_SLOPE_RANGE)))
            width = d
        return cls(tuple(weights), tuple(slopes), n_v, d)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.in_width:
            raise ValidationError(f"mixing expects width {self.in_width}, got {v.shape[-1]}")
        if not self.weights:
            pad = np.zeros(v.shape[:-1] + (self.out_width - self.in_width,))
            return np.concatenate([v, pad], axis=-1)
        h = v
        for w, a in zip(self.weights, self.slopes):
            h = h @ w.T
            h = np.where(h >= 0, h, a * h)
        return h

    def inverse(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not self.weights:
            return x[..., :self.in_width].copy()
        h = x
        for w, a in zip(reversed(self.weights), reversed(self.slopes)):
            h = np.where(h >= 0, h, h / a)
            h = h @ w
        return h


@dataclass(frozen=True)
class GeneratorSpec:
    T: int = 100
    n_c: int = 2
    n_v: int = 4
    d: int = 8
    K: int = 4
    min_segment_len: int = 10
    noise_scale_v: float = 0.3
    noise_scale_c: float = 0.05
    mixing_depth: int = 2
    seed: int = 0
    num_classes: int = 6

    def __post_init__(self):
        for name in ("T", "n_c", "n_v", "d", "K", "min_segment_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.K * self.min_segment_len > self.T:
            raise ValidationError(
                f"K * min_segment_len = {self.K * self.min_segment_len} exceeds T = {self.T}")
        if self.n_v > self.d:
            raise ValidationError("n_v must not exceed d (mixing must be injective)")
        if self.n_v < 2 * self.n_c:
            raise ValidationError("n_v must be at least 2 * n_c")
        if self.noise_scale_v < 0 or self.noise_scale_c < 0:
            raise ValidationError("noise scales must be nonnegative")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")

    # -- the shared mechanisms, drawn once from the generator seed --

    @cached_property
    def mixing(self) -> MixingFunction:
        return MixingFunction.random(self.n_v, self.d, self.mixing_depth,
                                     rng_for(self.seed, "mixing"))

    @cached_property
    def action_transition(self) -> "ActionTransition":
        return ActionTransition.random(self.n_c, self.num_classes, rng_for(self.seed, "f_c"))

    @cached_property
    def visual_transition(self) -> "VisualTransition":
        return VisualTransition.random(self.n_v, self.n_c, rng_for(self.seed, "f_v"))


@dataclass(frozen=True)
class ActionTransition:
    """``f_c(c) = R c``: a rotation of period ``num_classes`` in a random basis.

    Rotations are smooth and have nonsingular Jacobian everywhere; the period
    makes the orbit of the base point a finite set of well-separated action
    states, which the synthetic class labels index.
    """

    rotation: np.ndarray
    base: np.ndarray

    @classmethod
    def random(cls, n_c: int, period: int, rng) -> "ActionTransition":
        basis = _orthonormal_columns(rng, n_c, n_c)
        block = np.eye(n_c)
        for j in range(n_c // 2):
            theta = 2.0 * np.pi * (j + 1) / period
            cs, sn = np.cos(theta), np.sin(theta)
            block[2 * j:2 * j + 2, 2 * j:2 * j + 2] = [[cs, -sn], [sn, cs]]
        base = rng.standard_normal(n_c)
        base /= np.linalg.norm(base)
        return cls(basis @ block @ basis.T, base)

    def __call__(self, c: np.ndarray, eps: np.ndarray) -> np.ndarray:
        return self.rotation @ c + eps

    def state(self, phase: int) -> np.ndarray:
        return np.linalg.matrix_power(self.rotation, int(phase)) @ self.base


@dataclass(frozen=True)
class VisualTransition:
    """``f_v(v, c) = W2 tanh(W1 v + U c + b)``, a contraction in ``v``."""

    w1: np.ndarray
    u: np.ndarray
    b: np.ndarray
    w2: np.ndarray

    @classmethod
    def random(cls, n_v: int, n_c: int, rng) -> "VisualTransition":
        hidden = 2 * n_v
        w1 = _spectral_scale(rng, (hidden, n_v), CONTRACTION)
        w2 = _spectral_scale(rng, (n_v, hidden), CONTRACTION)
        u = rng.standard_normal((hidden, n_c)) * 1.5
        b = 0.1 * rng.standard_normal(hidden)
        return cls(w1, u, b, w2)

    def __call__(self, v: np.ndarray, c: np.ndarray, eps: np.ndarray) -> np.ndarray:
        return self.w2 @ np.tanh(self.w1 @ v + self.u @ c + self.b) + eps


def sample_boundaries(T: int, K: int, min_len: int, rng) -> np.ndarray:
    """Segment lengths drawn uniformly over compositions of T into K parts >= min_len."""
    if K * min_len > T:
        raise ValidationError(f"K * min_segment_len = {K * min_len} exceeds T = {T}")
    slack = T - K * min_len
    if K == 1:
        return np.array([T])
    # stars and bars: K-1 bars among slack + K - 1 slots
    bars = np.sort(rng.choice(slack + K - 1, size=K - 1, replace=False))
    extra = np.diff(np.r_[-1, bars, slack + K - 1]) - 1
    return extra + min_len


def count_placements(T: int, K: int, min_len: int) -> int:
    slack = T - K * min_len
    return comb(slack + K - 1, K - 1) if slack >= 0 else 0


def generate_action_latents(spec: GeneratorSpec, rng=None, phase: Optional[int] = None):
    """Returns ``(action, regimes, phase)``; action is ``T x n_c``."""
    if spec.K * spec.min_segment_len > spec.T:
        raise ValidationError("K * min_segment_len exceeds T")
    if rng is None:
        rng = rng_for(spec.seed, "actions")
    lengths = sample_boundaries(spec.T, spec.K, spec.min_segment_len, rng)
    if phase is None:
        phase = int(rng.integers(spec.num_classes))
    f_c = spec.action_transition
    regimes = np.repeat(np.arange(spec.K), lengths)
    action = np.empty((spec.T, spec.n_c))
    c = f_c.state(phase) + spec.noise_scale_c * rng.standard_normal(spec.n_c)
    start = 0
    for k, n in enumerate(lengths):
        if k:
            c = f_c(c, spec.noise_scale_c * rng.standard_normal(spec.n_c))
        action[start:start + n] = c
        start += n
    return action, regimes, phase


def generate_visual_latents(action: np.ndarray, spec: GeneratorSpec, rng=None) -> np.ndarray:
    action = np.asarray(action, dtype=np.float64)
    if action.ndim != 2 or action.shape[1] != spec.n_c:
        raise ValidationError(f"action must be T x {spec.n_c}, got {action.shape}")
    if rng is None:
        rng = rng_for(spec.seed, "visual")
    f_v = spec.visual_transition
    T = action.shape[0]
    out = np.empty((T, spec.n_v))
    v = np.zeros(spec.n_v)
    noise = spec.noise_scale_v * rng.standard_normal((T, spec.n_v))
    for t in range(T):
        v = f_v(v, action[t], noise[t])
        out[t] = v
    return out


def mix_observations(visual: np.ndarray, g: MixingFunction) -> FeatureSequence:
    visual = np.asarray(visual, dtype=np.float64)
    if visual.ndim != 2 or visual.shape[1] != g.in_width:
        raise ValidationError(f"visual width {visual.shape[-1]} does not match mixing input {g.in_width}")
    return FeatureSequence(g(visual))


def derive_supervision(regimes: Sequence[int], class_inventory: Sequence[int], offset: int = 0):
    """Assign a class to each regime block, round-robin from ``offset``.

    Returns ``(frame_labels, transcript)``.
    """
    regimes = np.asarray(regimes, dtype=np.int64)
    blocks = labels_to_segments(regimes)
    inventory = list(class_inventory)
    if not inventory:
        raise ValidationError("class inventory is empty")
    if len(blocks) >= 2 and len(set(inventory)) < 2:
        raise ValidationError("need at least 2 classes for more than one segment")
    classes = []
    for k in range(len(blocks)):
        cls = inventory[(offset + k) % len(inventory)]
        if classes and cls == classes[-1]:
            # only reachable with duplicate inventory entries; skip ahead
            j = 1
            while inventory[(offset + k + j) % len(inventory)] == classes[-1]:
                j += 1
            cls = inventory[(offset + k + j) % len(inventory)]
        classes.append(int(cls))
    labels = np.empty_like(regimes)
    for cls, seg in zip(classes, blocks):
        labels[seg.start:seg.end] = cls
    return labels, Transcript(tuple(classes))


@dataclass(frozen=True)
class SyntheticSample:
    features: FeatureSequence
    transcript: Transcript
    labels: np.ndarray
    latents: LatentPair

    def __iter__(self):
        return iter((self.features, self.transcript, self.labels, self.latents))


def generate_sequence(spec: GeneratorSpec, seed: int, class_inventory: Sequence[int]) -> SyntheticSample:
    rng = np.random.default_rng(seed)
    action, regimes, phase = generate_action_latents(spec, rng)
    visual = generate_visual_latents(action, spec, rng)
    features = mix_observations(visual, spec.mixing)
    labels, transcript = derive_supervision(regimes, class_inventory, offset=phase)
    return SyntheticSample(features, transcript, labels, LatentPair(visual, action, regimes))


def generate_dataset(spec: GeneratorSpec, count: int, class_inventory: Optional[Sequence[int]] = None,
                     stream: str = "synth") -> List[SyntheticSample]:
    """``count`` independent sequences sharing the generator's mechanisms.

    The class of a block is its action state's position on the ``f_c`` orbit,
    so ``class_inventory`` defaults to ``range(num_classes)``.
    """
    if class_inventory is None:
        class_inventory = range(spec.num_classes)
    return [generate_sequence(spec, derive_seed(spec.seed, stream, i), class_inventory)
            for i in range(count)]
