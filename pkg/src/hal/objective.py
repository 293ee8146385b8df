"""Smoothness transition constraint, weak-supervision classifier loss and the total loss.

All functions take and return ``torch`` tensors so they stay differentiable;
NumPy inputs are accepted and converted (float64).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import torch

from .core import ExperimentConfig, ValidationError

NORM_EPS = 1e-8


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def l2_normalize_rows(m) -> torch.Tensor:
    """Unit-norm rows; a row with norm below 1e-8 is divided by ``norm + 1e-8`` instead."""
    m = _tensor(m)
    norm = torch.linalg.vector_norm(m, dim=-1, keepdim=True)
    denom = torch.where(norm < NORM_EPS, norm + NORM_EPS, norm)
    return m / denom


def temporal_change_magnitudes(m) -> torch.Tensor:
    """Per-step change: mean over dimensions of ``|m[t+1] - m[t]|``; length ``T - 1``."""
    m = _tensor(m)
    if m.shape[-2] < 2:
        raise ValidationError("need at least two frames")
    return (m[..., 1:, :] - m[..., :-1, :]).abs().mean(dim=-1)


@dataclass
class SmoothnessReport:
    delta_v_bar: torch.Tensor
    delta_c_bar: torch.Tensor
    w_v: torch.Tensor
    w_c: torch.Tensor
    term_i: torch.Tensor
    term_ii: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.term_i + self.term_ii

    def to_csv(self) -> str:
        if self.delta_c_bar.dim() != 1:
            raise ValueError("CSV export is per sequence; index a single sequence first")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "delta_v", "delta_c", "w_v", "w_c"])
        cols = [x.detach().cpu().numpy() for x in (self.delta_v_bar, self.delta_c_bar, self.w_v, self.w_c)]
        for t, row in enumerate(zip(*cols)):
            w.writerow([t] + [repr(float(x)) for x in row])
        return buf.getvalue()


def smoothness_loss(c, v, delta: float = 0.1) -> SmoothnessReport:
    """Penalize action latents that change faster than visual latents.

    ``term_i = relu(sum w_c dC - sum w_v dV)`` and ``term_ii = delta * sum w_c dC``
    where ``dC``, ``dV`` are per-step change magnitudes of the row-normalized
    latents and ``w = softmax`` over the ``T - 1`` steps. Leading batch
    dimensions are averaged.
    """
    c, v = _tensor(c), _tensor(v)
    if c.shape[-2] != v.shape[-2]:
        raise ValidationError("c and v must share T")
    dc = temporal_change_magnitudes(l2_normalize_rows(c))
    dv = temporal_change_magnitudes(l2_normalize_rows(v))
    w_c = torch.softmax(dc, dim=-1)
    w_v = torch.softmax(dv, dim=-1)
    sc = (w_c * dc).sum(-1)
    sv = (w_v * dv).sum(-1)
    term_i = torch.relu(sc - sv)
    term_ii = delta * sc
    if term_i.dim():
        term_i, term_ii = term_i.mean(), term_ii.mean()
    return SmoothnessReport(dv, dc, w_v, w_c, term_i, term_ii)


def classifier_loss(posteriors, pseudo_labels, confidence_mask=None, log_space: bool = False,
                    floor: float = 1e-12) -> torch.Tensor:
    """Mean negative log posterior of the pseudo label over confident frames.

    ``posteriors`` are probabilities (``log_space=False``) or log-probabilities,
    shaped ``(..., T, U)``. Returns 0 when no frame is confident.
    """
    if hasattr(posteriors, "probs") and not isinstance(posteriors, torch.Tensor):
        posteriors = posteriors.probs
    p = _tensor(posteriors)
    logp = p if log_space else torch.log(torch.clamp(p, min=floor))
    labels = torch.as_tensor(np.asarray(pseudo_labels), dtype=torch.long)
    if confidence_mask is None:
        mask = torch.ones(labels.shape, dtype=torch.bool)
    else:
        mask = torch.as_tensor(np.asarray(confidence_mask), dtype=torch.bool)
    nll = -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    n = mask.sum()
    if n == 0:
        return nll.sum() * 0.0
    return (nll * mask).sum() / n


def total_loss(terms, ls: SmoothnessReport, ly, cfg: ExperimentConfig) -> torch.Tensor:
    """``ly - alpha * ELBO + beta * L_s`` gated by the ablation switches.

    ``use_Lr`` gates the reconstruction terms, ``use_LKL`` both KL terms,
    ``use_Ls`` the relu term of the smoothness constraint and ``use_delta`` its
    delta-weighted term.
    """
    ly = _tensor(ly)
    neg_elbo = 0.0
    if cfg.use_Lr:
        neg_elbo = neg_elbo + terms.recon + terms.aux
    if cfg.use_LKL:
        neg_elbo = neg_elbo + terms.kl_v + terms.kl_c
    smooth = 0.0
    if cfg.use_Ls:
        smooth = smooth + ls.term_i
    if cfg.use_delta:
        smooth = smooth + ls.term_ii
    total = ly
    if cfg.alpha and not isinstance(neg_elbo, float):
        total = total + cfg.alpha * neg_elbo
    if cfg.beta and not isinstance(smooth, float):
        total = total + cfg.beta * smooth
    return total
