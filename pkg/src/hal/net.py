"""Model components and the evidence lower bound.

Maps (all length preserving)::

    b     = backbone(x)          T x d   -> T x h
    v_hat = visual_encoder(b)    T x h   -> T x n_v   (Gaussian posterior)
    c_hat = action_encoder(v)    T x n_v -> T x n_c   (Gaussian posterior)
    b_rec = visual_decoder(v)    T x n_v -> T x h
    v_rec = action_decoder(c)    T x n_c -> T x n_v
    logits = classifier(c)       T x n_c -> T x |U|

Priors over both latent chains are one-step conditional Gaussians with a
standard-normal first step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ExperimentConfig, PosteriorMatrix

LOG_SIGMA_MIN, LOG_SIGMA_MAX = -8.0, 8.0
CHECKPOINT_FORMAT = "hal-checkpoint-v1"


class NumericalError(FloatingPointError):
    """Nonfinite value produced by a named model map."""


def sinusoidal_positions(T: int, width: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(T, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, width, 2, dtype=torch.float64) * (-math.log(10000.0) / width))
    pe = torch.zeros(T, width, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : width // 2]
    return pe.to(dtype)


def _causal_mask(T: int, device) -> torch.Tensor:
    return torch.triu(torch.full((T, T), float("-inf"), device=device), diagonal=1)


class SequenceBlock(nn.Module):
    """Input projection, optional self-attention layers, then a ReLU dense layer."""

    def __init__(self, in_width, width, layers, heads, causal=False, positions=False):
        super().__init__()
        self.proj = nn.Linear(in_width, width)
        self.positions = positions
        self.causal = causal
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(width, heads, dim_feedforward=2 * width, dropout=0.0,
                                       batch_first=True, norm_first=True)
            for _ in range(layers))
        self.dense = nn.Linear(width, width)

    def forward(self, x):
        h = self.proj(x)
        T = h.shape[-2]
        if self.positions:
            h = h + sinusoidal_positions(T, h.shape[-1], h.dtype).to(h.device)
        mask = _causal_mask(T, h.device).to(h.dtype) if self.causal else None
        for layer in self.layers:
            h = layer(h, src_mask=mask)
        return F.relu(self.dense(h))


class GaussianHead(nn.Module):
    def __init__(self, in_width, out_width):
        super().__init__()
        self.mu = nn.Linear(in_width, out_width)
        self.log_sigma = nn.Linear(in_width, out_width)

    def forward(self, h):
        return self.mu(h), torch.clamp(self.log_sigma(h), LOG_SIGMA_MIN, LOG_SIGMA_MAX)


class ConditionalGaussianPrior(nn.Module):
    """``p(z_t | z_{t-1})`` with ``p(z_1) = N(0, I)``."""

    def __init__(self, width, hidden):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(width, hidden), nn.ReLU())
        self.head = GaussianHead(hidden, width)

    def forward(self, z):
        mu, log_sigma = self.head(self.net(z[..., :-1, :]))
        first = torch.zeros_like(z[..., :1, :])
        return torch.cat([first, mu], dim=-2), torch.cat([first, log_sigma], dim=-2)


def _mlp(in_width, hidden, out_width):
    return nn.Sequential(nn.Linear(in_width, hidden), nn.ReLU(), nn.Linear(hidden, out_width))


class HalModel(nn.Module):
    def __init__(self, d: int, n_v: int, n_c: int, num_classes: int, hidden_width: int = 256,
                 num_layers: int = 2, num_heads: int = 4, causal: bool = False,
                 pyramid: bool = False, encoder_layers: int = 1, positions: bool = False):
        super().__init__()
        h = hidden_width
        self.d, self.n_v, self.n_c, self.num_classes = d, n_v, n_c, num_classes
        self.hidden_width = h
        self.pyramid = pyramid
        self.backbone = SequenceBlock(d, h, num_layers, num_heads, causal, positions=positions)
        self.backbone_norm = nn.LayerNorm(h, elementwise_affine=False)
        self.visual_encoder = SequenceBlock(h, h, encoder_layers, num_heads, causal)
        self.visual_head = GaussianHead(h, n_v)
        self.action_encoder = SequenceBlock(n_v, h, encoder_layers, num_heads, causal)
        self.action_head = GaussianHead(h, n_c)
        self.visual_decoder = _mlp(n_v, 2 * h, h)
        self.action_decoder = _mlp(n_c, 2 * h, n_v)
        self.classifier = nn.Linear(n_c, num_classes)
        self.prior_v = ConditionalGaussianPrior(n_v, h)
        self.prior_c = ConditionalGaussianPrior(n_c, h)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, num_classes: int) -> "HalModel":
        return cls(cfg.d, cfg.n_v, cfg.n_c, num_classes, cfg.hidden_width, cfg.num_layers,
                   cfg.num_heads, cfg.causal_attention, cfg.pyramid, cfg.encoder_layers,
                   cfg.positional_encoding)

    def forward(self, x, sample_seed: Optional[int] = None) -> "ForwardOutput":
        return forward(self, x, sample_seed)


@dataclass
class ForwardOutput:
    b: torch.Tensor
    v_hat: torch.Tensor
    c_hat: torch.Tensor
    b_rec: torch.Tensor
    v_rec: torch.Tensor
    logits: torch.Tensor
    mu_v: torch.Tensor
    log_sigma_v: torch.Tensor
    mu_c: torch.Tensor
    log_sigma_c: torch.Tensor

    def as_tuple(self):
        return self.b, self.v_hat, self.c_hat, self.b_rec, self.v_rec, self.logits


def _check(name, t):
    if not torch.isfinite(t).all():
        raise NumericalError(f"nonfinite activation in {name}")
    return t


def _sample(mu, log_sigma, gen):
    eps = torch.randn(mu.shape, generator=gen, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(log_sigma) * eps


def _pool2(z):
    T = z.shape[-2]
    if T % 2:
        z = torch.cat([z, z[..., -1:, :]], dim=-2)
    return 0.5 * (z[..., 0::2, :] + z[..., 1::2, :])


def _unpool2(z, T):
    return torch.repeat_interleave(z, 2, dim=-2)[..., :T, :]


def forward(model: HalModel, x, sample_seed: Optional[int] = None) -> ForwardOutput:
    """Run all six maps. Samples latents in train mode, uses posterior means in eval mode."""
    x = torch.as_tensor(getattr(x, "frames", x))
    dtype = next(model.parameters()).dtype
    x = x.to(dtype)
    if x.shape[-1] != model.d:
        raise ValueError(f"expected feature width {model.d}, got {x.shape[-1]}")
    gen = None
    if model.training:
        gen = torch.Generator().manual_seed(int(sample_seed or 0) & 0x7FFFFFFFFFFFFFFF)
    T = x.shape[-2]

    b = _check("backbone", model.backbone_norm(model.backbone(x)))
    mu_v, ls_v = model.visual_head(model.visual_encoder(b))
    _check("visual_encoder", mu_v)
    v_hat = _sample(mu_v, ls_v, gen) if gen is not None else mu_v

    v_in = _pool2(v_hat) if model.pyramid else v_hat
    mu_c, ls_c = model.action_head(model.action_encoder(v_in))
    if model.pyramid:
        mu_c, ls_c = _unpool2(mu_c, T), _unpool2(ls_c, T)
    _check("action_encoder", mu_c)
    c_hat = _sample(mu_c, ls_c, gen) if gen is not None else mu_c

    b_rec = _check("visual_decoder", model.visual_decoder(v_hat))
    v_rec = _check("action_decoder", model.action_decoder(c_hat))
    logits = _check("classifier", model.classifier(c_hat))
    return ForwardOutput(b, v_hat, c_hat, b_rec, v_rec, logits, mu_v, ls_v, mu_c, ls_c)


@dataclass
class ElboTerms:
    recon: torch.Tensor
    kl_v: torch.Tensor
    kl_c: torch.Tensor
    aux: torch.Tensor

    @property
    def value(self) -> torch.Tensor:
        """The ELBO itself (higher is better); ``aux`` is not part of it."""
        return -(self.recon + self.kl_v + self.kl_c)


def gaussian_kl(mu_q, log_sigma_q, mu_p, log_sigma_p) -> torch.Tensor:
    """Elementwise ``KL(N(mu_q, s_q^2) || N(mu_p, s_p^2))``."""
    var_q = torch.exp(2 * log_sigma_q)
    var_p = torch.exp(2 * log_sigma_p)
    return log_sigma_p - log_sigma_q + (var_q + (mu_q - mu_p) ** 2) / (2 * var_p) - 0.5


def _kl_chain(mu_q, ls_q, samples, prior):
    mu_p, ls_p = prior(samples)
    kl = gaussian_kl(mu_q, ls_q, mu_p, ls_p).sum(-1)
    return kl.mean()


def elbo(model: HalModel, out: ForwardOutput) -> ElboTerms:
    """Reconstruction (Gaussian, unit variance, constant dropped) and KL terms.

    Both are summed over feature dimensions and averaged over T and batch, so
    their relative scale matches the per-frame log likelihood.

    The backbone output is the reconstruction target and is detached, so the
    reconstruction term cannot shrink the backbone features toward a constant.
    """
    recon = 0.5 * ((out.b_rec - out.b.detach()) ** 2).sum(-1).mean()
    kl_v = _kl_chain(out.mu_v, out.log_sigma_v, out.v_hat, model.prior_v)
    kl_c = _kl_chain(out.mu_c, out.log_sigma_c, out.c_hat, model.prior_c)
    return ElboTerms(recon, kl_v, kl_c, aux_action_recon(out.v_hat, out.v_rec))


def aux_action_recon(v_hat, v_rec) -> torch.Tensor:
    """MSE of ``v_rec`` against ``v_hat``; the target side carries no gradient."""
    return F.mse_loss(v_rec, v_hat.detach())


def classify(model: HalModel, c_hat) -> PosteriorMatrix:
    logits = model.classifier(torch.as_tensor(c_hat, dtype=next(model.parameters()).dtype))
    probs = torch.softmax(logits.double(), dim=-1).detach().cpu().numpy()
    return PosteriorMatrix(probs)


def save_checkpoint(path, model: HalModel, cfg: ExperimentConfig, extra: Optional[dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "config": cfg.to_dict(),
        "num_classes": model.num_classes,
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a HAL checkpoint")
    cfg = ExperimentConfig.from_dict(payload["config"])
    model = HalModel.from_config(cfg, payload["num_classes"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, payload
