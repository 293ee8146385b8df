"""Experiment driver: synthesize, train, evaluate, identifiability, ablation and plot data."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import subprocess
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import align, identcheck, ingest
from .core import ABLATION_GRID, ExperimentConfig, ValidationError, derive_seed, labels_to_segments
from .metrics import EvalReport, evaluate_corpus
from .net import HalModel, elbo, forward, save_checkpoint
from .objective import classifier_loss, smoothness_loss, total_loss
from .synthgen import GeneratorSpec, generate_dataset

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["epoch", "L_y", "recon", "aux", "kl_v", "kl_c", "Ls_term_i", "Ls_term_ii", "total"]


class NumericalAbort(RuntimeError):
    """Training produced a nonfinite loss; the last good checkpoint was saved."""


def set_deterministic(enabled: bool = True) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def source_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def load_config(path) -> ExperimentConfig:
    """Read a JSON config; a run manifest is accepted too (its config snapshot is used)."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    if "config" in data and "source_revision" in data:
        data = data["config"]
    return ExperimentConfig.from_dict(data)


def generator_spec(cfg: ExperimentConfig) -> GeneratorSpec:
    return GeneratorSpec(T=cfg.synth_T, n_c=cfg.n_c, n_v=cfg.n_v, d=cfg.d, K=cfg.synth_K,
                         min_segment_len=cfg.synth_min_segment_len,
                         noise_scale_v=cfg.synth_noise_scale_v, noise_scale_c=cfg.synth_noise_scale_c,
                         mixing_depth=cfg.synth_mixing_depth, seed=cfg.synth_seed,
                         num_classes=cfg.synth_num_classes)


def class_names(num_classes: int) -> List[str]:
    return ["background"] + [f"action{i}" for i in range(1, num_classes)]


# ---------------------------------------------------------------- synth

def synthesize(cfg: ExperimentConfig, data_dir=None) -> Path:
    """Write train/test splits, class map and ground-truth sidecars."""
    spec = generator_spec(cfg)
    root = Path(data_dir or cfg.data_dir)
    root.mkdir(parents=True, exist_ok=True)
    cmap = ingest.ClassMap(class_names(spec.num_classes))
    cmap.write(root / cfg.class_map)
    for split, count in (("train", cfg.synth_train_count), ("test", cfg.synth_test_count)):
        sub = root / split
        sub.mkdir(exist_ok=True)
        rows = []
        for i, sample in enumerate(generate_dataset(spec, count, stream=split)):
            vid = f"{split}_{i:05d}"
            ingest.write_features(sub / f"{vid}.hseq", sample.features.frames)
            ingest.write_frame_labels(sub / f"{vid}.labels", sample.labels, cmap)
            ingest.write_transcript(sub / f"{vid}.transcript", sample.transcript, cmap)
            ingest.write_features(sub / f"{vid}.lat.v", sample.latents.visual)
            ingest.write_features(sub / f"{vid}.lat.c", sample.latents.action)
            ingest.write_regimes(sub / f"{vid}.regimes", sample.latents.regimes)
            rows.append((vid, f"{split}/{vid}.hseq", f"{split}/{vid}.labels", f"{split}/{vid}.transcript"))
        index_name = cfg.train_index if split == "train" else cfg.test_index
        ingest.write_split(root / index_name, rows)
    return root


def load_split_videos(cfg: ExperimentConfig, split: str, with_sidecars=False):
    root = Path(cfg.data_dir)
    index_name = {"train": cfg.train_index, "test": cfg.test_index}.get(split, split)
    cmap = ingest.ClassMap.read(root / cfg.class_map)
    index = ingest.load_split(root / index_name, cmap)
    videos = ingest.load_videos(index, cmap, allow_repeats=cfg.allow_repeats,
                                strict=cfg.strict_lengths, with_sidecars=with_sidecars)
    return videos, cmap


# ---------------------------------------------------------------- train

@dataclass
class TrainResult:
    model: HalModel
    curve: List[dict]
    seeds: dict
    num_classes: int
    initial_terms: dict = field(default_factory=dict)


def _features(video) -> torch.Tensor:
    return torch.tensor(np.asarray(video.features.frames, dtype=np.float32))


@torch.no_grad()
def posteriors_of(model: HalModel, video) -> np.ndarray:
    model.eval()
    out = forward(model, _features(video))
    return torch.softmax(out.logits.double(), -1).numpy()


def class_frequencies(pseudo, num_classes: int) -> np.ndarray:
    """Frame frequency of each class in the current pseudo labels (add-one smoothed)."""
    counts = np.ones(num_classes)
    for labels, _ in pseudo:
        counts += np.bincount(labels, minlength=num_classes)[:num_classes]
    return counts / counts.sum()


def refresh_pseudo_labels(model, videos, cfg, class_prior=None):
    res = []
    for v in videos:
        labels, mask = align.pseudo_labels(posteriors_of(model, v), v.transcript,
                                           cfg.min_segment_len, cfg.boundary_margin,
                                           class_prior=class_prior)
        res.append((labels, mask))
    return res


def initial_pseudo_labels(videos, cfg):
    res = []
    for v in videos:
        labels = align.uniform_alignment(v.features.T, v.transcript)
        bounds = labels_to_segments(labels)
        mask = align.boundary_mask(len(labels), [s.start for s in list(bounds)[1:]], cfg.boundary_margin)
        res.append((labels, mask))
    return res


def step_losses(model, cfg, x, labels, mask, sample_seed):
    out = forward(model, x, sample_seed)
    terms = elbo(model, out)
    ls = smoothness_loss(out.mu_c, out.mu_v, cfg.delta)
    ly = classifier_loss(torch.log_softmax(out.logits, -1), labels, mask, log_space=True)
    return terms, ls, ly, total_loss(terms, ls, ly, cfg)


def _loss_row(terms, ls, ly, total):
    vals = (ly, terms.recon, terms.aux, terms.kl_v, terms.kl_c, ls.term_i, ls.term_ii, total)
    return {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
            for k, v in zip(LOSS_COLUMNS[1:], vals)}


def train(cfg: ExperimentConfig, videos, num_classes: int, checkpoint_path=None,
          progress: bool = False) -> TrainResult:
    """One AdamW update per sequence per epoch on the total loss.

    Pseudo labels start from a uniform split of each transcript and are
    re-derived by transcript-constrained Viterbi every ``refresh_every`` epochs.
    """
    init_seed = derive_seed(cfg.seed, "init")
    torch.manual_seed(init_seed & 0x7FFFFFFFFFFFFFFF)
    model = HalModel.from_config(cfg, num_classes)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                            foreach=True)
    xs = [_features(v) for v in videos]
    pseudo = initial_pseudo_labels(videos, cfg)
    seeds = {"master": cfg.seed, "init": init_seed}

    initial = {}
    if videos:
        model.eval()
        with torch.no_grad():
            terms, ls, ly, total = step_losses(model, cfg, xs[0], *pseudo[0], 0)
        initial = _loss_row(terms, ls, ly, total)
        log.info("initial loss terms: %s", ", ".join(f"{k}={v:.4g}" for k, v in initial.items()))

    curve = []
    last_good = None
    for epoch in range(cfg.epochs):
        if epoch and epoch % cfg.refresh_every == 0:
            pseudo = refresh_pseudo_labels(model, videos, cfg, class_frequencies(pseudo, num_classes))
        order = np.random.default_rng(derive_seed(cfg.seed, "order", epoch)).permutation(len(videos))
        model.train()
        sums = dict.fromkeys(LOSS_COLUMNS[1:], 0.0)
        for n, i in enumerate(order):
            sample_seed = derive_seed(cfg.seed, "sample", epoch * len(videos) + int(i))
            terms, ls, ly, total = step_losses(model, cfg, xs[i], *pseudo[i], sample_seed)
            if not torch.isfinite(total):
                if checkpoint_path is not None and last_good is not None:
                    model.load_state_dict(last_good)
                    save_checkpoint(checkpoint_path, model, cfg)
                raise NumericalAbort(f"nonfinite loss at epoch {epoch}, sequence {videos[i].video_id}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            for k, val in _loss_row(terms, ls, ly, total).items():
                sums[k] += val
        row = {"epoch": epoch}
        row.update({k: v / max(len(videos), 1) for k, v in sums.items()})
        curve.append(row)
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if progress:
            log.info("epoch %d: %s", epoch, ", ".join(f"{k}={row[k]:.4f}" for k in LOSS_COLUMNS[1:]))
    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, cfg)
    return TrainResult(model, curve, seeds, num_classes, initial)


def curve_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOSS_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in curve:
        w.writerow({k: (row[k] if k == "epoch" else repr(row[k])) for k in LOSS_COLUMNS})
    return buf.getvalue()


# ---------------------------------------------------------------- eval

def decode(model, video, cfg, free: bool = False) -> np.ndarray:
    post = posteriors_of(model, video)
    if free:
        return post.argmax(1)
    return align.viterbi_align(post, video.transcript, cfg.min_segment_len_eval).labels


def evaluate(model, videos, cfg, free: bool = False) -> EvalReport:
    if any(max(v.transcript) >= model.num_classes for v in videos):
        raise ValidationError("class-count mismatch between checkpoint and split")
    pairs = [(decode(model, v, cfg, free), v.labels) for v in videos]
    return evaluate_corpus(pairs, video_ids=[v.video_id for v in videos])


# ---------------------------------------------------------------- ident

@torch.no_grad()
def latents_of(model, video):
    model.eval()
    out = forward(model, _features(video))
    return out.mu_c.double().numpy(), out.mu_v.double().numpy()


def identifiability(model, videos, cfg, untrained: Optional[HalModel] = None):
    if any(v.latents is None for v in videos):
        raise ValidationError("identifiability requires synthetic data")
    lat = [latents_of(model, v) for v in videos]
    report = identcheck.ident_report(
        [c for c, _ in lat], [v for _, v in lat],
        [v.latents["action"] for v in videos], [v.latents["visual"] for v in videos],
        [v.labels for v in videos], [v.features.frames for v in videos], seed=cfg.seed)
    if untrained is not None:
        c0 = np.concatenate([latents_of(untrained, v)[0] for v in videos])
        c_true = np.concatenate([v.latents["action"] for v in videos])
        report.r2_c_from_chat_untrained = identcheck.block_ident_r2(c0, c_true, cfg.seed)
    return report


def untrained_model(cfg, num_classes):
    torch.manual_seed(derive_seed(cfg.seed, "init") & 0x7FFFFFFFFFFFFFFF)
    model = HalModel.from_config(cfg, num_classes)
    model.eval()
    return model


# ---------------------------------------------------------------- manifest

def write_manifest(out_dir, cfg, result: Optional[TrainResult], extra=None) -> Path:
    manifest = {
        "config": cfg.to_dict(),
        "source_revision": source_revision(),
        "seeds": result.seeds if result else {"master": cfg.seed},
        "loss_curve": result.curve if result else [],
        "initial_loss_terms": result.initial_terms if result else {},
        "align_backend": align.BACKEND,
        "torch_threads": torch.get_num_threads(),
        "environment": {k: os.environ[k] for k in ("OMP_NUM_THREADS", "MKL_NUM_THREADS", "HAL_PURE_PYTHON")
                        if k in os.environ},
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    ingest.atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- ablation

def ablation_row(exp: int) -> dict:
    lr, ls, lkl, dl = ABLATION_GRID[exp]
    mark = lambda b: "x" if b else "-"
    return {"EXP": exp, "L_r": mark(lr), "L_s": mark(ls), "L_KL": mark(lkl), "delta": mark(dl)}


def run_ablation(cfg, train_videos, test_videos, num_classes, rows=None, seeds=None):
    """Train and evaluate each requested grid row over shared seeds.

    Returns per-run records; the summary takes the median over seeds.
    """
    rows = rows or cfg.ablation_rows
    seeds = seeds or cfg.ablation_seeds
    records = []
    for exp in rows:
        for seed in seeds:
            run_cfg = replace(cfg.with_ablation(exp), seed=seed)
            t0 = time.time()
            res = train(run_cfg, train_videos, num_classes)
            rep = evaluate(res.model, test_videos, run_cfg)
            rec = ablation_row(exp)
            rec.update(seed=seed, MoF=rep.mof, IoU=rep.iou, IoD=rep.iod, MoF_bg=rep.mof_bg,
                       seconds=time.time() - t0, final_total=res.curve[-1]["total"] if res.curve else None)
            records.append(rec)
            log.info("EXP %d seed %d: MoF %.4f IoU %.4f IoD %.4f", exp, seed, rep.mof, rep.iou, rep.iod)
    return records


def ablation_summary(records) -> List[dict]:
    out = []
    for exp in dict.fromkeys(r["EXP"] for r in records):
        rs = [r for r in records if r["EXP"] == exp]
        row = ablation_row(exp)
        for k in ("MoF", "IoU", "IoD"):
            row[k] = float(np.median([r[k] for r in rs]))
        out.append(row)
    return out


def run_sensitivity(cfg, train_videos, test_videos, num_classes, betas=None, seeds=None):
    """Full-model runs over a list of beta values (one record per beta and seed)."""
    records = []
    for b in (betas if betas is not None else cfg.sensitivity_betas):
        for seed in (seeds or cfg.ablation_seeds):
            run_cfg = replace(cfg, beta=float(b), seed=seed)
            res = train(run_cfg, train_videos, num_classes)
            rep = evaluate(res.model, test_videos, run_cfg)
            records.append({"beta": float(b), "seed": seed, "MoF": rep.mof, "IoU": rep.iou, "IoD": rep.iod})
    return records


def table_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in columns})
    return buf.getvalue()


# ---------------------------------------------------------------- plot data

def timeline_csv(gt, pred, pred_visual) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "gt", "pred", "pred_visual_only"])
    for t, row in enumerate(zip(gt, pred, pred_visual)):
        w.writerow([t] + [int(x) for x in row])
    return buf.getvalue()


def plot_data(model, videos, cfg, out_dir, render: bool = True) -> List[str]:
    """Timeline, smoothness and embedding CSVs; images only if matplotlib imports."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    missing = []
    preds = [decode(model, v, cfg) for v in videos]
    lat = [latents_of(model, v) for v in videos]
    # visual-only predictions: linear probe head on frozen v_hat, fitted to the split's labels
    probe = identcheck.fit_probe(np.concatenate([v for _, v in lat]),
                                 np.concatenate([v.labels for v in videos]))
    for video, pred, (c_hat, v_hat) in zip(videos, preds, lat):
        (out_dir / f"timeline_{video.video_id}.csv").write_text(
            timeline_csv(video.labels, pred, probe(v_hat)), encoding="utf-8")
        if len(c_hat) >= 2:
            rep = smoothness_loss(torch.as_tensor(c_hat), torch.as_tensor(v_hat), cfg.delta)
            (out_dir / f"smoothness_{video.video_id}.csv").write_text(rep.to_csv(), encoding="utf-8")
    c_all = np.concatenate([c for c, _ in lat])
    labels = np.concatenate([v.labels for v in videos])
    if c_all.shape[1] >= 2:
        emb = identcheck.export_embedding(c_all, labels)
        (out_dir / "embedding.csv").write_text(identcheck.embedding_csv(emb, labels), encoding="utf-8")
        np.save(out_dir / "latents_c.npy", c_all)
        np.save(out_dir / "latents_v.npy", np.concatenate([v for _, v in lat]))
    else:
        missing.append("embedding.csv (n_c < 2)")
    if render:
        try:
            _render(out_dir, videos[:4], preds[:4])
        except ImportError:
            missing.append("rendered images (matplotlib unavailable)")
    return missing


def _render(out_dir, videos, preds):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(len(videos), 1, figsize=(8, 1.2 * len(videos) + 0.5), squeeze=False)
    for ax, v, p in zip(axes[:, 0], videos, preds):
        ax.imshow(np.vstack([v.labels, p]), aspect="auto", interpolation="nearest", cmap="tab10")
        ax.set_yticks([0, 1], ["gt", "pred"])
        ax.set_title(v.video_id, fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "timelines.png", dpi=100)
    plt.close(fig)
