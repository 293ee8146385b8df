"""Empirical identifiability and representation-quality measurements.

Everything here compares learned latents against synthetic ground truth or
labels: kernel-ridge R^2 as the block-identifiability witness, total-variation
ratio as the slowness witness, linear probing, silhouette cohesion and a PCA
embedding export.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist
from sklearn.kernel_ridge import KernelRidge
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import f1_score, silhouette_score

from .core import ValidationError
from .objective import l2_normalize_rows, temporal_change_magnitudes

log = logging.getLogger(__name__)

RIDGE = 1e-3
PROBE_L2 = 1e-3
MAX_KERNEL_SAMPLES = 2000
MAX_SILHOUETTE_SAMPLES = 5000


def _split(n, seed, train_frac=0.8):
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(train_frac * n))
    return perm[:k], perm[k:]


def _whiten(train, other):
    """PCA-whiten using training statistics (makes the fit affine invariant)."""
    mean = train.mean(0)
    cov = np.cov(train - mean, rowvar=False).reshape(train.shape[1], train.shape[1])
    evals, evecs = np.linalg.eigh(cov)
    keep = evals > 1e-12 * max(evals.max(), 1e-300)
    w = evecs[:, keep] / np.sqrt(evals[keep])
    return (train - mean) @ w, (other - mean) @ w


def _median_bandwidth(x, seed, max_points=1000):
    if len(x) > max_points:
        x = x[np.random.default_rng(seed).choice(len(x), max_points, replace=False)]
    med = np.median(pdist(x))
    return med if med > 0 else 1.0


def kernel_ridge_fit_predict(src_train, tgt_train, src_eval, seed=0):
    """RBF kernel ridge (median-heuristic bandwidth, ridge 1e-3) on whitened inputs."""
    a, b = _whiten(src_train, src_eval)
    bw = _median_bandwidth(a, seed)
    mean = tgt_train.mean(0)
    model = KernelRidge(alpha=RIDGE, kernel="rbf", gamma=1.0 / (2.0 * bw ** 2))
    model.fit(a, tgt_train - mean)
    return model.predict(b) + mean


def block_ident_r2(source, target, seed: int = 0, return_skipped: bool = False):
    """Mean held-out R^2 of a nonlinear regression from ``source`` to each target dim.

    An 80/20 split is drawn from ``seed``; inputs above 2000 rows are
    subsampled first. Zero-variance target dims are skipped.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.ndim == 1:
        source = source[:, None]
    if target.ndim == 1:
        target = target[:, None]
    if len(source) != len(target):
        raise ValidationError("source and target must have the same number of rows")
    if len(source) < 50:
        raise ValidationError("block_ident_r2 needs at least 50 samples")
    if len(source) > MAX_KERNEL_SAMPLES:
        pick = np.sort(np.random.default_rng(seed).choice(len(source), MAX_KERNEL_SAMPLES, replace=False))
        source, target = source[pick], target[pick]
    tr, te = _split(len(source), seed)
    keep = np.flatnonzero(target[tr].std(0) > 1e-12)
    skipped = [int(j) for j in range(target.shape[1]) if j not in set(keep.tolist())]
    if skipped:
        log.warning("block_ident_r2: skipping zero-variance target dims %s", skipped)
    if keep.size == 0:
        raise ValidationError("all target dimensions are degenerate")
    tgt = target[:, keep]
    pred = kernel_ridge_fit_predict(source[tr], tgt[tr], source[te], seed)
    resid = ((tgt[te] - pred) ** 2).sum(0)
    total = ((tgt[te] - tgt[te].mean(0)) ** 2).sum(0)
    r2 = 1.0 - resid / np.maximum(total, 1e-300)
    value = float(max(np.mean(r2), -1.0))
    return (value, skipped) if return_skipped else value


def residualize(values, on, seed: int = 0):
    """``values`` minus their kernel-ridge prediction from ``on`` (in-sample)."""
    values = np.asarray(values, dtype=np.float64)
    on = np.asarray(on, dtype=np.float64)
    if len(on) > MAX_KERNEL_SAMPLES:
        # fit on a subsample, predict everywhere
        pick = np.random.default_rng(seed).choice(len(on), MAX_KERNEL_SAMPLES, replace=False)
        return values - kernel_ridge_fit_predict(on[pick], values[pick], on, seed)
    return values - kernel_ridge_fit_predict(on, values, on, seed)


def residual_leakage_r2(c_true, c_hat, v_hat, seed: int = 0) -> float:
    """R^2 of true action latents from the part of ``v_hat`` not explained by ``c_hat``."""
    return block_ident_r2(residualize(v_hat, c_hat, seed), c_true, seed)


def total_variation(m) -> float:
    """Sum over steps of the mean absolute change of the row-normalized trajectory."""
    return float(temporal_change_magnitudes(l2_normalize_rows(m)).sum())


def smoothness_ratio(c_hat, v_hat) -> float:
    c_hat = np.asarray(c_hat, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if len(c_hat) < 2:
        raise ValidationError("need at least two frames")
    den = total_variation(v_hat)
    if den == 0.0:
        log.warning("smoothness_ratio: visual latents are constant; returning inf")
        return float("inf")
    return total_variation(c_hat) / den


def _canonical_order(x, y):
    return np.lexsort(np.column_stack([x, y]).T[::-1])


def linear_probe_f1(latents, labels, seed: int = 0) -> float:
    """Held-out macro-F1 of an L2-penalized softmax regression on frozen latents.

    Rows are put in a canonical order before the seeded 80/20 split, so the
    result does not depend on the order samples are passed in.
    """
    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if x.ndim == 1:
        x = x[:, None]
    if np.unique(y).size < 2:
        raise ValidationError("linear probing needs at least two classes")
    order = _canonical_order(x, y)
    x, y = x[order], y[order]
    tr, te = _split(len(x), seed)
    mean, std = x[tr].mean(0), x[tr].std(0)
    std[std == 0] = 1.0
    clf = LogisticRegression(C=1.0 / (PROBE_L2 * len(tr)), tol=1e-5, max_iter=10000)
    clf.fit((x[tr] - mean) / std, y[tr])
    pred = clf.predict((x[te] - mean) / std)
    return float(f1_score(y[te], pred, average="macro"))


def fit_probe(latents, labels):
    """Train the probe head on all rows; returns a predict function (used for plots)."""
    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if np.unique(y).size < 2:
        return lambda z: np.full(len(z), y[0], dtype=y.dtype)
    mean, std = x.mean(0), x.std(0)
    std[std == 0] = 1.0
    clf = LogisticRegression(C=1.0 / (PROBE_L2 * len(x)), tol=1e-5, max_iter=10000)
    clf.fit((x - mean) / std, y)
    return lambda z: clf.predict((np.asarray(z, dtype=np.float64) - mean) / std)


def cluster_cohesion(latents, labels, seed: int = 0) -> float:
    """Mean silhouette coefficient (Euclidean), subsampled above 5000 rows."""
    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels).ravel()
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValidationError("cluster_cohesion needs at least two classes")
    if counts.min() < 2:
        raise ValidationError("cluster_cohesion needs at least two samples per class")
    if len(x) > MAX_SILHOUETTE_SAMPLES:
        pick = np.random.default_rng(seed).choice(len(x), MAX_SILHOUETTE_SAMPLES, replace=False)
        x, y = x[pick], y[pick]
    return float(silhouette_score(x, y, metric="euclidean"))


def export_embedding(latents, labels=None, method: str = "pca"):
    """Top-2 principal component scores with the largest-magnitude loading made positive."""
    if method != "pca":
        raise ValidationError(f"unsupported embedding method {method!r}")
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValidationError("embedding needs at least two latent dimensions")
    xc = x - x.mean(0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    for k in range(2):
        if comps[k, np.argmax(np.abs(comps[k]))] < 0:
            comps[k] = -comps[k]
    emb = xc @ comps.T
    # exact zero for components with no variance
    emb[:, s[:2] <= 1e-12 * max(s[0], 1e-300)] = 0.0
    return emb


def embedding_csv(embedding, labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "label"])
    for (a, b), lab in zip(embedding, labels):
        w.writerow([repr(float(a)), repr(float(b)), int(lab)])
    return buf.getvalue()


@dataclass
class IdentReport:
    r2_c_from_chat: float
    r2_c_from_vhat: float
    r2_v_from_vhat: float
    r2_c_from_residual_vhat: float
    tv_ratio: float
    probe_f1_chat: float
    probe_f1_raw: float
    silhouette_chat: float
    silhouette_vhat: float
    r2_c_from_chat_untrained: float = float("nan")

    def to_csv(self) -> str:
        fields = dataclasses.asdict(self)
        return "metric,value\n" + "".join(f"{k},{v!r}\n" for k, v in fields.items())


def ident_report(c_hat_seqs, v_hat_seqs, c_true_seqs, v_true_seqs, labels_seqs, raw_seqs,
                 seed: int = 0) -> IdentReport:
    """Pool per-sequence trajectories and compute every identifiability measurement."""
    cat = lambda seqs: np.concatenate([np.asarray(s, dtype=np.float64) for s in seqs])
    c_hat, v_hat = cat(c_hat_seqs), cat(v_hat_seqs)
    c_true, v_true = cat(c_true_seqs), cat(v_true_seqs)
    labels = np.concatenate([np.asarray(s) for s in labels_seqs])
    raw = cat(raw_seqs)
    ratios = [smoothness_ratio(c, v) for c, v in zip(c_hat_seqs, v_hat_seqs)]
    return IdentReport(
        r2_c_from_chat=block_ident_r2(c_hat, c_true, seed),
        r2_c_from_vhat=block_ident_r2(v_hat, c_true, seed),
        r2_v_from_vhat=block_ident_r2(v_hat, v_true, seed),
        r2_c_from_residual_vhat=residual_leakage_r2(c_true, c_hat, v_hat, seed),
        tv_ratio=float(np.median(ratios)),
        probe_f1_chat=linear_probe_f1(c_hat, labels, seed),
        probe_f1_raw=linear_probe_f1(raw, labels, seed),
        silhouette_chat=cluster_cohesion(c_hat, labels, seed),
        silhouette_vhat=cluster_cohesion(v_hat, labels, seed),
    )
