"""Atomic 3D flows: uniform flow codebook, soft patch assignment, rebalanced loss, metrics."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import atf
from .autodiff import Tensor
from .layers import weighted_cross_entropy

SOFT_EPS = 1e-8


@dataclass(frozen=True)
class Codebook:
    bins_per_axis: int
    bound: float
    codewords: np.ndarray  # (K, 3)

    @property
    def K(self) -> int:
        return self.codewords.shape[0]

    @property
    def zero_index(self) -> int:
        c = self.bins_per_axis // 2
        n = self.bins_per_axis
        return c * n * n + c * n + c

    def axis_centers(self) -> np.ndarray:
        return bin_centers(self.bins_per_axis, self.bound)


def bin_centers(n: int, bound: float) -> np.ndarray:
    # B*(2i+1-n)/n keeps the middle center at exactly 0.0
    return bound * (2 * np.arange(n) + 1 - n) / n


def build_codebook(bins_per_axis: int = 5, bound: float = 1.0) -> Codebook:
    n = int(bins_per_axis)
    if n < 1 or n % 2 == 0:
        raise ValueError(f"bins_per_axis must be a positive odd integer so zero flow is a codeword, got {n}")
    if not bound > 0:
        raise ValueError(f"bound must be positive, got {bound}")
    c = bin_centers(n, bound)
    ix, iy, iz = np.meshgrid(c, c, c, indexing="ij")
    codewords = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
    return Codebook(n, float(bound), codewords)


def patch_means(flow: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, 3) -> (..., H/M, W/M, 3) means of non-overlapping M x M patches."""
    flow = np.asarray(flow, dtype=np.float64)
    *lead, H, W, C = flow.shape
    if H % patch or W % patch:
        raise ValueError(f"flow size {H}x{W} is not divisible by patch size {patch}")
    blocks = flow.reshape(*lead, H // patch, patch, W // patch, patch, C)
    return blocks.mean(axis=(-4, -2))


def encode(flow: np.ndarray, cb: Codebook, patch: int, k_nn: int = 4) -> np.ndarray:
    """Map each M x M flow patch to a distribution over the K codewords.

    Pixels are clipped to the codebook cube before averaging, so the patch
    mean lies inside it and encode(flow) == encode(clip(flow)). The ``k_nn`` nearest
    codewords receive weight proportional to 1/(d + eps). Ties go to the lower
    codeword index.
    """
    if not 1 <= k_nn <= cb.K:
        raise ValueError(f"k_nn must lie in [1, {cb.K}], got {k_nn}")
    means = patch_means(np.clip(flow, -cb.bound, cb.bound), patch)
    lead = means.shape[:-1]
    pts = means.reshape(-1, 3)
    d = np.sqrt(((pts[:, None, :] - cb.codewords[None, :, :]) ** 2).sum(axis=-1))
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k_nn]
    rows = np.arange(len(pts))[:, None]
    w = 1.0 / (d[rows, nearest] + SOFT_EPS)
    w /= w.sum(axis=1, keepdims=True)
    probs = np.zeros((len(pts), cb.K))
    probs[rows, nearest] = w
    return probs.reshape(*lead, cb.K)


def hard_assign(flow: np.ndarray, cb: Codebook, patch: int) -> np.ndarray:
    """Nearest-codeword index per patch."""
    return encode(flow, cb, patch, k_nn=1).argmax(axis=-1)


def decode(grid: np.ndarray, cb: Codebook, patch: int) -> np.ndarray:
    """Piecewise-constant flow: each patch gets the probability-weighted mean codeword."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape[-1] != cb.K:
        raise ValueError(f"grid has {grid.shape[-1]} classes, codebook has {cb.K}")
    vec = grid @ cb.codewords
    return np.repeat(np.repeat(vec, patch, axis=-3), patch, axis=-2)


def codeword_histogram(flows, cb: Codebook, patch: int) -> np.ndarray:
    """Counts of hard assignments over an iterable of flow arrays."""
    counts = np.zeros(cb.K)
    for f in flows:
        counts += np.bincount(hard_assign(f, cb, patch).ravel(), minlength=cb.K)
    return counts


@dataclass(frozen=True)
class ClassWeights:
    w: np.ndarray
    lam: float
    p_tilde: np.ndarray


def class_weights(p_tilde, lam: float = 0.5) -> ClassWeights:
    """Smoothed inverse-frequency weights normalized so that sum(p_tilde * w) == 1."""
    p = np.asarray(p_tilde, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("p_tilde must be a probability distribution")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    K = p.size
    smoothed = (1.0 - lam) * p + lam / K
    if np.any(smoothed == 0):
        raise ValueError("lambda=0 with an unseen codeword gives an unbounded weight")
    raw = 1.0 / smoothed
    w = raw / (p * raw).sum()
    return ClassWeights(w, float(lam), p)


def weighted_ce_loss(z_true: np.ndarray, z_pred_logits: Tensor, weights: ClassWeights | np.ndarray) -> Tensor:
    """Rebalanced cross entropy, summed over classes and averaged over patches."""
    w = weights.w if isinstance(weights, ClassWeights) else weights
    return weighted_cross_entropy(z_pred_logits, z_true, w)


def rmse(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"rmse shape mismatch: {y_true.shape} vs {y_pred.shape}")
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))


def f1_score(z_true: np.ndarray, z_pred: np.ndarray) -> float:
    """Macro F1 of per-patch argmax classes, over classes present in the ground truth."""
    z_true = np.asarray(z_true)
    z_pred = np.asarray(z_pred)
    if z_true.shape[:-1] != z_pred.shape[:-1]:
        raise ValueError(f"grid shape mismatch: {z_true.shape} vs {z_pred.shape}")
    t = z_true.argmax(axis=-1).ravel()
    p = z_pred.argmax(axis=-1).ravel()
    scores = []
    for k in np.unique(t):
        tp = np.sum((p == k) & (t == k))
        fp = np.sum((p == k) & (t != k))
        fn = np.sum((p != k) & (t == k))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return float(np.mean(scores))


def save_codec(directory: str | os.PathLike, cb: Codebook, weights: ClassWeights, k_nn: int) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atf.save(d / "codewords.atf", cb.codewords)
    atf.save(d / "class_weights.atf", weights.w)
    atf.save(d / "p_tilde.atf", weights.p_tilde)
    meta = {"bins_per_axis": cb.bins_per_axis, "bound": cb.bound, "lambda": weights.lam, "k_nn": k_nn}
    (d / "codec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_codec(directory: str | os.PathLike) -> tuple[Codebook, ClassWeights, int]:
    d = Path(directory)
    meta = json.loads((d / "codec.json").read_text())
    cb = build_codebook(meta["bins_per_axis"], meta["bound"])
    stored = atf.load(d / "codewords.atf")
    if not np.array_equal(stored, cb.codewords):
        raise ValueError(f"{d / 'codewords.atf'} does not match a uniform codebook with {meta}")
    weights = ClassWeights(atf.load(d / "class_weights.atf"), meta["lambda"], atf.load(d / "p_tilde.atf"))
    return cb, weights, meta["k_nn"]
