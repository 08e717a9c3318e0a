"""Distillation targets: prompt sampling, per-class mask scoring, label assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .propagation import Prompt, SpatioTemporalMask


@dataclass(frozen=True)
class PromptConfig:
    per_class_top_k: int = 8
    reliability_floor: float = 0.5
    min_spacing: int = 6  # Chebyshev distance, same-class prompts only

    def __post_init__(self):
        if self.per_class_top_k < 1:
            raise ValueError("per_class_top_k must be >= 1")
        if self.min_spacing < 0:
            raise ValueError("min_spacing must be >= 0")
        if not 0.0 <= self.reliability_floor <= 1.0:
            raise ValueError("reliability_floor must be in [0, 1]")


@dataclass
class ScoreBreakdown:
    """Per-class score components for one mask; arrays of length K."""

    rel: np.ndarray
    area: np.ndarray
    freq: np.ndarray
    alpha: np.ndarray


def _np(a) -> np.ndarray:
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a)


def sample_prompts(logits, reliability, cfg: PromptConfig, frame_index: int = 0) -> list[Prompt]:
    """Pick confident, spread-out seed pixels for every predicted class.

    logits: (K, H, W); reliability: (H, W). Within a class, candidates at or
    above the floor are visited in descending reliability (raster order on
    ties) and kept unless within ``min_spacing`` of an already kept prompt.
    """
    logits, rel = _np(logits), _np(reliability).astype(np.float64)
    if logits.shape[1:] != rel.shape:
        raise ValueError("logits and reliability maps are not aligned")
    pred = logits.argmax(axis=0)
    prompts: list[Prompt] = []
    for c in np.unique(pred):
        ys, xs = np.nonzero((pred == c) & (rel >= cfg.reliability_floor))
        order = np.lexsort((xs, ys, -rel[ys, xs]))
        chosen: list[tuple[int, int]] = []
        for y, x in zip(ys[order], xs[order]):
            if any(max(abs(y - cy), abs(x - cx)) < cfg.min_spacing for cy, cx in chosen):
                continue
            chosen.append((int(y), int(x)))
            prompts.append(Prompt(frame_index, int(x), int(y), int(c), float(rel[y, x])))
            if len(chosen) == cfg.per_class_top_k:
                break
    return prompts


def class_frequencies(predictions, num_classes: int, smoothing: float = 1.0) -> np.ndarray:
    """Pixel counts per predicted class (plus additive smoothing so none are zero)."""
    counts = np.bincount(_np(predictions).ravel().astype(np.int64), minlength=num_classes)[:num_classes]
    return counts.astype(np.float64) + smoothing


def class_scores(
    mask,
    predictions,
    reliabilities,
    class_freq,
    lambda_area: float = 0.3,
    lambda_freq: float = 0.8,
    freq_floor: float = 0.05,
) -> ScoreBreakdown:
    """Score every class for one spatio-temporal mask.

    ``predictions`` are argmax class maps (T, H, W), or logits (T, K, H, W)
    which are reduced by argmax. All three inputs cover the mask's frames.
    """
    m = mask.masks if isinstance(mask, SpatioTemporalMask) else mask
    m = _np(m).astype(bool)
    pred = _np(predictions)
    if pred.ndim == m.ndim + 1:
        pred = pred.argmax(axis=1)
    rel = _np(reliabilities).astype(np.float64)
    freq = np.asarray(class_freq, dtype=np.float64)
    K = freq.shape[0]
    if np.any(freq <= 0):
        raise ValueError("class frequencies must be positive")
    n = int(m.sum())
    if n == 0:
        raise ValueError("empty mask")
    p = pred[m].astype(np.int64)
    r = rel[m]
    counts = np.bincount(p, minlength=K)[:K].astype(np.float64)
    rel_sum = np.bincount(p, weights=r, minlength=K)[:K]
    area = counts / n
    rel_mean = np.divide(rel_sum, counts, out=np.zeros(K), where=counts > 0)
    gfreq = np.clip(1.0 - freq / freq.sum(), freq_floor, 1.0)
    alpha = rel_mean * area**lambda_area * gfreq**lambda_freq
    return ScoreBreakdown(rel=rel_mean, area=area, freq=gfreq, alpha=alpha)


def assign_labels(
    masks: Sequence[SpatioTemporalMask],
    scores: Sequence[ScoreBreakdown],
    accept_floor: float = 0.1,
) -> list[SpatioTemporalMask]:
    """Label each mask with its best-scoring class; drop masks scoring below the floor."""
    if len(masks) != len(scores):
        raise ValueError("masks and scores are not aligned")
    out = []
    for m, s in zip(masks, scores):
        best = int(np.argmax(s.alpha))  # first maximum -> lower class index on ties
        if s.alpha[best] < accept_floor:
            continue
        out.append(m.labeled(best))
    return out
