"""Stealthiness probes: LOF anomaly detection of watermarked queries and the
Mask Jaccard Similarity for scoring reverse-engineered trigger masks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ArityError, ConfigurationError, DataError, DimensionError
from .verify import _as_images


@dataclass(frozen=True)
class MaskRegion:
    """Binary spatial mask, 1 marks a trigger pixel."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise DimensionError(f"mask must be 2-d, got shape {b.shape}")
        if not np.isin(b, (0, 1)).all():
            raise DataError("mask entries must be 0 or 1")
        object.__setattr__(self, "bits", b.astype(bool))


def _mask_bits(m):
    return m.bits if isinstance(m, MaskRegion) else MaskRegion(m).bits


def mjs(a, b) -> float:
    """Intersection over union of two masks; 0 when both are empty."""
    a, b = _mask_bits(a), _mask_bits(b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    return int(np.logical_and(a, b).sum()) / union


@dataclass(frozen=True)
class LofConfig:
    n_neighbors: int = 20
    threshold: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.n_neighbors < 1:
            raise ConfigurationError("n_neighbors must be >= 1")
        if not self.threshold > 0:
            raise ConfigurationError("threshold must be > 0")

    def to_dict(self):
        return asdict(self)


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    d = np.empty((len(x), len(x)))
    for i in range(len(x)):
        d[i] = np.sqrt(((x - x[i]) ** 2).sum(axis=1))
    return d


def _ratio(num, den):
    # lrd is +inf for points with >= k exact duplicates; treat inf/inf as 1
    if np.isinf(num) and np.isinf(den):
        return 1.0
    if np.isinf(den):
        return 0.0
    return num / den


def lof_scores(features, config: LofConfig = LofConfig()) -> np.ndarray:
    """Local Outlier Factor of every row of ``features``.

    The k-distance neighbourhood includes every point tied with the k-th
    nearest neighbour, so it can hold more than k members.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"features must be a 2-d array, got shape {x.shape}")
    n, k = len(x), config.n_neighbors
    if n < k + 1:
        raise ArityError(f"LOF with k={k} needs at least {k + 1} points, got {n}")
    dist = _pairwise_distances(x)
    np.fill_diagonal(dist, np.inf)
    kdist = np.sort(dist, axis=1)[:, k - 1]
    neighbors = [np.flatnonzero(dist[i] <= kdist[i]) for i in range(n)]

    lrd = np.empty(n)
    for i, nb in enumerate(neighbors):
        reach = np.maximum(kdist[nb], dist[i, nb])
        mean = reach.mean()
        lrd[i] = np.inf if mean == 0.0 else 1.0 / mean
    return np.array([np.mean([_ratio(lrd[o], lrd[i]) for o in nb]) for i, nb in enumerate(neighbors)])


def detection_report(model, clean, watermarked, config: LofConfig = LofConfig(), clean_labels=None) -> dict:
    """Flag queries whose last-layer activations have LOF above the threshold.

    ``clean`` and ``watermarked`` are Sample lists or image arrays; clean
    labels come from the samples unless given. Flagged clean inputs are
    answered with a seeded random label to measure the accuracy cost of the
    evasion.
    """
    clean_x = _as_images(clean)
    wm_x = _as_images(watermarked)
    if len(clean_x) == 0 or len(wm_x) == 0:
        raise ArityError("detection needs non-empty clean and watermarked sets")
    if clean_labels is None:
        clean_labels = [s.label for s in clean]
    clean_labels = np.asarray(clean_labels, dtype=np.int64)

    logits_clean = model.logits(clean_x)
    logits_wm = model.logits(wm_x)
    scores = lof_scores(np.concatenate([logits_clean, logits_wm]), config)
    flagged = scores > config.threshold
    flag_clean, flag_wm = flagged[:len(clean_x)], flagged[len(clean_x):]

    pred = np.argmax(logits_clean, axis=1)
    rng = np.random.default_rng(config.seed)
    random_labels = rng.integers(0, model.n_classes, size=len(pred))
    evasive = np.where(flag_clean, random_labels, pred)
    acc_before = float(np.mean(pred == clean_labels))
    acc_after = float(np.mean(evasive == clean_labels))
    return {
        "watermark_detection_rate": float(flag_wm.mean()),
        "false_positive_rate": float(flag_clean.mean()),
        "accuracy_loss": acc_before - acc_after if flag_clean.any() else 0.0,
        "accuracy_before": acc_before,
        "accuracy_after": acc_after,
        "n_clean": int(len(clean_x)),
        "n_watermarked": int(len(wm_x)),
        "lof": config.to_dict(),
    }


def save_detection(report: dict, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=1)
