"""Reference detectors: gradient magnitude + Kapur threshold + 3D NMS, and uniform random."""
from __future__ import annotations

import numpy as np

from .descriptor import InputGradient
from .detector import KeypointSet
from .errors import EmptyHistogram, KTooLarge, ShapeMismatch
from .geometry import as_points

TIE_RTOL = 1e-12


def _class_entropy(p: np.ndarray) -> float:
    mass = p.sum()
    q = p[p > 0] / mass
    return float(-np.sum(q * np.log(q)))


def kapur_threshold(histogram) -> int:
    """Maximum-entropy split of a histogram.

    Returns t such that bins [0, t) are background and [t, B) foreground,
    maximising the sum of both class entropies. Splits with an empty class
    are skipped; near-equal totals (1e-12 relative) resolve to the lowest t.
    With all mass in one bin, that bin's index is returned.
    """
    h = np.asarray(histogram, dtype=np.float64).reshape(-1)
    if h.size < 2:
        raise EmptyHistogram("need at least two bins")
    total = h.sum()
    if not total > 0 or np.any(h < 0):
        raise EmptyHistogram("histogram must have positive total mass")
    p = h / total
    scores = np.full(h.size, -np.inf)
    for t in range(1, h.size):
        if p[:t].sum() > 0 and p[t:].sum() > 0:
            scores[t] = _class_entropy(p[:t]) + _class_entropy(p[t:])
    if not np.isfinite(scores).any():
        return int(np.flatnonzero(h)[0])
    best = scores.max()
    return int(np.flatnonzero(scores >= best - TIE_RTOL * max(abs(best), 1.0))[0])


def score_bins(scores: np.ndarray, bins: int):
    """Per-score bin index over [min, max] plus the resulting histogram."""
    lo, hi = scores.min(), scores.max()
    if hi > lo:
        idx = np.floor((scores - lo) / (hi - lo) * bins).astype(np.intp)
        idx = np.clip(idx, 0, bins - 1)
    else:
        idx = np.zeros(scores.shape, dtype=np.intp)
    return idx, np.bincount(idx, minlength=bins)


def nms_3d(points: np.ndarray, scores: np.ndarray, candidates: np.ndarray, radius: float):
    """Greedy suppression: keep the best remaining candidate, drop everything within radius."""
    order = candidates[np.lexsort((candidates, -scores[candidates]))]
    kept = []
    for c in order:
        if kept:
            d = np.sqrt(np.sum((points[kept] - points[c]) ** 2, axis=1))
            if np.any(d <= radius):
                continue
        kept.append(int(c))
    return np.asarray(kept, dtype=np.intp)


def elf3d_detect(grads, cloud, nms_radius: float = 0.5, bins: int = 64) -> KeypointSet:
    g = np.asarray(grads.values if isinstance(grads, InputGradient) else grads, dtype=np.float64)
    pts = as_points(cloud)
    if g.shape != pts.shape:
        raise ShapeMismatch(f"gradients {g.shape} do not match cloud {pts.shape}")
    score = np.sqrt(np.sum(g * g, axis=1))
    if not score.max() > 0:
        return KeypointSet(np.zeros(0, dtype=np.intp), np.zeros(0))
    bin_idx, hist = score_bins(score, bins)
    t = kapur_threshold(hist)
    candidates = np.flatnonzero(bin_idx >= t)
    kept = nms_3d(pts, score, candidates, nms_radius)
    return KeypointSet(kept, score[kept])


def random_detect(cloud, K: int, seed: int = 0) -> KeypointSet:
    n = len(as_points(cloud))
    if K < 1 or K > n:
        raise KTooLarge(f"K={K} must lie in [1, {n}]")
    idx = np.random.default_rng(seed).choice(n, size=K, replace=False)
    return KeypointSet(idx, np.ones(K))
