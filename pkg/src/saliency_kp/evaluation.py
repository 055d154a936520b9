"""Matching score, relative repeatability and RANSAC registration metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detector import KeypointSet, descriptor_nn
from .errors import (DegenerateConfiguration, EmptyInput, EmptyKeypointSet, ShapeMismatch,
                     TooFewMatches)
from .geometry import NeighborIndex, RigidTransform, apply_transform, as_points, compose, invert, umeyama_fit

SUCCESS_RTE_M = 2.0
SUCCESS_RRE_DEG = 5.0
MAX_ITERATIONS = 10_000
CONFIDENCE = 0.99
DEFAULT_GRID = np.round(np.linspace(0.0, 1.0, 21), 10)


@dataclass(frozen=True, eq=False)
class MatchingScoreCurve:
    distances: np.ndarray
    precision: np.ndarray
    n_evaluated: int
    n_ignored_no_overlap: int

    @property
    def no_overlap(self) -> bool:
        return self.n_evaluated == 0

    def at(self, d: float) -> float:
        i = int(np.argmin(np.abs(self.distances - d)))
        return float(self.precision[i])


@dataclass(frozen=True)
class RepeatabilityResult:
    repeatability: float
    K: int
    epsilon: float


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    estimated: RigidTransform
    rte: float
    rre: float
    success: bool
    iterations: int
    inlier_ratio: float
    n_putative: int = 0


def _check_keypoints(*sets):
    for kp in sets:
        if len(kp) == 0:
            raise EmptyKeypointSet("keypoint set is empty")


def matching_score(kp_a: KeypointSet, kp_b: KeypointSet, desc_a, desc_b, cloud_a, cloud_b,
                   truth: RigidTransform, overlap_radius: float = 0.5,
                   grid=DEFAULT_GRID) -> MatchingScoreCurve:
    """Share of overlapping A-keypoints whose descriptor match in B lies within d of the truth.

    `desc_a`/`desc_b` are row-aligned with the keypoint sets. A-keypoints
    with no cloud-B point within `overlap_radius` after projection are
    ignored. With nothing left to evaluate the curve is all zeros.
    """
    _check_keypoints(kp_a, kp_b)
    desc_a = np.asarray(desc_a, dtype=np.float64)
    desc_b = np.asarray(desc_b, dtype=np.float64)
    if desc_a.shape[0] != len(kp_a) or desc_b.shape[0] != len(kp_b):
        raise ShapeMismatch("descriptors must be row-aligned with keypoints")
    grid = np.asarray(grid, dtype=np.float64)
    proj = apply_transform(kp_a.points(cloud_a), truth)
    _, gap = NeighborIndex(cloud_b).nearest_all(proj)
    overlap = gap <= overlap_radius
    n_eval = int(overlap.sum())
    if n_eval == 0:
        return MatchingScoreCurve(grid, np.zeros_like(grid), 0, len(kp_a))
    match = descriptor_nn(desc_a[overlap], desc_b)
    err = np.sqrt(np.sum((kp_b.points(cloud_b)[match] - proj[overlap]) ** 2, axis=1))
    precision = np.array([np.count_nonzero(err <= d) for d in grid], dtype=np.float64) / n_eval
    return MatchingScoreCurve(grid, precision, n_eval, len(kp_a) - n_eval)


def repeatability(kp_a: KeypointSet, kp_b: KeypointSet, cloud_a, cloud_b, truth: RigidTransform,
                  epsilon: float = 0.5) -> RepeatabilityResult:
    """Fraction of A-keypoints landing within epsilon of some B-keypoint after alignment."""
    _check_keypoints(kp_a, kp_b)
    proj = apply_transform(kp_a.points(cloud_a), truth)
    _, d = NeighborIndex(kp_b.points(cloud_b)).nearest_all(proj)
    return RepeatabilityResult(float(np.count_nonzero(d <= epsilon)) / len(kp_a), len(kp_a), epsilon)


def required_iterations(inlier_fraction: float, confidence: float = CONFIDENCE,
                        sample_size: int = 3) -> float:
    """ceil(log(1 - confidence) / log(1 - w^s)); inf when w = 0, 1 when w = 1."""
    w = inlier_fraction ** sample_size
    if w <= 0.0:
        return math.inf
    if w >= 1.0:
        return 1
    return max(1, math.ceil(math.log(1.0 - confidence) / math.log(1.0 - w)))


def rte_rre(estimated: RigidTransform, truth: RigidTransform):
    """(translation error in m, rotation error in degrees) of estimated relative to truth.

    The angle is atan2(sin, cos) of the residual rotation: the same value as
    arccos((trace - 1) / 2), without arccos losing precision near 0 degrees.
    """
    delta = compose(invert(truth), estimated)
    rte = float(np.linalg.norm(delta.translation))
    R = delta.rotation
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    rre = float(np.degrees(np.arctan2(s, c)))
    return rte, rre


def is_success(rte: float, rre: float) -> bool:
    return rte < SUCCESS_RTE_M and rre < SUCCESS_RRE_DEG


def mutual_matches(desc_a, desc_b) -> np.ndarray:
    """(M, 2) index pairs that are each other's descriptor nearest neighbour."""
    ab = descriptor_nn(desc_a, desc_b)
    ba = descriptor_nn(desc_b, desc_a)
    a = np.flatnonzero(ba[ab] == np.arange(len(ab)))
    return np.stack([a, ab[a]], axis=1)


def ransac_register(pts_a, desc_a, pts_b, desc_b, truth: RigidTransform | None = None,
                    inlier_threshold: float = 0.5, confidence: float = CONFIDENCE,
                    max_iterations: int = MAX_ITERATIONS, seed: int = 0) -> RegistrationResult:
    """Estimate the A->B transform from mutual descriptor matches of keypoint coordinates.

    Each iteration draws 3 distinct matches and fits a rigid transform;
    iterations stop once the adaptive requirement for the best inlier
    fraction is met, or at `max_iterations`. The winner is refit on its
    inliers. Without `truth`, rte/rre are NaN and success is False.
    """
    pa, pb = as_points(pts_a), as_points(pts_b)
    if pa.shape[0] < 3 or pb.shape[0] < 3:
        raise TooFewMatches("need at least three keypoints per side")
    matches = mutual_matches(desc_a, desc_b)
    n = matches.shape[0]
    if n < 3:
        raise TooFewMatches(f"only {n} putative matches")
    src, dst = pa[matches[:, 0]], pb[matches[:, 1]]
    rng = np.random.default_rng(seed)
    best_mask, best_model = None, None
    best_count = 0
    needed = math.inf
    it = 0
    while it < max_iterations and it < needed:
        it += 1
        sample = rng.choice(n, size=3, replace=False)
        try:
            model = umeyama_fit(src[sample], dst[sample])
        except DegenerateConfiguration:
            continue
        resid = np.sqrt(np.sum((apply_transform(src, model) - dst) ** 2, axis=1))
        mask = resid < inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask, best_model = count, mask, model
            needed = required_iterations(count / n, confidence)
    estimated = RigidTransform.identity() if best_model is None else best_model
    if best_mask is not None:
        try:
            estimated = umeyama_fit(src[best_mask], dst[best_mask])
        except DegenerateConfiguration:
            pass  # fewer than 3 usable inliers: keep the hypothesis itself
    if truth is None:
        rte, rre, ok = math.nan, math.nan, False
    else:
        rte, rre = rte_rre(estimated, truth)
        ok = is_success(rte, rre)
    return RegistrationResult(estimated, rte, rre, ok, it, best_count / n, n)


def aggregate_registration(results) -> dict:
    """Table-style summary: success rate over all, error statistics over successes only."""
    results = list(results)
    if not results:
        raise EmptyInput("no registration results to aggregate")
    ok = [r for r in results if r.success]
    rte = np.array([r.rte for r in ok])
    rre = np.array([r.rre for r in ok])

    def stat(a, f):
        return float(f(a)) if a.size else float("nan")

    return {
        "n_pairs": len(results),
        "success_rate": len(ok) / len(results),
        "rte_mean": stat(rte, np.mean), "rte_std": stat(rte, np.std),
        "rre_mean": stat(rre, np.mean), "rre_std": stat(rre, np.std),
        "avg_iterations": float(np.mean([r.iterations for r in results])),
        "inlier_ratio": float(np.mean([r.inlier_ratio for r in results])),
    }
