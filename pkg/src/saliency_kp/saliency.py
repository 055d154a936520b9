"""Activation x gradient saliency and the radial per-point saliency score."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .descriptor import DescriptorModel, InputGradient, LayerActivations, activations_and_gradient
from .errors import ShapeMismatch
from .geometry import as_points, median_center, radial_distances

DEGENERATE_STD = 1e-12


@dataclass(frozen=True, eq=False)
class SaliencyField:
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class SaliencyScore:
    values: np.ndarray
    normalized: bool = False


def initial_saliency(acts: LayerActivations, grads: InputGradient) -> SaliencyField:
    """Row i is (sum of point i's activations) * (gradient row i)."""
    a = np.asarray(acts.values if isinstance(acts, LayerActivations) else acts, dtype=np.float64)
    g = np.asarray(grads.values if isinstance(grads, InputGradient) else grads, dtype=np.float64)
    if a.ndim != 2 or g.shape != (a.shape[0], 3):
        raise ShapeMismatch(f"activations {a.shape} and gradients {g.shape} do not align")
    return SaliencyField(a.sum(axis=1)[:, None] * g)


def saliency_score(field: SaliencyField, cloud) -> SaliencyScore:
    """s_i = -(sum_j S_ij * (x_ij - m_j)) * r_i with m the coordinate-wise median."""
    S = np.asarray(field.values if isinstance(field, SaliencyField) else field, dtype=np.float64)
    pts = as_points(cloud)
    if S.shape != pts.shape:
        raise ShapeMismatch(f"saliency field {S.shape} does not match cloud {pts.shape}")
    m = median_center(pts)
    offsets = pts - m
    r = radial_distances(pts, m)
    return SaliencyScore(-np.sum(S * offsets, axis=1) * r, normalized=False)


def normalize_scores(s: SaliencyScore) -> SaliencyScore:
    """Zero mean, unit population variance; constant input maps to all zeros."""
    v = np.asarray(s.values if isinstance(s, SaliencyScore) else s, dtype=np.float64)
    std = v.std()
    if v.size < 2 or std < DEGENERATE_STD:
        return SaliencyScore(np.zeros_like(v), normalized=True)
    return SaliencyScore((v - v.mean()) / std, normalized=True)


def cloud_saliency(model: DescriptorModel, cloud, layer: int, nbr=None, normalize: bool = True):
    """Full chain: layer activations and input gradients -> field -> score."""
    acts, grads = activations_and_gradient(model, cloud, layer, nbr)
    score = saliency_score(initial_saliency(acts, grads), cloud)
    return normalize_scores(score) if normalize else score
