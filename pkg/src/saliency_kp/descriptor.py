"""Small differentiable per-point descriptor with exact input gradients, plus PCA.

Stage chain (layer numbers are what `layer_activations` accepts):

    1  u = tanh((p_i - centroid(knn_i)) @ W1 + b1)                       16
    2  h = [u ‖ max_j tanh((p_j - p_i) @ Wn + bn)],  j in knn_i            32
    3  tanh(h @ W3 + b3)                                                   16
    4  h3 @ W4 + b4                                                         8

Every stage sees only coordinate differences, so the descriptor is
translation invariant. Neighbourhoods include the query point itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .errors import BadLayerIndex, CloudTooSmall, DegenerateCovariance, DimensionMismatch
from .geometry import NeighborIndex, as_points

PARAM_NAMES = ("W1", "b1", "Wn", "bn", "W3", "b3", "W4", "b4")
NUM_LAYERS = 4


@dataclass(frozen=True, eq=False)
class LayerActivations:
    layer: int
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class InputGradient:
    layer: int
    values: np.ndarray


@dataclass(eq=False)
class DescriptorModel:
    params: dict
    k: int = 8

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("neighbourhood size must be >= 1")
        missing = set(PARAM_NAMES) - set(self.params)
        if missing:
            raise ValueError(f"missing descriptor parameters: {sorted(missing)}")
        self.params = {n: np.asarray(self.params[n], dtype=np.float64) for n in PARAM_NAMES}
        p = self.params
        h = p["W1"].shape[1]
        if (p["W1"].shape[0] != 3 or p["Wn"].shape != (3, h) or p["W3"].shape[0] != 2 * h
                or p["W4"].shape[0] != p["W3"].shape[1]):
            raise DimensionMismatch("descriptor stage shapes do not chain")
        for name, v in p.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite weights in {name}")

    @property
    def num_layers(self) -> int:
        return NUM_LAYERS

    @property
    def dim(self) -> int:
        return self.params["W4"].shape[1]

    def layer_dims(self):
        h = self.params["W1"].shape[1]
        return [h, 2 * h, self.params["W3"].shape[1], self.dim]


def init_descriptor(seed: int = 0, k: int = 8, hidden: int = 16, mid: int = 16, dim: int = 8,
                    input_gain: float = 2.0) -> DescriptorModel:
    """Seeded random descriptor.

    `input_gain` scales the first-stage weights; offsets are in meters, so
    larger gains make the descriptor sensitive to finer geometry.
    """
    rng = np.random.default_rng(seed)
    params = {
        "W1": rng.normal(0, input_gain / np.sqrt(3), (3, hidden)),
        "b1": rng.normal(0, 0.1, hidden),
        "Wn": rng.normal(0, input_gain / np.sqrt(3), (3, hidden)),
        "bn": rng.normal(0, 0.1, hidden),
        "W3": rng.normal(0, 1 / np.sqrt(2 * hidden), (2 * hidden, mid)),
        "b3": rng.normal(0, 0.1, mid),
        "W4": rng.normal(0, 1 / np.sqrt(mid), (mid, dim)),
        "b4": rng.normal(0, 0.1, dim),
    }
    return DescriptorModel(params, k=k)


def zero_descriptor(k: int = 8, hidden: int = 16, mid: int = 16, dim: int = 8) -> DescriptorModel:
    m = init_descriptor(0, k, hidden, mid, dim)
    return DescriptorModel({n: np.zeros_like(v) for n, v in m.params.items()}, k=k)


def neighborhoods(cloud, k: int) -> np.ndarray:
    """(N, k) indices of each point's k nearest points (itself included)."""
    pts = as_points(cloud)
    if pts.shape[0] < k:
        raise CloudTooSmall(f"cloud has {pts.shape[0]} points, neighbourhood needs {k}")
    idx, _ = NeighborIndex(pts).knn_all(pts, k)
    return idx


def _check_layer(model: DescriptorModel, layer: int):
    if not (1 <= int(layer) <= model.num_layers):
        raise BadLayerIndex(f"layer must be in [1, {model.num_layers}], got {layer}")


def _forward(model: DescriptorModel, pts: np.ndarray, nbr: np.ndarray, upto: int) -> dict:
    p = model.params
    cache = {"nbr": nbr}
    centroid = pts[nbr].mean(axis=1)
    u = np.tanh((pts - centroid) @ p["W1"] + p["b1"])
    cache["u"] = u
    acts = [u]
    if upto >= 2:
        offsets = pts[nbr] - pts[:, None, :]
        e = np.tanh(offsets @ p["Wn"] + p["bn"])
        v = e.max(axis=1)
        cache["e"], cache["v"] = e, v
        acts.append(np.concatenate([u, v], axis=1))
    if upto >= 3:
        h3 = np.tanh(acts[1] @ p["W3"] + p["b3"])
        acts.append(h3)
    if upto >= 4:
        acts.append(acts[2] @ p["W4"] + p["b4"])
    cache["acts"] = acts
    return cache


def max_pool_weights(e: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Subgradient weights of a max over axis 1, split evenly among exact ties."""
    mask = e == v[:, None, :]
    return mask * (1.0 / mask.sum(axis=1, keepdims=True))


def _backward(model: DescriptorModel, pts: np.ndarray, cache: dict, layer: int) -> np.ndarray:
    p = model.params
    nbr = cache["nbr"]
    acts = cache["acts"]
    grad = np.zeros_like(pts)
    g = np.ones_like(acts[layer - 1])
    if layer == 4:
        g = g @ p["W4"].T
    if layer >= 3:
        g = (g * (1.0 - acts[2] ** 2)) @ p["W3"].T
    if layer >= 2:
        h = p["W1"].shape[1]
        gu, gv = g[:, :h], g[:, h:]
        e = cache["e"]
        ge = gv[:, None, :] * max_pool_weights(e, cache["v"])
        goff = (ge * (1.0 - e ** 2)) @ p["Wn"].T
        np.add.at(grad, nbr, goff)
        grad -= goff.sum(axis=1)
    else:
        gu = g
    u = cache["u"]
    gq = (gu * (1.0 - u ** 2)) @ p["W1"].T
    grad += gq
    np.add.at(grad, nbr, -gq[:, None, :] / nbr.shape[1])
    return grad


def layer_activations(model: DescriptorModel, cloud, layer: int, nbr=None) -> LayerActivations:
    _check_layer(model, layer)
    pts = as_points(cloud)
    nbr = neighborhoods(pts, model.k) if nbr is None else nbr
    acts = _forward(model, pts, nbr, layer)["acts"]
    return LayerActivations(int(layer), acts[layer - 1])


def describe(model: DescriptorModel, cloud, nbr=None) -> np.ndarray:
    """(N, D) descriptor matrix."""
    return layer_activations(model, cloud, model.num_layers, nbr).values


def input_gradient(model: DescriptorModel, cloud, layer: int, nbr=None) -> InputGradient:
    """Gradient of the sum of all layer-`layer` activations w.r.t. every input coordinate."""
    return activations_and_gradient(model, cloud, layer, nbr)[1]


def activations_and_gradient(model: DescriptorModel, cloud, layer: int, nbr=None):
    """One forward pass shared by `layer_activations` and `input_gradient`."""
    _check_layer(model, layer)
    pts = as_points(cloud)
    nbr = neighborhoods(pts, model.k) if nbr is None else nbr
    cache = _forward(model, pts, nbr, layer)
    grad = _backward(model, pts, cache, layer)
    return LayerActivations(int(layer), cache["acts"][layer - 1]), InputGradient(int(layer), grad)


def save_descriptor(model: DescriptorModel, path) -> None:
    checkpoint.save(path, "descriptor", model.params, {"k": model.k})


def load_descriptor(path) -> DescriptorModel:
    params, meta = checkpoint.load(path, "descriptor")
    return DescriptorModel(params, k=int(meta["k"]))


@dataclass(frozen=True, eq=False)
class PcaProjection:
    mean: np.ndarray
    basis: np.ndarray
    explained_fraction: float
    eigenvalues: np.ndarray

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]


def fit_pca(features, target_fraction: float = 0.9) -> PcaProjection:
    """Smallest PCA basis whose leading variance share reaches `target_fraction`.

    Cumulative shares are compared with a 1e-12 relative slack so that a
    target of 1.0 is reachable despite rounding. Each basis vector is
    signed so its largest-magnitude component is positive.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DimensionMismatch("PCA needs an (N >= 2, D) matrix")
    if not 0.0 < target_fraction <= 1.0:
        raise ValueError("target_fraction must lie in (0, 1]")
    if np.all(X == X[0]):
        raise DegenerateCovariance("all feature rows are identical")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / X.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals[::-1], 0.0, None)
    vecs = vecs[:, ::-1]
    total = vals.sum()
    if total <= 0.0:
        raise DegenerateCovariance("feature covariance is zero")
    cum = np.cumsum(vals) / total
    m = int(np.argmax(cum >= target_fraction * (1.0 - 1e-12))) + 1
    basis = vecs[:, :m].copy()
    lead = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[lead, np.arange(m)])
    basis *= signs
    return PcaProjection(mean, basis, float(min(cum[m - 1], 1.0)), vals)


def project_pca(proj: PcaProjection, features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != proj.mean.shape[0]:
        raise DimensionMismatch(f"expected {proj.mean.shape[0]} feature columns, got {X.shape}")
    return (X - proj.mean) @ proj.basis


def reconstruct_pca(proj: PcaProjection, projected) -> np.ndarray:
    return np.asarray(projected) @ proj.basis.T + proj.mean


def save_pca(proj: PcaProjection, path) -> None:
    checkpoint.save(path, "pca", {"mean": proj.mean, "basis": proj.basis,
                                  "eigenvalues": proj.eigenvalues},
                    {"explained_fraction": proj.explained_fraction})


def load_pca(path) -> PcaProjection:
    arrays, meta = checkpoint.load(path, "pca")
    return PcaProjection(arrays["mean"], arrays["basis"], float(meta["explained_fraction"]),
                         arrays["eigenvalues"])
