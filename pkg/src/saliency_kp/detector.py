"""Learned keypoint head: context encoder, input assembly, logits, labels and top-K."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .descriptor import (DescriptorModel, PcaProjection, describe, max_pool_weights,
                         neighborhoods, project_pca)
from .errors import EmptyCloud, KTooLarge, ShapeMismatch, UnnormalizedSaliency
from .geometry import ExactKnn, PointCloud, RigidTransform, apply_transform, as_points, invert
from .saliency import SaliencyScore, cloud_saliency

KEYPOINT = 1
ENCODER_PARAMS = ("Wa", "ba", "Wb", "bb", "Wc", "bc")
HEAD_PARAMS = ("W1", "b1", "W2", "b2")


@dataclass(eq=False)
class ContextEncoder:
    """Centered k-NN shared MLP -> max pool -> two dense stages -> 2-d context vector."""

    params: dict
    k: int = 8

    def __post_init__(self):
        self.params = {n: np.asarray(self.params[n], dtype=np.float64) for n in ENCODER_PARAMS}
        if self.params["Wc"].shape[1] != 2:
            raise ShapeMismatch("context encoder output must be 2-dimensional")


@dataclass(eq=False)
class KeypointHead:
    """Two dense stages mapping [saliency | pca | context] to (non-keypoint, keypoint) logits."""

    params: dict

    def __post_init__(self):
        self.params = {n: np.asarray(self.params[n], dtype=np.float64) for n in HEAD_PARAMS}
        if self.params["W2"].shape[1] != 2:
            raise ShapeMismatch("keypoint head must emit two logits")

    @property
    def in_dim(self) -> int:
        return self.params["W1"].shape[0]


def init_encoder(seed: int = 0, k: int = 8, hidden: int = 16, mid: int = 8,
                 input_gain: float = 2.0) -> ContextEncoder:
    rng = np.random.default_rng(seed)
    return ContextEncoder({
        "Wa": rng.normal(0, input_gain / np.sqrt(3), (3, hidden)),
        "ba": rng.normal(0, 0.1, hidden),
        "Wb": rng.normal(0, 1 / np.sqrt(hidden), (hidden, mid)),
        "bb": np.zeros(mid),
        "Wc": rng.normal(0, 1 / np.sqrt(mid), (mid, 2)),
        "bc": np.zeros(2),
    }, k=k)


def init_head(in_dim: int, seed: int = 0, hidden: int = 16) -> KeypointHead:
    rng = np.random.default_rng(seed)
    return KeypointHead({
        "W1": rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0, 1 / np.sqrt(hidden), (hidden, 2)),
        "b2": np.zeros(2),
    })


# -- context encoder ---------------------------------------------------------

def _encoder_forward(enc: ContextEncoder, pts: np.ndarray, nbr: np.ndarray, offsets=None) -> dict:
    p = enc.params
    if offsets is None:
        offsets = pts[nbr] - pts[:, None, :]
    e = np.tanh(offsets @ p["Wa"] + p["ba"])
    m = e.max(axis=1)
    z = np.tanh(m @ p["Wb"] + p["bb"])
    ctx = z @ p["Wc"] + p["bc"]
    return {"offsets": offsets, "e": e, "m": m, "z": z, "ctx": ctx}


def _encoder_backward(enc: ContextEncoder, cache: dict, dctx: np.ndarray) -> dict:
    p = enc.params
    z, e = cache["z"], cache["e"]
    grads = {"Wc": z.T @ dctx, "bc": dctx.sum(axis=0)}
    dz = (dctx @ p["Wc"].T) * (1.0 - z ** 2)
    grads["Wb"] = cache["m"].T @ dz
    grads["bb"] = dz.sum(axis=0)
    dm = dz @ p["Wb"].T
    de = dm[:, None, :] * max_pool_weights(e, cache["m"]) * (1.0 - e ** 2)
    grads["Wa"] = cache["offsets"].reshape(-1, 3).T @ de.reshape(-1, de.shape[-1])
    grads["ba"] = de.sum(axis=(0, 1))
    return grads


def context_features(enc: ContextEncoder, cloud, nbr=None) -> np.ndarray:
    pts = as_points(cloud)
    nbr = neighborhoods(pts, enc.k) if nbr is None else nbr
    return _encoder_forward(enc, pts, nbr)["ctx"]


# -- head ----------------------------------------------------------------------

def assemble_input(s, pca_feats, ctx) -> np.ndarray:
    """Row-wise [saliency | pca | context]."""
    if isinstance(s, SaliencyScore):
        if not s.normalized:
            raise UnnormalizedSaliency("saliency scores must be normalized before assembly")
        s = s.values
    s = np.asarray(s, dtype=np.float64).reshape(-1, 1)
    pca_feats = np.asarray(pca_feats, dtype=np.float64)
    ctx = np.asarray(ctx, dtype=np.float64)
    n = s.shape[0]
    if pca_feats.ndim != 2 or pca_feats.shape[0] != n or ctx.shape != (n, 2):
        raise ShapeMismatch(f"cannot assemble saliency {s.shape}, pca {pca_feats.shape}, "
                            f"context {ctx.shape}")
    return np.concatenate([s, pca_feats, ctx], axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def _head_forward(head: KeypointHead, x: np.ndarray) -> dict:
    p = head.params
    h = np.tanh(x @ p["W1"] + p["b1"])
    return {"x": x, "h": h, "logits": h @ p["W2"] + p["b2"]}


def _head_backward(head: KeypointHead, cache: dict, dlogits: np.ndarray):
    p = head.params
    h = cache["h"]
    grads = {"W2": h.T @ dlogits, "b2": dlogits.sum(axis=0)}
    dh = (dlogits @ p["W2"].T) * (1.0 - h ** 2)
    grads["W1"] = cache["x"].T @ dh
    grads["b1"] = dh.sum(axis=0)
    return grads, dh @ p["W1"].T


def head_forward(head: KeypointHead, x):
    """Return (logits, keypoint probabilities)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.in_dim:
        raise ShapeMismatch(f"head expects {head.in_dim} input columns, got {x.shape}")
    logits = _head_forward(head, x)["logits"]
    return logits, softmax(logits)[:, KEYPOINT]


# -- loss ----------------------------------------------------------------------

def class_weights(pos_count: int, neg_count: int):
    """(w_neg, w_pos); positives are up-weighted by the negative:positive ratio."""
    return 1.0, neg_count / max(pos_count, 1)


def balanced_loss(logits, labels, pos_count: int | None = None, neg_count: int | None = None):
    """Class-balanced mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).astype(np.intp).reshape(-1)
    n = y.shape[0]
    if logits.shape != (n, 2):
        raise ShapeMismatch(f"logits {logits.shape} do not match {n} labels")
    if pos_count is None:
        pos_count = int(y.sum())
    if neg_count is None:
        neg_count = n - pos_count
    w_neg, w_pos = class_weights(pos_count, neg_count)
    w = np.where(y == KEYPOINT, w_pos, w_neg)
    z = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1))
    nll = log_z - z[np.arange(n), y]
    loss = float(np.sum(w * nll) / n)
    dlogits = softmax(logits)
    dlogits[np.arange(n), y] -= 1.0
    dlogits *= (w / n)[:, None]
    return loss, dlogits


# -- correspondences -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrainingPair:
    cloud_k: PointCloud
    cloud_l: PointCloud
    truth: RigidTransform


@dataclass(frozen=True, eq=False)
class CorrespondenceLabels:
    positive_k: np.ndarray
    match_k: np.ndarray
    positive_l: np.ndarray
    match_l: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.positive_k, self.positive_l]).astype(np.intp)


def descriptor_nn(query, reference) -> np.ndarray:
    """Index of the nearest reference row for every query row; ties -> lowest index."""
    q = np.asarray(query, dtype=np.float64)
    idx, _ = ExactKnn(reference).query(q.reshape(len(q), -1), 1)
    return idx[:, 0]


def _label_side(src, dst, transform, desc_src, desc_dst, tau):
    match = descriptor_nn(desc_src, desc_dst)
    projected = apply_transform(src, transform)
    err = np.sqrt(np.sum((projected - dst[match]) ** 2, axis=1))
    return err <= tau, match


def label_correspondences(pair: TrainingPair, desc_k, desc_l, tau: float = 0.5) -> CorrespondenceLabels:
    """A point is positive when its descriptor-space match lands within tau of its true position."""
    pk, pl = as_points(pair.cloud_k), as_points(pair.cloud_l)
    if pk.shape[0] == 0 or pl.shape[0] == 0:
        raise EmptyCloud("both clouds must be non-empty")
    if len(desc_k) != pk.shape[0] or len(desc_l) != pl.shape[0]:
        raise ShapeMismatch("descriptors must be row-aligned with their clouds")
    pos_k, m_k = _label_side(pk, pl, pair.truth, desc_k, desc_l, tau)
    pos_l, m_l = _label_side(pl, pk, invert(pair.truth), desc_l, desc_k, tau)
    return CorrespondenceLabels(pos_k, m_k, pos_l, m_l)


# -- inference -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KeypointSet:
    indices: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp).reshape(-1)
        sc = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if idx.shape != sc.shape:
            raise ShapeMismatch("indices and scores must have equal length")
        if np.unique(idx).size != idx.size:
            raise ValueError("keypoint indices must be distinct")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "scores", sc)

    def __len__(self):
        return self.indices.size

    def points(self, cloud) -> np.ndarray:
        return as_points(cloud)[self.indices]


def top_k(scores, K: int, rank_key=None) -> KeypointSet:
    """K highest scores, ties to the lower index. `rank_key` overrides the ordering key."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = scores.size
    if K < 1 or K > n:
        raise KTooLarge(f"K={K} must lie in [1, {n}]")
    key = scores if rank_key is None else np.asarray(rank_key, dtype=np.float64)
    order = np.lexsort((np.arange(n), -key))[:K]
    return KeypointSet(order, scores[order])


@dataclass(eq=False)
class SkdDetector:
    """Everything needed to score a cloud: frozen descriptor + PCA, trainable encoder + head."""

    descriptor: DescriptorModel
    pca: PcaProjection
    encoder: ContextEncoder
    head: KeypointHead
    layer: int = 3


@dataclass(eq=False)
class CloudInputs:
    """Per-cloud head inputs that do not depend on trainable weights."""

    points: np.ndarray
    saliency: np.ndarray
    pca: np.ndarray
    descriptors: np.ndarray
    enc_nbr: np.ndarray
    enc_offsets: np.ndarray | None = None

    def __post_init__(self):
        if self.enc_offsets is None:
            self.enc_offsets = self.points[self.enc_nbr] - self.points[:, None, :]


def prepare_cloud(descriptor: DescriptorModel, pca: PcaProjection, cloud, layer: int,
                  enc_k: int) -> CloudInputs:
    pts = as_points(cloud)
    nbr = neighborhoods(pts, descriptor.k)
    desc = describe(descriptor, pts, nbr)
    sal = cloud_saliency(descriptor, pts, layer, nbr).values
    enc_nbr = nbr if enc_k == descriptor.k else neighborhoods(pts, enc_k)
    return CloudInputs(pts, sal, project_pca(pca, desc), desc, enc_nbr)


def _inputs_logits(head: KeypointHead, enc: ContextEncoder, ci: CloudInputs):
    ctx = _encoder_forward(enc, ci.points, ci.enc_nbr, ci.enc_offsets)["ctx"]
    x = assemble_input(ci.saliency, ci.pca, ctx)
    return _head_forward(head, x)["logits"]


def keypoint_logits(det: SkdDetector, cloud) -> np.ndarray:
    ci = prepare_cloud(det.descriptor, det.pca, cloud, det.layer, det.encoder.k)
    return _inputs_logits(det.head, det.encoder, ci)


def detect_topk(det: SkdDetector, cloud, K: int) -> KeypointSet:
    """Top-K points by keypoint probability; no suppression, no threshold.

    Ranking uses the logit margin, which orders points exactly as the
    probability does but does not saturate to ties near 0 or 1.
    """
    logits = keypoint_logits(det, cloud)
    probs = softmax(logits)[:, KEYPOINT]
    return top_k(probs, K, rank_key=logits[:, KEYPOINT] - logits[:, 1 - KEYPOINT])


def save_detector(det: SkdDetector, path) -> None:
    arrays = {f"descriptor.{n}": v for n, v in det.descriptor.params.items()}
    arrays.update({f"encoder.{n}": v for n, v in det.encoder.params.items()})
    arrays.update({f"head.{n}": v for n, v in det.head.params.items()})
    arrays.update({"pca.mean": det.pca.mean, "pca.basis": det.pca.basis,
                   "pca.eigenvalues": det.pca.eigenvalues})
    meta = {"descriptor_k": det.descriptor.k, "encoder_k": det.encoder.k, "layer": det.layer,
            "pca_explained_fraction": det.pca.explained_fraction}
    checkpoint.save(path, "skd", arrays, meta)


def load_detector(path) -> SkdDetector:
    arrays, meta = checkpoint.load(path, "skd")

    def group(prefix):
        return {n.split(".", 1)[1]: v for n, v in arrays.items() if n.startswith(prefix + ".")}

    pca = group("pca")
    return SkdDetector(
        DescriptorModel(group("descriptor"), k=int(meta["descriptor_k"])),
        PcaProjection(pca["mean"], pca["basis"], float(meta["pca_explained_fraction"]),
                      pca["eigenvalues"]),
        ContextEncoder(group("encoder"), k=int(meta["encoder_k"])),
        KeypointHead(group("head")),
        layer=int(meta["layer"]),
    )

