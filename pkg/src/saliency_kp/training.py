"""End-to-end training of the context encoder and keypoint head from aligned pairs."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .descriptor import DescriptorModel, PcaProjection, describe, fit_pca, init_descriptor
from .detector import (CloudInputs, ContextEncoder, KeypointHead, SkdDetector, TrainingPair,
                       _encoder_backward, _encoder_forward, _head_backward, _head_forward,
                       assemble_input, balanced_loss, init_encoder, init_head,
                       label_correspondences, prepare_cloud)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    step_size: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    tau: float = 0.5
    layer: int = 3
    pca_target: float = 0.9
    k: int = 8
    hidden: int = 16
    pretrain_epochs: int = 20
    pretrain_step: float = 0.05
    descriptor_seed: int = 0
    descriptor_gain: float = 2.0


@dataclass(eq=False)
class PreparedPair:
    inputs_k: CloudInputs
    inputs_l: CloudInputs
    labels: np.ndarray

    @property
    def pos_count(self) -> int:
        return int(self.labels.sum())

    @property
    def neg_count(self) -> int:
        return int(self.labels.size - self.labels.sum())


def prepare_pair(pair: TrainingPair, descriptor: DescriptorModel, pca: PcaProjection,
                 layer: int, enc_k: int, tau: float) -> PreparedPair:
    ck = prepare_cloud(descriptor, pca, pair.cloud_k, layer, enc_k)
    cl = prepare_cloud(descriptor, pca, pair.cloud_l, layer, enc_k)
    labels = label_correspondences(pair, ck.descriptors, cl.descriptors, tau)
    return PreparedPair(ck, cl, labels.stacked())


def pair_loss_and_grads(head: KeypointHead, enc: ContextEncoder, batch: PreparedPair):
    """Balanced loss over the stacked clouds, with gradients for head and encoder parameters."""
    caches = [_encoder_forward(enc, ci.points, ci.enc_nbr, ci.enc_offsets) for ci in (batch.inputs_k, batch.inputs_l)]
    x = np.concatenate([
        assemble_input(ci.saliency, ci.pca, cache["ctx"])
        for ci, cache in zip((batch.inputs_k, batch.inputs_l), caches)
    ])
    hcache = _head_forward(head, x)
    loss, dlogits = balanced_loss(hcache["logits"], batch.labels, batch.pos_count, batch.neg_count)
    head_grads, dx = _head_backward(head, hcache, dlogits)
    dctx = dx[:, -2:]
    nk = batch.inputs_k.points.shape[0]
    enc_grads = None
    for cache, d in zip(caches, (dctx[:nk], dctx[nk:])):
        g = _encoder_backward(enc, cache, d)
        enc_grads = g if enc_grads is None else {n: enc_grads[n] + g[n] for n in g}
    return loss, head_grads, enc_grads


class Momentum:
    """Heavy-ball gradient descent with a fixed step size."""

    def __init__(self, params: dict, step_size: float, momentum: float):
        self.step_size = step_size
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(v) for n, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        for n, g in grads.items():
            v = self.velocity[n]
            v *= self.momentum
            v -= self.step_size * g
            params[n] += v


def _copy(params: dict) -> dict:
    return {n: v.copy() for n, v in params.items()}


def train(head: KeypointHead, encoder: ContextEncoder, batches: list, config: TrainConfig):
    """Train copies of head and encoder on prepared pairs; returns (head, encoder, loss trace).

    One full-batch step per pair per epoch, pairs visited in list order.
    The trace holds the mean pre-step loss of each epoch.
    """
    if not batches:
        raise ValueError("training needs at least one pair")
    head = KeypointHead(_copy(head.params))
    encoder = ContextEncoder(_copy(encoder.params), k=encoder.k)
    opt_h = Momentum(head.params, config.step_size, config.momentum)
    opt_e = Momentum(encoder.params, config.step_size, config.momentum)
    trace = []
    for epoch in range(config.epochs):
        losses = []
        for batch in batches:
            loss, gh, ge = pair_loss_and_grads(head, encoder, batch)
            opt_h.step(head.params, gh)
            opt_e.step(encoder.params, ge)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
        if epoch % 25 == 0:
            log.debug("epoch %d loss %.5f", epoch, trace[-1])
    return head, encoder, trace


def surface_variation(points: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    """Smallest-eigenvalue share of each neighbourhood covariance (0 on planes, up to 1/3)."""
    local = points[nbr] - points[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / nbr.shape[1]
    vals = np.linalg.eigvalsh(cov)
    total = vals.sum(axis=1)
    return np.where(total > 0, vals[:, 0] / np.where(total > 0, total, 1.0), 0.0)


def pretrain_encoder(encoder: ContextEncoder, clouds: list, epochs: int, step_size: float,
                     seed: int = 0):
    """Regress local surface variation from the context vector with a throwaway linear readout."""
    encoder = ContextEncoder(_copy(encoder.params), k=encoder.k)
    rng = np.random.default_rng(seed)
    readout = {"r": rng.normal(0, 0.5, 2), "r0": np.zeros(1)}
    targets = [surface_variation(ci.points, ci.enc_nbr) * 3.0 for ci in clouds]
    opt_e = Momentum(encoder.params, step_size, 0.9)
    opt_r = Momentum(readout, step_size, 0.9)
    trace = []
    for _ in range(epochs):
        losses = []
        for ci, y in zip(clouds, targets):
            cache = _encoder_forward(encoder, ci.points, ci.enc_nbr, ci.enc_offsets)
            pred = cache["ctx"] @ readout["r"] + readout["r0"][0]
            resid = pred - y
            n = y.size
            losses.append(float(np.mean(resid ** 2)))
            dpred = 2.0 * resid / n
            g_r = {"r": cache["ctx"].T @ dpred, "r0": np.array([dpred.sum()])}
            g_e = _encoder_backward(encoder, cache, np.outer(dpred, readout["r"]))
            opt_e.step(encoder.params, g_e)
            opt_r.step(readout, g_r)
        trace.append(float(np.mean(losses)))
    return encoder, trace


def fit_feature_pca(descriptor: DescriptorModel, clouds, target: float) -> PcaProjection:
    feats = np.concatenate([describe(descriptor, c) for c in clouds])
    return fit_pca(feats, target)


def train_detector(pairs: list, config: TrainConfig, descriptor: DescriptorModel | None = None):
    """Build and train a full detector from ground-truth pairs.

    Returns (detector, trace) where trace has "pretrain" and "train" loss lists.
    """
    if descriptor is None:
        descriptor = init_descriptor(config.descriptor_seed, k=config.k,
                                     input_gain=config.descriptor_gain)
    clouds = [c for p in pairs for c in (p.cloud_k, p.cloud_l)]
    pca = fit_feature_pca(descriptor, clouds, config.pca_target)
    encoder = init_encoder(config.seed, k=config.k)
    head = init_head(1 + pca.n_components + 2, seed=config.seed + 1, hidden=config.hidden)
    batches = [prepare_pair(p, descriptor, pca, config.layer, encoder.k, config.tau) for p in pairs]
    pre_trace = []
    if config.pretrain_epochs > 0:
        encoder, pre_trace = pretrain_encoder(
            encoder, [ci for b in batches for ci in (b.inputs_k, b.inputs_l)],
            config.pretrain_epochs, config.pretrain_step, config.seed)
    head, encoder, trace = train(head, encoder, batches, config)
    det = SkdDetector(descriptor, pca, encoder, head, layer=config.layer)
    return det, {"pretrain": pre_trace, "train": trace}
