"""Experiment pipelines: training, detection, metric evaluation and layer sweeps."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import platform
import time

import numpy as np
import scipy

from . import __version__
from .baselines import elf3d_detect, random_detect
from .config import ExperimentConfig
from .descriptor import DescriptorModel, describe, init_descriptor, input_gradient, neighborhoods
from .detector import KeypointSet, SkdDetector, detect_topk, load_detector, save_detector, top_k
from .errors import KeypointError, TooFewMatches
from .evaluation import (DEFAULT_GRID, RegistrationResult, aggregate_registration, matching_score,
                         ransac_register, repeatability)
from .geometry import RigidTransform
from .io import load_pairs, write_csv
from .saliency import cloud_saliency
from .synthetic import synthetic_pairs
from .training import train_detector

log = logging.getLogger(__name__)

MATCHING_HEADER = ["method", "K", "d", "precision"]
REPEATABILITY_HEADER = ["method", "K", "epsilon", "repeatability"]
REGISTRATION_HEADER = ["method", "K", "rte", "rre", "success", "iterations", "inlier_ratio"]
REGISTRATION_PAIRS_HEADER = ["pair"] + REGISTRATION_HEADER
LAYERS_HEADER = ["layer", "precision_1m", "n_evaluated"]
METRICS = ("matching", "repeatability", "registration")


class PipelineError(KeypointError):
    pass


def load_dataset(cfg: ExperimentConfig) -> list:
    if cfg.source == "synthetic":
        return synthetic_pairs(cfg.scene, cfg.n_pairs, first_seed=cfg.pair_seed)
    pairs = load_pairs(cfg.source)
    return pairs[:cfg.n_pairs] if cfg.n_pairs > 0 else pairs


def training_pairs(cfg: ExperimentConfig) -> list:
    return synthetic_pairs(cfg.scene, cfg.train_pairs, first_seed=cfg.train_seed)


def run_training(cfg: ExperimentConfig, path: str | None = None):
    """Train on synthetic pairs disjoint from the evaluation seeds and save a checkpoint."""
    path = path or cfg.checkpoint or os.path.join(cfg.output_dir, "skd.npz")
    det, trace = train_detector(training_pairs(cfg), cfg.train_config())
    save_detector(det, path)
    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = [("pretrain", i, v) for i, v in enumerate(trace["pretrain"])]
    rows += [("train", i, v) for i, v in enumerate(trace["train"])]
    write_csv(os.path.join(cfg.output_dir, "loss_trace.csv"), ["phase", "epoch", "loss"], rows)
    return det, trace, path


def _matching_descriptor(cfg: ExperimentConfig, det: SkdDetector | None) -> DescriptorModel:
    if det is not None:
        return det.descriptor
    t = cfg.train
    return init_descriptor(t.descriptor_seed, k=t.k, input_gain=t.descriptor_gain)


def detect(method: str, cloud, K: int, cfg: ExperimentConfig, det: SkdDetector | None,
           descriptor: DescriptorModel, seed: int) -> KeypointSet:
    if method == "skd":
        return detect_topk(det, cloud, K)
    if method == "random":
        return random_detect(cloud, K, seed)
    if method == "elf3d":
        grads = input_gradient(descriptor, cloud, cfg.layer)
        kp = elf3d_detect(grads, cloud, cfg.nms_radius, cfg.kapur_bins)
        return KeypointSet(kp.indices[:K], kp.scores[:K])
    raise PipelineError(f"unknown detector {method!r}")


def _failed_registration(n_putative: int = 0) -> RegistrationResult:
    return RegistrationResult(RigidTransform.identity(), math.nan, math.nan, False, 0, 0.0, n_putative)


def evaluate_pair(pair, kp_a: KeypointSet, kp_b: KeypointSet, desc_a, desc_b,
                  cfg: ExperimentConfig, seed: int, metrics=METRICS) -> dict:
    out = {}
    if len(kp_a) == 0 or len(kp_b) == 0:
        out["curve"] = None
        out["repeatability"] = 0.0
        out["registration"] = _failed_registration()
        return out
    da, db = desc_a[kp_a.indices], desc_b[kp_b.indices]
    if "matching" in metrics:
        out["curve"] = matching_score(kp_a, kp_b, da, db, pair.cloud_k, pair.cloud_l, pair.truth,
                                      cfg.overlap_radius, DEFAULT_GRID)
    if "repeatability" in metrics:
        out["repeatability"] = repeatability(kp_a, kp_b, pair.cloud_k, pair.cloud_l, pair.truth,
                                             cfg.epsilon).repeatability
    if "registration" in metrics:
        try:
            out["registration"] = ransac_register(
                kp_a.points(pair.cloud_k), da, kp_b.points(pair.cloud_l), db, pair.truth,
                cfg.inlier_threshold, cfg.confidence, cfg.max_iterations, seed)
        except TooFewMatches:
            out["registration"] = _failed_registration()
    return out


def _json_safe(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_pipeline(cfg: ExperimentConfig, metrics=METRICS, detector: SkdDetector | None = None) -> dict:
    """Detect with every configured method on every pair and K, score, and write reports.

    All methods are matched with the same descriptor. Returns a dict of the
    written file paths plus the in-memory summary.
    """
    cfg.validate(need_checkpoint=detector is None)
    if detector is None and "skd" in cfg.detectors:
        detector = load_detector(cfg.checkpoint)
    descriptor = _matching_descriptor(cfg, detector)
    pairs = load_dataset(cfg)
    if not pairs:
        raise PipelineError("dataset is empty")
    os.makedirs(cfg.output_dir, exist_ok=True)
    ks = [int(k) for k in cfg.k_values]
    grid = DEFAULT_GRID
    correct = {(m, K): np.zeros(len(grid)) for m in cfg.detectors for K in ks}
    evaluated = {key: 0 for key in correct}
    reps = {key: [] for key in correct}
    regs = {key: [] for key in correct}
    pair_rows = []
    for i, pair in enumerate(pairs):
        try:
            nbr_a = neighborhoods(pair.cloud_k, descriptor.k)
            nbr_b = neighborhoods(pair.cloud_l, descriptor.k)
            desc_a = describe(descriptor, pair.cloud_k, nbr_a)
            desc_b = describe(descriptor, pair.cloud_l, nbr_b)
        except KeypointError as exc:
            raise PipelineError(f"pair {i}: describe failed: {exc}") from exc
        for m_idx, method in enumerate(cfg.detectors):
            for K in ks:
                seed = cfg.seed * 1_000_003 + i * 4099 + K * 7 + m_idx
                try:
                    kp_a = detect(method, pair.cloud_k, K, cfg, detector, descriptor, 2 * seed)
                    kp_b = detect(method, pair.cloud_l, K, cfg, detector, descriptor, 2 * seed + 1)
                    res = evaluate_pair(pair, kp_a, kp_b, desc_a, desc_b, cfg, seed, metrics)
                except KeypointError as exc:
                    raise PipelineError(f"pair {i}, {method}, K={K}: {exc}") from exc
                key = (method, K)
                curve = res.get("curve")
                if curve is not None:
                    correct[key] += curve.precision * curve.n_evaluated
                    evaluated[key] += curve.n_evaluated
                if "repeatability" in res:
                    reps[key].append(res["repeatability"])
                if "registration" in res:
                    r = res["registration"]
                    regs[key].append(r)
                    pair_rows.append([i, method, K, r.rte, r.rre, r.success, r.iterations,
                                      r.inlier_ratio])
        log.info("pair %d/%d done", i + 1, len(pairs))
    files = {}
    summary = {}
    for (method, K) in correct:
        entry = summary.setdefault(method, {}).setdefault(str(K), {})
        if "matching" in metrics:
            prec = correct[(method, K)] / max(evaluated[(method, K)], 1)
            entry["precision_1m"] = float(prec[-1])
            entry["n_evaluated"] = evaluated[(method, K)]
        if reps[(method, K)]:
            entry["repeatability"] = float(np.mean(reps[(method, K)]))
        if regs[(method, K)]:
            entry.update(aggregate_registration(regs[(method, K)]))
    if "matching" in metrics:
        rows = []
        for (method, K), c in correct.items():
            prec = c / max(evaluated[(method, K)], 1)
            rows += [[method, K, float(d), float(p)] for d, p in zip(grid, prec)]
        files["matching"] = os.path.join(cfg.output_dir, "matching.csv")
        write_csv(files["matching"], MATCHING_HEADER, rows)
    if "repeatability" in metrics:
        rows = [[m, K, float(cfg.epsilon), float(np.mean(v))] for (m, K), v in reps.items()]
        files["repeatability"] = os.path.join(cfg.output_dir, "repeatability.csv")
        write_csv(files["repeatability"], REPEATABILITY_HEADER, rows)
    if "registration" in metrics:
        rows = []
        for (m, K), results in regs.items():
            s = aggregate_registration(results)
            rows.append([m, K, s["rte_mean"], s["rre_mean"], s["success_rate"],
                         s["avg_iterations"], s["inlier_ratio"]])
        files["registration"] = os.path.join(cfg.output_dir, "registration.csv")
        write_csv(files["registration"], REGISTRATION_HEADER, rows)
        files["registration_pairs"] = os.path.join(cfg.output_dir, "registration_pairs.csv")
        write_csv(files["registration_pairs"], REGISTRATION_PAIRS_HEADER, pair_rows)
    files["summary"] = os.path.join(cfg.output_dir, "summary.json")
    write_json(files["summary"], {"settings": _metric_settings(cfg), "results": summary})
    files["metadata"] = os.path.join(cfg.output_dir, "run_metadata.json")
    write_run_metadata(files["metadata"], cfg)
    return {"files": files, "summary": summary}


def _metric_settings(cfg: ExperimentConfig) -> dict:
    return {k: getattr(cfg, k) for k in ("epsilon", "overlap_radius", "inlier_threshold",
                                         "confidence", "max_iterations", "layer", "tau")}


def write_run_metadata(path, cfg: ExperimentConfig) -> None:
    """Config echo plus environment; the only report file with a timestamp."""
    write_json(path, {
        "config": dataclasses.asdict(cfg),
        "versions": {"saliency_kp": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "created_unix": time.time(),
    })


def evaluate_layers(model: DescriptorModel, pairs, K: int, overlap_radius: float = 0.5) -> list:
    """Precision at 1 m when keypoints are the top-K raw saliency scores of each layer.

    Returns rows (layer, precision_1m, n_evaluated) sorted by layer; no head involved.
    """
    prepared = []
    for pair in pairs:
        nbr_a = neighborhoods(pair.cloud_k, model.k)
        nbr_b = neighborhoods(pair.cloud_l, model.k)
        prepared.append((pair, nbr_a, nbr_b, describe(model, pair.cloud_k, nbr_a),
                         describe(model, pair.cloud_l, nbr_b)))
    rows = []
    for layer in range(1, model.num_layers + 1):
        hits, total = 0.0, 0
        for pair, nbr_a, nbr_b, desc_a, desc_b in prepared:
            sa = cloud_saliency(model, pair.cloud_k, layer, nbr_a).values
            sb = cloud_saliency(model, pair.cloud_l, layer, nbr_b).values
            kp_a = top_k(sa, min(K, sa.size))
            kp_b = top_k(sb, min(K, sb.size))
            curve = matching_score(kp_a, kp_b, desc_a[kp_a.indices], desc_b[kp_b.indices],
                                   pair.cloud_k, pair.cloud_l, pair.truth, overlap_radius)
            hits += curve.at(1.0) * curve.n_evaluated
            total += curve.n_evaluated
        rows.append((layer, hits / total if total else 0.0, total))
    return rows
