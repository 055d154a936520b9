"""Desk-scale synthetic scenes built from walls, boxes and poles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import TrainingPair
from .geometry import PointCloud, RigidTransform, apply_transform, rotation_about_axis


@dataclass
class SceneConfig:
    seed: int = 0
    planes: int = 10
    boxes: int = 3
    poles: int = 3
    points_per_primitive: int = 160
    noise_sigma: float = 0.02
    max_rotation_deg: float = 10.0
    max_translation_m: float = 3.0
    extent_m: float = 25.0

    def __post_init__(self):
        if min(self.planes, self.boxes, self.poles, self.points_per_primitive) < 0:
            raise ValueError("primitive counts must be non-negative")
        if self.planes + self.boxes + self.poles < 1:
            raise ValueError("a scene needs at least one primitive")
        if self.points_per_primitive < 1:
            raise ValueError("points_per_primitive must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _yaw(rng):
    return rotation_about_axis([0.0, 0.0, 1.0], rng.uniform(0.0, 360.0))


def _wall(rng, n, extent):
    w, h = rng.uniform(6.0, 12.0), rng.uniform(2.5, 4.5)
    local = np.column_stack([rng.uniform(-w / 2, w / 2, n), np.zeros(n), rng.uniform(0.0, h, n)])
    center = np.append(rng.uniform(-extent, extent, 2), 0.0)
    return local @ _yaw(rng).T + center


def _box(rng, n, extent):
    size = rng.uniform(1.0, 3.0, 3)
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]]).repeat(2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    local = rng.uniform(-0.5, 0.5, (n, 3))
    axis = face // 2
    local[np.arange(n), axis] = np.where(face % 2 == 0, -0.5, 0.5)
    local = local * size + np.array([0.0, 0.0, size[2] / 2])
    center = np.append(rng.uniform(-extent, extent, 2), 0.0)
    return local @ _yaw(rng).T + center


def _pole(rng, n, extent):
    radius, h = rng.uniform(0.1, 0.3), rng.uniform(2.0, 6.0)
    ang = rng.uniform(0.0, 2 * np.pi, n)
    local = np.column_stack([radius * np.cos(ang), radius * np.sin(ang), rng.uniform(0.0, h, n)])
    return local + np.append(rng.uniform(-extent, extent, 2), 0.0)


def sample_scene(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.points_per_primitive
    parts = [_wall(rng, n, cfg.extent_m) for _ in range(cfg.planes)]
    parts += [_box(rng, n, cfg.extent_m) for _ in range(cfg.boxes)]
    parts += [_pole(rng, n, cfg.extent_m) for _ in range(cfg.poles)]
    return np.concatenate(parts)


def gen_synthetic_pair(cfg: SceneConfig) -> TrainingPair:
    """Two noisy observations of one scene; cloud_l is expressed in a rigidly moved frame.

    Point i of both clouds comes from the same surface sample. The second
    cloud gets its own noise draw before the truth transform is applied.
    """
    rng = np.random.default_rng(cfg.seed)
    base = sample_scene(cfg, rng)
    noisy_k = base + rng.normal(0.0, cfg.noise_sigma, base.shape)
    noisy_l = base + rng.normal(0.0, cfg.noise_sigma, base.shape)
    axis = rng.normal(size=3)
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    t = rng.uniform(-cfg.max_translation_m, cfg.max_translation_m, 3)
    truth = RigidTransform(rotation_about_axis(axis, angle), t)
    return TrainingPair(PointCloud(noisy_k), PointCloud(apply_transform(noisy_l, truth)), truth)


def synthetic_pairs(cfg: SceneConfig, count: int, first_seed: int | None = None) -> list:
    """`count` pairs with consecutive seeds starting at `first_seed` (default cfg.seed)."""
    start = cfg.seed if first_seed is None else first_seed
    out = []
    for i in range(count):
        c = SceneConfig(**{**cfg.__dict__, "seed": start + i})
        out.append(gen_synthetic_pair(c))
    return out
