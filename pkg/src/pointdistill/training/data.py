"""Parametric synthetic shapes (sphere, box, cylinder, plane) for desk-scale runs."""
from __future__ import annotations

import numpy as np

from ..persistence import Dataset, sample_id
from ..teacher import TeacherFixtureSet, synth_teacher
from .augment import counter_rng

SHAPES = ("sphere", "box", "cylinder", "plane")


def _sphere(n, rng, radius):
    v = rng.standard_normal((n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _box(n, rng, half):
    # pick faces proportionally to their area, then a uniform point on the face
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, size=(n, 3)) * half
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _cylinder(n, rng, radius, height):
    # lateral surface plus both caps, area-weighted
    side = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, n),
                 np.where(part == 1, height / 2, -height / 2))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _plane(n, rng, half):
    xy = rng.uniform(-1, 1, size=(n, 2)) * half
    return np.concatenate([xy, np.zeros((n, 1))], axis=1)


def make_shape(label: int, n: int, rng: np.random.Generator, noise: float = 0.0) -> np.ndarray:
    """Uniform surface samples of shape ``label % 4`` with Gaussian jitter.

    Labels beyond the four base shapes reuse them stretched along z by
    ``1 + 0.5 * (label // 4)``.
    """
    kind = SHAPES[label % len(SHAPES)]
    if kind == "sphere":
        pts = _sphere(n, rng, rng.uniform(0.6, 1.0))
    elif kind == "box":
        pts = _box(n, rng, rng.uniform(0.4, 0.9, size=3))
    elif kind == "cylinder":
        pts = _cylinder(n, rng, rng.uniform(0.3, 0.6), rng.uniform(1.0, 1.8))
    else:
        pts = _plane(n, rng, rng.uniform(0.6, 1.0, size=2))
    pts[:, 2] *= 1.0 + 0.5 * (label // len(SHAPES))
    if noise:
        pts = pts + noise * rng.standard_normal(pts.shape)
    return pts.astype(np.float32)


def class_names(classes: int) -> list[str]:
    names = []
    for c in range(classes):
        base = SHAPES[c % len(SHAPES)]
        names.append(base if c < len(SHAPES) else f"{base}-x{1 + 0.5 * (c // len(SHAPES)):g}")
    return names


def generate_dataset(classes: int, per_class: int, points: int, noise: float = 0.01,
                     seed: int = 0, id_offset: int = 0) -> Dataset:
    """Labelled dataset laid out class-major; each sample has its own random stream."""
    if classes < 1 or per_class < 0 or points < 1 or noise < 0:
        raise ValueError("classes >= 1, per_class >= 0, points >= 1 and noise >= 0 required")
    ids, clouds, labels = [], [], []
    for c in range(classes):
        for j in range(per_class):
            idx = id_offset + c * per_class + j
            ids.append(sample_id(idx))
            clouds.append(make_shape(c, points, counter_rng(seed, "shape", idx), noise))
            labels.append(c)
    arr = np.stack(clouds) if clouds else np.zeros((0, points, 3), np.float32)
    return Dataset(ids, arr, np.asarray(labels, dtype=np.int64), class_names(classes))


def teacher_for(ds: Dataset, l: int = 10, d_cap: int = 768, noise_scale: float = 0.1,
                seed: int = 0, prototype_seed: int = 0) -> TeacherFixtureSet:
    """Synthetic teacher embeddings paired to ``ds`` by sample id."""
    fx = TeacherFixtureSet(l, d_cap, description=f"synth_teacher noise={noise_scale} seed={seed} "
                                                 f"prototype_seed={prototype_seed}")
    for i, sid in enumerate(ds.ids):
        sample_seed = int(counter_rng(seed, "teacher", i).integers(2 ** 63))
        fx.add(sid, synth_teacher(int(ds.labels[i]), l, d_cap, noise_scale, sample_seed, prototype_seed))
    return fx
