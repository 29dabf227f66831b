"""Synthetic point-cloud datasets: cube/sphere shells, barbells and detection scenes."""

import numpy as np

from .geometry import PointCloud, random_rotation
from .model import Dataset


def sphere_surface(n, rng, radius=1.0):
    v = rng.standard_normal((n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def cube_surface(n, rng, half=1.0):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-half, half, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] = sign[sel] * half
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return pts


def classification_dataset(n_per_class, n_points, seed, rotate=False):
    """Alternating cube-shell (label 0) and sphere-shell (label 1) clouds with mild jitter."""
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    for i in range(2 * n_per_class):
        label = i % 2
        scale = rng.uniform(0.8, 1.2)
        pts = cube_surface(n_points, rng) if label == 0 else sphere_surface(n_points, rng)
        pts = scale * pts + 0.01 * rng.standard_normal(pts.shape)
        if rotate:
            pts = pts @ random_rotation(rng).matrix.T
        clouds.append(PointCloud(pts))
        labels.append(label)
    return Dataset(clouds, np.array(labels), seeds=[seed * 100003 + i for i in range(len(clouds))])


def barbell(n_points, rng, sphere_radius=0.3, offset=0.8, bar_radius=0.1):
    """Two end spheres (label 0) joined by a bar (label 1) along the x axis, surface samples."""
    bar_half = offset - np.sqrt(max(sphere_radius**2 - bar_radius**2, 0.0))
    area_sphere = 4 * np.pi * sphere_radius**2
    area_bar = 2 * np.pi * bar_radius * 2 * bar_half
    p_bar = area_bar / (area_bar + 2 * area_sphere)
    pts, lab = [], []
    while len(pts) < n_points:
        if rng.random() < p_bar:
            t = rng.uniform(-bar_half, bar_half)
            a = rng.uniform(0, 2 * np.pi)
            pts.append([t, bar_radius * np.cos(a), bar_radius * np.sin(a)])
            lab.append(1)
        else:
            c = offset if rng.random() < 0.5 else -offset
            v = rng.standard_normal(3)
            p = np.array([c, 0.0, 0.0]) + sphere_radius * v / np.linalg.norm(v)
            if abs(p[0]) < abs(c) and np.hypot(p[1], p[2]) < bar_radius:
                continue  # hidden inside the bar junction
            pts.append(p)
            lab.append(0)
    return np.array(pts), np.array(lab)


def segmentation_dataset(n_shapes, n_points, seed):
    rng = np.random.default_rng(seed)
    clouds = []
    for _ in range(n_shapes):
        pts, lab = barbell(
            n_points,
            rng,
            sphere_radius=rng.uniform(0.25, 0.35),
            offset=rng.uniform(0.75, 0.9),
            bar_radius=rng.uniform(0.08, 0.12),
        )
        clouds.append(PointCloud(pts, labels=lab))
    return Dataset(clouds, seeds=[seed * 100003 + i for i in range(n_shapes)])


def split(dataset, n_train):
    def take(sl):
        return Dataset(
            dataset.clouds[sl],
            None if dataset.labels is None else dataset.labels[sl],
            None if dataset.categories is None else dataset.categories[sl],
            dataset.seeds[sl],
        )

    return take(slice(0, n_train)), take(slice(n_train, None))


def rotated(dataset, seed):
    """Same dataset (and sampling seeds) with each cloud independently rotated."""
    rng = np.random.default_rng(seed)
    clouds = [c.transformed(random_rotation(rng)) for c in dataset.clouds]
    return Dataset(clouds, dataset.labels, dataset.categories, list(dataset.seeds))


# ---------------------------------------------------------------------------
# detection scenes


def arc_atlas(m, rng=None, jitter=0.0):
    """A curved, thickened arc: an asymmetric reference shape."""
    rng = np.random.default_rng(0) if rng is None else rng
    t = np.linspace(0.0, 1.0, m)
    theta = np.pi * (0.15 + 0.7 * t)
    thick = 0.12 + 0.1 * np.sin(np.pi * t) ** 2
    base = np.stack([np.cos(theta), 0.55 * np.sin(theta), 0.15 * t**2], axis=1)
    wobble = np.stack([np.zeros(m), thick * np.cos(7 * np.pi * t), thick * np.sin(7 * np.pi * t)], axis=1)
    pts = base + wobble
    return pts + jitter * rng.standard_normal(pts.shape)


def distractor(kind, m, rng):
    if kind == "sphere":
        return 0.45 * sphere_surface(m, rng)
    if kind == "cube":
        return 0.4 * cube_surface(m, rng)
    if kind == "plane":
        uv = rng.uniform(-0.6, 0.6, (m, 2))
        return np.column_stack([uv, 0.02 * rng.standard_normal(m)])
    if kind == "line":
        t = rng.uniform(-1.0, 1.0, m)
        return np.column_stack([t, 0.03 * rng.standard_normal(m), 0.03 * rng.standard_normal(m)])
    raise ValueError(f"unknown distractor {kind!r}")


DISTRACTORS = ("sphere", "cube", "plane", "line")


def detection_scene(atlas_points, seed, n_distractors=3, spacing=6.0):
    """Rotated atlas plus distinct distractor clusters; returns (cloud, atlas member indices)."""
    rng = np.random.default_rng(seed)
    m = len(atlas_points)
    kinds = [DISTRACTORS[i] for i in rng.permutation(len(DISTRACTORS))[:n_distractors]]
    slots = rng.permutation(n_distractors + 1)
    clusters = []
    atlas_slot = None
    for j, slot in enumerate(slots):
        center = np.array([spacing * slot, 0.0, 0.0])
        if j == 0:
            centered = atlas_points - atlas_points.mean(axis=0)
            pts = centered @ random_rotation(rng).matrix.T
            atlas_slot = slot
        else:
            pts = distractor(kinds[j - 1], m, rng) @ random_rotation(rng).matrix.T
        clusters.append((slot, pts + center))
    clusters.sort(key=lambda c: c[0])
    points = np.concatenate([p for _, p in clusters])
    members = np.arange(atlas_slot * m, (atlas_slot + 1) * m)
    return PointCloud(points), members
