"""
Training-time point-cloud augmentation.
"""

import numpy as np

from svtnet.config import AugmentConfig
from svtnet.sparse_tensor import PointCloud


def jitter(points: np.ndarray, rng: np.random.Generator, sigma: float, clip: float) -> np.ndarray:
    noise = np.clip(rng.normal(0.0, sigma, size=points.shape), -clip, clip)
    return points + noise


def translate(points: np.ndarray, rng: np.random.Generator, max_shift: float) -> np.ndarray:
    return points + rng.uniform(-max_shift, max_shift, size=(1, 3))


def remove_points(points: np.ndarray, rng: np.random.Generator, max_fraction: float) -> np.ndarray:
    """Drop a random subset of at most `max_fraction` of the points, keeping at least one."""
    n = len(points)
    drop = int(rng.integers(0, int(max_fraction * n) + 1))
    drop = min(drop, n - 1)
    if drop <= 0:
        return points
    keep = np.sort(rng.permutation(n)[drop:])
    return points[keep]


def erase_cuboid(points: np.ndarray, rng: np.random.Generator, max_fraction: float) -> np.ndarray:
    """
    Remove the points inside one random axis-aligned cuboid.

    The cuboid's volume is at most `max_fraction` of the bounding box. Skipped if
    it would remove every point.
    """
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = hi - lo
    volume_fraction = rng.uniform(0.0, max_fraction)
    side = extent * volume_fraction ** (1.0 / 3.0)
    corner = lo + rng.uniform(0.0, 1.0, size=3) * (extent - side)
    inside = np.all((points >= corner) & (points <= corner + side), axis=1)
    if inside.all():
        return points
    return points[~inside]


def augment(pc: PointCloud, rng: np.random.Generator, config: AugmentConfig) -> PointCloud:
    """
    Apply each enabled augmentation with its own probability, in a fixed order:
    jitter, translation, removal, erasing.

    The same rng state always yields the same output; the cloud never becomes empty.
    """
    points = pc.points
    if len(points) == 0:
        return pc

    if rng.uniform() < config.jitter_prob:
        points = jitter(points, rng, config.jitter_sigma, config.jitter_clip)
    if rng.uniform() < config.translate_prob:
        points = translate(points, rng, config.translate_max)
    if rng.uniform() < config.removal_prob:
        points = remove_points(points, rng, config.removal_max_fraction)
    if rng.uniform() < config.erase_prob:
        points = erase_cuboid(points, rng, config.erase_max_fraction)

    if points is pc.points:
        return pc
    return PointCloud(points)
