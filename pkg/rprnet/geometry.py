# Copyright (c) rprnet contributors

from dataclasses import dataclass
import logging

import numpy as np
from scipy.spatial.distance import cdist
from scipy.spatial.transform import Rotation

from rprnet.api import InvalidArgument, InvalidCloud, RotationMode

log = logging.getLogger(__name__)

EPS_VEC = 1e-9

@dataclass(frozen=True)
class GroupIndex:
    """Seeds picked by FPS plus their K nearest seeds.

    `seed_ids` index the source cloud, `neighbor_ids` index the seed set,
    so one table serves every layer that lives on the seeds.
    """
    seed_ids: np.ndarray
    neighbor_ids: np.ndarray

    @property
    def n_seeds(self) -> int:
        return self.neighbor_ids.shape[0]

    @property
    def k(self) -> int:
        return self.neighbor_ids.shape[1]

    def validate(self, n_points: int) -> None:
        if self.neighbor_ids.ndim != 2 or self.seed_ids.shape != (self.neighbor_ids.shape[0],):
            raise InvalidArgument(f"Inconsistent group index shapes {self.seed_ids.shape} and {self.neighbor_ids.shape}")
        if self.seed_ids.min() < 0 or self.seed_ids.max() >= n_points:
            raise InvalidArgument("Seed index out of range")
        if self.neighbor_ids.min() < 0 or self.neighbor_ids.max() >= self.n_seeds:
            raise InvalidArgument("Neighbor index out of range")
        if not np.array_equal(self.neighbor_ids[:, 0], np.arange(self.n_seeds)):
            raise InvalidArgument("Slot 0 of every group must be the seed itself")
        ordered = np.sort(self.neighbor_ids, axis=1)
        if np.any(ordered[:, 1:] == ordered[:, :-1]):
            raise InvalidArgument("Neighbor rows must hold distinct indices")

def as_cloud(points) -> np.ndarray:
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] < 1:
        raise InvalidCloud(f"Expected an N×3 cloud with N ≥ 1, got shape {cloud.shape}")
    if not np.all(np.isfinite(cloud)):
        raise InvalidCloud("Cloud contains non-finite coordinates")
    return cloud

def normalize_cloud(points) -> np.ndarray:
    """Centers the cloud and scales it by one scalar so max |coordinate| is 1."""
    cloud = as_cloud(points)
    centered = cloud - cloud.mean(axis=0)
    extent = np.abs(centered).max()
    if extent <= 0.0:
        return np.zeros_like(cloud)
    return centered / extent

def farthest_point_sample(points, n_s: int, start: int = 0) -> np.ndarray:
    cloud = as_cloud(points)
    n = cloud.shape[0]
    if n_s < 1 or n_s > n:
        raise InvalidArgument(f"Cannot sample {n_s} seeds from {n} points")
    if start < 0 or start >= n:
        raise InvalidArgument(f"Start index {start} out of range for {n} points")

    selected = np.empty(n_s, dtype=np.int64)
    selected[0] = start
    min_dist = np.sum((cloud - cloud[start]) ** 2, axis=1)
    # chosen points drop below every distance; duplicates of them stay eligible at 0
    min_dist[start] = -1.0
    for i in range(1, n_s):
        # argmax returns the first maximum, i.e. the smallest unselected index on ties
        idx = int(np.argmax(min_dist))
        selected[i] = idx
        min_dist = np.minimum(min_dist, np.sum((cloud - cloud[idx]) ** 2, axis=1))
        min_dist[idx] = -1.0
    return selected

def knn_group(seeds, k: int) -> np.ndarray:
    """K nearest seeds per seed, self at slot 0, ties to the smaller index."""
    seed_points = as_cloud(seeds)
    n_s = seed_points.shape[0]
    if k < 1 or k > n_s:
        raise InvalidArgument(f"Cannot group {k} neighbors out of {n_s} seeds")
    dist = cdist(seed_points, seed_points, 'sqeuclidean')
    np.fill_diagonal(dist, -1.0)
    order = np.argsort(dist, axis=1, kind='stable')
    return order[:, :k].astype(np.int64)

def build_group_index(points, n_s: int, k: int, start: int = 0) -> GroupIndex:
    cloud = as_cloud(points)
    seed_ids = farthest_point_sample(cloud, n_s, start)
    neighbor_ids = knn_group(cloud[seed_ids], k)
    return GroupIndex(seed_ids=seed_ids, neighbor_ids=neighbor_ids)

def random_rotation(rng_seed: int, mode: RotationMode = RotationMode.SO3, theta_max: float = np.pi) -> np.ndarray:
    mode = RotationMode(mode)
    rng = np.random.default_rng(rng_seed)
    if mode == RotationMode.Z:
        if theta_max < 0.0 or theta_max > 2.0 * np.pi:
            raise InvalidArgument(f"theta_max must lie in [0, 2π], got {theta_max}")
        theta = rng.uniform(-theta_max, theta_max)
        return Rotation.from_euler('z', theta).as_matrix()
    # uniform on SO(3): normalized Gaussian quaternion
    return Rotation.random(random_state=rng).as_matrix()

def apply_rotation(points, r: np.ndarray) -> np.ndarray:
    return as_cloud(points) @ np.asarray(r, dtype=np.float64).T

def angle_between(u, v) -> np.ndarray:
    """Angle in [0, π] between vectors along the last axis; 0 when either is (near) zero.

    atan2 of cross and dot norms equals acos of the clamped cosine but keeps full
    precision close to 0 and π.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    dot = np.sum(u * v, axis=-1)
    angle = np.arctan2(cross, dot)
    degenerate = (np.linalg.norm(u, axis=-1) <= EPS_VEC) | (np.linalg.norm(v, axis=-1) <= EPS_VEC)
    return np.where(degenerate, 0.0, angle)
