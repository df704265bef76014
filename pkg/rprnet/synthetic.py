# Copyright (c) rprnet contributors

"""Procedural places built from boxes, cylinders and wall planes.

Every place is a fixed arrangement of primitives; its variants are fresh
surface samplings of that arrangement with a small sensor shift, an occluded
sector and jitter, each normalized like a benchmark submap. Places sit on a
square grid so same-place variants share a position and different places are
at least `place_spacing` apart.
"""

from dataclasses import dataclass, field
import logging
import math
import os
from os import PathLike
from typing import Dict, List, Union

import numpy as np
from scipy.spatial.transform import Rotation

from rprnet.api import ConfigError
from rprnet.dataset import DatasetManifest, ManifestEntry, write_bin_cloud, write_manifest
from rprnet.geometry import normalize_cloud
from rprnet.training import TrainingSample

log = logging.getLogger(__name__)

MIN_PLACE_SPACING = 100.0
SCENE_HALF_EXTENT = 20.0
OVERSAMPLING = 1.5
SENSOR_SHIFT = 1.0
VARIANT_JITTER = 0.02
MAX_OCCLUSION = math.pi / 3

@dataclass
class SynthConfig:
    n_places: int = 64
    variants_per_place: int = 8
    test_variants: int = 2
    points_per_cloud: int = 4096
    structure_seed: int = 0
    place_spacing: float = 100.0

    def __post_init__(self):
        if self.n_places < 2:
            raise ConfigError(f"synth.n_places must be at least 2, got {self.n_places}")
        if self.variants_per_place < 1 or not 0 <= self.test_variants <= self.variants_per_place:
            raise ConfigError(f"Need 0 ≤ test_variants ≤ variants_per_place, got {self.test_variants} and {self.variants_per_place}")
        if self.points_per_cloud < 1:
            raise ConfigError(f"synth.points_per_cloud must be positive, got {self.points_per_cloud}")
        if self.structure_seed < 0:
            raise ConfigError(f"synth.structure_seed must be non-negative, got {self.structure_seed}")
        if self.place_spacing < MIN_PLACE_SPACING:
            raise ConfigError(f"synth.place_spacing must be at least {MIN_PLACE_SPACING} m, got {self.place_spacing}")

@dataclass
class Primitive:
    kind: str
    center: np.ndarray
    size: np.ndarray
    yaw: float

    def area(self) -> float:
        a, b, c = self.size
        if self.kind == 'box':
            return 2.0 * (a * b + b * c + a * c)
        if self.kind == 'cylinder':
            return 2.0 * math.pi * a * c + math.pi * a * a
        return a * c

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n == 0:
            return np.empty((0, 3))
        if self.kind == 'box':
            local = _sample_box(self.size, n, rng)
        elif self.kind == 'cylinder':
            local = _sample_cylinder(self.size[0], self.size[2], n, rng)
        else:
            width, _, height = self.size
            local = np.stack([rng.uniform(-width / 2, width / 2, n), np.zeros(n), rng.uniform(0.0, height, n)], axis=1)
        return Rotation.from_euler('z', self.yaw).apply(local) + self.center

def _sample_box(size: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    a, b, c = size
    # faces as (fixed axis, offset, area), z from the ground up
    faces = [(0, -a / 2, b * c), (0, a / 2, b * c), (1, -b / 2, a * c), (1, b / 2, a * c), (2, 0.0, a * b), (2, c, a * b)]
    areas = np.array([f[2] for f in faces])
    face_ids = rng.choice(len(faces), size=n, p=areas / areas.sum())
    points = np.stack([rng.uniform(-a / 2, a / 2, n), rng.uniform(-b / 2, b / 2, n), rng.uniform(0.0, c, n)], axis=1)
    for i, (axis, offset, _) in enumerate(faces):
        points[face_ids == i, axis] = offset
    return points

def _sample_cylinder(radius: float, height: float, n: int, rng: np.random.Generator) -> np.ndarray:
    lateral = 2.0 * math.pi * radius * height
    cap = math.pi * radius * radius
    on_cap = rng.uniform(size=n) < cap / (lateral + cap)
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    r = np.where(on_cap, radius * np.sqrt(rng.uniform(size=n)), radius)
    z = np.where(on_cap, height, rng.uniform(0.0, height, n))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)

def generate_place(structure_seed: int, place: int) -> List[Primitive]:
    rng = np.random.default_rng([structure_seed, place])
    primitives = []
    for _ in range(int(rng.integers(5, 16))):
        kind = str(rng.choice(['box', 'cylinder', 'plane']))
        center = np.append(rng.uniform(-SCENE_HALF_EXTENT, SCENE_HALF_EXTENT, 2), 0.0)
        if kind == 'box':
            size = rng.uniform([1.0, 1.0, 1.0], [8.0, 8.0, 10.0])
        elif kind == 'cylinder':
            radius = rng.uniform(0.2, 2.0)
            size = np.array([radius, radius, rng.uniform(2.0, 12.0)])
        else:
            size = np.array([rng.uniform(4.0, 20.0), 0.0, rng.uniform(2.0, 8.0)])
        primitives.append(Primitive(kind, center, size, float(rng.uniform(0.0, 2.0 * math.pi))))
    return primitives

def sample_variant(primitives: List[Primitive], n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Resampled surfaces, sensor shift, occluded sector, jitter, normalization."""
    n_raw = int(math.ceil(n_points * OVERSAMPLING))
    areas = np.array([p.area() for p in primitives])
    counts = rng.multinomial(n_raw, areas / areas.sum())
    raw = np.concatenate([p.sample_surface(int(c), rng) for p, c in zip(primitives, counts)], axis=0)

    shift = np.append(rng.uniform(-SENSOR_SHIFT, SENSOR_SHIFT, 2), 0.0)
    raw = raw - shift
    azimuth = np.arctan2(raw[:, 1], raw[:, 0])
    center = rng.uniform(-math.pi, math.pi)
    width = rng.uniform(0.0, MAX_OCCLUSION)
    offset = np.angle(np.exp(1j * (azimuth - center)))
    visible = np.flatnonzero(np.abs(offset) > width / 2)
    if visible.size >= n_points:
        chosen = rng.choice(visible, size=n_points, replace=False)
    else:
        chosen = rng.choice(visible if visible.size else np.arange(raw.shape[0]), size=n_points, replace=True)
    cloud = raw[np.sort(chosen)] + rng.normal(0.0, VARIANT_JITTER, size=(n_points, 3))
    return normalize_cloud(cloud)

def place_position(place: int, n_places: int, spacing: float) -> np.ndarray:
    columns = int(math.ceil(math.sqrt(n_places)))
    row, column = divmod(place, columns)
    return np.array([row * spacing, column * spacing], dtype=np.float64)

@dataclass
class SynthCloud:
    place: int
    variant: int
    position: np.ndarray
    cloud: np.ndarray

    @property
    def file_name(self) -> str:
        return f"place_{self.place:04d}_variant_{self.variant:02d}.bin"

@dataclass
class SynthDataset:
    train: List[SynthCloud] = field(default_factory=list)
    database: List[SynthCloud] = field(default_factory=list)
    queries: List[SynthCloud] = field(default_factory=list)

    def training_samples(self) -> List[TrainingSample]:
        return [TrainingSample(c.cloud, c.position, c.place) for c in self.train]

    def splits(self) -> Dict[str, List[SynthCloud]]:
        return {'train': self.train, 'database': self.database, 'queries': self.queries}

def synth_generate(cfg: SynthConfig = None) -> SynthDataset:
    """Train variants come first per place; of the test variants the first joins the database, the rest are queries."""
    cfg = cfg or SynthConfig()
    dataset = SynthDataset()
    n_train = cfg.variants_per_place - cfg.test_variants
    for place in range(cfg.n_places):
        primitives = generate_place(cfg.structure_seed, place)
        position = place_position(place, cfg.n_places, cfg.place_spacing)
        for variant in range(cfg.variants_per_place):
            rng = np.random.default_rng([cfg.structure_seed, place, variant + 1])
            item = SynthCloud(place, variant, position.copy(), sample_variant(primitives, cfg.points_per_cloud, rng))
            if variant < n_train:
                dataset.train.append(item)
            elif variant == n_train:
                dataset.database.append(item)
            else:
                dataset.queries.append(item)
    log.info(f"Generated {cfg.n_places} places: {len(dataset.train)} train, {len(dataset.database)} database, "
             f"{len(dataset.queries)} query clouds")
    return dataset

def write_synth_dataset(out_dir: Union[str, PathLike], dataset: SynthDataset) -> Dict[str, str]:
    """Writes clouds/ and one manifest per split; returns the manifest paths."""
    cloud_dir = os.path.join(out_dir, 'clouds')
    os.makedirs(cloud_dir, exist_ok=True)
    manifests = {}
    for split, items in dataset.splits().items():
        entries = []
        for item in items:
            path = os.path.join(cloud_dir, item.file_name)
            write_bin_cloud(path, item.cloud)
            entries.append(ManifestEntry(path, float(item.position[0]), float(item.position[1])))
        manifest_path = os.path.join(out_dir, f"{split}.csv")
        write_manifest(manifest_path, DatasetManifest(entries, split='train' if split == 'train' else 'test'))
        manifests[split] = manifest_path
    log.info(f"Wrote synthetic dataset to {out_dir}")
    return manifests
