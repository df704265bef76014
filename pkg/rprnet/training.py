# Copyright (c) rprnet contributors

from dataclasses import dataclass, field, replace
import logging
import math
from os import PathLike
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from rprnet import autodiff as ad
from rprnet.api import ConfigError, EmptyBatch, InvalidArgument, NumericalError, RotationAugment, RotationMode
from rprnet.autodiff import Tensor
from rprnet.checkpoint import save_checkpoint
from rprnet.geometry import apply_rotation, as_cloud, random_rotation
from rprnet.network import PreparedCloud, RprNet, RprNetConfig
from rprnet.optimizer import OptimizerConfig, RAdam
from rprnet.util import append_record, ordered_map

log = logging.getLogger(__name__)

DISTANCE_FLOOR = 1e-12

@dataclass
class TripletConfig:
    margin: float = 0.2
    pos_radius: float = 10.0
    neg_radius: float = 50.0

    def __post_init__(self):
        if self.margin <= 0.0:
            raise ConfigError(f"triplet.margin must be positive, got {self.margin}")
        if not 0.0 < self.pos_radius < self.neg_radius:
            raise ConfigError(f"Need 0 < pos_radius < neg_radius, got {self.pos_radius} and {self.neg_radius}")

@dataclass
class AugmentConfig:
    jitter_sigma: float = 0.001
    jitter_clip: float = 0.002
    translation_range: float = 0.01
    removal_fraction_max: float = 0.10
    erase_fraction_max: float = 0.10
    rotation_augment: RotationAugment = RotationAugment.Off
    rotation_max_angle: float = math.pi

    def __post_init__(self):
        try:
            self.rotation_augment = RotationAugment(self.rotation_augment)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        for name in ('removal_fraction_max', 'erase_fraction_max'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"augment.{name} must lie in [0, 1], got {value}")
        if min(self.jitter_sigma, self.jitter_clip, self.translation_range) < 0.0:
            raise ConfigError("Jitter and translation magnitudes must be non-negative")
        if not 0.0 <= self.rotation_max_angle <= 2.0 * math.pi:
            raise ConfigError(f"augment.rotation_max_angle must lie in [0, 2π], got {self.rotation_max_angle}")

    @classmethod
    def disabled(cls) -> 'AugmentConfig':
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, RotationAugment.Off)

@dataclass
class BatchState:
    current_size: int = 16
    max_size: int = 96
    expansion: float = 0.40
    active_ratio_threshold: float = 0.70

    def __post_init__(self):
        if not 1 <= self.current_size <= self.max_size:
            raise ConfigError(f"Need 1 ≤ batch size ≤ {self.max_size}, got {self.current_size}")
        if self.expansion < 0.0 or not 0.0 <= self.active_ratio_threshold <= 1.0:
            raise ConfigError("batch.expansion must be non-negative and batch.active_ratio_threshold in [0, 1]")

@dataclass
class TrainingConfig:
    epochs: int = 40
    seed: int = 0
    samples_per_place: int = 2
    gem_p_min: float = 1.0
    gem_p_max: float = 64.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be non-negative, got {self.epochs}")
        if self.seed < 0:
            raise ConfigError(f"train.seed must be non-negative, got {self.seed}")
        if self.samples_per_place < 1:
            raise ConfigError(f"train.samples_per_place must be at least 1, got {self.samples_per_place}")
        if not 1.0 <= self.gem_p_min <= self.gem_p_max:
            raise ConfigError(f"Need 1 ≤ gem_p_min ≤ gem_p_max, got {self.gem_p_min} and {self.gem_p_max}")

@dataclass
class TrainingSample:
    cloud: np.ndarray
    position: np.ndarray
    place_id: Optional[int] = None

    def __post_init__(self):
        self.cloud = as_cloud(self.cloud)
        self.position = np.asarray(self.position, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.position)):
            raise InvalidArgument(f"Sample position {self.position} is not finite")

@dataclass
class Triplet:
    anchor: int
    positive: int
    negative: int

@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    active_ratio: float
    batch_size: int
    active_triplets: float = 0.0
    batches: int = 0
    skipped_batches: int = 0
    lr: float = 0.0
    gem_p: float = 0.0

    def to_record(self) -> dict:
        return dict(self.__dict__)

@dataclass
class TrainingResult:
    history: List[EpochMetrics] = field(default_factory=list)
    batch_sizes: List[int] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [m.loss for m in self.history]

def triplet_loss(d_pos, d_neg, margin: float):
    """max(d_pos - d_neg + margin, 0); plain floats in, plain float out."""
    if not isinstance(d_pos, Tensor) and not isinstance(d_neg, Tensor):
        return max(float(d_pos) - float(d_neg) + margin, 0.0)
    return ad.relu(ad.as_tensor(d_pos) - ad.as_tensor(d_neg) + margin)

def descriptor_distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise Euclidean distance with the squared norm floored at 1e-12."""
    diff = a - b
    squared = ad.reduce_sum(diff * diff, axes=-1)
    return ad.sqrt(ad.clamp_min(squared, DISTANCE_FLOOR))

def batch_hard_mine(descriptors, positions, triplet: TripletConfig = None) -> List[Triplet]:
    """Farthest positive and nearest negative in descriptor space for every usable anchor."""
    triplet = triplet or TripletConfig()
    descriptors = np.asarray(descriptors, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    if descriptors.ndim != 2 or positions.ndim != 2 or descriptors.shape[0] != positions.shape[0]:
        raise InvalidArgument(f"Descriptors {descriptors.shape} and positions {positions.shape} do not align")

    b = descriptors.shape[0]
    feature_dist = cdist(descriptors, descriptors)
    world_dist = cdist(positions, positions)
    others = ~np.eye(b, dtype=bool)
    positive = (world_dist <= triplet.pos_radius) & others
    negative = world_dist >= triplet.neg_radius

    triplets = []
    for a in range(b):
        if not positive[a].any() or not negative[a].any():
            continue
        # argmax/argmin return the first extremum, i.e. the smallest index on ties
        hardest_pos = int(np.argmax(np.where(positive[a], feature_dist[a], -np.inf)))
        hardest_neg = int(np.argmin(np.where(negative[a], feature_dist[a], np.inf)))
        triplets.append(Triplet(a, hardest_pos, hardest_neg))

    if not triplets:
        raise EmptyBatch(f"No valid triplet in a batch of {b} samples")
    if len(triplets) < b:
        log.debug(f"Mining skipped {b - len(triplets)} of {b} anchors without positive or negative")
    return triplets

def dynamic_batch_update(state: BatchState, active_triplets: float, total_triplets: float) -> BatchState:
    if active_triplets < 0 or total_triplets < 0 or active_triplets > total_triplets:
        raise InvalidArgument(f"Invalid triplet counts: {active_triplets} active of {total_triplets}")
    ratio = active_triplets / state.current_size
    if ratio >= state.active_ratio_threshold:
        return state
    grown = min(int(round(state.current_size * (1.0 + state.expansion))), state.max_size)
    log.info(f"Active triplet ratio {ratio:.2f} below {state.active_ratio_threshold:.2f}, batch size {state.current_size} -> {grown}")
    return replace(state, current_size=grown)

def _repad(cloud: np.ndarray, keep: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    survivors = cloud[keep]
    missing = cloud.shape[0] - survivors.shape[0]
    if missing == 0:
        return survivors
    duplicates = rng.integers(0, survivors.shape[0], size=missing)
    return np.concatenate([survivors, survivors[duplicates]], axis=0)

def augment(cloud, cfg: AugmentConfig, rng_seed: int) -> np.ndarray:
    """Jitter, translation, point removal, cuboid erasing and optional rotation, in that order.

    Removed and erased points are replaced by duplicates of random survivors
    so the point count never changes.
    """
    points = as_cloud(cloud).copy()
    rng = np.random.default_rng(rng_seed)
    n = points.shape[0]

    jitter = rng.normal(0.0, 1.0, size=points.shape) * cfg.jitter_sigma
    points = points + np.clip(jitter, -cfg.jitter_clip, cfg.jitter_clip)
    points = points + rng.uniform(-1.0, 1.0, size=3) * cfg.translation_range

    n_remove = min(int(rng.uniform(0.0, cfg.removal_fraction_max) * n), n - 1)
    if n_remove > 0:
        keep = np.ones(n, dtype=bool)
        keep[rng.choice(n, size=n_remove, replace=False)] = False
        points = _repad(points, keep, rng)

    n_erase = min(int(rng.uniform(0.0, cfg.erase_fraction_max) * n), n - 1)
    if n_erase > 0:
        # the n_erase points closest in L∞ to a random center fill an axis-aligned cube
        center = points[rng.integers(0, n)]
        chebyshev = np.abs(points - center).max(axis=1)
        keep = np.ones(n, dtype=bool)
        keep[np.argsort(chebyshev, kind='stable')[:n_erase]] = False
        points = _repad(points, keep, rng)

    if cfg.rotation_augment != RotationAugment.Off:
        mode = RotationMode.Z if cfg.rotation_augment == RotationAugment.Z else RotationMode.SO3
        rotation_seed = int(rng.integers(0, 2 ** 31))
        points = apply_rotation(points, random_rotation(rotation_seed, mode, cfg.rotation_max_angle))
    return points

def assign_places(positions, radius: float) -> np.ndarray:
    """Greedy place ids: a sample joins the first place whose founder lies within `radius`."""
    positions = np.asarray(positions, dtype=np.float64)
    place_ids = np.full(positions.shape[0], -1, dtype=np.int64)
    founders = []
    for i, position in enumerate(positions):
        if founders:
            dist = np.linalg.norm(positions[founders] - position, axis=1)
            nearest = int(np.argmin(dist))
            if dist[nearest] <= radius:
                place_ids[i] = place_ids[founders[nearest]]
                continue
        place_ids[i] = len(founders)
        founders.append(i)
    return place_ids

def compose_batches(place_ids: Sequence[int], batch_size: int, samples_per_place: int,
                    rng: np.random.Generator) -> List[List[int]]:
    """Place-balanced batches covering every sample once.

    Each place contributes chunks of `samples_per_place` samples; shuffled
    chunks are packed into batches of at most `batch_size`.
    """
    if samples_per_place > batch_size:
        raise InvalidArgument(f"A batch of {batch_size} cannot hold chunks of {samples_per_place} samples per place")
    place_ids = np.asarray(place_ids)
    chunks = []
    for place in np.unique(place_ids):
        members = rng.permutation(np.flatnonzero(place_ids == place))
        chunks.extend(members[i:i + samples_per_place].tolist() for i in range(0, len(members), samples_per_place))
    order = rng.permutation(len(chunks))

    batches, current = [], []
    for c in order:
        chunk = chunks[c]
        if current and len(current) + len(chunk) > batch_size:
            batches.append(current)
            current = []
        current.extend(chunk)
    if current:
        batches.append(current)
    return batches

class Trainer:
    """Owns the model's optimizer and runs epochs of batch-hard triplet training.

    The loss gradient is taken with respect to the batch descriptors first, then
    pushed through one per-sample forward graph at a time, so memory holds a
    single network graph regardless of batch size.
    """

    def __init__(self, model: RprNet, triplet: TripletConfig = None, augment_config: AugmentConfig = None,
                 batch: BatchState = None, optimizer: OptimizerConfig = None, training: TrainingConfig = None,
                 checkpoint_path: Union[str, PathLike] = None, metrics_path: Union[str, PathLike] = None,
                 config_text: str = ''):
        self.model = model
        self.triplet = triplet or TripletConfig()
        self.augment_config = augment_config or AugmentConfig()
        self.batch_state = batch or BatchState()
        self.training = training or TrainingConfig()
        if self.training.samples_per_place > self.batch_state.current_size:
            raise ConfigError(f"train.samples_per_place = {self.training.samples_per_place} exceeds the batch size "
                              f"{self.batch_state.current_size}")
        self.optimizer = RAdam(model.parameters(), optimizer)
        self.checkpoint_path = checkpoint_path
        self.metrics_path = metrics_path
        self.config_text = config_text
        self.epoch = 0
        self.rng = np.random.default_rng(self.training.seed)

    def _prepare(self, samples: Sequence[TrainingSample], indices: List[int]) -> List[PreparedCloud]:
        seeds = self.rng.integers(0, 2 ** 31, size=len(indices))
        jobs = list(zip(indices, seeds))

        def prepare(job):
            index, seed = job
            return self.model.prepare(augment(samples[index].cloud, self.augment_config, int(seed)))
        return ordered_map(prepare, jobs)

    def train_batch(self, samples: Sequence[TrainingSample], indices: List[int]):
        """One optimizer step; returns (loss, active triplets)."""
        prepared = self._prepare(samples, indices)
        positions = np.stack([samples[i].position for i in indices])
        with ad.no_grad():
            descriptors = np.stack([self.model.forward_prepared(p).data for p in prepared])
        triplets = batch_hard_mine(descriptors, positions, self.triplet)

        leaf = Tensor(descriptors, requires_grad=True)
        anchors = ad.gather(leaf, [t.anchor for t in triplets])
        positives = ad.gather(leaf, [t.positive for t in triplets])
        negatives = ad.gather(leaf, [t.negative for t in triplets])
        losses = triplet_loss(descriptor_distance(anchors, positives),
                              descriptor_distance(anchors, negatives), self.triplet.margin)
        loss = ad.reduce_mean(losses)
        if not np.all(np.isfinite(loss.data)):
            raise NumericalError(f"Non-finite batch loss at epoch {self.epoch + 1}")
        loss.backward()
        active = int(np.count_nonzero(losses.data > 0.0))

        self.optimizer.zero_grad()
        for p, grad in zip(prepared, leaf.grad):
            if np.any(grad):
                self.model.forward_prepared(p).backward(grad)
        self.optimizer.step()
        self.model.clamp_gem_p(self.training.gem_p_min, self.training.gem_p_max)
        log.debug(f"Batch of {len(indices)}: {len(triplets)} triplets, {active} active, loss {float(loss.data[0]):.4f}")
        return float(loss.data[0]), active

    def train_epoch(self, samples: Sequence[TrainingSample], place_ids: np.ndarray) -> EpochMetrics:
        batches = compose_batches(place_ids, self.batch_state.current_size, self.training.samples_per_place, self.rng)
        losses, actives, skipped = [], [], 0
        for indices in batches:
            try:
                loss, active = self.train_batch(samples, indices)
            except EmptyBatch as e:
                skipped += 1
                log.warning(f"Skipping batch: {e}")
                continue
            losses.append(loss)
            actives.append(active)

        self.epoch += 1
        batch_size = self.batch_state.current_size
        if not losses:
            log.warning(f"Epoch {self.epoch} produced no valid triplets")
            return EpochMetrics(self.epoch, 0.0, 0.0, batch_size, batches=len(batches), skipped_batches=skipped,
                                lr=self.optimizer.lr, gem_p=float(self.model.gem_p.data[0]))
        mean_active = float(np.mean(actives))
        metrics = EpochMetrics(
            epoch=self.epoch,
            loss=float(np.mean(losses)),
            active_ratio=mean_active / batch_size,
            batch_size=batch_size,
            active_triplets=mean_active,
            batches=len(batches),
            skipped_batches=skipped,
            lr=self.optimizer.lr,
            gem_p=float(self.model.gem_p.data[0]),
        )
        self.batch_state = dynamic_batch_update(self.batch_state, mean_active, float(batch_size))
        self.optimizer.decay_lr()
        return metrics

    def save(self) -> None:
        if self.checkpoint_path:
            save_checkpoint(self.checkpoint_path, self.model, self.optimizer, self.epoch, self.config_text)

    def fit(self, samples: Sequence[TrainingSample], epochs: int = None) -> TrainingResult:
        epochs = self.training.epochs if epochs is None else epochs
        if not samples:
            raise InvalidArgument("Training needs at least one sample")
        place_ids = np.array([s.place_id for s in samples]) if all(s.place_id is not None for s in samples) \
            else assign_places([s.position for s in samples], self.triplet.pos_radius)
        log.info(f"Training on {len(samples)} samples from {len(np.unique(place_ids))} places for {epochs} epochs")

        result = TrainingResult(batch_sizes=[self.batch_state.current_size])
        if self.epoch == 0:
            self.save()
        for _ in range(epochs):
            try:
                metrics = self.train_epoch(samples, place_ids)
            except NumericalError as e:
                log.error(f"Training aborted in epoch {self.epoch + 1}: {e}; last good checkpoint is epoch {self.epoch}")
                raise
            self.save()
            if self.metrics_path:
                append_record(self.metrics_path, metrics.to_record())
            result.history.append(metrics)
            result.batch_sizes.append(self.batch_state.current_size)
            log.info(f"Epoch {metrics.epoch}: loss {metrics.loss:.4f}, active ratio {metrics.active_ratio:.2f}, "
                     f"batch size {metrics.batch_size}")
        return result

def train(samples: Sequence[TrainingSample], model: RprNet, epochs: int = None, **kwargs) -> TrainingResult:
    return Trainer(model, **kwargs).fit(samples, epochs)

def network_grad_check(rng_seed: int = 0, num_samples: int = 8) -> float:
    """grad_check of the batch-hard triplet loss through a tiny network.

    Two clouds share a place and a third is far away; the margin is large
    enough that both mined triplets stay active.
    """
    config = RprNetConfig(n_seeds=12, k=4, channels=2, final_channels=8, descriptor_dim=8,
                          kernel_hidden=6, attention_reduction=2)
    model = RprNet(config, seed=rng_seed)
    rng = np.random.default_rng(rng_seed)
    prepared = [model.prepare(rng.normal(size=(24, 3))) for _ in range(3)]
    positions = np.array([[0.0, 0.0], [0.0, 0.0], [100.0, 0.0]])
    triplet = TripletConfig(margin=10.0)
    with ad.no_grad():
        descriptors = np.stack([model.forward_prepared(p).data for p in prepared])
    triplets = batch_hard_mine(descriptors, positions, triplet)

    def loss():
        stacked = ad.stack([model.forward_prepared(p) for p in prepared], axis=0)
        anchors = ad.gather(stacked, [t.anchor for t in triplets])
        positives = ad.gather(stacked, [t.positive for t in triplets])
        negatives = ad.gather(stacked, [t.negative for t in triplets])
        return ad.reduce_mean(triplet_loss(descriptor_distance(anchors, positives),
                                           descriptor_distance(anchors, negatives), triplet.margin))

    return ad.grad_check(loss, model.parameters(), num_samples=num_samples, rng_seed=rng_seed)
