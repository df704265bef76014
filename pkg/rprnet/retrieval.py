# Copyright (c) rprnet contributors

from dataclasses import dataclass, field
import logging
import math
from os import PathLike
import struct
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from rprnet.api import EmptyDatabase, FormatError, InvalidArgument, RotationMode, ShapeError
from rprnet.geometry import apply_rotation, random_rotation
from rprnet.util import format_table, ordered_map, write_records

log = logging.getLogger(__name__)

DATABASE_MAGIC = b'RPRDB1'
DEFAULT_MATCH_RADIUS = 25.0
RECALL_CURVE_LENGTH = 25

def quantize(descriptors) -> np.ndarray:
    """Rounds descriptors to the 32-bit values the database file stores."""
    return np.asarray(descriptors, dtype=np.float64).astype('<f4').astype(np.float64)

@dataclass
class PlaceDatabase:
    """Descriptors and positions of the mapped places; row i has id i."""
    descriptors: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.descriptors = quantize(self.descriptors)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.descriptors.ndim != 2 or self.positions.shape != (self.descriptors.shape[0], 2):
            raise ShapeError("Database rows are not aligned", self.descriptors.shape, self.positions.shape)
        if not np.all(np.isfinite(self.descriptors)) or not np.all(np.isfinite(self.positions)):
            raise InvalidArgument("Database holds non-finite values")

    def __len__(self) -> int:
        return self.descriptors.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

@dataclass
class QueryResult:
    ids: np.ndarray
    distances: np.ndarray

def query(db: PlaceDatabase, q_descriptor, k: int) -> QueryResult:
    """k nearest rows by Euclidean distance, ascending, ties to the lower id."""
    if len(db) == 0:
        raise EmptyDatabase("Cannot query an empty database")
    q = np.asarray(q_descriptor, dtype=np.float64).reshape(-1)
    if q.shape[0] != db.dim:
        raise ShapeError("Query descriptor does not match the database", q.shape, db.descriptors.shape)
    if not 1 <= k <= len(db):
        raise InvalidArgument(f"k must lie in [1, {len(db)}], got {k}")
    distances = cdist(q[None, :], db.descriptors)[0]
    order = np.lexsort((db.ids, distances))[:k]
    return QueryResult(ids=order, distances=distances[order])

@dataclass
class EvalReport:
    recall_at_1: float
    recall_at_top1pct: float
    recall_curve: List[float] = field(default_factory=list)
    query_count: int = 0
    excluded: int = 0
    window: int = 1
    level: Optional[float] = None
    axis: Optional[str] = None
    rotate_database: bool = False

    def to_record(self) -> dict:
        return dict(self.__dict__)

def top_percent_window(m: int) -> int:
    return max(1, math.ceil(m / 100))

def evaluate(db: PlaceDatabase, query_descriptors, truth_positions,
             pos_match_radius: float = DEFAULT_MATCH_RADIUS) -> EvalReport:
    """Recall@1, recall@top-1% and the recall@N curve.

    Queries without any database entry inside the match radius are left out of
    every denominator and counted in `excluded`.
    """
    if len(db) == 0:
        raise EmptyDatabase("Cannot evaluate against an empty database")
    queries = quantize(query_descriptors).reshape(-1, db.dim)
    truth_positions = np.asarray(truth_positions, dtype=np.float64).reshape(-1, 2)
    if queries.shape[0] != truth_positions.shape[0]:
        raise ShapeError("Query descriptors and positions are not aligned", queries.shape, truth_positions.shape)

    m = len(db)
    window = top_percent_window(m)
    depth = min(m, max(window, RECALL_CURVE_LENGTH))
    matches = cdist(truth_positions, db.positions) <= pos_match_radius
    has_match = matches.any(axis=1)
    excluded = int(np.count_nonzero(~has_match))
    if excluded:
        log.warning(f"{excluded} of {queries.shape[0]} queries have no database entry within {pos_match_radius} m")

    first_hit = []
    for i in np.flatnonzero(has_match):
        ranked = query(db, queries[i], depth).ids
        hits = np.flatnonzero(matches[i, ranked])
        first_hit.append(int(hits[0]) if hits.size else depth)
    first_hit = np.array(first_hit, dtype=np.int64)

    count = first_hit.size
    curve_length = min(RECALL_CURVE_LENGTH, m)
    if count == 0:
        return EvalReport(0.0, 0.0, [0.0] * curve_length, 0, excluded, window)
    curve = [float(np.mean(first_hit < n)) for n in range(1, curve_length + 1)]
    return EvalReport(
        recall_at_1=float(np.mean(first_hit < 1)),
        recall_at_top1pct=float(np.mean(first_hit < window)),
        recall_curve=curve,
        query_count=count,
        excluded=excluded,
        window=window,
    )

def embed_clouds(model, clouds: Sequence[np.ndarray], max_workers: int = None) -> np.ndarray:
    descriptors = ordered_map(model.embed, clouds, max_workers)
    return np.stack(descriptors) if descriptors else np.empty((0, model.config.descriptor_dim))

def rotate_clouds(clouds: Sequence[np.ndarray], level: float, mode: RotationMode, seed: int) -> List[np.ndarray]:
    """Fresh random rotation per cloud; `level` is the maximal angle in degrees."""
    mode = RotationMode(mode)
    seeds = np.random.default_rng([seed, int(round(level * 1000))]).integers(0, 2 ** 31, size=len(clouds))
    theta_max = math.radians(level) if mode == RotationMode.Z else math.pi
    return [apply_rotation(cloud, random_rotation(int(s), mode, theta_max)) for cloud, s in zip(clouds, seeds)]

def rotation_sweep(model, db_clouds: Sequence[np.ndarray], db_positions, query_clouds: Sequence[np.ndarray],
                   query_positions, levels: Sequence[float], mode: RotationMode = RotationMode.Z,
                   seed: int = 0, rotate_database: bool = False,
                   pos_match_radius: float = DEFAULT_MATCH_RADIUS) -> List[EvalReport]:
    """Recall per rotation level; level 0 leaves every cloud untouched.

    In so3 mode every level above 0 applies a uniformly random 3-D rotation.
    """
    mode = RotationMode(mode)
    plain_db = PlaceDatabase(embed_clouds(model, db_clouds), db_positions)
    plain_queries = None
    reports = []
    for level in levels:
        if level < 0 or level > 360:
            raise InvalidArgument(f"Rotation level must lie in [0, 360] degrees, got {level}")
        if level == 0:
            if plain_queries is None:
                plain_queries = embed_clouds(model, query_clouds)
            db, queries = plain_db, plain_queries
        else:
            queries = embed_clouds(model, rotate_clouds(query_clouds, level, mode, seed))
            db = plain_db
            if rotate_database:
                db = PlaceDatabase(embed_clouds(model, rotate_clouds(db_clouds, level, mode, seed + 1)), db_positions)
        report = evaluate(db, queries, query_positions, pos_match_radius)
        report.level, report.axis, report.rotate_database = float(level), str(mode), rotate_database
        log.info(f"Rotation level {level}° ({mode}): recall@1 {report.recall_at_1:.4f}, "
                 f"recall@1% {report.recall_at_top1pct:.4f}")
        reports.append(report)
    return reports

def save_database(path: Union[str, PathLike], db: PlaceDatabase) -> None:
    m, l = db.descriptors.shape
    with open(path, 'wb') as file:
        file.write(DATABASE_MAGIC)
        file.write(struct.pack('<qq', m, l))
        file.write(db.descriptors.astype('<f4').tobytes())
        file.write(db.positions.astype('<f8').tobytes())
    log.info(f"Saved database of {m} descriptors (dim {l}) to {path}")

def load_database(path: Union[str, PathLike]) -> PlaceDatabase:
    with open(path, 'rb') as file:
        raw = file.read()
    header = len(DATABASE_MAGIC) + 16
    if raw[:len(DATABASE_MAGIC)] != DATABASE_MAGIC:
        raise FormatError(f"{path}: not a descriptor database (bad magic)", offset=0)
    if len(raw) < header:
        raise FormatError(f"{path}: header truncated", offset=len(raw))
    m, l = struct.unpack('<qq', raw[len(DATABASE_MAGIC):header])
    if m < 0 or l < 1:
        raise FormatError(f"{path}: invalid dimensions m={m}, l={l}", offset=len(DATABASE_MAGIC))
    expected = header + 4 * m * l + 16 * m
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for m={m}, l={l}, found {len(raw)}",
                          offset=min(len(raw), expected))
    descriptors = np.frombuffer(raw, dtype='<f4', count=m * l, offset=header).reshape(m, l)
    positions = np.frombuffer(raw, dtype='<f8', count=2 * m, offset=header + 4 * m * l).reshape(m, 2)
    return PlaceDatabase(descriptors, positions)

def format_reports(reports: Sequence[EvalReport]) -> str:
    rows = []
    for r in reports:
        level = '-' if r.level is None else f"{r.level:g}"
        rows.append([level, r.axis or '-', r.recall_at_1, r.recall_at_top1pct, r.query_count, r.excluded])
    return format_table(['level', 'axis', 'recall@1', 'recall@1%', 'queries', 'excluded'], rows)

def write_report_records(path: Union[str, PathLike], reports: Sequence[EvalReport]) -> None:
    write_records(path, [r.to_record() for r in reports])
