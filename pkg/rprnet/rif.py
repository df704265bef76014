# Copyright (c) rprnet contributors

import logging
from os import PathLike
from typing import Union

import numpy as np

from rprnet.api import FormatError, InvalidArgument, ShapeError
from rprnet.geometry import EPS_VEC, GroupIndex, angle_between
from rprnet.util import read_array, write_array

log = logging.getLogger(__name__)

# [h, f_ss | d1, d2, a1, a2, a3 | d3, d4, a4, a5]
RIF_CHANNELS = ('h', 'f_ss', 'd1', 'd2', 'a1', 'a2', 'a3', 'd3', 'd4', 'a4', 'a5')
SS_SLICE = slice(0, 2)
ILRIF_SLICE = slice(2, 7)
GLRIF_SLICE = slice(7, 11)
DISTANCE_CHANNELS = (0, 1, 2, 3, 7, 8)
ANGLE_CHANNELS = (4, 5, 6, 9, 10)
DEFAULT_SS_SIGMA = 0.2

def _grouped(seeds, group: GroupIndex) -> np.ndarray:
    seed_points = np.asarray(seeds, dtype=np.float64)
    if seed_points.ndim != 2 or seed_points.shape[1] != 3:
        raise ShapeError("Seeds must be an N_s×3 array", seed_points.shape)
    if group.n_seeds != seed_points.shape[0]:
        raise ShapeError("Group index does not match the seed set", group.neighbor_ids.shape, seed_points.shape)
    return seed_points[group.neighbor_ids]

def spherical_signals(seeds, group: GroupIndex, sigma: float = DEFAULT_SS_SIGMA) -> np.ndarray:
    """Radial distance h of every neighbor and its angular density f_ss within the group.

    f_ss(k) sums h_j weighted by a Gaussian of the angle between x_j and x_k over the
    other non-degenerate neighbors j; it is 0 for a neighbor sitting at the origin.
    """
    points = _grouped(seeds, group)
    h = np.linalg.norm(points, axis=-1)
    valid = h > EPS_VEC

    theta = angle_between(points[:, :, None, :], points[:, None, :, :])
    weight = np.exp(-theta ** 2 / (2.0 * sigma ** 2))
    k = points.shape[1]
    peers = (~np.eye(k, dtype=bool))[None, :, :] & valid[:, None, :]
    f_ss = np.sum(np.where(peers, weight * h[:, None, :], 0.0), axis=-1)
    f_ss = np.where(valid, f_ss, 0.0)
    return np.stack([h, f_ss], axis=-1)

def ilrif(seeds, group: GroupIndex) -> np.ndarray:
    """Triangle features between the seed, the group mean and each neighbor."""
    points = _grouped(seeds, group)
    seed = np.asarray(seeds, dtype=np.float64)[:, None, :]
    mean = points.mean(axis=1, keepdims=True)

    d1 = np.linalg.norm(points - seed, axis=-1)
    d2 = np.linalg.norm(points - mean, axis=-1)
    a1 = angle_between(seed - points, mean - points)
    a2 = angle_between(points - seed, mean - seed)
    a3 = angle_between(points - mean, seed - mean)
    return np.stack([d1, d2, a1, a2, a3], axis=-1)

def glrif(seeds, group: GroupIndex) -> np.ndarray:
    """Closest/farthest neighbor features of each group, repeated along K."""
    if group.k < 2:
        raise InvalidArgument(f"Group-level features need K ≥ 2, got K={group.k}")
    points = _grouped(seeds, group)
    seed = np.asarray(seeds, dtype=np.float64)[:, None, :]
    mean = points.mean(axis=1)
    rows = np.arange(group.n_seeds)

    dist = np.linalg.norm(points - seed, axis=-1)
    is_self = group.neighbor_ids == rows[:, None]
    # primary key distance, secondary key seed index
    closest_slot = np.lexsort((group.neighbor_ids, np.where(is_self, np.inf, dist)), axis=-1)[:, 0]
    farthest_slot = np.lexsort((group.neighbor_ids, -dist), axis=-1)[:, 0]

    seed = seed[:, 0, :]
    closest = points[rows, closest_slot]
    farthest = points[rows, farthest_slot]
    d3 = dist[rows, closest_slot]
    d4 = dist[rows, farthest_slot]
    a4 = angle_between(closest - seed, mean - seed)
    a5 = angle_between(farthest - seed, mean - seed)
    features = np.stack([d3, d4, a4, a5], axis=-1)
    return np.repeat(features[:, None, :], group.k, axis=1)

def assemble_rifs(seeds, group: GroupIndex, sigma: float = DEFAULT_SS_SIGMA) -> np.ndarray:
    return np.concatenate([
        spherical_signals(seeds, group, sigma),
        ilrif(seeds, group),
        glrif(seeds, group),
    ], axis=-1)

def select_families(rifs: np.ndarray, use_ss: bool = True, use_ilrif: bool = True, use_glrif: bool = True) -> np.ndarray:
    """Keeps the enabled RIF families, in channel-layout order."""
    parts = []
    if use_ss:
        parts.append(rifs[..., SS_SLICE])
    if use_ilrif:
        parts.append(rifs[..., ILRIF_SLICE])
    if use_glrif:
        parts.append(rifs[..., GLRIF_SLICE])
    if not parts:
        raise InvalidArgument("At least one RIF family must be enabled")
    return np.concatenate(parts, axis=-1)

def family_width(use_ss: bool = True, use_ilrif: bool = True, use_glrif: bool = True) -> int:
    return 2 * use_ss + 5 * use_ilrif + 4 * use_glrif

def dump_rifs(path: Union[str, PathLike], rifs: np.ndarray) -> None:
    rifs = np.asarray(rifs, dtype=np.float64)
    if rifs.ndim != 3:
        raise ShapeError("RIF dump expects an N_s×K×C block", rifs.shape)
    write_array(path, rifs)
    log.info(f"Wrote RIF block {rifs.shape} to {path}")

def load_rifs(path: Union[str, PathLike]) -> np.ndarray:
    rifs = read_array(path)
    if rifs.ndim != 3:
        raise FormatError(f"RIF dump holds a rank-{rifs.ndim} array, expected N_s×K×C", offset=0)
    return rifs
