# Copyright (c) rprnet contributors

import csv
from dataclasses import dataclass, field
import logging
import os
from os import PathLike
from typing import List, Union

import numpy as np

from rprnet.api import FormatError, InvalidArgument
from rprnet.geometry import as_cloud

log = logging.getLogger(__name__)

POINT_BYTES = 3 * 8
MANIFEST_HEADER = ['path', 'northing', 'easting']
SPLITS = ('train', 'test')

@dataclass
class ManifestEntry:
    path: str
    northing: float
    easting: float

    @property
    def position(self) -> np.ndarray:
        return np.array([self.northing, self.easting])

@dataclass
class DatasetManifest:
    entries: List[ManifestEntry] = field(default_factory=list)
    split: str = 'train'

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidArgument(f"Unknown split '{self.split}', expected one of {SPLITS}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def positions(self) -> np.ndarray:
        return np.array([e.position for e in self.entries]).reshape(-1, 2)

    def validate(self) -> None:
        for entry in self.entries:
            if not os.path.exists(entry.path):
                raise InvalidArgument(f"Cloud file not found: {entry.path}")

def read_bin_cloud(path: Union[str, PathLike]) -> np.ndarray:
    """Row-major N×3 little-endian float64 cloud."""
    with open(path, 'rb') as file:
        raw = file.read()
    if len(raw) == 0 or len(raw) % POINT_BYTES != 0:
        raise FormatError(f"{path}: length {len(raw)} is not a positive multiple of {POINT_BYTES} bytes",
                          offset=len(raw) - len(raw) % POINT_BYTES)
    cloud = np.frombuffer(raw, dtype='<f8').reshape(-1, 3).astype(np.float64)
    finite = np.isfinite(cloud)
    if not finite.all():
        first = int(np.flatnonzero(~finite.reshape(-1))[0])
        raise FormatError(f"{path}: non-finite coordinate", offset=first * 8)
    return cloud

def write_bin_cloud(path: Union[str, PathLike], cloud) -> None:
    with open(path, 'wb') as file:
        file.write(as_cloud(cloud).astype('<f8').tobytes())

def _is_header(row: List[str]) -> bool:
    try:
        float(row[1])
        return False
    except (IndexError, ValueError):
        return True

def read_manifest(path: Union[str, PathLike], split: str = 'train') -> DatasetManifest:
    """Reads `path,northing,easting` rows; relative cloud paths resolve against the manifest's folder."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, 'r', newline='', encoding='utf-8') as file:
        for line_no, row in enumerate(csv.reader(file), start=1):
            if not row or not ''.join(row).strip():
                continue
            if line_no == 1 and _is_header(row):
                continue
            if len(row) != 3:
                raise FormatError(f"{path}: expected 3 columns, found {len(row)}", offset=line_no)
            try:
                northing, easting = float(row[1]), float(row[2])
            except ValueError:
                raise FormatError(f"{path}: unparsable coordinates {row[1:]}", offset=line_no) from None
            if not (np.isfinite(northing) and np.isfinite(easting)):
                raise FormatError(f"{path}: non-finite coordinates", offset=line_no)
            cloud_path = row[0].strip()
            if not os.path.isabs(cloud_path):
                cloud_path = os.path.join(base, cloud_path)
            entries.append(ManifestEntry(cloud_path, northing, easting))
    log.info(f"Read {len(entries)} entries from manifest {path}")
    return DatasetManifest(entries=entries, split=split)

def write_manifest(path: Union[str, PathLike], manifest: DatasetManifest) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, 'w', newline='', encoding='utf-8') as file:
        writer = csv.writer(file)
        writer.writerow(MANIFEST_HEADER)
        for entry in manifest.entries:
            writer.writerow([os.path.relpath(entry.path, base), repr(entry.northing), repr(entry.easting)])

def load_clouds(manifest: DatasetManifest) -> List[np.ndarray]:
    manifest.validate()
    return [read_bin_cloud(entry.path) for entry in manifest.entries]
