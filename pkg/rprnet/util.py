# Copyright (c) rprnet contributors

from concurrent.futures import ThreadPoolExecutor
import json
import logging
import os
from os import PathLike
from typing import Callable, Iterable, List, TypeVar, Union

import numpy as np

from rprnet.api import FormatError

log = logging.getLogger(__name__)

MAX_ARRAY_RANK = 4

T = TypeVar('T')
R = TypeVar('R')

def ordered_map(func: Callable[[T], R], items: Iterable[T], max_workers: int = None) -> List[R]:
    """Maps `func` over `items` on worker threads, results in input order."""
    items = list(items)
    if max_workers == 1 or len(items) < 2:
        return [func(item) for item in items]
    workers = max_workers or min(8, os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items))

def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)

def append_record(path: Union[str, PathLike], record: dict) -> None:
    """Appends one JSON object as a line."""
    with open(path, 'a', encoding='utf-8') as file:
        file.write(json.dumps(record, default=_json_default) + '\n')

def write_records(path: Union[str, PathLike], records: Iterable[dict]) -> None:
    with open(path, 'w', encoding='utf-8') as file:
        for record in records:
            file.write(json.dumps(record, default=_json_default) + '\n')

def read_records(path: Union[str, PathLike]) -> List[dict]:
    with open(path, 'r', encoding='utf-8') as file:
        return [json.loads(line) for line in file if line.strip()]

def format_table(header: List[str], rows: List[list]) -> str:
    cells = [[str(h) for h in header]] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ['  '.join(cell.rjust(width) for cell, width in zip(row, widths)) for row in cells]
    lines.insert(1, '  '.join('-' * width for width in widths))
    return '\n'.join(lines)

def write_array(path: Union[str, PathLike], array: np.ndarray) -> None:
    """Rank and shape as little-endian int64, then the values as little-endian float64."""
    array = np.asarray(array, dtype=np.float64)
    with open(path, 'wb') as file:
        file.write(np.asarray([array.ndim, *array.shape], dtype='<i8').tobytes())
        file.write(array.astype('<f8').tobytes())

def read_array(path: Union[str, PathLike]) -> np.ndarray:
    with open(path, 'rb') as file:
        raw = file.read()
    if len(raw) < 8:
        raise FormatError("Array header truncated", offset=len(raw))
    rank = int(np.frombuffer(raw[:8], dtype='<i8')[0])
    header = 8 * (1 + rank)
    if rank < 0 or rank > MAX_ARRAY_RANK:
        raise FormatError(f"Unsupported array rank {rank}", offset=0)
    if len(raw) < header:
        raise FormatError("Array shape truncated", offset=len(raw))
    shape = tuple(int(v) for v in np.frombuffer(raw[8:header], dtype='<i8'))
    if any(v < 0 for v in shape):
        raise FormatError(f"Negative dimension in array shape {shape}", offset=8)
    expected = header + 8 * int(np.prod(shape))
    if len(raw) != expected:
        raise FormatError(f"Array of shape {shape} should be {expected} bytes, found {len(raw)}",
                          offset=min(len(raw), expected))
    return np.frombuffer(raw[header:], dtype='<f8').reshape(shape).astype(np.float64)
