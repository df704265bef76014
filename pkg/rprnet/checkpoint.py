# Copyright (c) rprnet contributors

from dataclasses import dataclass, field
import logging
import os
from os import PathLike
import struct
from typing import Dict, Optional, Union

import numpy as np

from rprnet.api import FormatError, InvalidArgument
from rprnet.optimizer import MomentState, OptimizerState

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'RPRCK1'
CHECKPOINT_VERSION = 1

@dataclass
class Checkpoint:
    epoch: int = 0
    config_text: str = ''
    parameters: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: Optional[OptimizerState] = None
    version: int = CHECKPOINT_VERSION

    @classmethod
    def capture(cls, model, optimizer=None, epoch: int = 0, config_text: str = '') -> 'Checkpoint':
        parameters = {name: p.data.astype('<f4') for name, p in model.named_parameters().items()}
        state = None
        if optimizer is not None:
            source = optimizer.state_dict()
            state = OptimizerState(step=source.step, lr=source.lr, moments={
                name: MomentState(moment.m.copy(), moment.v.copy()) for name, moment in source.moments.items()
            })
        return cls(epoch=epoch, config_text=config_text, parameters=parameters, optimizer=state)

    def apply_to(self, model, optimizer=None) -> None:
        named = model.named_parameters()
        if set(named) != set(self.parameters):
            missing = sorted(set(named) ^ set(self.parameters))
            raise InvalidArgument(f"Checkpoint parameters do not match the model: {', '.join(missing[:5])}")
        for name, p in named.items():
            values = self.parameters[name]
            if values.shape != p.shape:
                raise InvalidArgument(f"Checkpoint parameter '{name}' has shape {values.shape}, model expects {p.shape}")
            p.data[...] = values.astype(np.float64)
        if optimizer is not None and self.optimizer is not None:
            optimizer.load_state_dict(self.optimizer)

class _Writer:
    def __init__(self):
        self.chunks = []

    def int(self, value: int):
        self.chunks.append(struct.pack('<q', value))

    def float(self, value: float):
        self.chunks.append(struct.pack('<d', value))

    def text(self, value: str):
        raw = value.encode('utf-8')
        self.int(len(raw))
        self.chunks.append(raw)

    def array(self, values: np.ndarray, dtype: str):
        self.int(values.ndim)
        for size in values.shape:
            self.int(size)
        self.chunks.append(np.ascontiguousarray(values, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return b''.join(self.chunks)

class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if size < 0 or self.offset + size > len(self.raw):
            raise FormatError(f"Checkpoint truncated while reading {what}", offset=self.offset)
        chunk = self.raw[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def int(self, what: str) -> int:
        return struct.unpack('<q', self.take(8, what))[0]

    def float(self, what: str) -> float:
        return struct.unpack('<d', self.take(8, what))[0]

    def text(self, what: str) -> str:
        start = self.offset
        raw = self.take(self.int(what), what)
        try:
            return raw.decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid UTF-8", offset=start) from None

    def array(self, dtype: str, what: str) -> np.ndarray:
        start = self.offset
        ndim = self.int(what)
        if not 0 <= ndim <= 4:
            raise FormatError(f"{what} has invalid rank {ndim}", offset=start)
        shape = tuple(self.int(what) for _ in range(ndim))
        if min(shape, default=0) < 0:
            raise FormatError(f"{what} has negative shape {shape}", offset=start)
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * int(np.prod(shape)), what), dtype=dtype).reshape(shape).copy()

def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    writer = _Writer()
    writer.chunks.append(CHECKPOINT_MAGIC)
    writer.int(checkpoint.version)
    writer.int(checkpoint.epoch)
    writer.text(checkpoint.config_text)
    writer.int(len(checkpoint.parameters))
    for name, values in checkpoint.parameters.items():
        writer.text(name)
        writer.array(values, '<f4')
    state = checkpoint.optimizer
    writer.int(0 if state is None else 1)
    if state is not None:
        writer.int(state.step)
        writer.float(state.lr)
        writer.int(len(state.moments))
        for name, moment in state.moments.items():
            writer.text(name)
            writer.array(moment.m, '<f8')
            writer.array(moment.v, '<f8')
    return writer.getvalue()

def decode_checkpoint(raw: bytes) -> Checkpoint:
    reader = _Reader(raw)
    if reader.take(len(CHECKPOINT_MAGIC), 'magic') != CHECKPOINT_MAGIC:
        raise FormatError("Not a checkpoint file (bad magic)", offset=0)
    version = reader.int('version')
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}", offset=len(CHECKPOINT_MAGIC))
    epoch = reader.int('epoch')
    config_text = reader.text('config echo')

    parameters = {}
    for _ in range(reader.int('parameter count')):
        name = reader.text('parameter name')
        parameters[name] = reader.array('<f4', f"parameter '{name}'")

    optimizer = None
    flag_offset = reader.offset
    flag = reader.int('optimizer flag')
    if flag not in (0, 1):
        raise FormatError(f"Invalid optimizer flag {flag}", offset=flag_offset)
    if flag:
        step = reader.int('optimizer step')
        lr = reader.float('learning rate')
        moments = {}
        for _ in range(reader.int('moment count')):
            name = reader.text('moment name')
            moments[name] = MomentState(reader.array('<f8', f"first moment of '{name}'"),
                                        reader.array('<f8', f"second moment of '{name}'"))
        optimizer = OptimizerState(step=step, lr=lr, moments=moments)
    if reader.offset != len(raw):
        raise FormatError(f"{len(raw) - reader.offset} trailing bytes after checkpoint", offset=reader.offset)
    return Checkpoint(epoch=epoch, config_text=config_text, parameters=parameters, optimizer=optimizer, version=version)

def write_checkpoint(path: Union[str, PathLike], checkpoint: Checkpoint) -> None:
    raw = encode_checkpoint(checkpoint)
    # atomic replace
    tmp_path = f"{os.fspath(path)}.tmp"
    with open(tmp_path, 'wb') as file:
        file.write(raw)
    os.replace(tmp_path, path)

def save_checkpoint(path: Union[str, PathLike], model, optimizer=None, epoch: int = 0, config_text: str = '') -> Checkpoint:
    checkpoint = Checkpoint.capture(model, optimizer, epoch, config_text)
    write_checkpoint(path, checkpoint)
    log.info(f"Saved checkpoint for epoch {epoch} to {path}")
    return checkpoint

def load_checkpoint(path: Union[str, PathLike]) -> Checkpoint:
    with open(path, 'rb') as file:
        raw = file.read()
    checkpoint = decode_checkpoint(raw)
    log.info(f"Loaded checkpoint of epoch {checkpoint.epoch} with {len(checkpoint.parameters)} parameters from {path}")
    return checkpoint
