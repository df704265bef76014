# Copyright (c) rprnet contributors

from enum import Enum
import logging

log = logging.getLogger(__name__)

class RotationMode(str, Enum):
    Z = 'z'
    SO3 = 'so3'

    def __str__(self) -> str:
        return self.value

class RotationAugment(str, Enum):
    Off = 'off'
    Z = 'z'
    SO3 = 'so3'

    def __str__(self) -> str:
        return self.value

class AttentionPool(str, Enum):
    """Axes the attention gate averages the raw kernels over."""
    All = 'all'
    K = 'k'

class StemFeature(str, Enum):
    Ones = 'ones'
    Radial = 'radial'

class ExitCode(int, Enum):
    Success = 0
    InternalError = 1
    ConfigError = 2
    FormatError = 3
    InvalidArgument = 4
    NumericalError = 5
    EmptyData = 6
    CheckFailed = 7

class RprNetError(Exception):
    category = 'internal-error'
    exit_code = ExitCode.InternalError

    def one_line(self) -> str:
        message = str(self).replace('\n', ' ').replace('"', "'")
        return f'error category={self.category} message="{message}"'

class ConfigError(RprNetError, ValueError):
    category = 'config-error'
    exit_code = ExitCode.ConfigError

class FormatError(RprNetError, ValueError):
    category = 'format-error'
    exit_code = ExitCode.FormatError

    def __init__(self, message: str, offset: int = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset

class InvalidArgument(RprNetError, ValueError):
    category = 'invalid-argument'
    exit_code = ExitCode.InvalidArgument

class InvalidCloud(InvalidArgument):
    category = 'invalid-cloud'

class ShapeError(InvalidArgument):
    category = 'shape-error'

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(shape)) for shape in shapes)
        super().__init__(message)
        self.shapes = shapes

class NumericalError(RprNetError, ArithmeticError):
    category = 'numerical-error'
    exit_code = ExitCode.NumericalError

    def __init__(self, message: str, parameter: str = None):
        if parameter is not None:
            message = f"{message} (parameter '{parameter}')"
        super().__init__(message)
        self.parameter = parameter

class EmptyBatch(RprNetError):
    category = 'empty-batch'
    exit_code = ExitCode.EmptyData

class EmptyDatabase(RprNetError):
    category = 'empty-database'
    exit_code = ExitCode.EmptyData

class CheckFailed(RprNetError):
    category = 'check-failed'
    exit_code = ExitCode.CheckFailed
