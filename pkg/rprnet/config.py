# Copyright (c) rprnet contributors

import logging
import math
from os import PathLike
from typing import Any, Dict, List, Union

from rprnet.api import ConfigError
from rprnet.checkpoint import Checkpoint
from rprnet.network import RprNet, RprNetConfig
from rprnet.optimizer import OptimizerConfig
from rprnet.synthetic import SynthConfig
from rprnet.training import AugmentConfig, BatchState, TrainingConfig, TripletConfig

log = logging.getLogger(__name__)

DEFAULTS: Dict[str, Any] = {
    'network.n_seeds': 1024,
    'network.k': 32,
    'network.channels': 64,
    'network.final_channels': 256,
    'network.descriptor_dim': 256,
    'network.gem_p_init': 3.0,
    'network.ss_sigma': 0.2,
    'network.attention_reduction': 16,
    'network.kernel_hidden': 64,
    'network.attention_pool': 'all',
    'network.attention': True,
    'network.dense': True,
    'network.stem_feature': 'ones',
    'network.use_ss': True,
    'network.use_ilrif': True,
    'network.use_glrif': True,
    'network.fps_start': 0,
    'triplet.margin': 0.2,
    'triplet.pos_radius': 10.0,
    'triplet.neg_radius': 50.0,
    'augment.jitter_sigma': 0.001,
    'augment.jitter_clip': 0.002,
    'augment.translation_range': 0.01,
    'augment.removal_fraction_max': 0.10,
    'augment.erase_fraction_max': 0.10,
    'augment.rotation_augment': 'off',
    'augment.rotation_max_angle': math.pi,
    'batch.initial_size': 16,
    'batch.max_size': 96,
    'batch.expansion': 0.40,
    'batch.active_ratio_threshold': 0.70,
    'optim.lr': 1e-3,
    'optim.beta1': 0.9,
    'optim.beta2': 0.999,
    'optim.eps': 1e-8,
    'optim.weight_decay': 0.0,
    'optim.lr_decay': 1.0,
    'train.epochs': 40,
    'train.seed': 0,
    'train.samples_per_place': 2,
    'train.gem_p_min': 1.0,
    'train.gem_p_max': 64.0,
    'eval.pos_match_radius': 25.0,
    'eval.levels': '0,30,60,90,120,150,180',
    'eval.axis': 'z',
    'eval.rotate_database': False,
    'synth.n_places': 64,
    'synth.variants_per_place': 8,
    'synth.test_variants': 2,
    'synth.points_per_cloud': 4096,
    'synth.structure_seed': 0,
    'synth.place_spacing': 100.0,
    'paths.manifest': '',
    'paths.queries': '',
    'paths.database': '',
    'paths.checkpoint': '',
    'paths.out': '',
    'paths.metrics_log': '',
}

DESK_PRESET: Dict[str, Any] = {
    'network.n_seeds': 256,
    'network.k': 16,
    'network.channels': 16,
    'network.final_channels': 64,
    'network.descriptor_dim': 64,
}

_TRUE = ('true', 'yes', 'on', '1')
_FALSE = ('false', 'no', 'off', '0')

def coerce_value(key: str, value: Any, line: int = None) -> Any:
    """Converts `value` to the type of the default for `key`."""
    where = f" (line {line})" if line is not None else ''
    if key not in DEFAULTS:
        raise ConfigError(f"Unknown config key '{key}'{where}")
    default = DEFAULTS[key]
    if not isinstance(value, str):
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"'{key}' expects true or false, got {value!r}{where}")
        return type(default)(value)
    text = value.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"Invalid value {text!r} for '{key}', expected {type(default).__name__}{where}") from None
    return text

def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)

def parse_config_text(text: str, source: str = '<text>') -> Dict[str, Any]:
    values = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError(f"{source}: expected 'section.key = value' (line {line_no})")
        key, value = (part.strip() for part in line.split('=', 1))
        if key in values:
            raise ConfigError(f"{source}: duplicate key '{key}' (line {line_no})")
        values[key] = coerce_value(key, value, line_no)
    return values

class RprConfig:
    """Layered settings: command-line overrides, then the desk preset, then the config file, then defaults."""

    def __init__(self, overrides: dict = None, config_file: Union[str, PathLike] = None, desk: bool = False):
        self.file_config: Dict[str, Any] = {}
        self.preset: Dict[str, Any] = dict(DESK_PRESET) if desk else {}
        self.overrides: Dict[str, Any] = {}
        self.config_file = config_file
        if config_file:
            self.load(config_file)
        for key, value in (overrides or {}).items():
            self.set(key, value)

    @classmethod
    def from_text(cls, text: str) -> 'RprConfig':
        config = cls()
        config.file_config = parse_config_text(text)
        return config

    def load(self, path: Union[str, PathLike]) -> None:
        try:
            with open(path, 'r', encoding='utf-8') as file:
                text = file.read()
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from None
        self.file_config = parse_config_text(text, str(path))
        log.info(f"Loaded {len(self.file_config)} settings from {path}")

    def get(self, key, default=None):
        for layer in (self.overrides, self.preset, self.file_config):
            if key in layer:
                return layer[key]
        return DEFAULTS.get(key, default)

    def set(self, key, value):
        self.overrides[key] = coerce_value(key, value)

    def resolved(self) -> Dict[str, Any]:
        return {key: self.get(key) for key in DEFAULTS}

    def to_text(self) -> str:
        lines, section = [], None
        for key, value in self.resolved().items():
            current = key.split('.', 1)[0]
            if current != section:
                if section is not None:
                    lines.append('')
                lines.append(f"# {current}")
                section = current
            lines.append(f"{key} = {_format_value(value)}")
        return '\n'.join(lines) + '\n'

    def log_resolved(self, logger: logging.Logger = None) -> None:
        logger = logger or log
        logger.info("Resolved configuration:")
        for key, value in self.resolved().items():
            logger.info(f"  {key} = {_format_value(value)}")

    def _section(self, name: str) -> Dict[str, Any]:
        prefix = f"{name}."
        return {key[len(prefix):]: self.get(key) for key in DEFAULTS if key.startswith(prefix)}

    @property
    def network(self) -> RprNetConfig:
        return RprNetConfig(**self._section('network'))

    @property
    def triplet(self) -> TripletConfig:
        return TripletConfig(**self._section('triplet'))

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(**self._section('augment'))

    @property
    def batch(self) -> BatchState:
        values = self._section('batch')
        return BatchState(current_size=values.pop('initial_size'), **values)

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(**self._section('optim'))

    @property
    def training(self) -> TrainingConfig:
        return TrainingConfig(**self._section('train'))

    @property
    def synth(self) -> SynthConfig:
        return SynthConfig(**self._section('synth'))

    @property
    def eval_levels(self) -> List[float]:
        text = self.get('eval.levels')
        try:
            return [float(v) for v in text.split(',') if v.strip()]
        except ValueError:
            raise ConfigError(f"eval.levels must be comma-separated degrees, got {text!r}") from None

    @property
    def eval_axis(self) -> str:
        axis = self.get('eval.axis')
        if axis not in ('z', 'so3'):
            raise ConfigError(f"eval.axis must be 'z' or 'so3', got {axis!r}")
        return axis

    @property
    def pos_match_radius(self) -> float:
        return self.get('eval.pos_match_radius')

    @property
    def rotate_database(self) -> bool:
        return self.get('eval.rotate_database')

    def path(self, name: str) -> str:
        return self.get(f"paths.{name}", '')

def model_from_checkpoint(checkpoint: Checkpoint):
    """Rebuilds the network recorded in a checkpoint's config echo and loads its weights."""
    config = RprConfig.from_text(checkpoint.config_text) if checkpoint.config_text else RprConfig()
    model = RprNet(config.network)
    checkpoint.apply_to(model)
    return model, config
