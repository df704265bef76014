# Copyright (c) rprnet contributors

from dataclasses import dataclass, fields
import logging
from typing import Dict, Iterable, List, Tuple

import numpy as np

from rprnet import autodiff as ad
from rprnet.api import AttentionPool, ConfigError, InvalidCloud, StemFeature
from rprnet.ariconv import AriConvParams, ariconv_forward, bottleneck_width
from rprnet.autodiff import Parameter, Tensor
from rprnet.geometry import GroupIndex, as_cloud, build_group_index
from rprnet.rif import assemble_rifs, family_width, select_families

log = logging.getLogger(__name__)

GEM_EPS = 1e-6
NUM_DENSE_BLOCKS = 4

@dataclass
class RprNetConfig:
    n_seeds: int = 1024
    k: int = 32
    channels: int = 64
    final_channels: int = 256
    descriptor_dim: int = 256
    gem_p_init: float = 3.0
    ss_sigma: float = 0.2
    attention_reduction: int = 16
    kernel_hidden: int = 64
    attention_pool: AttentionPool = AttentionPool.All
    attention: bool = True
    dense: bool = True
    stem_feature: StemFeature = StemFeature.Ones
    use_ss: bool = True
    use_ilrif: bool = True
    use_glrif: bool = True
    fps_start: int = 0

    def __post_init__(self):
        try:
            self.attention_pool = AttentionPool(self.attention_pool)
            self.stem_feature = StemFeature(self.stem_feature)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.final_channels != NUM_DENSE_BLOCKS * self.channels:
            raise ConfigError(f"final_channels ({self.final_channels}) must equal 4 * channels ({self.channels})")
        if self.descriptor_dim != self.final_channels:
            raise ConfigError(f"descriptor_dim ({self.descriptor_dim}) must equal final_channels ({self.final_channels})")
        if self.k < 2 or self.n_seeds < self.k:
            raise ConfigError(f"Need 2 ≤ k ≤ n_seeds, got k={self.k}, n_seeds={self.n_seeds}")
        if self.channels < 1 or self.kernel_hidden < 1 or self.attention_reduction < 1:
            raise ConfigError("channels, kernel_hidden and attention_reduction must be positive")
        if not 1.0 <= self.gem_p_init <= 64.0:
            raise ConfigError(f"gem_p_init must lie in [1, 64], got {self.gem_p_init}")
        if not (self.use_ss or self.use_ilrif or self.use_glrif):
            raise ConfigError("At least one RIF family must be enabled")

    @classmethod
    def desk(cls, **overrides) -> 'RprNetConfig':
        values = dict(n_seeds=256, k=16, channels=16, final_channels=64, descriptor_dim=64)
        values.update(overrides)
        return cls(**values)

    @property
    def rif_width(self) -> int:
        return family_width(self.use_ss, self.use_ilrif, self.use_glrif)

    def block_channels(self) -> List[Tuple[int, int]]:
        """(C_in, C_out) of blocks 0..5."""
        stem = [(1, self.channels)]
        dense = [(self.channels, self.channels)] * NUM_DENSE_BLOCKS
        fusion_in = NUM_DENSE_BLOCKS * self.channels if self.dense else self.channels
        return stem + dense + [(fusion_in, self.final_channels)]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

def gem_pool(features, p, eps: float = GEM_EPS) -> Tensor:
    """Generalized mean over points, per channel: (mean_n max(f, eps)^p)^(1/p)."""
    features = ad.as_tensor(features)
    powered = ad.power(ad.clamp_min(features, eps), p)
    return ad.power(ad.reduce_mean(powered, axes=0), ad.div(1.0, p))

def count_parameters(params: Iterable[Parameter]) -> int:
    return int(sum(p.size for p in params if p.trainable))

def parameter_shapes(config: RprNetConfig) -> Dict[str, tuple]:
    """Shapes of every parameter the network would allocate for `config`."""
    shapes = {}
    for i, (c_in, c_out) in enumerate(config.block_channels()):
        prefix = f"block{i}"
        channels = c_in * c_out
        shapes[f"{prefix}.kernel_mlp.w1"] = (config.rif_width, config.kernel_hidden)
        shapes[f"{prefix}.kernel_mlp.b1"] = (config.kernel_hidden,)
        shapes[f"{prefix}.kernel_mlp.w2"] = (config.kernel_hidden, channels)
        shapes[f"{prefix}.kernel_mlp.b2"] = (channels,)
        if config.attention:
            if config.attention_reduction > 1:
                width = bottleneck_width(channels, config.attention_reduction)
                shapes[f"{prefix}.attention_fc.w1"] = (channels, width)
                shapes[f"{prefix}.attention_fc.b1"] = (width,)
                shapes[f"{prefix}.attention_fc.w2"] = (width, channels)
                shapes[f"{prefix}.attention_fc.b2"] = (channels,)
            else:
                shapes[f"{prefix}.attention_fc.w"] = (channels, channels)
                shapes[f"{prefix}.attention_fc.b"] = (channels,)
        shapes[f"{prefix}.output_mlp.w"] = (c_out, c_out)
        shapes[f"{prefix}.output_mlp.b"] = (c_out,)
    shapes['gem.p'] = (1,)
    return shapes

def count_config_parameters(config: RprNetConfig) -> int:
    return int(sum(np.prod(shape) for shape in parameter_shapes(config).values()))

@dataclass
class PreparedCloud:
    """Seeds, grouping and RIFs of one cloud, shared by all blocks."""
    seeds: np.ndarray
    group: GroupIndex
    rifs: np.ndarray

class RprNet:
    """Stem, four densely wired ARIConv blocks, a fusion block and GeM pooling."""

    def __init__(self, config: RprNetConfig = None, seed: int = 0):
        self.config = config or RprNetConfig()
        rng = np.random.default_rng(seed)
        cfg = self.config
        self.blocks = [
            AriConvParams.create(f"block{i}", c_in, c_out, rng, k=cfg.k, rif_width=cfg.rif_width,
                                 hidden=cfg.kernel_hidden, reduction=cfg.attention_reduction,
                                 attention=cfg.attention, attention_pool=cfg.attention_pool)
            for i, (c_in, c_out) in enumerate(cfg.block_channels())
        ]
        self.gem_p = Parameter('gem.p', np.array([cfg.gem_p_init]))
        self.named_parameters()

    def parameters(self) -> List[Parameter]:
        params = []
        for block in self.blocks:
            params.extend(block.parameters())
        params.append(self.gem_p)
        return params

    def named_parameters(self) -> Dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ConfigError(f"Duplicate parameter name '{p.name}'")
            named[p.name] = p
        return named

    def prepare(self, cloud, group: GroupIndex = None) -> PreparedCloud:
        cfg = self.config
        points = as_cloud(cloud)
        if group is None:
            if points.shape[0] < cfg.n_seeds:
                raise InvalidCloud(f"Cloud has {points.shape[0]} points, the network needs at least {cfg.n_seeds}")
            group = build_group_index(points, cfg.n_seeds, cfg.k, cfg.fps_start)
        else:
            group.validate(points.shape[0])
        seeds = points[group.seed_ids]
        rifs = select_families(assemble_rifs(seeds, group, cfg.ss_sigma), cfg.use_ss, cfg.use_ilrif, cfg.use_glrif)
        return PreparedCloud(seeds=seeds, group=group, rifs=rifs)

    def point_features(self, prepared: PreparedCloud) -> Tensor:
        """Output of the fusion block, N_s × final_channels."""
        cfg = self.config
        n_s = prepared.group.n_seeds
        if cfg.stem_feature == StemFeature.Radial:
            stem_input = Tensor(np.linalg.norm(prepared.seeds, axis=1, keepdims=True))
        else:
            stem_input = Tensor(np.ones((n_s, 1)))
        rifs = Tensor(prepared.rifs)

        outputs = [ariconv_forward(stem_input, rifs, prepared.group, self.blocks[0])]
        for block in self.blocks[1:1 + NUM_DENSE_BLOCKS]:
            if cfg.dense:
                block_input = outputs[0]
                for previous in outputs[1:]:
                    block_input = block_input + previous
            else:
                block_input = outputs[-1]
            outputs.append(ariconv_forward(block_input, rifs, prepared.group, block))

        fusion_input = ad.concat(outputs[1:], axis=1) if cfg.dense else outputs[-1]
        return ariconv_forward(fusion_input, rifs, prepared.group, self.blocks[-1])

    def forward_prepared(self, prepared: PreparedCloud) -> Tensor:
        return gem_pool(self.point_features(prepared), self.gem_p)

    def forward(self, cloud, group: GroupIndex = None) -> Tensor:
        return self.forward_prepared(self.prepare(cloud, group))

    def embed(self, cloud, group: GroupIndex = None) -> np.ndarray:
        with ad.no_grad():
            return self.forward(cloud, group).data.copy()

    def embed_points(self, cloud, group: GroupIndex = None) -> np.ndarray:
        """Per-seed fusion features, in seed order."""
        with ad.no_grad():
            return self.point_features(self.prepare(cloud, group)).data.copy()

    def clamp_gem_p(self, minimum: float = 1.0, maximum: float = 64.0) -> None:
        np.clip(self.gem_p.data, minimum, maximum, out=self.gem_p.data)
