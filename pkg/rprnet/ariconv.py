# Copyright (c) rprnet contributors

from dataclasses import dataclass
import logging
from typing import List, Optional

import numpy as np

from rprnet import autodiff as ad
from rprnet.api import AttentionPool, ShapeError
from rprnet.autodiff import Parameter, Tensor
from rprnet.geometry import GroupIndex

log = logging.getLogger(__name__)

MIN_BOTTLENECK = 8

def bottleneck_width(channels: int, reduction: int) -> int:
    return max(channels // reduction, MIN_BOTTLENECK)

@dataclass
class AriConvParams:
    """Weights of one attentive rotation-invariant convolution block.

    kernel_mlp maps the RIF channels of a slot to C_in*C_out kernel entries,
    attention_fc gates those C_in*C_out channels, output_mlp mixes the
    convolved C_out features.
    """
    c_in: int
    c_out: int
    kernel_w1: Parameter
    kernel_b1: Parameter
    kernel_w2: Parameter
    kernel_b2: Parameter
    output_w: Parameter
    output_b: Parameter
    attention_w1: Optional[Parameter] = None
    attention_b1: Optional[Parameter] = None
    attention_w2: Optional[Parameter] = None
    attention_b2: Optional[Parameter] = None
    attention_pool: AttentionPool = AttentionPool.All

    @property
    def attention(self) -> bool:
        return self.attention_w1 is not None

    @classmethod
    def create(cls, prefix: str, c_in: int, c_out: int, rng: np.random.Generator, k: int,
               rif_width: int = 11, hidden: int = 64, reduction: int = 16, attention: bool = True,
               attention_pool: AttentionPool = AttentionPool.All) -> 'AriConvParams':
        channels = c_in * c_out

        def normal(name, shape, std):
            return Parameter(f"{prefix}.{name}", rng.normal(0.0, std, size=shape))

        def zeros(name, shape):
            return Parameter(f"{prefix}.{name}", np.zeros(shape))

        # kernel entries are summed over K*C_in terms by the convolution
        kernel_std = np.sqrt(1.0 / hidden) * np.sqrt(2.0 / (k * c_in))
        params = dict(
            c_in=c_in,
            c_out=c_out,
            kernel_w1=normal('kernel_mlp.w1', (rif_width, hidden), np.sqrt(2.0 / rif_width)),
            kernel_b1=zeros('kernel_mlp.b1', (hidden,)),
            kernel_w2=normal('kernel_mlp.w2', (hidden, channels), kernel_std),
            kernel_b2=zeros('kernel_mlp.b2', (channels,)),
            output_w=normal('output_mlp.w', (c_out, c_out), np.sqrt(2.0 / c_out)),
            output_b=zeros('output_mlp.b', (c_out,)),
            attention_pool=AttentionPool(attention_pool),
        )
        if attention:
            if reduction > 1:
                width = bottleneck_width(channels, reduction)
                params.update(
                    attention_w1=normal('attention_fc.w1', (channels, width), np.sqrt(2.0 / channels)),
                    attention_b1=zeros('attention_fc.b1', (width,)),
                    attention_w2=normal('attention_fc.w2', (width, channels), np.sqrt(1.0 / width)),
                    attention_b2=zeros('attention_fc.b2', (channels,)),
                )
            else:
                params.update(
                    attention_w1=normal('attention_fc.w', (channels, channels), np.sqrt(1.0 / channels)),
                    attention_b1=zeros('attention_fc.b', (channels,)),
                )
        return cls(**params)

    def parameters(self) -> List[Parameter]:
        candidates = [self.kernel_w1, self.kernel_b1, self.kernel_w2, self.kernel_b2,
                      self.attention_w1, self.attention_b1, self.attention_w2, self.attention_b2,
                      self.output_w, self.output_b]
        return [p for p in candidates if p is not None]

def generate_kernels(rifs, params: AriConvParams) -> Tensor:
    """Shared two-layer map from each slot's RIF vector to its raw kernel."""
    rifs = ad.as_tensor(rifs)
    if rifs.data.ndim != 3 or rifs.shape[-1] != params.kernel_w1.shape[0]:
        raise ShapeError("RIF block does not match the kernel MLP input", rifs.shape, params.kernel_w1.shape)
    hidden = ad.relu(rifs @ params.kernel_w1 + params.kernel_b1)
    return hidden @ params.kernel_w2 + params.kernel_b2

def attention_gate(kernel_hat: Tensor, params: AriConvParams) -> Tensor:
    """sigmoid(fc(avg_pool(kernel_hat))): one gate per latent channel, or per seed and channel."""
    if params.attention_pool == AttentionPool.All:
        pooled = ad.reduce_mean(kernel_hat, axes=(0, 1))
    else:
        pooled = ad.reduce_mean(kernel_hat, axes=1)
    logits = pooled @ params.attention_w1 + params.attention_b1
    if params.attention_w2 is not None:
        logits = ad.relu(logits) @ params.attention_w2 + params.attention_b2
    return ad.sigmoid(logits)

def attend_kernels(kernel_hat: Tensor, params: AriConvParams) -> Tensor:
    channels = params.c_in * params.c_out
    if kernel_hat.data.ndim != 3 or kernel_hat.shape[-1] != channels:
        raise ShapeError(f"Raw kernels must be N_s×K×{channels}", kernel_hat.shape)
    if not params.attention:
        return kernel_hat
    gate = attention_gate(kernel_hat, params)
    if params.attention_pool == AttentionPool.K:
        gate = ad.reshape(gate, (gate.shape[0], 1, channels))
    return kernel_hat * gate

def convolve(kernels: Tensor, grouped_features: Tensor, c_in: int, c_out: int) -> Tensor:
    """f_n(n, o) = sum over k and i of kernel(n, k, i, o) * f_sg(n, k, i)."""
    kernels = ad.as_tensor(kernels)
    grouped_features = ad.as_tensor(grouped_features)
    n_s, k = grouped_features.shape[:2]
    if grouped_features.shape != (n_s, k, c_in) or kernels.shape != (n_s, k, c_in * c_out):
        raise ShapeError("Kernels and grouped features disagree", kernels.shape, grouped_features.shape)
    kernels = ad.reshape(kernels, (n_s, k, c_in, c_out))
    return ad.einsum('nkio,nki->no', kernels, grouped_features)

def ariconv_forward(seed_features, rifs, group: GroupIndex, params: AriConvParams) -> Tensor:
    seed_features = ad.as_tensor(seed_features)
    if seed_features.shape != (group.n_seeds, params.c_in):
        raise ShapeError(f"Seed features must be N_s×{params.c_in}", seed_features.shape)
    grouped = ad.gather(seed_features, group.neighbor_ids)
    kernel_hat = generate_kernels(rifs, params)
    kernels = attend_kernels(kernel_hat, params)
    convolved = convolve(kernels, grouped, params.c_in, params.c_out)
    return ad.relu(convolved @ params.output_w + params.output_b)
