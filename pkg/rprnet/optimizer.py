# Copyright (c) rprnet contributors

from dataclasses import dataclass, field
import logging
import math
from typing import Dict, Sequence

import numpy as np

from rprnet.api import ConfigError, InvalidArgument, NumericalError
from rprnet.autodiff import Parameter

log = logging.getLogger(__name__)

# PyTorch's RAdam switches to the rectified update once rho_t exceeds 5
RECTIFY_THRESHOLD = 5.0

@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_decay: float = 1.0

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ConfigError(f"optim.lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"optim betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0.0 or self.weight_decay < 0.0 or self.lr_decay <= 0.0:
            raise ConfigError("optim.eps and optim.lr_decay must be positive, optim.weight_decay non-negative")

@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray

@dataclass
class OptimizerState:
    step: int = 0
    lr: float = 1e-3
    moments: Dict[str, MomentState] = field(default_factory=dict)

class RAdam:
    """Adam with the variance rectification schedule.

    While the approximated SMA length rho_t is at most 5 the update is plain
    bias-corrected momentum; afterwards the adaptive step is scaled by the
    rectification term r_t.
    """

    def __init__(self, params: Sequence[Parameter], config: OptimizerConfig = None):
        self.config = config or OptimizerConfig()
        self.params = [p for p in params if p.trainable]
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise InvalidArgument("Parameter names must be unique")
        self.state = OptimizerState(lr=self.config.lr, moments={
            p.name: MomentState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params
        })
        self.rho_inf = 2.0 / (1.0 - self.config.beta2) - 1.0

    @property
    def lr(self) -> float:
        return self.state.lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def decay_lr(self) -> None:
        self.state.lr *= self.config.lr_decay

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                log.error(f"Non-finite gradient in '{p.name}', skipping optimizer step {self.state.step + 1}")
                raise NumericalError("Non-finite gradient", p.name)

        cfg = self.config
        self.state.step += 1
        t = self.state.step
        bias1 = 1.0 - cfg.beta1 ** t
        bias2 = 1.0 - cfg.beta2 ** t
        rho_t = self.rho_inf - 2.0 * t * cfg.beta2 ** t / bias2
        rectified = rho_t > RECTIFY_THRESHOLD
        if rectified:
            r_t = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * self.rho_inf /
                            ((self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho_t))

        for p in self.params:
            grad = p.grad
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * p.data
            moment = self.state.moments[p.name]
            moment.m = cfg.beta1 * moment.m + (1.0 - cfg.beta1) * grad
            moment.v = cfg.beta2 * moment.v + (1.0 - cfg.beta2) * grad * grad
            m_hat = moment.m / bias1
            if rectified:
                adaptive = math.sqrt(bias2) / (np.sqrt(moment.v) + cfg.eps)
                p.data -= self.state.lr * r_t * m_hat * adaptive
            else:
                p.data -= self.state.lr * m_hat

    def state_dict(self) -> OptimizerState:
        return self.state

    def load_state_dict(self, state: OptimizerState) -> None:
        for p in self.params:
            moment = state.moments.get(p.name)
            if moment is None or moment.m.shape != p.shape or moment.v.shape != p.shape:
                raise InvalidArgument(f"Optimizer state does not match parameter '{p.name}'")
        self.state = state
