"""Adam / rectified Adam with global-norm clipping and linear warmup."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Parameter

VARIANTS = ("adam", "rectified_adam")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.9
    clip_norm: float = 4.5
    warmup_steps: int = 0
    variant: str = "adam"
    eps: float = 1e-7

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")

    def lr_at(self, step: int) -> float:
        """Learning rate for the 1-based update ``step``."""
        if step < self.warmup_steps:
            return self.learning_rate * step / self.warmup_steps
        return self.learning_rate


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_by_global_norm(grads: Sequence[np.ndarray], clip_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by ``clip_norm / norm`` when the joint L2 norm exceeds ``clip_norm``."""
    norm = global_norm(grads)
    if norm <= clip_norm or norm == 0:
        return list(grads), norm
    scale = clip_norm / norm
    return [g * np.asarray(scale, dtype=g.dtype) for g in grads], norm


@dataclass
class StepInfo:
    step: int
    lr: float
    grad_norm: float
    clipped_norm: float


class Adam:
    """Adam, optionally with variance rectification.

    Gradients missing on a parameter count as zero.  With an effective learning
    rate of exactly 0 the parameters are left untouched.
    """

    def __init__(self, params: Sequence[Parameter], config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def _rectifier(self) -> float | None:
        """Variance rectification term, or None while the variance estimate is unreliable."""
        b2 = self.config.beta2
        rho_inf = 2.0 / (1.0 - b2) - 1.0
        bt = b2 ** self.t
        rho = rho_inf - 2.0 * self.t * bt / (1.0 - bt)
        if rho <= 4.0:
            return None
        return math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))

    def step(self) -> StepInfo:
        cfg = self.config
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        grads, norm = clip_by_global_norm(grads, cfg.clip_norm)
        clipped = global_norm(grads)
        lr = cfg.lr_at(self.t)
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        rect = self._rectifier() if cfg.variant == "rectified_adam" else 1.0
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(g)
            if lr == 0:
                continue
            m_hat = m / c1
            if rect is None:
                update = lr * m_hat
            else:
                update = (lr * rect) * m_hat / (np.sqrt(v / c2) + cfg.eps)
            p.data -= update.astype(p.dtype, copy=False)
        return StepInfo(self.t, lr, norm, clipped)

