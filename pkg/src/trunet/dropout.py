"""Inverted-dropout masks for the three dropout sites of the recurrent layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError

MODES = ("train", "mcma_sample", "off")
KINDS = ("input", "recurrent", "attention")


@dataclass(frozen=True)
class DropoutSpec:
    """Dropout probabilities, seed and mode.

    Masks are Bernoulli(1 - p) scaled by 1 / (1 - p), so the expected value of
    a masked activation equals the unmasked one.
    """

    p_input: float = 0.0
    p_recurrent: float = 0.0
    p_attention: float = 0.0
    seed: int = 0
    mode: str = "off"

    def __post_init__(self):
        for name in ("p_input", "p_recurrent", "p_attention"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {p}")
        if self.mode not in MODES:
            raise ConfigError(f"dropout mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit value, got {self.seed}")

    @property
    def active(self) -> bool:
        return self.mode != "off" and max(self.p_input, self.p_recurrent, self.p_attention) > 0.0

    def probability(self, kind: str) -> float:
        return {"input": self.p_input, "recurrent": self.p_recurrent,
                "attention": self.p_attention}[kind]

    def sampler(self, *stream: int) -> Optional["DropoutSampler"]:
        """Mask source for one forward pass; ``stream`` selects an independent substream."""
        if not self.active:
            return None
        seq = np.random.SeedSequence([int(self.seed)] + [int(s) for s in stream])
        return DropoutSampler(self, np.random.default_rng(seq))

    def with_mode(self, mode: str) -> "DropoutSpec":
        return DropoutSpec(self.p_input, self.p_recurrent, self.p_attention, self.seed, mode)


class DropoutSampler:
    """Draws masks in call order from a single generator."""

    def __init__(self, spec: DropoutSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng

    def mask(self, kind: str, shape: tuple, dtype=np.float64) -> Optional[np.ndarray]:
        p = self.spec.probability(kind)
        if p == 0.0:
            return None
        keep = self.rng.random(shape) >= p
        return (keep * (1.0 / (1.0 - p))).astype(dtype)
