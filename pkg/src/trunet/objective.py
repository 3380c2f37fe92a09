"""Training objectives and Monte Carlo model averaging.

The conditional-continuous loss pairs a Bernoulli rain/no-rain likelihood with
a squared error on intensity::

    loss = mean_cells[ -(1{y>0} log r + 1{y=0} log(1 - r)) ] + mean_cells[ (y - yhat)^2 ]

Both means run jointly over days and grid cells.  Probabilities are clamped to
``[PROB_CLAMP, 1 - PROB_CLAMP]`` before the logarithm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .dropout import DropoutSpec
from .errors import ContractError, DataError, ShapeError
from .model import CCPrediction, crop_center
from .tensor import Tensor, no_grad

PROB_CLAMP = 1e-7


@dataclass
class LossBreakdown:
    total: Tensor
    bce_component: Tensor
    sq_component: Tensor
    cell_count: int

    def values(self) -> tuple[float, float, float]:
        return self.total.item(), self.bce_component.item(), self.sq_component.item()


def _target(target, like: Tensor) -> np.ndarray:
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if not np.isfinite(y).all() or (y < 0).any():
        raise DataError("rainfall targets must be finite and non-negative")
    return y.astype(like.dtype, copy=False)


def _fit(field: Tensor, shape: tuple) -> Tensor:
    """Center-crop ``field`` to ``shape`` when it is a larger stencil."""
    if field.shape == shape:
        return field
    square = len(shape) >= 2 and shape[-1] == shape[-2]
    if square and field.shape[:-2] == shape[:-2] and min(field.shape[-2:]) >= shape[-1]:
        return crop_center(field, shape[-1])
    raise ShapeError(f"prediction {field.shape} cannot be matched to target {shape}")


def cc_loss(pred: CCPrediction, target) -> LossBreakdown:
    """Conditional-continuous loss on the cells covered by ``target``.

    Predictions larger than the target in the last two axes are center-cropped
    first, so 16x16 stencil outputs can be scored against 4x4 targets.
    """
    if pred.rain_prob is None:
        raise ContractError("the conditional-continuous loss needs a rain-probability output")
    y = _target(target, pred.intensity)
    r = _fit(pred.rain_prob, y.shape)
    yhat = _fit(pred.intensity, y.shape)
    rd = r.data
    if np.isnan(rd).any() or (rd < 0).any() or (rd > 1).any():
        raise ContractError("rain probabilities must lie in [0, 1]")
    wet = (y > 0).astype(y.dtype)
    rc = ops.clip(r, PROB_CLAMP, 1.0 - PROB_CLAMP)
    # exactly one of the two terms is active per cell
    chosen = ops.add(ops.mul(rc, Tensor(wet)), ops.mul(ops.sub(1.0, rc), Tensor(1.0 - wet)))
    bce = ops.scale(ops.mean(ops.log(chosen)), -1.0)
    sq = ops.mean(ops.square(ops.sub(yhat, Tensor(y))))
    return LossBreakdown(ops.add(bce, sq), bce, sq, int(y.size))


def mse_loss(pred_intensity: Tensor, target) -> Tensor:
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred_intensity.shape != y.shape:
        raise ShapeError(f"prediction {pred_intensity.shape} and target {y.shape} differ")
    return ops.mean(ops.square(ops.sub(pred_intensity, Tensor(y.astype(pred_intensity.dtype, copy=False)))))


def intensity_loss(pred: CCPrediction, target) -> LossBreakdown:
    """Squared-error objective on the target cells, shaped like :func:`cc_loss`."""
    y = _target(target, pred.intensity)
    sq = mse_loss(_fit(pred.intensity, y.shape), y)
    return LossBreakdown(sq, Tensor(np.zeros((), dtype=y.dtype)), sq, int(y.size))


def mcma_average(probs: np.ndarray, intensities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Mean over axis 0 of the probability-gated intensity samples.

    Samples are sorted per cell before summation, so the result does not
    depend on the order in which samples were drawn.
    """
    probs = np.asarray(probs)
    intensities = np.asarray(intensities)
    if probs.shape != intensities.shape or probs.ndim < 1 or probs.shape[0] < 1:
        raise ShapeError(f"sample stacks must match and be non-empty: {probs.shape} vs {intensities.shape}")
    gated = np.where(probs > threshold, intensities, np.zeros((), dtype=intensities.dtype))
    return np.sort(gated, axis=0).sum(axis=0) / probs.shape[0]


def mcma_predict(model, x, samples: int, spec: Optional[DropoutSpec] = None, *,
                 threshold: float = 0.5, crop: Optional[int] = 4, stream: int = 0) -> Tensor:
    """Monte Carlo model averaging over ``samples`` dropout-masked passes.

    Sample ``i`` uses dropout substream ``(stream, i)``, so the result is a
    pure function of ``(spec.seed, samples, stream)``.  With dropout inactive
    every pass is identical and a single pass is evaluated.
    """
    if samples < 1:
        raise ContractError(f"MCMA needs at least one sample, got {samples}")
    if spec is not None and spec.mode == "train":
        raise ContractError("MCMA sampling uses mode 'mcma_sample' (or 'off')")
    stochastic = spec is not None and spec.active
    probs, values = [], []
    with no_grad():
        for i in range(samples if stochastic else 1):
            pred = model(x, spec if stochastic else None, (stream, i))
            if pred.rain_prob is None:
                raise ContractError("MCMA gating needs a conditional-continuous model")
            r, y = pred.rain_prob, pred.intensity
            if crop is not None:
                r, y = crop_center(r, crop), crop_center(y, crop)
            probs.append(r.data if isinstance(r, Tensor) else np.asarray(r))
            values.append(y.data if isinstance(y, Tensor) else np.asarray(y))
    return Tensor(mcma_average(np.stack(probs), np.stack(values), threshold))


__all__ = ["DropoutSpec", "LossBreakdown", "PROB_CLAMP", "cc_loss", "mse_loss", "intensity_loss",
           "mcma_average", "mcma_predict"]
