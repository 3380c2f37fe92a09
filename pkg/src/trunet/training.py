"""Seeded mini-batch training, prediction helpers and exhaustive grid search."""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .data import WeatherWindow, stack_windows
from .dropout import DropoutSpec
from .errors import ConfigError, ContractError, TrainingDiverged
from .metrics import evaluate, format_table
from .model import ModelConfig, build_model, crop_center, load_parameters, save_checkpoint, snapshot
from .objective import cc_loss, intensity_loss, mcma_predict
from .optim import Adam, OptimizerConfig
from .tensor import backward, no_grad

LOSSES = ("cc", "mse")


@dataclass
class EpochLog:
    epoch: int
    steps: int
    train_loss: float
    val_loss: float
    lr: float
    grad_norm: float              # largest pre-clip global norm seen in the epoch

    def line(self) -> str:
        return (f"epoch={self.epoch} steps={self.steps} train_loss={self.train_loss!r} "
                f"val_loss={self.val_loss!r} lr={self.lr!r} max_grad_norm={self.grad_norm!r}")


@dataclass
class TrainResult:
    log: list[EpochLog]
    step_losses: list[float]
    best_epoch: int
    best_val: float
    best_state: dict = field(repr=False)

    def text(self) -> str:
        lines = [e.line() for e in self.log]
        lines.append(f"best_epoch={self.best_epoch} best_val_loss={self.best_val!r}")
        return "\n".join(lines) + "\n"


def _objective(kind: str):
    if kind == "cc":
        return cc_loss
    if kind == "mse":
        return intensity_loss
    raise ContractError(f"loss must be one of {LOSSES}, got {kind!r}")


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def dataset_loss(model, windows: Sequence[WeatherWindow], loss: str = "cc", batch_size: int = 8) -> float:
    """Cell-weighted mean loss over ``windows`` without dropout."""
    objective = _objective(loss)
    x, y = stack_windows(windows)
    total = 0.0
    with no_grad():
        for idx in _batches(len(windows), batch_size, np.arange(len(windows))):
            total += objective(model(x[idx]), y[idx]).total.item() * len(idx)
    return total / len(windows)


def train(model, train_windows: Sequence[WeatherWindow], val_windows: Sequence[WeatherWindow],
          opt: OptimizerConfig, epochs: int, loss: str = "cc", dropout: Optional[DropoutSpec] = None,
          seed: int = 0, *, batch_size: int = 4, checkpoint: Optional[str | os.PathLike] = None,
          checkpoint_extra: Optional[dict] = None,
          on_step: Optional[Callable] = None) -> TrainResult:
    """Train ``model`` in place; on return it holds the parameters of the best validation epoch.

    Epoch ``e`` visits the training windows in the order of a permutation
    drawn from ``default_rng([seed, e])``; step ``k`` draws its dropout masks
    from substream ``(seed, k)``.  When ``checkpoint`` is given the model is
    saved there whenever validation loss improves.  A non-finite loss or
    gradient raises :class:`TrainingDiverged` carrying the best parameters so far.
    """
    if not train_windows or not val_windows:
        raise ContractError("training and validation splits must be non-empty")
    if loss == "cc" and not model.config.cc:
        raise ContractError("the conditional-continuous loss needs a model with a rain-probability head")
    if epochs < 1 or batch_size < 1:
        raise ContractError("epochs and batch_size must be positive")
    if dropout is not None and dropout.active and dropout.mode != "train":
        raise ContractError("training dropout must use mode 'train'")
    objective = _objective(loss)
    x, y = stack_windows(train_windows)
    optimizer = Adam(model.parameters(), opt)
    best_state = snapshot(model)
    best_val, best_epoch = math.inf, 0
    log, step_losses = [], []
    step = 0
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(train_windows))
        total, max_norm, info = 0.0, 0.0, None
        for idx in _batches(len(order), batch_size, order):
            step += 1
            for p in model.parameters():
                p.zero_grad()
            pred = model(x[idx], dropout, (seed, step))
            finite = all(np.isfinite(t.data).all() for t in (pred.intensity, pred.rain_prob) if t is not None)
            value = objective(pred, y[idx]).total if finite else None
            current = value.item() if finite else math.nan
            if not math.isfinite(current):
                load_parameters(model, best_state)
                raise TrainingDiverged(step, best_state)
            backward(value)
            info = optimizer.step()
            if not math.isfinite(info.grad_norm):
                load_parameters(model, best_state)
                raise TrainingDiverged(step, best_state)
            step_losses.append(current)
            total += current * len(idx)
            max_norm = max(max_norm, info.grad_norm)
            if on_step is not None:
                on_step(step, current, info)
        val = dataset_loss(model, val_windows, loss)
        log.append(EpochLog(epoch, step, total / len(order), val, info.lr, max_norm))
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_state = snapshot(model)
            if checkpoint is not None:
                save_checkpoint(model, checkpoint, checkpoint_extra)
    load_parameters(model, best_state)
    return TrainResult(log, step_losses, best_epoch, best_val, best_state)


def predict_windows(model, windows: Sequence[WeatherWindow], samples: int = 1,
                    dropout: Optional[DropoutSpec] = None, *, target: int = 4,
                    batch_size: int = 8) -> np.ndarray:
    """Central ``target`` x ``target`` daily predictions for each window, shape (N, days, t, t).

    CC models are gated by their rain probability (MCMA over ``samples``
    passes); intensity-only models return their intensity directly.
    """
    x, _ = stack_windows(windows)
    out = []
    for b, idx in enumerate(_batches(len(windows), batch_size, np.arange(len(windows)))):
        if model.config.cc:
            out.append(mcma_predict(model, x[idx], samples, dropout, crop=target, stream=b).data)
        else:
            with no_grad():
                out.append(crop_center(model(x[idx]).intensity, target).data)
    return np.concatenate(out)


def climatology(windows: Sequence[WeatherWindow]) -> dict[int, np.ndarray]:
    """Per-location, per-cell mean daily rainfall of ``windows``."""
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for w in windows:
        sums[w.location] = sums.get(w.location, 0.0) + w.y.astype(np.float64).sum(axis=0)
        counts[w.location] = counts.get(w.location, 0) + w.y.shape[0]
    return {loc: sums[loc] / counts[loc] for loc in sums}


def climatology_predictions(train_windows, windows) -> np.ndarray:
    clim = climatology(train_windows)
    overall = np.mean([w.y.astype(np.float64).mean() for w in train_windows])
    return np.stack([np.broadcast_to(clim.get(w.location, overall), w.y.shape) for w in windows])


# ---------------------------------------------------------------- grid search

@dataclass
class GridRow:
    trial: int
    settings: dict
    r10_rmse: Optional[float]
    rmse: float
    mae: float
    val_loss: float


def _split_settings(settings: Mapping, model_config: ModelConfig, opt: OptimizerConfig):
    model_keys = {f.name for f in fields(model_config)}
    opt_keys = {f.name for f in fields(opt)}
    m, o = {}, {}
    for key, value in settings.items():
        if key in opt_keys:
            o[key] = value
        elif key in model_keys:
            m[key] = value
        else:
            raise ConfigError(f"unknown grid hyperparameter {key!r}")
    return replace(model_config, **m), replace(opt, **o)


def grid_search(grid: Mapping[str, Sequence], train_windows, val_windows, model_config: ModelConfig,
                opt: OptimizerConfig, *, epochs: int = 1, loss: str = "cc", budget: int = 16,
                seed: int = 0, batch_size: int = 4,
                dropout: Optional[DropoutSpec] = None) -> list[GridRow]:
    """Train one model per grid combination and rank by validation R10 RMSE (ascending).

    Keys may name optimizer or model-config fields.  Trials with no cell
    above 10 mm/day in validation sort last, then by RMSE.
    """
    keys = list(grid)
    combos = list(itertools.product(*(list(grid[k]) for k in keys))) if keys else []
    if not combos:
        raise ContractError("grid search needs at least one combination")
    if len(combos) > budget:
        raise ContractError(f"{len(combos)} combinations exceed the budget of {budget}")
    obs = np.stack([w.y for w in val_windows])
    rows = []
    for trial, values in enumerate(combos):
        settings = dict(zip(keys, values))
        cfg, trial_opt = _split_settings(settings, model_config, opt)
        model = build_model(cfg)
        result = train(model, train_windows, val_windows, trial_opt, epochs, loss, dropout, seed,
                       batch_size=batch_size)
        report = evaluate(predict_windows(model, val_windows), obs)
        rows.append(GridRow(trial, settings, report.r10_rmse, report.rmse, report.mae, result.best_val))
    rows.sort(key=lambda r: (r.r10_rmse is None, r.r10_rmse if r.r10_rmse is not None else r.rmse,
                             r.trial))
    return rows


def grid_table(rows: Sequence[GridRow]) -> str:
    keys = list(rows[0].settings) if rows else []
    header = ["rank", *keys, "r10_rmse", "rmse", "mae", "val_loss"]
    body = []
    for rank, r in enumerate(rows, 1):
        r10 = "undefined" if r.r10_rmse is None else f"{r.r10_rmse:.4f}"
        body.append([str(rank), *(str(r.settings[k]) for k in keys), r10, f"{r.rmse:.4f}",
                     f"{r.mae:.4f}", f"{r.val_loss:.4f}"])
    return format_table(header, body)
