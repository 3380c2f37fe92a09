"""Evaluation metrics, cross-correlation diagnostics and binned scatter statistics.

Sums are taken over sorted values so every metric is invariant, bit for
bit, under any permutation of the cells being scored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.signal import detrend

from .data import SEASONS
from .errors import ContractError, DataError, ShapeError

R10_THRESHOLD = 10.0
UNDEFINED = "undefined"


def _ordered_mean(values: np.ndarray) -> float:
    return float(np.sort(values).sum() / values.size)


@dataclass
class EvalReport:
    rmse: float
    r10_rmse: Optional[float]     # None when no observation reaches 10 mm/day
    mae: float
    me: float
    count: int
    r10_count: int
    seasons: dict[str, "EvalReport"] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, "EvalReport"]]:
        return [("all", self)] + list(self.seasons.items())

    def table(self) -> str:
        """Aligned plain-text table, one row per bucket."""
        header = ("bucket", "rmse", "r10_rmse", "mae", "me", "count", "r10_count")
        body = [(name, f"{r.rmse:.6f}", _fmt(r.r10_rmse), f"{r.mae:.6f}", f"{r.me:.6f}",
                 str(r.count), str(r.r10_count)) for name, r in self.rows()]
        return format_table(header, body)

    def manifest(self) -> dict[str, str]:
        out = {}
        for name, r in self.rows():
            out[f"{name}.rmse"] = repr(r.rmse)
            out[f"{name}.r10_rmse"] = UNDEFINED if r.r10_rmse is None else repr(r.r10_rmse)
            out[f"{name}.mae"] = repr(r.mae)
            out[f"{name}.me"] = repr(r.me)
            out[f"{name}.count"] = str(r.count)
            out[f"{name}.r10_count"] = str(r.r10_count)
        return out


def _fmt(value: Optional[float]) -> str:
    return UNDEFINED if value is None else f"{value:.6f}"


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(c).rjust(w) for c, w in zip(line, widths)) for line in [header, *rows]]
    return "\n".join(lines) + "\n"


def _bucket(p: np.ndarray, o: np.ndarray) -> EvalReport:
    err = p - o
    wet = o >= R10_THRESHOLD
    r10 = math.sqrt(_ordered_mean(np.square(err[wet]))) if wet.any() else None
    return EvalReport(rmse=math.sqrt(_ordered_mean(np.square(err))), r10_rmse=r10,
                      mae=_ordered_mean(np.abs(err)), me=_ordered_mean(err),
                      count=int(err.size), r10_count=int(wet.sum()))


def evaluate(predictions, observations, seasons=None) -> EvalReport:
    """RMSE, R10 RMSE (observations of at least 10 mm/day), MAE and signed ME.

    ``seasons`` optionally labels every cell; a sub-report is produced for each
    of DJF/MAM/JJA/SON that has cells.
    """
    p = np.asarray(predictions, dtype=np.float64).ravel()
    o = np.asarray(observations, dtype=np.float64).ravel()
    if p.shape != o.shape:
        raise ShapeError(f"{p.size} predictions vs {o.size} observations")
    if p.size == 0:
        raise ContractError("nothing to evaluate")
    if not np.isfinite(o).all() or (o < 0).any():
        raise DataError("observations must be finite and non-negative")
    report = _bucket(p, o)
    if seasons is not None:
        labels = np.broadcast_to(np.asarray(seasons), np.shape(observations)).ravel()
        if labels.size != o.size:
            raise ShapeError("one season label per cell is required")
        for name in SEASONS:
            mask = labels == name
            if mask.any():
                report.seasons[name] = _bucket(p[mask], o[mask])
    return report


# ---------------------------------------------------------------- cross-correlation

@dataclass
class XcfResult:
    lags: np.ndarray
    values: Optional[np.ndarray]  # None when either detrended series is constant
    threshold: float

    @property
    def defined(self) -> bool:
        return self.values is not None


def xcf(series_a, series_b, max_lag: int = 28) -> XcfResult:
    """Pearson correlation of ``a[t]`` with ``b[t + k]`` for k = 0..max_lag after linear detrending.

    The 5% significance threshold is reported as ``1.96 / sqrt(N)``.
    """
    a = np.asarray(series_a, dtype=np.float64).ravel()
    b = np.asarray(series_b, dtype=np.float64).ravel()
    n = a.size
    if b.size != n:
        raise ShapeError("series lengths differ")
    if n <= max_lag + 2:
        raise ContractError(f"need more than {max_lag + 2} points, got {n}")
    lags = np.arange(max_lag + 1)
    threshold = 1.96 / math.sqrt(n)
    da, db = detrend(a, type="linear"), detrend(b, type="linear")
    for raw, res in ((a, da), (b, db)):
        if np.linalg.norm(res) <= 1e-10 * max(np.linalg.norm(raw), 1e-300):
            return XcfResult(lags, None, threshold)
    values = np.empty(max_lag + 1)
    for k in lags:
        x, y = da[:n - k], db[k:]
        x = x - x.mean()
        y = y - y.mean()
        values[k] = np.dot(x, y) / math.sqrt(np.dot(x, x) * np.dot(y, y))
    return XcfResult(lags, values, threshold)


# ---------------------------------------------------------------- scatter statistics

@dataclass
class ScatterBin:
    index: int
    low: float
    high: float
    count: int
    mean: float
    std: float
    log_mean: float               # statistics of log1p(prediction)
    log_std: float


def scatter_stats(predictions, observations, bin_width: float = 3.0) -> list[ScatterBin]:
    """Per-bin prediction mean/std with observations binned as ``floor(o / bin_width)``.

    Only non-empty bins are returned, in ascending order.
    """
    p = np.asarray(predictions, dtype=np.float64).ravel()
    o = np.asarray(observations, dtype=np.float64).ravel()
    if p.size == 0 or p.shape != o.shape:
        raise ContractError("scatter statistics need equally sized, non-empty inputs")
    if not bin_width > 0:
        raise ContractError("bin width must be positive")
    idx = np.floor(o / bin_width).astype(np.int64)
    out = []
    for k in np.unique(idx):
        vals = np.sort(p[idx == k])
        logs = np.log1p(vals)
        out.append(ScatterBin(int(k), k * bin_width, (k + 1) * bin_width, int(vals.size),
                              float(vals.mean()), float(vals.std()), float(logs.mean()), float(logs.std())))
    return out


def scatter_table(bins: Sequence[ScatterBin]) -> str:
    header = ("low", "high", "count", "mean", "std", "log1p_mean", "log1p_std")
    rows = [(f"{b.low:g}", f"{b.high:g}", str(b.count), f"{b.mean:.4f}", f"{b.std:.4f}",
             f"{b.log_mean:.4f}", f"{b.log_std:.4f}") for b in bins]
    return format_table(header, rows)
