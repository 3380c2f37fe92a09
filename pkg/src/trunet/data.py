"""Synthetic gridded weather, stencil windows and normalization.

The generator draws a smooth latent field ``z`` on the coarse grid: spatially
correlated Gaussian noise (periodic, spectral Gaussian smoothing with length
scale ``length_scale`` cells) evolved as a stationary AR(1) process over
six-hourly steps.  Six coarse "model fields" are functionals of ``z``.

Daily rainfall on the fine grid follows a conditional-continuous law.  The
daily mean of ``z`` is bilinearly upsampled and standardized exactly (its
variance is known in closed form), giving ``L``.  A cell is wet when
``sqrt(k) L + sqrt(1-k) e > ndtri(1 - r)`` with ``e`` iid standard normal, so
the marginal wet probability is exactly ``r``.  Wet amounts are Gaussian with
unit variance around ``mu * exp(g L - g^2 / 2)``, truncated to be positive.
"""

from __future__ import annotations

import datetime as dt
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ConfigError, ContractError, DataError, FormatError, PlacementError
from .gridfile import read_grid_file, read_manifest, write_grid_file, write_manifest
from .ops import bilinear_resample, interp_weights

STEPS_PER_DAY = 4
WINDOW_DAYS = 28
STENCIL = 16
TARGET = 4
CHANNELS = 6
SEASONS = ("DJF", "MAM", "JJA", "SON")
_RAIN_FLOOR = np.finfo(np.float32).tiny

FieldSpec = Union[None, float, np.ndarray]


def _field(value: FieldSpec, shape: tuple[int, int], default: np.ndarray) -> np.ndarray:
    if value is None:
        return default
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(shape, float(arr))
    if arr.shape != shape:
        raise ConfigError(f"field of shape {arr.shape} does not match fine grid {shape}")
    return arr


@dataclass(frozen=True, eq=False)
class SyntheticConfig:
    """Generator settings.  ``rain_prob`` is the per-cell wet-day probability ``r``.

    ``rain_prob`` and ``intensity_mean`` accept a scalar, a fine-grid array or
    None for the built-in smooth maps.
    """

    rain_prob: FieldSpec = None
    intensity_mean: FieldSpec = None
    rho: float = 0.8
    length_scale: float = 1.5
    coupling: float = 0.8
    intensity_gain: float = 0.5
    coarse: tuple[int, int] = (20, 21)
    fine: tuple[int, int] = (100, 140)
    start: dt.date = dt.date(2000, 1, 1)
    seed: int = 0

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ConfigError(f"AR coefficient must satisfy |rho| < 1, got {self.rho}")
        if not self.length_scale > 0:
            raise ConfigError("spatial correlation length must be positive")
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError("latent coupling must lie in [0, 1]")
        if not np.isfinite(self.intensity_gain):
            raise ConfigError("intensity gain must be finite")
        if len(self.coarse) != 2 or len(self.fine) != 2 or min(self.coarse) < 2:
            raise ConfigError("grids must be 2-D with at least 2 coarse cells per axis")
        if self.fine[0] < self.coarse[0] or self.fine[1] < self.coarse[1]:
            raise ConfigError("fine grid must not be coarser than the coarse grid")
        r = self.wet_probability()
        if not np.isfinite(r).all() or (r < 0).any() or (r > 1).any():
            raise ConfigError("wet probabilities must lie in [0, 1]")
        mu = self.mean_field()
        if not np.isfinite(mu).all() or (mu <= 0).any():
            raise ConfigError("intensity means must be positive")

    @classmethod
    def micro(cls, **kwargs) -> "SyntheticConfig":
        """Small geometry (coarse 5x5, fine 20x20) with the same generator."""
        kwargs.setdefault("coarse", (5, 5))
        kwargs.setdefault("fine", (20, 20))
        kwargs.setdefault("length_scale", 1.0)
        return cls(**kwargs)

    def _grid(self) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.fine
        return np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")

    def wet_probability(self) -> np.ndarray:
        yy, xx = self._grid()
        default = 0.3 + 0.1 * np.sin(2 * np.pi * xx) * np.cos(np.pi * yy)
        return _field(self.rain_prob, tuple(self.fine), default)

    def mean_field(self) -> np.ndarray:
        yy, xx = self._grid()
        return _field(self.intensity_mean, tuple(self.fine), 4.0 + 3.0 * yy + xx)

    def with_seed(self, seed: int) -> "SyntheticConfig":
        return replace(self, seed=seed)


@dataclass
class GridSeries:
    coarse_fields: np.ndarray     # (4T, Hc, Wc, 6) float32
    fine_rain: np.ndarray         # (T, Hf, Wf) float32, mm/day
    start: dt.date
    steps_per_day: int = STEPS_PER_DAY

    def __post_init__(self):
        if self.coarse_fields.ndim != 4 or self.fine_rain.ndim != 3:
            raise DataError("coarse fields must be (steps, H, W, C) and rain (days, H, W)")
        if self.coarse_fields.shape[0] != self.steps_per_day * self.fine_rain.shape[0]:
            raise DataError(f"{self.coarse_fields.shape[0]} coarse steps do not cover "
                            f"{self.fine_rain.shape[0]} days")
        if (self.fine_rain < 0).any():
            raise DataError("fine rainfall must be non-negative")

    @property
    def days(self) -> int:
        return self.fine_rain.shape[0]

    @property
    def fine_shape(self) -> tuple[int, int]:
        return self.fine_rain.shape[1], self.fine_rain.shape[2]

    @property
    def dates(self) -> np.ndarray:
        return np.datetime64(self.start, "D") + np.arange(self.days)

    @property
    def timestamps(self) -> np.ndarray:
        hours = 24 // self.steps_per_day
        base = np.datetime64(self.start, "h")
        return base + np.arange(self.coarse_fields.shape[0]) * np.timedelta64(hours, "h")


@dataclass
class WeatherWindow:
    x: np.ndarray                 # (days*4, S, S, 6)
    y: np.ndarray                 # (days, s, s)
    location: int
    start: np.datetime64          # first day
    day_index: int = 0

    @property
    def days(self) -> int:
        return self.y.shape[0]

    @property
    def end(self) -> np.datetime64:
        """Last day covered (inclusive)."""
        return self.start + (self.days - 1)


# ---------------------------------------------------------------- generation

def _spectral_filter(shape: tuple[int, int], scale: float) -> np.ndarray:
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    return np.exp(-2.0 * (np.pi * scale) ** 2 * (fy ** 2 + fx ** 2))


def _smooth_noise(rng: np.random.Generator, n: int, shape: tuple[int, int], filt: np.ndarray) -> np.ndarray:
    """Unit-variance periodic Gaussian fields, one per leading index."""
    white = rng.standard_normal((n,) + shape)
    out = np.fft.ifft2(np.fft.fft2(white) * filt).real
    return out / np.sqrt(np.mean(filt ** 2))


def _spatial_covariance(shape: tuple[int, int], filt: np.ndarray) -> np.ndarray:
    """cov[dy, dx] between unit-variance smoothed cells offset by (dy, dx)."""
    power = filt ** 2
    return np.fft.ifft2(power).real / np.mean(power)


def _daily_mean_variance(rho: float, steps: int) -> float:
    lags = np.abs(np.subtract.outer(np.arange(steps), np.arange(steps)))
    return float(np.sum(rho ** lags)) / steps ** 2


def latent_std(config: SyntheticConfig) -> np.ndarray:
    """Exact per-fine-cell std of the upsampled daily-mean latent."""
    hc, wc = config.coarse
    cov = _spatial_covariance((hc, wc), _spectral_filter((hc, wc), config.length_scale))
    ly, hy, fy = interp_weights(hc, config.fine[0])
    lx, hx, fx = interp_weights(wc, config.fine[1])
    taps_y = [(ly, 1 - fy), (hy, fy)]
    taps_x = [(lx, 1 - fx), (hx, fx)]
    var = np.zeros(config.fine)
    for ia, wa in taps_y:
        for ib, wb in taps_y:
            dy = (ia[:, None] - ib[:, None]) % hc
            for ja, va in taps_x:
                for jb, vb in taps_x:
                    dx = (ja[None, :] - jb[None, :]) % wc
                    var += (wa * wb)[:, None] * (va * vb)[None, :] * cov[dy, dx]
    return np.sqrt(var * _daily_mean_variance(config.rho, STEPS_PER_DAY))


def coarse_model_fields(z: np.ndarray, start: dt.date) -> np.ndarray:
    """Six predictors from the latent sequence ``z`` of shape (steps + 1, H, W).

    Channels: current latent, one-step lag, zonal and meridional periodic
    gradients, a diagonally shifted copy and a seasonal cycle.
    """
    cur, lag = z[1:], z[:-1]
    gx = 0.5 * (np.roll(cur, -1, axis=2) - np.roll(cur, 1, axis=2))
    gy = 0.5 * (np.roll(cur, -1, axis=1) - np.roll(cur, 1, axis=1))
    shifted = np.roll(cur, (1, 1), axis=(1, 2))
    steps = cur.shape[0]
    doy = (start.timetuple().tm_yday - 1) + np.arange(steps) / STEPS_PER_DAY
    season = np.broadcast_to(np.cos(2 * np.pi * doy / 365.25)[:, None, None], cur.shape)
    return np.stack([cur, lag, gx, gy, shifted, season], axis=-1).astype(np.float32)


def _truncated_normal(rng: np.random.Generator, mean: np.ndarray) -> np.ndarray:
    """Draws of N(mean, 1) conditioned on being positive (inverse-CDF)."""
    u = 1.0 - rng.random(mean.shape)                  # (0, 1]
    return np.maximum(mean - ndtri(u * ndtr(mean)), _RAIN_FLOOR)


def synth_generate(config: SyntheticConfig, days: int) -> GridSeries:
    """Deterministic synthetic series of ``days`` days for ``config``."""
    if days < WINDOW_DAYS:
        raise ContractError(f"need at least {WINDOW_DAYS} days, got {days}")
    hc, wc = config.coarse
    steps = days * STEPS_PER_DAY
    filt = _spectral_filter((hc, wc), config.length_scale)
    # independent streams so each stage is stable under changes to the others
    rng_latent, rng_wet, rng_amount = (np.random.default_rng([config.seed, k]) for k in range(3))

    noise = _smooth_noise(rng_latent, steps + 1, (hc, wc), filt)
    z = np.empty_like(noise)
    z[0] = noise[0]
    innov = np.sqrt(1.0 - config.rho ** 2)
    for t in range(1, steps + 1):
        z[t] = config.rho * z[t - 1] + innov * noise[t]
    fields = coarse_model_fields(z, config.start)

    daily = z[1:].reshape(days, STEPS_PER_DAY, hc, wc).mean(axis=1)
    latent = bilinear_resample(daily[..., None], tuple(config.fine))[..., 0] / latent_std(config)

    k = config.coupling
    score = np.sqrt(k) * latent + np.sqrt(1.0 - k) * rng_wet.standard_normal(latent.shape)
    with np.errstate(divide="ignore"):
        threshold = ndtri(1.0 - config.wet_probability())
    wet = score > threshold
    g = config.intensity_gain
    mean = config.mean_field() * np.exp(g * latent - 0.5 * g * g)
    amount = _truncated_normal(rng_amount, mean)
    rain = np.where(wet, amount, 0.0).astype(np.float32)
    rain[wet] = np.maximum(rain[wet], _RAIN_FLOOR)
    return GridSeries(fields, rain, config.start)


def upsample_series(coarse: np.ndarray, fine: tuple[int, int] = (100, 140)) -> np.ndarray:
    """Bilinear (align-corners) upsampling of (steps, Hc, Wc, C) to the fine grid."""
    return bilinear_resample(np.asarray(coarse), tuple(fine))


# ---------------------------------------------------------------- windows

def _placement(center: tuple[int, int], stencil: int, target: int) -> tuple[int, int, int, int]:
    top, left = center[0] - stencil // 2, center[1] - stencil // 2
    off = (stencil - target) // 2
    return top, left, top + off, left + off


def extract_windows(series: GridSeries, locations: Sequence[tuple[int, int]], stride: int = WINDOW_DAYS, *,
                    window_days: int = WINDOW_DAYS, stencil: int = STENCIL,
                    target: int = TARGET) -> list[WeatherWindow]:
    """Cut stencil windows around fine-grid ``locations``.

    A location ``(r, c)`` owns stencil rows ``r - stencil//2 .. r - stencil//2 + stencil - 1``
    and the centered ``target`` block within it.  Windows start every
    ``stride`` days.  The upsampled stencil is bit-identical to the same cells
    of the full upsampled field.
    """
    if stride < 1:
        raise ContractError("stride must be at least one day")
    if not 0 < target <= stencil:
        raise ContractError("target block must fit inside the stencil")
    if series.days < window_days:
        raise ContractError(f"series has {series.days} days, windows need {window_days}")
    h, w = series.fine_shape
    bad = []
    for loc in locations:
        top, left, _, _ = _placement(loc, stencil, target)
        if top < 0 or left < 0 or top + stencil > h or left + stencil > w:
            bad.append(tuple(loc))
    if bad:
        raise PlacementError(f"stencils of size {stencil} leave the {h}x{w} grid at {bad}", bad)
    spd = series.steps_per_day
    dates = series.dates
    out = []
    for index, loc in enumerate(locations):
        top, left, ty, tx = _placement(loc, stencil, target)
        stencil_fields = bilinear_resample(series.coarse_fields, (h, w),
                                           rows=np.arange(top, top + stencil),
                                           cols=np.arange(left, left + stencil))
        for d0 in range(0, series.days - window_days + 1, stride):
            x = stencil_fields[d0 * spd:(d0 + window_days) * spd]
            y = series.fine_rain[d0:d0 + window_days, ty:ty + target, tx:tx + target]
            out.append(WeatherWindow(x, y, index, dates[d0], d0))
    return out


def default_locations(fine: tuple[int, int], stencil: int = STENCIL, count: int = 16) -> list[tuple[int, int]]:
    """``count`` (a square number) centers on an even lattice with stencils inside the grid."""
    side = int(round(np.sqrt(count)))
    if side * side != count:
        raise ContractError("location count must be a square number")
    lo = stencil // 2
    rows = np.linspace(lo, fine[0] - (stencil - stencil // 2), side).round().astype(int)
    cols = np.linspace(lo, fine[1] - (stencil - stencil // 2), side).round().astype(int)
    return [(int(r), int(c)) for r in rows for c in cols]


def stack_windows(windows: Sequence[WeatherWindow]) -> tuple[np.ndarray, np.ndarray]:
    if not windows:
        raise ContractError("no windows to stack")
    return np.stack([w.x for w in windows]), np.stack([w.y for w in windows])


# ---------------------------------------------------------------- normalization

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_manifest(self) -> dict[str, str]:
        out = {"channels": str(len(self.mean))}
        for i, (m, s) in enumerate(zip(self.mean, self.std)):
            out[f"mean.{i}"] = repr(float(m))
            out[f"std.{i}"] = repr(float(s))
        return out

    @classmethod
    def from_manifest(cls, entries: dict[str, str]) -> "NormStats":
        try:
            n = int(entries["channels"])
            mean = [float(entries[f"mean.{i}"]) for i in range(n)]
            std = [float(entries[f"std.{i}"]) for i in range(n)]
        except (KeyError, ValueError) as exc:
            raise FormatError(f"incomplete normalization stats: {exc}") from None
        return cls(np.array(mean), np.array(std))


def compute_stats(windows: Sequence[WeatherWindow]) -> NormStats:
    """Per-channel mean/std over every input value of ``windows`` (training split only)."""
    if not windows:
        raise ContractError("statistics need at least one window")
    channels = windows[0].x.shape[-1]
    total = np.zeros(channels)
    count = 0
    for w in windows:
        total += w.x.reshape(-1, channels).sum(axis=0, dtype=np.float64)
        count += w.x.size // channels
    mean = total / count
    sq = np.zeros(channels)
    for w in windows:
        sq += np.square(w.x.reshape(-1, channels) - mean).sum(axis=0)
    std = np.sqrt(sq / count)
    flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if flat.any():
        warnings.warn(f"channels {np.flatnonzero(flat).tolist()} have zero variance; using std 1",
                      RuntimeWarning, stacklevel=2)
        std = np.where(flat, 1.0, std)
    return NormStats(mean, std)


def normalize_array(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return ((x - stats.mean) / stats.std).astype(x.dtype)


def denormalize_array(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return (x * stats.std + stats.mean).astype(x.dtype)


def normalize(windows: Sequence[WeatherWindow], stats: NormStats) -> list[WeatherWindow]:
    """Standardize inputs channelwise; targets stay in mm/day."""
    return [replace(w, x=normalize_array(w.x, stats)) for w in windows]


def denormalize(windows: Sequence[WeatherWindow], stats: NormStats) -> list[WeatherWindow]:
    return [replace(w, x=denormalize_array(w.x, stats)) for w in windows]


# ---------------------------------------------------------------- splits and calendar

@dataclass
class Splits:
    train: list[WeatherWindow]
    val: list[WeatherWindow]
    test: list[WeatherWindow]
    boundaries: tuple[np.datetime64, np.datetime64] = field(default=None)


def check_no_leakage(earlier: Sequence[WeatherWindow], later: Sequence[WeatherWindow]) -> None:
    """Raise DataError unless every ``earlier`` window ends before every ``later`` one starts."""
    if earlier and later:
        last = max(w.end for w in earlier)
        first = min(w.start for w in later)
        if not last < first:
            raise DataError(f"split leakage: earlier split reaches {last}, later split starts {first}")


def time_split(windows: Sequence[WeatherWindow], val_start, test_start) -> Splits:
    """Assign windows to train/val/test by date; windows straddling a boundary are dropped."""
    val_start = np.datetime64(val_start, "D")
    test_start = np.datetime64(test_start, "D")
    if not val_start <= test_start:
        raise ContractError("validation must start no later than test")
    train = [w for w in windows if w.end < val_start]
    val = [w for w in windows if w.start >= val_start and w.end < test_start]
    test = [w for w in windows if w.start >= test_start]
    check_no_leakage(train, val)
    check_no_leakage(val, test)
    check_no_leakage(train, test)
    return Splits(train, val, test, (val_start, test_start))


def fraction_split(windows: Sequence[WeatherWindow], series: GridSeries,
                   fractions: tuple[float, float] = (0.6, 0.2)) -> Splits:
    """Date split with the first ``fractions[0]`` of days for training, then ``fractions[1]`` validation."""
    train_frac, val_frac = fractions
    if train_frac <= 0 or val_frac < 0 or train_frac + val_frac > 1:
        raise ContractError(f"bad split fractions {fractions}")
    dates = series.dates
    val_day = int(round(series.days * train_frac))
    test_day = min(int(round(series.days * (train_frac + val_frac))), series.days)
    end = dates[-1] + 1
    val_start = dates[val_day] if val_day < series.days else end
    test_start = dates[test_day] if test_day < series.days else end
    return time_split(windows, val_start, test_start)


def season_labels(dates) -> np.ndarray:
    """Meteorological season of each date: DJF, MAM, JJA or SON."""
    d = np.asarray(dates, dtype="datetime64[D]")
    month = (d.astype("datetime64[M]").astype(np.int64) % 12) + 1
    return np.array(SEASONS)[(month % 12) // 3]


# ---------------------------------------------------------------- persistence

def series_manifest_path(path: str | os.PathLike) -> str:
    return os.fspath(path) + ".manifest"


def save_series(series: GridSeries, path: str | os.PathLike, extra: Optional[dict] = None) -> None:
    write_grid_file(path, {"coarse_fields": series.coarse_fields, "fine_rain": series.fine_rain})
    entries = {"start": series.start.isoformat(), "steps_per_day": series.steps_per_day}
    entries.update(extra or {})
    write_manifest(series_manifest_path(path), entries)


def load_series(path: str | os.PathLike) -> GridSeries:
    tensors = read_grid_file(path)
    entries = read_manifest(series_manifest_path(path))
    try:
        return GridSeries(tensors["coarse_fields"], tensors["fine_rain"],
                          dt.date.fromisoformat(entries["start"]), int(entries["steps_per_day"]))
    except KeyError as exc:
        raise FormatError(f"{path} is not a saved series: missing {exc}") from None
