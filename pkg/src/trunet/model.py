"""TRU-NET and HCGRU assembled from the layer primitives.

Both models map a window of coarse-field stencils ``(N, T, H, W, C)`` (or an
unbatched ``(T, H, W, C)``) to daily fields ``(N, D, H, W)``: a non-negative
intensity and, for the conditional-continuous variant, a rain probability.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from typing import Optional, Union

import numpy as np

from . import ops
from .dropout import DropoutSampler, DropoutSpec
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .gridfile import read_grid_file, read_manifest, write_grid_file, write_manifest
from .layers import ConvGRUFTCALayer, ConvGRULayer, DSConvGRULayer, Module, OutputHead
from .tensor import Tensor

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _pair(v) -> tuple[int, int]:
    v = tuple(int(a) for a in v)
    if len(v) != 2:
        raise ConfigError(f"expected two values, got {v}")
    return v


def _positive(name: str, values) -> None:
    for v in np.atleast_1d(values):
        if int(v) < 1:
            raise ConfigError(f"{name} entries must be positive, got {values}")


@dataclass(frozen=True)
class TruNetConfig:
    """TRU-NET hyperparameters.

    ``factors`` are the per-layer contraction factors of the encoder (the
    first is always 1).  Per-FTCA settings (``heads``, ``pool``, ``key_dim``,
    ``value_filters``) list one entry for each of the two FTCA layers.
    """

    filters: tuple = (16, 32, 48)
    factors: tuple = (1, 4, 7)
    window: int = 112
    spatial: tuple = (16, 16)
    in_channels: int = 6
    kernel: tuple = (3, 3)
    heads: tuple = (8, 8)
    pool: tuple = (4, 4)
    key_dim: tuple = (16, 16)
    value_filters: tuple = (0, 0)
    decoder_filters: int = 32
    head_hidden: int = 32
    cc: bool = True
    bidirectional: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        for name in ("filters", "factors"):
            if len(getattr(self, name)) != 3:
                raise ConfigError(f"{name} needs three entries")
        for name in ("heads", "pool", "key_dim", "value_filters"):
            if len(getattr(self, name)) != 2:
                raise ConfigError(f"{name} needs one entry per FTCA layer")
        _positive("filters", self.filters)
        _positive("factors", self.factors)
        _positive("heads", self.heads)
        _positive("pool", self.pool)
        _positive("key_dim", self.key_dim)
        _positive("decoder/head widths", [self.decoder_filters, self.head_hidden, self.in_channels])
        if min(self.value_filters) < 0:
            raise ConfigError("value_filters must be >= 0 (0 means the layer's filter count)")
        if self.factors[0] != 1:
            raise ConfigError("the first encoder layer does not contract time; factors[0] must be 1")
        if self.window % (self.factors[1] * self.factors[2]):
            raise ConfigError(f"window {self.window} not divisible by {self.factors[1] * self.factors[2]}")
        h, w = _pair(self.spatial)
        for m in self.pool:
            if h % m or w % m:
                raise ConfigError(f"spatial extents {(h, w)} not divisible by pool size {m}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def lengths(self) -> tuple[int, int, int]:
        """Sequence lengths emitted by the three encoder layers."""
        f2, f3 = self.factors[1], self.factors[2]
        return self.window, self.window // f2, self.window // (f2 * f3)

    @property
    def days(self) -> int:
        return self.lengths[1]


@dataclass(frozen=True)
class HcgruConfig:
    """HCGRU baseline: ``block`` steps are concatenated along channels, then
    ``layers`` unidirectional ConvGRU layers of ``filters`` filters."""

    filters: int = 80
    layers: int = 4
    kernel: tuple = (4, 4)
    block: int = 4
    window: int = 112
    spatial: tuple = (16, 16)
    in_channels: int = 6
    head_hidden: int = 32
    cc: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        _positive("filters/layers/block", [self.filters, self.layers, self.block, self.head_hidden,
                                           self.in_channels])
        if self.layers < 2:
            raise ConfigError("HCGRU needs at least two ConvGRU layers")
        if self.window % self.block:
            raise ConfigError(f"window {self.window} not divisible by block {self.block}")
        _pair(self.spatial)
        _pair(self.kernel)
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def days(self) -> int:
        return self.window // self.block


ModelConfig = Union[TruNetConfig, HcgruConfig]


@dataclass
class CCPrediction:
    """Daily intensity (mm/day) and, for CC models, rain probability."""

    intensity: Tensor
    rain_prob: Optional[Tensor] = None


def _as_sequence(x, cfg: ModelConfig) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPES[cfg.dtype]))
    expected = (cfg.window,) + tuple(cfg.spatial) + (cfg.in_channels,)
    if x.ndim == 4 and x.shape == expected:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim == 5 and x.shape[1:] == expected:
        return x, False
    raise ShapeError(f"expected input {expected} (optionally batched), got {x.shape}")


def _unbatch(pred: CCPrediction, squeeze: bool) -> CCPrediction:
    if not squeeze:
        return pred
    strip = lambda t: None if t is None else ops.reshape(t, t.shape[1:])  # noqa: E731
    return CCPrediction(strip(pred.intensity), strip(pred.rain_prob))


class _Model(Module):
    config: ModelConfig

    def sampler(self, dropout: Optional[DropoutSpec], stream=()) -> Optional[DropoutSampler]:
        if dropout is None:
            return None
        return dropout.sampler(*np.atleast_1d(stream).tolist())

    def latents(self, x, dropout: Optional[DropoutSpec] = None, stream=()) -> Tensor:
        """Decoder output fed to the heads, always batched."""
        raise NotImplementedError

    def __call__(self, x, dropout: Optional[DropoutSpec] = None, stream=()) -> CCPrediction:
        squeeze = _as_sequence(x, self.config)[1]
        return _unbatch(self._heads(self.latents(x, dropout, stream)), squeeze)

    def _heads(self, latents: Tensor) -> CCPrediction:
        prob = self.prob_head(latents) if self.prob_head is not None else None
        return CCPrediction(self.intensity_head(latents), prob)


class TruNet(_Model):
    """Encoder (ConvGRU, ConvGRU+FTCA, ConvGRU+FTCA), repeat expansion, dsConvGRU decoder."""

    def __init__(self, config: TruNetConfig = TruNetConfig()):
        self.config = config
        dtype = _DTYPES[config.dtype]
        rng = np.random.default_rng(config.seed)
        f1, f2, f3 = config.filters
        kernel = _pair(config.kernel)
        spatial = _pair(config.spatial)
        bi = config.bidirectional
        self.l1 = ConvGRULayer(config.in_channels, f1, kernel, bi, rng=rng, dtype=dtype, name="enc1")
        self.l2 = ConvGRUFTCALayer(
            self.l1.out_channels, f2, config.factors[1], spatial, heads=config.heads[0],
            pool=config.pool[0], key_dim=config.key_dim[0], value_filters=config.value_filters[0] or None,
            kernel=kernel, bidirectional=bi, rng=rng, dtype=dtype, name="enc2")
        self.l3 = ConvGRUFTCALayer(
            self.l2.out_channels, f3, config.factors[2], spatial, heads=config.heads[1],
            pool=config.pool[1], key_dim=config.key_dim[1], value_filters=config.value_filters[1] or None,
            kernel=kernel, bidirectional=bi, rng=rng, dtype=dtype, name="enc3")
        self.decoder = DSConvGRULayer(self.l2.out_channels, self.l3.out_channels, config.decoder_filters,
                                      kernel, rng=rng, dtype=dtype, name="dec")
        self.intensity_head = OutputHead(config.decoder_filters, config.head_hidden, (3, 3), "nonneg",
                                         rng=rng, dtype=dtype, name="head_y")
        self.prob_head = (OutputHead(config.decoder_filters, config.head_hidden, (3, 3), "logistic",
                                     rng=rng, dtype=dtype, name="head_r") if config.cc else None)
        self.trace: list[tuple[str, int]] = []

    def latents(self, x, dropout: Optional[DropoutSpec] = None, stream=(), *,
                keep_weights: bool = False) -> Tensor:
        seq, _ = _as_sequence(x, self.config)
        drop = self.sampler(dropout, stream)
        trace = [("input", seq.shape[1])]
        h1 = self.l1(seq, drop)
        trace.append(("enc1", h1.shape[1]))
        h2 = self.l2(h1, drop, keep_weights)
        trace.append(("enc2", h2.shape[1]))
        h3 = self.l3(h2, drop, keep_weights)
        trace.append(("enc3", h3.shape[1]))
        expanded = ops.repeat(h3, self.config.factors[2], axis=1)
        trace.append(("expand", expanded.shape[1]))
        latents = self.decoder(h2, expanded, drop)
        trace.append(("decoder", latents.shape[1]))
        self.trace = trace
        return latents


class Hcgru(_Model):
    """Block-concatenated input, stacked ConvGRU layers with additive skips."""

    def __init__(self, config: HcgruConfig = HcgruConfig()):
        self.config = config
        dtype = _DTYPES[config.dtype]
        rng = np.random.default_rng(config.seed)
        kernel = _pair(config.kernel)
        f = config.filters
        self.layers = [ConvGRULayer(config.in_channels * config.block, f, kernel, rng=rng, dtype=dtype,
                                    name="gru1")]
        for i in range(1, config.layers):
            self.layers.append(ConvGRULayer(f, f, kernel, rng=rng, dtype=dtype, name=f"gru{i + 1}"))
        self.intensity_head = OutputHead(2 * f, config.head_hidden, (3, 3), "nonneg",
                                         rng=rng, dtype=dtype, name="head_y")
        self.prob_head = (OutputHead(2 * f, config.head_hidden, (3, 3), "logistic",
                                     rng=rng, dtype=dtype, name="head_r") if config.cc else None)
        self.trace: list[tuple[str, int]] = []

    def latents(self, x, dropout: Optional[DropoutSpec] = None, stream=()) -> Tensor:
        seq, _ = _as_sequence(x, self.config)
        drop = self.sampler(dropout, stream)
        blocked = block_concat(seq, self.config.block)
        trace = [("input", seq.shape[1]), ("blocked", blocked.shape[1])]
        first = self.layers[0](blocked, drop)
        h = first
        for layer in self.layers[1:]:
            h = ops.add(layer(h, drop), h)
        trace.append(("stack", h.shape[1]))
        self.trace = trace
        return ops.concat([h, first], axis=-1)


def block_concat(seq: Tensor, block: int) -> Tensor:
    """(N, T, H, W, C) -> (N, T/block, H, W, block*C); channels are step-major."""
    n, t, h, w, c = seq.shape
    if t % block:
        raise ContractError(f"sequence length {t} not divisible by block {block}")
    x = ops.reshape(seq, (n, t // block, block, h, w, c))
    x = ops.transpose(x, (0, 1, 3, 4, 2, 5))
    return ops.reshape(x, (n, t // block, h, w, block * c))


def block_split(blocked: np.ndarray, block: int) -> np.ndarray:
    """Inverse of :func:`block_concat` on plain arrays."""
    n, d, h, w, bc = blocked.shape
    x = blocked.reshape(n, d, h, w, block, bc // block)
    return x.transpose(0, 1, 4, 2, 3, 5).reshape(n, d * block, h, w, bc // block)


def trunet_forward(x, model: TruNet, dropout: Optional[DropoutSpec] = None, stream=()) -> CCPrediction:
    return model(x, dropout, stream)


def hcgru_forward(x, model: Hcgru, dropout: Optional[DropoutSpec] = None, stream=()) -> CCPrediction:
    return model(x, dropout, stream)


def build_model(config: ModelConfig) -> _Model:
    return TruNet(config) if isinstance(config, TruNetConfig) else Hcgru(config)


def desk_config(kind: str = "trunet", cc: bool = True, seed: int = 0) -> ModelConfig:
    """Desk-scale models on 8x8 stencils over 8-day windows (32 six-hourly steps)."""
    if kind == "trunet":
        return TruNetConfig(filters=(4, 4, 4), factors=(1, 4, 2), window=32, spatial=(8, 8), heads=(2, 2),
                            pool=(2, 2), key_dim=(4, 4), decoder_filters=4, head_hidden=8, cc=cc, seed=seed)
    if kind == "hcgru":
        return HcgruConfig(filters=8, layers=2, kernel=(3, 3), window=32, spatial=(8, 8), head_hidden=8,
                           cc=cc, seed=seed)
    raise ConfigError(f"unknown model kind {kind!r}")


def crop_center(field, size: int = 4):
    """Central ``size x size`` window of the last two axes (Tensor or array)."""
    h, w = field.shape[-2:]
    if size > h or size > w or size < 1:
        raise ShapeError(f"crop size {size} does not fit extents {(h, w)}")
    top, left = (h - size) // 2, (w - size) // 2
    return field[..., top:top + size, left:left + size]


def count_parameters(model) -> int:
    params = model.parameters() if hasattr(model, "parameters") else list(model)
    return int(sum(p.size for p in params))


# ------------------------------------------------------------------ checkpoints

def config_to_manifest(config: ModelConfig) -> dict[str, str]:
    kind = "trunet" if isinstance(config, TruNetConfig) else "hcgru"
    out = {"model": kind}
    for key, value in asdict(config).items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(int(v)) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        out[key] = str(value)
    return out


def config_from_manifest(entries: dict[str, str]) -> ModelConfig:
    kind = entries.get("model")
    if kind not in ("trunet", "hcgru"):
        raise ConfigError(f"manifest does not name a known model: {kind!r}")
    cls = TruNetConfig if kind == "trunet" else HcgruConfig
    defaults = cls()
    kwargs = {}
    for f in fields(cls):
        if f.name not in entries:
            continue
        raw = entries[f.name]
        default = getattr(defaults, f.name)
        try:
            if isinstance(default, bool):
                if raw.lower() not in ("true", "false"):
                    raise ValueError(raw)
                kwargs[f.name] = raw.lower() == "true"
            elif isinstance(default, tuple):
                kwargs[f.name] = tuple(int(v) for v in raw.split(","))
            elif isinstance(default, int):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = raw
        except ValueError:
            raise ConfigError(f"bad value for {f.name}: {raw!r}") from None
    return cls(**kwargs)


def manifest_path(path: str | os.PathLike) -> str:
    return os.fspath(path) + ".manifest"


def save_checkpoint(model: _Model, path: str | os.PathLike, extra: Optional[dict] = None) -> None:
    """Parameters go to a TGRD file; the config (plus ``extra`` entries) to ``path.manifest``."""
    write_grid_file(path, {name: p.data for name, p in model.named_parameters().items()})
    entries = config_to_manifest(model.config)
    for k, v in (extra or {}).items():
        entries[f"extra.{k}"] = v
    write_manifest(manifest_path(path), entries)


def load_checkpoint(path: str | os.PathLike) -> tuple[_Model, dict[str, str]]:
    """Rebuild a model from a checkpoint; returns it with the ``extra.*`` manifest entries."""
    entries = read_manifest(manifest_path(path))
    model = build_model(config_from_manifest(entries))
    load_parameters(model, read_grid_file(path))
    extra = {k[len("extra."):]: v for k, v in entries.items() if k.startswith("extra.")}
    return model, extra


def load_parameters(model: _Model, tensors: dict[str, np.ndarray]) -> None:
    named = model.named_parameters()
    if set(named) != set(tensors):
        missing = sorted(set(named) - set(tensors))
        unknown = sorted(set(tensors) - set(named))
        raise FormatError(f"checkpoint does not match model: missing {missing[:5]}, unknown {unknown[:5]}")
    for name, p in named.items():
        value = tensors[name]
        if value.shape != p.shape or value.dtype != p.dtype:
            raise FormatError(f"{name}: checkpoint has {value.shape}/{value.dtype}, model {p.shape}/{p.dtype}")
        p.data[...] = value


def copy_parameters(src: _Model, dst: _Model) -> None:
    load_parameters(dst, {k: p.data.copy() for k, p in src.named_parameters().items()})


def snapshot(model: _Model) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.named_parameters().items()}
