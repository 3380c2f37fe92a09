"""Command-line entry point: ``trunet {synth,train,predict,evaluate,gridsearch,gradcheck}``.

Settings come from flags plus an optional ``--config`` manifest of
``key=value`` lines with these prefixes:

* ``data.*``   synthetic generator fields (``rho``, ``rain_prob``, ...)
* ``model.*``  model config fields, applied on top of the chosen preset
* ``opt.*``    optimizer fields
* ``train.*``  ``epochs``, ``batch_size``, ``stride``, ``locations``, ``p_input``,
  ``p_recurrent``, ``p_attention``, ``train_fraction``, ``val_fraction``
* ``grid.*``   semicolon-separated values per hyperparameter (gridsearch only)

Every artifact is a pure function of the flags, the manifest and ``--seed``.
"""

from __future__ import annotations

import argparse
import datetime as dt
import os
import sys
from dataclasses import fields, replace
from typing import Optional, Sequence

import numpy as np

from .checks import run_suite
from .data import (NormStats, SyntheticConfig, WeatherWindow, compute_stats, default_locations, extract_windows,
                   fraction_split, load_series, normalize, save_series, season_labels, synth_generate)
from .dropout import DropoutSpec
from .errors import ConfigError, FormatError, TrunetError
from .gridfile import read_grid_file, read_manifest, write_grid_file, write_manifest
from .metrics import evaluate, scatter_stats, scatter_table
from .model import ModelConfig, build_model, config_from_manifest, config_to_manifest, desk_config, load_checkpoint
from .optim import OptimizerConfig
from .training import grid_search, grid_table, predict_windows, train

TRAIN_DEFAULTS = {"epochs": 3, "batch_size": 8, "stride": 0, "locations": 16, "p_input": 0.0,
                  "p_recurrent": 0.0, "p_attention": 0.0, "train_fraction": 0.6, "val_fraction": 0.2}
EPOCH = np.datetime64("1970-01-01", "D")


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        if isinstance(default, dt.date):
            return dt.date.fromisoformat(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _section(entries: dict[str, str], prefix: str) -> dict[str, str]:
    return {k[len(prefix) + 1:]: v for k, v in entries.items() if k.startswith(prefix + ".")}


def _apply(obj, overrides: dict[str, str], prefix: str):
    names = {f.name: getattr(obj, f.name) for f in fields(obj)}
    kwargs = {}
    for key, raw in overrides.items():
        if key not in names:
            raise ConfigError(f"unknown setting {prefix}.{key}")
        kwargs[key] = _coerce(raw, names[key], f"{prefix}.{key}")
    return replace(obj, **kwargs)


def _train_settings(entries: dict[str, str]) -> dict:
    out = dict(TRAIN_DEFAULTS)
    for key, raw in _section(entries, "train").items():
        if key not in out:
            raise ConfigError(f"unknown setting train.{key}")
        out[key] = _coerce(raw, out[key], f"train.{key}")
    return out


def _load_config(path: Optional[str]) -> dict[str, str]:
    entries = read_manifest(path) if path else {}
    known = ("data", "model", "opt", "train", "grid")
    for key in entries:
        if key.split(".", 1)[0] not in known or "." not in key:
            raise ConfigError(f"config key {key!r} needs one of the prefixes {known}")
    return entries


def _model_config(args, entries) -> ModelConfig:
    base = desk_config(args.model, cc=args.loss == "cc", seed=args.seed)
    merged = config_to_manifest(base)
    merged.update(_section(entries, "model"))
    return config_from_manifest(merged)


def _window_geometry(cfg: ModelConfig) -> tuple[int, int]:
    h, w = cfg.spatial
    if h != w:
        raise ConfigError("stencils must be square")
    return cfg.window // 4, h


def _windows(series, cfg: ModelConfig, settings: dict) -> list[WeatherWindow]:
    days, stencil = _window_geometry(cfg)
    locations = default_locations(series.fine_shape, stencil, settings["locations"])
    return extract_windows(series, locations, settings["stride"] or days, window_days=days, stencil=stencil)


def _splits(series, cfg, settings):
    windows = _windows(series, cfg, settings)
    return fraction_split(windows, series, (settings["train_fraction"], settings["val_fraction"]))


def _dropout(settings: dict, seed: int, mode: str) -> DropoutSpec:
    return DropoutSpec(settings["p_input"], settings["p_recurrent"], settings["p_attention"], seed=seed, mode=mode)


def _out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------- commands

def cmd_synth(args, entries) -> int:
    cfg = SyntheticConfig.micro() if args.geometry == "micro" else SyntheticConfig()
    cfg = _apply(cfg, _section(entries, "data"), "data")
    cfg = replace(cfg, seed=args.seed)
    series = synth_generate(cfg, args.days)
    path = os.path.join(_out(args.out), "series.tgrd")
    save_series(series, path, {"seed": args.seed, "geometry": args.geometry, "days": args.days})
    print(f"wrote {path}: {series.days} days, coarse {series.coarse_fields.shape[1:3]}, "
          f"fine {series.fine_shape}, dry fraction {float(np.mean(series.fine_rain == 0)):.4f}")
    return 0


def cmd_train(args, entries) -> int:
    settings = _train_settings(entries)
    if args.epochs is not None:
        settings["epochs"] = args.epochs
    cfg = _model_config(args, entries)
    opt = _apply(OptimizerConfig(learning_rate=3e-3, warmup_steps=20), _section(entries, "opt"), "opt")
    series = load_series(args.data)
    splits = _splits(series, cfg, settings)
    stats = compute_stats(splits.train)
    out = _out(args.out)
    extra = dict(stats.to_manifest())
    extra.update({f"train.{k}": v for k, v in settings.items()})
    extra["loss"] = args.loss
    model = build_model(cfg)
    result = train(model, normalize(splits.train, stats), normalize(splits.val, stats), opt, settings["epochs"],
                   args.loss, _dropout(settings, args.seed, "train"), args.seed,
                   batch_size=settings["batch_size"], checkpoint=os.path.join(out, "model.tgrd"),
                   checkpoint_extra=extra)
    with open(os.path.join(out, "train.log"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.text())
    print(result.text(), end="")
    return 0


def _encode_days(windows: Sequence[WeatherWindow]) -> np.ndarray:
    return np.stack([((w.start - EPOCH).astype(np.int64) + np.arange(w.days)).astype(np.float64)
                     for w in windows])


def cmd_predict(args, entries) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    stats = NormStats.from_manifest(extra)
    settings = dict(TRAIN_DEFAULTS)
    for key in settings:
        if f"train.{key}" in extra:
            settings[key] = _coerce(extra[f"train.{key}"], settings[key], key)
    splits = _splits(load_series(args.data), model.config, settings)
    windows = {"train": splits.train, "val": splits.val, "test": splits.test}[args.split]
    if not windows:
        raise ConfigError(f"the {args.split} split has no windows")
    windows = normalize(windows, stats)
    spec = _dropout(settings, args.seed, "mcma_sample") if args.mcma_samples > 1 else None
    pred = predict_windows(model, windows, args.mcma_samples, spec)
    days = _encode_days(windows)
    out = _out(args.out)
    write_grid_file(os.path.join(out, "predictions.tgrd"), {"rain": pred.astype(np.float64), "day": days})
    obs = np.stack([w.y for w in windows]).astype(np.float64)
    write_grid_file(os.path.join(out, "observations.tgrd"), {"rain": obs, "day": days})
    print(f"wrote predictions for {len(windows)} {args.split} windows ({args.mcma_samples} MCMA samples)")
    return 0


def _rain_file(path: str) -> tuple[np.ndarray, Optional[np.ndarray]]:
    tensors = read_grid_file(path)
    if "rain" not in tensors:
        raise FormatError(f"{path} has no 'rain' tensor")
    return tensors["rain"], tensors.get("day")


def cmd_evaluate(args, entries) -> int:
    pred, pdays = _rain_file(args.predictions)
    obs, odays = _rain_file(args.observations)
    seasons = None
    days = odays if odays is not None else pdays
    if days is not None:
        dates = EPOCH + days.astype(np.int64)
        seasons = season_labels(dates)[..., None, None] if dates.ndim == obs.ndim - 2 else season_labels(dates)
    report = evaluate(pred, obs, seasons)
    out = _out(args.out)
    text = report.table() + "\n" + scatter_table(scatter_stats(pred, obs))
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    write_manifest(os.path.join(out, "report.manifest"), report.manifest())
    print(text, end="")
    return 0


def cmd_gridsearch(args, entries) -> int:
    settings = _train_settings(entries)
    if args.epochs is not None:
        settings["epochs"] = args.epochs
    cfg = _model_config(args, entries)
    opt = _apply(OptimizerConfig(learning_rate=3e-3, warmup_steps=20), _section(entries, "opt"), "opt")
    grid = {}
    probe = {f.name: getattr(opt, f.name) for f in fields(opt)}
    probe.update({f.name: getattr(cfg, f.name) for f in fields(cfg)})
    for key, raw in _section(entries, "grid").items():
        if key not in probe:
            raise ConfigError(f"unknown grid hyperparameter {key!r}")
        grid[key] = [_coerce(v.strip(), probe[key], f"grid.{key}") for v in raw.split(";")]
    splits = _splits(load_series(args.data), cfg, settings)
    stats = compute_stats(splits.train)
    rows = grid_search(grid, normalize(splits.train, stats), normalize(splits.val, stats), cfg, opt,
                       epochs=settings["epochs"], loss=args.loss, budget=args.budget, seed=args.seed,
                       batch_size=settings["batch_size"], dropout=_dropout(settings, args.seed, "train"))
    table = grid_table(rows)
    with open(os.path.join(_out(args.out), "grid.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def cmd_gradcheck(args, entries) -> int:
    results = run_suite(args.seed)
    lines = []
    for r in results:
        status = "PASS" if r.report.passed else "FAIL"
        lines.append(f"{status} {r.name}: {r.parameters} parameters, max relative error "
                     f"{r.report.max_rel_error:.3e}")
        if not r.report.passed:
            lines.append(r.report.format())
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(os.path.join(_out(args.out), "gradcheck.txt"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    print(text, end="")
    return 0 if all(r.report.passed for r in results) else 1


# ---------------------------------------------------------------- parser

def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trunet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False, out_required=True):
        p.add_argument("--config", help="key=value manifest")
        p.add_argument("--seed", type=_u64, default=0)
        p.add_argument("--out", required=out_required, help="output directory")
        if model:
            p.add_argument("--model", choices=("trunet", "hcgru"), default="trunet")
            p.add_argument("--loss", choices=("cc", "mse"), default="cc")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--days", type=_positive, default=730)
    p.add_argument("--geometry", choices=("micro", "paper"), default="micro")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p, model=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=_positive)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="MCMA inference on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mcma-samples", type=_positive, default=1)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against observations")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--observations", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gridsearch", help="exhaustive hyperparameter grid")
    common(p, model=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=_positive)
    p.add_argument("--budget", type=_positive, default=16)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("gradcheck", help="finite-difference check of micro models")
    common(p, out_required=False)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        entries = _load_config(args.config)
        return args.func(args, entries)
    except (TrunetError, OSError) as exc:
        print(f"trunet: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
