"""Finite-difference verification of whole models on micro configurations."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .gradcheck import GradCheckReport, finite_diff_check
from .model import Hcgru, HcgruConfig, TruNet, TruNetConfig, build_model
from .tensor import Tensor, no_grad

# Central differences at eps=1e-5 carry ~1e-10 absolute roundoff in these
# models, so entries smaller than the floor are judged on absolute error.
MODEL_TOL = 1e-4
MODEL_FLOOR = 1e-5
# Keep every rectifier input this far from its kink so +-eps stays on one side.
KINK_MARGIN = 1e-4


def micro_trunet_config(seed: int = 1, cc: bool = True) -> TruNetConfig:
    return TruNetConfig(filters=(2, 2, 2), factors=(1, 2, 2), window=8, spatial=(4, 4),
                        heads=(2, 1), pool=(2, 2), key_dim=(2, 2), value_filters=(1, 1),
                        decoder_filters=2, head_hidden=2, cc=cc, dtype="float64", seed=seed)


def micro_hcgru_config(seed: int = 1, cc: bool = True) -> HcgruConfig:
    return HcgruConfig(filters=2, window=8, spatial=(4, 4), head_hidden=2, cc=cc,
                       dtype="float64", seed=seed)


def kink_margin(model, x: Tensor) -> float:
    """Smallest |pre-activation| of the head rectifiers for input ``x``."""
    with no_grad():
        lat = model.latents(x)
        heads = [h for h in (model.intensity_head, model.prob_head) if h is not None]
        return float(min(np.abs(h.preactivation(lat).data).min() for h in heads))


def smooth_input(model, seed: int, batch: int = 1, tries: int = 200) -> Tensor:
    """First seeded standard-normal input whose rectifier inputs clear the kink margin."""
    cfg = model.config
    shape = (batch, cfg.window) + tuple(cfg.spatial) + (cfg.in_channels,)
    for k in range(tries):
        x = Tensor(np.random.default_rng([seed, k]).standard_normal(shape))
        if kink_margin(model, x) > KINK_MARGIN:
            return x
    raise RuntimeError("no kink-free input found")


def model_objective(model, x: Tensor, seed: int):
    """Random linear functional of both heads; fixed weights make it generic."""
    with no_grad():
        probe = model(x)
    g = np.random.default_rng([seed, 99])
    w_y = Tensor(g.standard_normal(probe.intensity.shape))
    w_r = Tensor(g.standard_normal(probe.intensity.shape)) if probe.rain_prob is not None else None

    def f():
        p = model(x)
        out = ops.sum(ops.mul(p.intensity, w_y))
        if w_r is not None:
            out = ops.add(out, ops.sum(ops.mul(p.rain_prob, w_r)))
        return out

    return f


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport
    seconds: float
    parameters: int


def check_model(model, seed: int = 0, tol: float = MODEL_TOL, floor: float = MODEL_FLOOR,
                max_entries=None) -> GradCheckReport:
    x = smooth_input(model, seed)
    return finite_diff_check(model_objective(model, x, seed), model.parameters(), tol=tol, floor=floor,
                             max_entries=max_entries, rng=np.random.default_rng(seed))


def run_suite(seed: int = 0, models=("trunet", "hcgru")) -> list[SuiteResult]:
    builders = {"trunet": lambda: TruNet(micro_trunet_config(seed + 1)),
                "hcgru": lambda: Hcgru(micro_hcgru_config(seed + 1))}
    results = []
    for name in models:
        model = builders[name]()
        start = time.perf_counter()
        report = check_model(model, seed)
        results.append(SuiteResult(name, report, time.perf_counter() - start,
                                    sum(p.size for p in model.parameters())))
    return results


__all__ = ["micro_trunet_config", "micro_hcgru_config", "check_model", "run_suite", "smooth_input",
           "kink_margin", "build_model"]
