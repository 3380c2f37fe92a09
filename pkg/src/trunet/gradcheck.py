"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, GradientCheckError
from .tensor import Parameter, Tensor, backward, no_grad


@dataclass
class ParamCheck:
    name: str
    shape: tuple
    checked: int
    max_rel_error: float
    max_abs_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    results: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    def failures(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def format(self) -> str:
        width = max([len(r.name) for r in self.results] + [9])
        lines = [f"{'parameter':<{width}}  {'entries':>7}  {'max rel':>10}  {'max abs':>10}  verdict"]
        for r in self.results:
            verdict = "ok" if r.passed else "FAIL"
            lines.append(f"{r.name:<{width}}  {r.checked:>7d}  {r.max_rel_error:>10.3e}  "
                         f"{r.max_abs_error:>10.3e}  {verdict}")
        lines.append(f"tol={self.tol:g} eps={self.eps:g} -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries meaningful."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5,
                      tol: float = 1e-5, floor: float = 1e-6,
                      max_entries: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` with central differences.

    ``f`` must be deterministic (dropout off) and close over ``params``,
    which must be float64.  With ``max_entries`` set, at most that many
    entries per parameter are perturbed, chosen by ``rng``.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"gradient checking needs float64 parameters; {p.name} is {p.dtype}")
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise GradientCheckError("non-finite loss before perturbation", "<loss>")
    backward(loss)
    analytic = [p.grad.copy() for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)

    report = GradCheckReport(tol=tol, eps=eps)
    with no_grad():
        for p, a in zip(params, analytic):
            if not np.isfinite(a).all():
                raise GradientCheckError("non-finite analytic gradient", p.name)
            flat = p.data.reshape(-1)
            if max_entries is not None and flat.size > max_entries:
                entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            else:
                entries = np.arange(flat.size)
            numeric = np.empty(len(entries))
            for j, k in enumerate(entries):
                orig = flat[k]
                flat[k] = orig + eps
                fp = f().item()
                flat[k] = orig - eps
                fm = f().item()
                flat[k] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise GradientCheckError("non-finite loss under perturbation", p.name)
                numeric[j] = (fp - fm) / (2.0 * eps)
            a_sel = a.reshape(-1)[entries]
            rel = relative_error(a_sel, numeric, floor)
            worst = float(rel.max()) if rel.size else 0.0
            report.results.append(ParamCheck(
                name=p.name or f"param{len(report.results)}", shape=p.shape,
                checked=len(entries), max_rel_error=worst,
                max_abs_error=float(np.abs(a_sel - numeric).max()) if rel.size else 0.0,
                passed=worst <= tol))
    return report
