"""Finite-difference verification of the autodiff primitives and both losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck
from .losses import data_loss, physics_loss
from .pbm import KineticParameters, PhysicalConstants

PRIMITIVE_TOL = 1e-5
LOSS_TOL = 1e-4

PRIMITIVES: dict[str, Callable[[Tensor], Tensor]] = {
    "add": lambda t: (t + 2.0 * t).sum(),
    "sub": lambda t: (1.5 - t).sum() + (t - 0.5 * t).sum(),
    "mul": lambda t: (t * ad.tanh(t)).sum(),
    "div": lambda t: (1.0 / (2.5 + ad.tanh(t))).sum() + (t / 3.0).sum(),
    "matmul": lambda t: (t.reshape(2, 2) @ t.reshape(2, 2)).sum(),
    "pow": lambda t: ((ad.softplus(t) + 0.1) ** 1.7).sum(),
    "power": lambda t: ad.power(ad.softplus(t) + 0.5, ad.sigmoid(t[0])).sum(),
    "exp": lambda t: ad.exp(0.3 * t).sum(),
    "log": lambda t: ad.log(ad.softplus(t) + 0.2).sum(),
    "tanh": lambda t: ad.tanh(t).sum(),
    "sigmoid": lambda t: ad.sigmoid(t).sum(),
    "softplus": lambda t: ad.softplus(t).sum(),
    "clamp_min": lambda t: ad.clamp_min(t, 0.05).sum(),
    "concat": lambda t: (ad.concat([t, 2.0 * t]) * np.arange(8.0)).sum(),
    "slice": lambda t: ad.square(t[1:3]).sum(),
    "sum": lambda t: ad.square(t.reshape(2, 2).sum(axis=0)).sum(),
    "mean": lambda t: ad.square(t).mean(),
    "square": lambda t: ad.square(t).sum(),
    "abs": lambda t: (t.abs() * t).sum(),
    "where": lambda t: ad.where(t.data > 0, ad.square(t), 3.0 * t).sum(),
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _probe(rng: np.random.Generator, size: int = 4) -> np.ndarray:
    x = rng.normal(size=size)
    # keep the kinks of abs, clamp_min and where away from the probe points
    x = np.where(np.abs(x) < 0.1, x + 0.3, x)
    return np.where(np.abs(x - 0.05) < 0.01, x + 0.1, x)


def check_primitives(seed: int = 0, trials: int = 10) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, f in PRIMITIVES.items():
        worst = max(gradcheck(f, _probe(rng)) for _ in range(trials))
        out.append(CheckResult(name, worst, PRIMITIVE_TOL))
    return out


def _smooth_state(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """A supersaturated, physically plausible normalised trajectory."""
    s = np.linspace(0.0, 1.0, n)
    x = np.column_stack([0.2 + 0.6 * s, 0.3 + 0.5 * s, 0.4 + 0.4 * s, 0.5 + 0.3 * s,
                         0.95 - 0.25 * s])
    T = np.linspace(310.0, 290.0, n)
    scales = np.array([3e7, 1e6, 6e4, 7e3, 0.5])
    return x, T, scales


def check_losses(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    obs = rng.uniform(size=(6, 5))
    mask = rng.uniform(size=(6, 5)) < 0.7
    mask[0] = True
    x = rng.uniform(size=(6, 5))
    x = np.where(np.abs(np.abs(x - obs) - 0.1) < 0.01, x + 0.05, x)
    results = [CheckResult("data_loss", gradcheck(lambda t: data_loss(t, obs, mask, 0.3), x),
                           LOSS_TOL)]
    state, T, scales = _smooth_state(6)
    consts = PhysicalConstants()
    ref = KineticParameters.reference()
    err_x = gradcheck(lambda t: physics_loss(t, T, ref, scales, consts, 5.0, time_scale=500.0),
                      state)
    lv = ref.log_vector() + rng.normal(scale=0.05, size=6)
    err_p = gradcheck(lambda t: physics_loss(Tensor(state), T, t, scales, consts, 5.0,
                                             time_scale=500.0), lv)
    results.append(CheckResult("physics_loss[trajectory]", err_x, LOSS_TOL))
    results.append(CheckResult("physics_loss[log_parameters]", err_p, LOSS_TOL))
    return results


def run_all(seed: int = 0) -> list[CheckResult]:
    return check_primitives(seed) + check_losses(seed)
