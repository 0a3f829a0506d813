"""Adaptive Dormand-Prince 5(4) integration onto a fixed output grid."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, ValidationError

log = logging.getLogger(__name__)

# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = B5 - B4

# continuous extension (Shampine); rows are stages, columns powers theta^1..theta^4
DENSE_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_BETA = 0.04  # PI feedback on the previous error
_ALPHA = 0.2 - 0.75 * _BETA
_MIN_FACTOR, _MAX_FACTOR = 0.2, 10.0
CLAMP_LIMIT = 1e-9


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float = 20.0
    initial_step: float | None = None
    max_steps: int = 200_000

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValidationError("integrator tolerances must be positive")
        if self.max_steps <= 0 or not self.max_step > 0:
            raise ValidationError("max_steps and max_step must be positive")


@dataclass
class Trajectory:
    t_grid: np.ndarray
    states: np.ndarray  # (len(t_grid), n_state)
    n_steps: int = 0
    n_rejected: int = 0
    n_clamped: int = 0

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if len(self.t_grid) != len(self.states):
            raise ValidationError("trajectory grid and states differ in length")
        if len(self.t_grid) > 1 and np.any(np.diff(self.t_grid) <= 0):
            raise ValidationError("trajectory grid must be strictly increasing")


def _initial_step(f, t0, y0, f0, cfg: IntegratorConfig, span: float) -> float:
    scale = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = f(t0 + h0, y0 + h0 * f0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span, cfg.max_step)


def integrate(rhs: Callable[[float, np.ndarray], np.ndarray], x0: Sequence[float],
              t_grid: Sequence[float], cfg: IntegratorConfig | None = None,
              breakpoints: Sequence[float] = ()) -> Trajectory:
    """Integrate ``y' = rhs(t, y)`` and report the solution on ``t_grid``.

    ``breakpoints`` are times where the right-hand side has a kink (e.g. the
    corners of a temperature program); steps never straddle them.
    """
    cfg = cfg or IntegratorConfig()
    t_grid = np.asarray(t_grid, dtype=float)
    y = np.array(x0, dtype=float)
    if np.any(y < 0):
        raise ValidationError("initial state must be non-negative")
    if len(t_grid) == 0:
        raise ValidationError("empty output grid")
    t0, t_end = float(t_grid[0]), float(t_grid[-1])
    out = np.empty((len(t_grid), y.size))
    out[0] = y
    nxt = 1
    stops = sorted({float(b) for b in breakpoints if t0 < b < t_end} | {t_end})

    t = t0
    k = np.empty((7, y.size))
    fy = np.asarray(rhs(t, y), dtype=float)
    h = cfg.initial_step or _initial_step(rhs, t, y, fy, cfg, t_end - t0)
    err_prev = 1e-4
    n_steps = n_rejected = n_clamped = 0

    for stop in stops:
        while t < stop:
            if n_steps + n_rejected >= cfg.max_steps:
                raise DivergenceError(f"max_steps={cfg.max_steps} exceeded at t={t:.6g}", t)
            h = min(h, cfg.max_step)
            last = t + h >= stop - 1e-12 * max(1.0, abs(stop))
            if last:
                h = stop - t
            if h < 1e-12 * max(1.0, abs(t)):
                raise DivergenceError(f"step size underflow at t={t:.6g}", t)

            k[0] = fy
            for i in range(1, 7):
                yi = y + h * (np.dot(_A[i], k[:i]))
                k[i] = rhs(t + _C[i] * h, yi)
            y_new = y + h * (B5 @ k)
            err_vec = h * (_E @ k)
            scale = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
            err = math.sqrt(float(np.mean((err_vec / scale) ** 2)))
            if not math.isfinite(err):
                raise DivergenceError(f"non-finite error estimate at t={t:.6g}", t)

            if err <= 1.0:
                t_new = stop if last else t + h
                # dense output for grid points inside (t, t_new]
                while nxt < len(t_grid) and t_grid[nxt] <= t_new + 1e-12:
                    theta = (t_grid[nxt] - t) / h
                    powers = np.array([theta, theta ** 2, theta ** 3, theta ** 4])
                    out[nxt] = y + h * (k.T @ (DENSE_P @ powers))
                    nxt += 1
                neg = y_new < 0
                if neg.any():
                    worst = float(-y_new[neg].min())
                    if worst > CLAMP_LIMIT:
                        raise DivergenceError(
                            f"state went negative by {worst:.3g} at t={t_new:.6g}", t_new)
                    n_clamped += 1
                    log.debug("clamped %d negative component(s) at t=%g", int(neg.sum()), t_new)
                    y_new = np.maximum(y_new, 0.0)
                    fy = np.asarray(rhs(t_new, y_new), dtype=float)
                else:
                    fy = k[6].copy()
                t, y = t_new, y_new
                n_steps += 1
                factor = _SAFETY * max(err, 1e-10) ** -_ALPHA * err_prev ** _BETA
                h *= min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
                err_prev = max(err, 1e-4)
            else:
                n_rejected += 1
                h *= max(_MIN_FACTOR, _SAFETY * err ** -_ALPHA)

    if nxt < len(t_grid):  # grid points coinciding with t_end up to roundoff
        out[nxt:] = y
    if n_clamped:
        log.warning("integration clamped negative states %d time(s)", n_clamped)
    np.maximum(out, 0.0, out=out)
    return Trajectory(t_grid, out, n_steps, n_rejected, n_clamped)
