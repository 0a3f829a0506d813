"""Training objective: adaptive MSE/Huber data term, smoothness, physics residual.

All functions take and return autodiff tensors.  Predictions are the
normalised (N, 5) trajectories produced by the network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError, ValidationError
from .pbm import (STATE_NAMES, KineticParameters, PhysicalConstants, SolubilityModel,
                  moment_rhs)


@dataclass(frozen=True)
class LossConfig:
    lambda_physics: float = 1.0
    huber_delta: float = 0.1
    eta_init: float = 0.1
    w_mix: float = 1.0  # weight of the adaptive MSE/Huber mixture
    w_smooth: float = 1.0
    dt: float = 1.0
    time_scale: float = 500.0  # minutes per unit of normalised time in the physics residual

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ValidationError("huber_delta must be positive")
        if not (self.dt > 0 and self.time_scale > 0):
            raise ValidationError("dt and time_scale must be positive")
        if self.lambda_physics < 0:
            raise ValidationError("lambda_physics must be non-negative")


def huber(residual, delta: float = 0.1):
    """Elementwise Huber penalty: quadratic inside |r| < delta, linear outside."""
    if not delta > 0:
        raise ValidationError("huber delta must be positive")
    if not isinstance(residual, Tensor):
        r = np.asarray(residual, dtype=float)
        a = np.abs(r)
        out = np.where(a < delta, 0.5 * r * r, delta * (a - 0.5 * delta))
        return float(out) if out.ndim == 0 else out
    a = residual.abs()
    inside = a.data < delta
    return ad.where(inside, 0.5 * ad.square(residual), delta * (a - 0.5 * delta))


def smoothness_loss(pred: Tensor) -> Tensor:
    """Mean over interior steps of the squared norm of the second difference."""
    if pred.shape[0] < 3:
        raise ContractError("smoothness_loss needs at least 3 time steps")
    d2 = pred[2:] - 2.0 * pred[1:-1] + pred[:-2]
    return ad.square(d2).sum(axis=1).mean()


def noise_weight(eta) -> Tensor:
    """omega = sigmoid(-eta), the MSE share of the data loss."""
    return ad.sigmoid(-1.0 * ad._wrap(eta))


def data_loss(pred: Tensor, obs, mask, eta, delta: float = 0.1, w_mix: float = 1.0,
              w_smooth: float = 1.0) -> Tensor:
    """omega * MSE + (1 - omega) * mean Huber over observed entries, plus smoothness."""
    obs = np.asarray(obs, dtype=float)
    m = np.asarray(mask, dtype=bool)
    if pred.shape != obs.shape or m.shape != obs.shape:
        raise ContractError(f"data_loss: shapes pred {pred.shape}, obs {obs.shape}, mask {m.shape}")
    n = int(m.sum())
    if n == 0:
        raise ContractError("data_loss: the mask selects no observations")
    w = m.astype(float)
    r = (pred - np.where(m, obs, 0.0)) * w
    mse = ad.square(r).sum() * (1.0 / n)
    hub = (huber(r, delta) * w).sum() * (1.0 / n)
    omega = noise_weight(eta)
    mix = omega * mse + (1.0 - omega) * hub
    return w_mix * mix + w_smooth * smoothness_loss(pred)


def _check_residual_inputs(N: int, T_kelvin, dt: float, time_scale: float) -> np.ndarray:
    if N < 3:
        raise ContractError("physics_loss needs at least 3 time steps")
    T = np.asarray(T_kelvin, dtype=float)
    if T.shape != (N,):
        raise ContractError(f"physics_loss: temperature length {T.shape} does not match {N}")
    if not (dt > 0 and time_scale > 0):
        raise ContractError("dt and time_scale must be positive")
    return T


def physics_residual(pred: Tensor, T_kelvin, log_params, scales, consts: PhysicalConstants,
                     dt: float, model: SolubilityModel | None = None,
                     time_scale: float = 1.0) -> list[Tensor]:
    """Per-component residuals (FD derivative minus normalised PBM rate) at interior steps.

    Both sides are expressed per unit of normalised time ``t / time_scale``
    (``dt`` and ``time_scale`` share the same unit, minutes).
    """
    N = pred.shape[0]
    T = _check_residual_inputs(N, T_kelvin, dt, time_scale)
    scales = np.asarray(scales, dtype=float)
    model = model or SolubilityModel()
    if not isinstance(log_params, KineticParameters):
        log_params = KineticParameters.from_log_vector(log_params)
    inner = pred[1:-1]
    cols = [inner[:, i] * float(scales[i]) for i in range(5)]
    rates = moment_rhs(cols, T[1:-1], log_params, model, consts)
    out = []
    for i in range(5):
        fd = (pred[2:, i] - pred[:-2, i]) * (time_scale / (2.0 * dt))
        rate = ad._wrap(rates[i]) * (time_scale / float(scales[i]))
        bad = ~np.isfinite(rate.data)
        if bad.any():
            k = int(np.argmax(bad)) + 1
            raise NumericError(f"non-finite PBM rate at step {k}, component {STATE_NAMES[i]}")
        out.append(fd - rate)
    return out


def physics_residual_array(pred: np.ndarray, T_kelvin, params: KineticParameters, scales,
                           consts: PhysicalConstants, dt: float,
                           model: SolubilityModel | None = None,
                           time_scale: float = 1.0) -> np.ndarray:
    """Plain-array twin of :func:`physics_residual`, shape (N - 2, 5).

    Used where no gradient is needed (parameter refits, diagnostics);
    non-finite rates are returned as they are rather than raised.
    """
    pred = np.asarray(pred, dtype=float)
    T = _check_residual_inputs(pred.shape[0], T_kelvin, dt, time_scale)
    scales = np.asarray(scales, dtype=float)
    inner = pred[1:-1] * scales
    with np.errstate(all="ignore"):
        rates = moment_rhs([inner[:, i] for i in range(5)], T[1:-1], params,
                           model or SolubilityModel(), consts)
        rate = np.column_stack([np.broadcast_to(np.asarray(r, dtype=float), (len(T) - 2,))
                                for r in rates]) * (time_scale / scales)
    fd = (pred[2:] - pred[:-2]) * (time_scale / (2.0 * dt))
    return fd - rate


def physics_loss(pred: Tensor, T_kelvin, log_params, scales, consts: PhysicalConstants,
                 dt: float, model: SolubilityModel | None = None,
                 time_scale: float = 1.0) -> Tensor:
    """MSE of the central-difference residual over interior steps and all components.

    ``model`` defaults to the unshifted solubility correlation, whatever
    solubility generated the data.
    """
    res = physics_residual(pred, T_kelvin, log_params, scales, consts, dt, model, time_scale)
    total = ad.square(res[0]).sum()
    for r in res[1:]:
        total = total + ad.square(r).sum()
    return total * (1.0 / (5 * (pred.shape[0] - 2)))


def total_loss(data, physics, lam: float):
    if lam < 0:
        raise ValidationError("lambda must be non-negative")
    return data + lam * physics
