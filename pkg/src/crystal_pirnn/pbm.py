"""Crystallization kinetics and the moment-form population balance.

Every function here is written against the small dispatch layer in
:mod:`crystal_pirnn.autodiff` (``ad.exp``, ``ad.where`` ...), so the same
code evaluates on Python floats, numpy arrays (vectorised over time or over
runs) and :class:`~crystal_pirnn.autodiff.Tensor` values inside the physics
loss.

Units: moments are per gram of solvent with lengths in micrometres
(mu_i in um^i/g), concentrations in g solute / g solvent, time in minutes,
temperature in Kelvin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import DivisionDomainError, EvaluationError, RangeError, ValidationError

PARAM_NAMES = ("kb2", "alpha", "beta", "kg", "Eag", "gammag")
STATE_NAMES = ("mu0", "mu1", "mu2", "mu3", "C")

# floor applied before fractional powers so that d/dx x**a stays finite
POWER_FLOOR = 1e-12

T_GUARD = (223.15, 373.15)


@dataclass(frozen=True)
class KineticParameters:
    """The six kinetic constants, stored as natural logarithms.

    Fields may hold floats or autodiff tensors; the physical values are
    exposed as properties (``p.kb2`` == exp(``p.log_kb2``)).
    """

    log_kb2: Any
    log_alpha: Any
    log_beta: Any
    log_kg: Any
    log_Eag: Any
    log_gammag: Any

    @classmethod
    def from_physical(cls, kb2, alpha, beta, kg, Eag, gammag) -> "KineticParameters":
        vals = (kb2, alpha, beta, kg, Eag, gammag)
        if any(not v > 0 for v in vals):
            raise ValidationError(f"kinetic parameters must be positive, got {vals}")
        return cls(*(math.log(v) for v in vals))

    @classmethod
    def reference(cls) -> "KineticParameters":
        """Literature values used to generate the synthetic data."""
        return cls.from_physical(6.000e3, 2.080, 0.713, 2.730e5, 4.130e4, 1.240)

    @classmethod
    def initial(cls) -> "KineticParameters":
        """Learner initialisation: every physical value equal to one."""
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_log_vector(cls, v) -> "KineticParameters":
        """Build from a length-6 sequence or a (6,) tensor of log values."""
        if isinstance(v, ad.Tensor):
            return cls(*(v[i] for i in range(6)))
        v = [float(x) for x in v]
        if len(v) != 6:
            raise ValidationError(f"expected 6 log-parameters, got {len(v)}")
        return cls(*v)

    def log_vector(self) -> np.ndarray:
        return np.array([float(ad.value(getattr(self, f"log_{n}"))) for n in PARAM_NAMES])

    def physical_vector(self) -> np.ndarray:
        return np.exp(self.log_vector())

    def as_dict(self) -> dict[str, float]:
        return dict(zip(PARAM_NAMES, self.physical_vector().tolist()))

    kb2 = property(lambda self: ad.exp(self.log_kb2))
    alpha = property(lambda self: ad.exp(self.log_alpha))
    beta = property(lambda self: ad.exp(self.log_beta))
    kg = property(lambda self: ad.exp(self.log_kg))
    Eag = property(lambda self: ad.exp(self.log_Eag))
    gammag = property(lambda self: ad.exp(self.log_gammag))


@dataclass(frozen=True)
class CenteredCoordinates:
    """Optimisation coordinates that decorrelate prefactors from exponents.

    The learnable vector ``u`` keeps the log of alpha, beta, Eag and gammag
    but replaces the two prefactors by their values at a reference operating
    point::

        u_kb2 = log kb2 + alpha log s_ref + beta log m_ref
        u_kg  = log kg - Eag / (R T_ref) + gammag log d_ref

    so that changing an exponent leaves the rate at the reference point
    unchanged.  The map is a bijection onto the usual log parameters.
    """

    T_ref: float = 298.15
    s_ref: float = 0.3
    m_ref: float = 100.0
    d_ref: float = 0.05
    R: float = 8.314

    def __post_init__(self):
        if not all(v > 0 for v in (self.T_ref, self.s_ref, self.m_ref, self.d_ref, self.R)):
            raise ValidationError("reference point values must be positive")

    def to_parameters(self, u) -> "KineticParameters":
        """Map ``u`` (length-6 array or (6,) tensor) to log parameters."""
        comps = [u[i] for i in range(6)]
        alpha, beta, Eag, gam = (ad.exp(comps[i]) for i in (1, 2, 4, 5))
        log_kb2 = comps[0] - alpha * math.log(self.s_ref) - beta * math.log(self.m_ref)
        log_kg = comps[3] + Eag * (1.0 / (self.R * self.T_ref)) - gam * math.log(self.d_ref)
        return KineticParameters(log_kb2, comps[1], comps[2], log_kg, comps[4], comps[5])

    def from_log_vector(self, v) -> np.ndarray:
        lv = np.asarray(v, dtype=float)
        alpha, beta, Eag, gam = np.exp(lv[[1, 2, 4, 5]])
        u = lv.copy()
        u[0] = lv[0] + alpha * math.log(self.s_ref) + beta * math.log(self.m_ref)
        u[3] = lv[3] - Eag / (self.R * self.T_ref) + gam * math.log(self.d_ref)
        return u


@dataclass(frozen=True)
class PhysicalConstants:
    """Crystal properties and unit conversions of the mass balance.

    ``k_v`` is an effective shape factor calibrated so that a reference run
    (C0 = 0.45, mid-range temperature program) relaxes to S ~ 1 within the
    500 min batch; see the README for the calibration.
    """

    k_v: float = 3.86e7
    rho: float = 1.296
    R: float = 8.314
    unit_mu3_to_cm3_per_g: float = 1e-12
    unit_ms_scale: float = 1e-9

    def __post_init__(self):
        for name in ("k_v", "rho", "R", "unit_mu3_to_cm3_per_g", "unit_ms_scale"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be strictly positive")

    @property
    def mass_factor(self) -> float:
        """g solute / g solvent deposited per unit of mu3."""
        return self.unit_mu3_to_cm3_per_g * self.k_v * self.rho


@dataclass(frozen=True)
class SolubilityModel:
    """Cubic solubility polynomial in Kelvin with an optional relative shift."""

    c0: float = -16.17
    c1: float = 1.765e-1
    c2: float = -6.439e-4
    c3: float = 7.915e-7
    shift_fraction: float = 0.0

    def shifted(self, fraction: float) -> "SolubilityModel":
        return replace(self, shift_fraction=fraction)


@dataclass
class MomentState:
    mu0: float
    mu1: float
    mu2: float
    mu3: float
    C: float

    def __post_init__(self):
        if min(self.as_array()) < 0:
            raise ValidationError(f"moment state must be non-negative: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.mu0, self.mu1, self.mu2, self.mu3, self.C], dtype=float)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "MomentState":
        return cls(*(float(v) for v in a))


def solubility(model: SolubilityModel, T_kelvin):
    """Saturated concentration [g/g] at ``T_kelvin`` (scalar or array)."""
    T = np.asarray(T_kelvin, dtype=float)
    if T.size and (T.min() < T_GUARD[0] or T.max() > T_GUARD[1]):
        raise RangeError(f"temperature {T.min():.2f}..{T.max():.2f} K outside {T_GUARD}")
    cs = (1.0 + model.shift_fraction) * (model.c0 + T * (model.c1 + T * (model.c2 + T * model.c3)))
    if np.any(cs <= 0):
        raise EvaluationError("non-positive solubility; check polynomial coefficients")
    return float(cs) if cs.ndim == 0 else cs


def supersaturation(C, C_S):
    if np.any(np.asarray(C_S) <= 0):
        raise DivisionDomainError("solubility must be positive to form C/C_S")
    return C / C_S


def growth_rate(p: KineticParameters, T_kelvin, C, C_S, R: float = 8.314):
    """Size-independent growth rate [um/min], zero when undersaturated."""
    if np.any(np.asarray(T_kelvin) <= 0):
        raise RangeError("absolute temperature must be positive")
    drive = C - C_S
    active = ad.value(drive) > 0
    arrhenius = p.kg * ad.exp(-p.Eag / (R * T_kelvin))
    g = arrhenius * ad.power(ad.clamp_min(drive, POWER_FLOOR), p.gammag)
    return ad.where(active, g, 0.0)


def secondary_nucleation_rate(p: KineticParameters, S, m_s):
    """B2 = kb2 (S-1)^alpha m_s^beta, zero for S <= 1 or m_s == 0."""
    if np.any(ad.value(m_s) < 0):
        raise ValidationError("crystal mass loading must be non-negative")
    excess = S - 1.0
    active = (ad.value(excess) > 0) & (ad.value(m_s) > 0)
    b = p.kb2 * ad.power(ad.clamp_min(excess, POWER_FLOOR), p.alpha) * ad.power(
        ad.clamp_min(m_s, POWER_FLOOR), p.beta
    )
    return ad.where(active, b, 0.0)


def crystal_mass_loading(mu3, consts: PhysicalConstants):
    """Suspended crystal mass m_s [g crystals / kg solvent]."""
    if np.any(ad.value(mu3) < 0):
        raise ValidationError("mu3 must be non-negative")
    return (consts.unit_ms_scale * consts.k_v * consts.rho) * mu3


def moment_rhs(x, T_kelvin, p: KineticParameters, model: SolubilityModel,
               consts: PhysicalConstants) -> list:
    """Time derivatives of [mu0, mu1, mu2, mu3, C].

    ``x`` is any length-5 sequence; its entries may be floats, arrays of a
    common shape (vectorised evaluation) or tensors.
    """
    mu0, mu1, mu2, mu3, C = (x[i] for i in range(5))
    cs = solubility(model, T_kelvin)
    G = growth_rate(p, T_kelvin, C, cs, consts.R)
    m_s = crystal_mass_loading(ad.clamp_min(mu3, 0.0) if isinstance(mu3, ad.Tensor)
                               else np.maximum(mu3, 0.0), consts)
    B2 = secondary_nucleation_rate(p, supersaturation(C, cs), m_s)
    dmu3 = 3.0 * G * mu2
    return [B2, G * mu0, 2.0 * G * mu1, dmu3, -consts.mass_factor * dmu3]


def rhs_numpy(p: KineticParameters, model: SolubilityModel, consts: PhysicalConstants,
              temperature_c):
    """Plain-float RHS f(t, y) for the integrator; ``temperature_c(t)`` in Celsius.

    Uses the compiled kernel, which skips the per-call temperature guard;
    callers are expected to validate the temperature program up front.
    """
    theta = np.ascontiguousarray(p.physical_vector())
    sol = np.array([model.c0, model.c1, model.c2, model.c3, model.shift_fraction])
    ms_factor = consts.unit_ms_scale * consts.k_v * consts.rho
    mass_factor, R = consts.mass_factor, consts.R

    def f(t, y):
        return kernels.moment_rhs(y, temperature_c(t) + 273.15, theta, sol, mass_factor,
                                  ms_factor, R)

    return f
