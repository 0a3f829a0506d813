"""Independent reference implementations used by the tests.

Nothing here imports the package's numerics: the right-hand side is written
out straight from the kinetic laws and integrated with a classical
fixed-step RK4 scheme, vectorised over runs.
"""
from __future__ import annotations

import math

import numpy as np

R_GAS = 8.314
REF_THETA = (6.000e3, 2.080, 0.713, 2.730e5, 4.130e4, 1.240)
SOL = (-16.17, 1.765e-1, -6.439e-4, 7.915e-7)


def solubility_oracle(T, shift=0.0):
    c0, c1, c2, c3 = SOL
    return (1.0 + shift) * (c0 + c1 * T + c2 * T ** 2 + c3 * T ** 3)


def growth_oracle(T, dC, theta=REF_THETA):
    kb2, a, b, kg, E, g = theta
    return kg * math.exp(-E / (R_GAS * T)) * dC ** g if dC > 0 else 0.0


def nucleation_oracle(S, m_s, theta=REF_THETA):
    kb2, a, b, kg, E, g = theta
    if S <= 1 or m_s <= 0:
        return 0.0
    return kb2 * (S - 1) ** a * m_s ** b


def profile_oracle(t, T_plat, r, t_plat):
    """Vectorised temperature program in degC (arrays over runs allowed)."""
    t_cool = t_plat + T_plat / r
    return np.where(t < t_plat, T_plat, np.where(t < t_cool, T_plat - r * (t - t_plat), 0.0))


def rhs_oracle(y, T_kelvin, theta, kv_rho, shift=0.0):
    """y: (n_runs, 5); T: (n_runs,).  Straight-line transcription of the kinetics."""
    kb2, a, b, kg, E, g = theta
    mu0, mu1, mu2, mu3, C = y.T
    cs = solubility_oracle(T_kelvin, shift)
    dC = np.maximum(C - cs, 0.0)
    G = np.where(C > cs, kg * np.exp(-E / (R_GAS * T_kelvin)) * np.maximum(dC, 1e-300) ** g, 0.0)
    excess = C / cs - 1.0
    ms = 1e-9 * kv_rho * np.maximum(mu3, 0.0)
    B = np.where((excess > 0) & (ms > 0),
                 kb2 * np.maximum(excess, 1e-300) ** a * np.maximum(ms, 1e-300) ** b, 0.0)
    out = np.empty_like(y)
    out[:, 0] = B
    out[:, 1] = G * mu0
    out[:, 2] = 2 * G * mu1
    out[:, 3] = 3 * G * mu2
    out[:, 4] = -1e-12 * kv_rho * 3 * G * mu2
    return out


def rk4_batch(conds, x0, t_out, h=0.01, theta=REF_THETA, kv_rho=3.86e7 * 1.296, shift=0.0):
    """Fixed-step RK4 for many runs at once; returns (n_runs, len(t_out), 5).

    ``conds`` is an (n_runs, 3) array of (T_plat, r, t_plat).  ``t_out``
    must lie on the step lattice.
    """
    conds = np.asarray(conds, dtype=float)
    Tp, r, tp = conds[:, 0], conds[:, 1], conds[:, 2]
    y = np.array(x0, dtype=float)
    n_steps = int(round(t_out[-1] / h))
    out_idx = {int(round(t / h)): i for i, t in enumerate(t_out)}
    res = np.empty((len(conds), len(t_out), 5))
    if 0 in out_idx:
        res[:, out_idx[0]] = y

    def f(t, y):
        T = profile_oracle(t, Tp, r, tp) + 273.15
        return rhs_oracle(y, T, theta, kv_rho, shift)

    for n in range(n_steps):
        t = n * h
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if n + 1 in out_idx:
            res[:, out_idx[n + 1]] = y
    return res


def numeric_grad(f, x, eps=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        up = f(x.copy())
        flat[i] = o - eps
        dn = f(x.copy())
        flat[i] = o
        g.reshape(-1)[i] = (up - dn) / (2 * eps)
    return g
