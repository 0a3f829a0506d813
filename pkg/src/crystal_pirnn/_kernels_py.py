"""Pure-numpy implementations of the hot kernels.

These are the reference versions; :mod:`crystal_pirnn._kernels` (Cython)
implements the same functions with identical signatures and must agree
with them to rounding error.  :mod:`crystal_pirnn.kernels` picks one at
import time.

Recurrent weights use the gate order (i, f, g, o) stacked along the first
axis, so every gate block is ``H`` rows tall.
"""
from __future__ import annotations

import math

import numpy as np

BN_EPS = 1e-5


def moment_rhs(y, T_kelvin: float, theta, sol, mass_factor: float, ms_factor: float,
               R: float, out=None):
    """Moment right-hand side on plain floats.

    ``theta`` holds the physical (kb2, alpha, beta, kg, Eag, gammag);
    ``sol`` holds (c0, c1, c2, c3, shift_fraction).
    """
    mu0, mu1, mu2, mu3, C = y[0], y[1], y[2], y[3], y[4]
    kb2, alpha, beta, kg, Eag, gam = theta[0], theta[1], theta[2], theta[3], theta[4], theta[5]
    T = T_kelvin
    cs = (1.0 + sol[4]) * (sol[0] + T * (sol[1] + T * (sol[2] + T * sol[3])))
    drive = C - cs
    G = kg * math.exp(-Eag / (R * T)) * drive ** gam if drive > 0.0 else 0.0
    excess = C / cs - 1.0
    m_s = ms_factor * mu3 if mu3 > 0.0 else 0.0
    B2 = kb2 * excess ** alpha * m_s ** beta if (excess > 0.0 and m_s > 0.0) else 0.0
    if out is None:
        out = np.empty(5)
    dmu3 = 3.0 * G * mu2
    out[0] = B2
    out[1] = G * mu0
    out[2] = 2.0 * G * mu1
    out[3] = dmu3
    out[4] = -mass_factor * dmu3
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def rollout_forward(W1x, W1h, b1, W2x, W2h, b2, bn_gamma, bn_beta, bn_mean, bn_var,
                    Wd, bd, x0, tin, drop_mask, use_bn: bool):
    """Autoregressive rollout of the two-layer LSTM decoder.

    Row 0 of the output is ``x0``; for ``k >= 1`` the cell input is
    ``[out[k-1], tin[k]]``.  ``drop_mask`` is an (N, H) array of already
    rescaled keep factors (all ones in evaluation mode).  Batch-norm
    statistics are treated as constants during the rollout.

    Returns ``(out, cache)`` where ``cache`` feeds :func:`rollout_backward`.
    """
    N = tin.shape[0]
    H = W1h.shape[1]
    out = np.empty((N, 5))
    out[0] = x0
    inp = np.zeros((N, 6))
    gates1 = np.zeros((N, 4 * H))
    gates2 = np.zeros((N, 4 * H))
    c1 = np.zeros((N, H))
    c2 = np.zeros((N, H))
    h1 = np.zeros((N, H))
    h2 = np.zeros((N, H))
    u = np.zeros((N, H))
    y = np.zeros((N, 5))
    if use_bn:
        inv_std = 1.0 / np.sqrt(bn_var + BN_EPS)
        scale = bn_gamma * inv_std
        shift = bn_beta - bn_mean * scale
    for k in range(1, N):
        inp[k, :5] = out[k - 1]
        inp[k, 5] = tin[k]
        z = W1x @ inp[k] + W1h @ h1[k - 1] + b1
        a = gates1[k]
        a[:2 * H] = _sigmoid(z[:2 * H])
        a[2 * H:3 * H] = np.tanh(z[2 * H:3 * H])
        a[3 * H:] = _sigmoid(z[3 * H:])
        c1[k] = a[H:2 * H] * c1[k - 1] + a[:H] * a[2 * H:3 * H]
        h1[k] = a[3 * H:] * np.tanh(c1[k])

        z = W2x @ h1[k] + W2h @ h2[k - 1] + b2
        a = gates2[k]
        a[:2 * H] = _sigmoid(z[:2 * H])
        a[2 * H:3 * H] = np.tanh(z[2 * H:3 * H])
        a[3 * H:] = _sigmoid(z[3 * H:])
        c2[k] = a[H:2 * H] * c2[k - 1] + a[:H] * a[2 * H:3 * H]
        h2[k] = a[3 * H:] * np.tanh(c2[k])

        u[k] = h2[k] * scale + shift if use_bn else h2[k]
        y[k] = Wd @ (u[k] * drop_mask[k]) + bd
        out[k] = _softplus(y[k])
    cache = dict(inp=inp, gates1=gates1, gates2=gates2, c1=c1, c2=c2, h1=h1, h2=h2,
                 u=u, y=y, drop_mask=drop_mask, use_bn=use_bn)
    return out, cache


def rollout_backward(W1x, W1h, W2x, W2h, bn_gamma, bn_mean, bn_var, Wd, cache, gout):
    """Backpropagation through time for :func:`rollout_forward`.

    ``gout`` is dLoss/d(out) with shape (N, 5).  Returns a dict of gradients
    keyed like the forward arguments, plus ``x0`` for the initial state.
    """
    inp, g1, g2 = cache["inp"], cache["gates1"], cache["gates2"]
    c1, c2, h1, h2 = cache["c1"], cache["c2"], cache["h1"], cache["h2"]
    u, y, mask, use_bn = cache["u"], cache["y"], cache["drop_mask"], cache["use_bn"]
    N = gout.shape[0]
    H = W1h.shape[1]
    grads = {name: np.zeros_like(arr) for name, arr in
             (("W1x", W1x), ("W1h", W1h), ("W2x", W2x), ("W2h", W2h), ("Wd", Wd))}
    grads.update(b1=np.zeros(4 * H), b2=np.zeros(4 * H), bd=np.zeros(5),
                 bn_gamma=np.zeros(H), bn_beta=np.zeros(H))
    inv_std = 1.0 / np.sqrt(bn_var + BN_EPS) if use_bn else None
    gx_next = np.zeros(5)
    dh1_next = np.zeros(H)
    dc1_next = np.zeros(H)
    dh2_next = np.zeros(H)
    dc2_next = np.zeros(H)
    dz = np.empty(4 * H)
    for k in range(N - 1, 0, -1):
        gx = gout[k] + gx_next
        dy = gx * _sigmoid(y[k])
        grads["Wd"] += np.outer(dy, u[k] * mask[k])
        grads["bd"] += dy
        du = (Wd.T @ dy) * mask[k]
        if use_bn:
            grads["bn_beta"] += du
            grads["bn_gamma"] += du * (h2[k] - bn_mean) * inv_std
            dh2 = du * bn_gamma * inv_std + dh2_next
        else:
            dh2 = du + dh2_next

        a = g2[k]
        tc = np.tanh(c2[k])
        dc = dh2 * a[3 * H:] * (1.0 - tc * tc) + dc2_next
        dz[:H] = dc * a[2 * H:3 * H] * a[:H] * (1.0 - a[:H])
        dz[H:2 * H] = dc * c2[k - 1] * a[H:2 * H] * (1.0 - a[H:2 * H])
        dz[2 * H:3 * H] = dc * a[:H] * (1.0 - a[2 * H:3 * H] ** 2)
        dz[3 * H:] = dh2 * tc * a[3 * H:] * (1.0 - a[3 * H:])
        dc2_next = dc * a[H:2 * H]
        grads["W2x"] += np.outer(dz, h1[k])
        grads["W2h"] += np.outer(dz, h2[k - 1])
        grads["b2"] += dz
        dh1 = W2x.T @ dz + dh1_next
        dh2_next = W2h.T @ dz

        a = g1[k]
        tc = np.tanh(c1[k])
        dc = dh1 * a[3 * H:] * (1.0 - tc * tc) + dc1_next
        dz[:H] = dc * a[2 * H:3 * H] * a[:H] * (1.0 - a[:H])
        dz[H:2 * H] = dc * c1[k - 1] * a[H:2 * H] * (1.0 - a[H:2 * H])
        dz[2 * H:3 * H] = dc * a[:H] * (1.0 - a[2 * H:3 * H] ** 2)
        dz[3 * H:] = dh1 * tc * a[3 * H:] * (1.0 - a[3 * H:])
        dc1_next = dc * a[H:2 * H]
        grads["W1x"] += np.outer(dz, inp[k])
        grads["W1h"] += np.outer(dz, h1[k - 1])
        grads["b1"] += dz
        dh1_next = W1h.T @ dz
        gx_next = (W1x.T @ dz)[:5]
    grads["x0"] = gout[0] + gx_next
    return grads
