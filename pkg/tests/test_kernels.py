"""The compiled kernels and the numpy fallback must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest

from crystal_pirnn import _kernels_py, kernels
from crystal_pirnn.pbm import KineticParameters, PhysicalConstants, SolubilityModel

compiled = pytest.importorskip("crystal_pirnn._kernels", reason="compiled extension not built")

RNG = np.random.default_rng(2024)


def _weights(H=16):
    def u(*shape):
        return RNG.uniform(-0.4, 0.4, size=shape)
    return dict(W1x=u(4 * H, 6), W1h=u(4 * H, H), b1=u(4 * H), W2x=u(4 * H, H),
                W2h=u(4 * H, H), b2=u(4 * H), bn_gamma=1 + u(H), bn_beta=u(H),
                bn_mean=u(H), bn_var=1 + np.abs(u(H)), Wd=u(5, H), bd=u(5))


def _forward(mod, w, x0, T, mask, use_bn):
    return mod.rollout_forward(w["W1x"], w["W1h"], w["b1"], w["W2x"], w["W2h"], w["b2"],
                               w["bn_gamma"], w["bn_beta"], w["bn_mean"], w["bn_var"], w["Wd"],
                               w["bd"], x0, T, mask, use_bn)


def _backward(mod, w, cache, g):
    return mod.rollout_backward(w["W1x"], w["W1h"], w["W2x"], w["W2h"], w["bn_gamma"],
                                w["bn_mean"], w["bn_var"], w["Wd"], cache, g)


def test_backend_flag():
    assert kernels.BACKEND in ("cython", "python")


def test_pure_python_switch():
    code = "from crystal_pirnn import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, CRYSTAL_PIRNN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("use_bn", [True, False])
def test_rollout_backends_agree(use_bn):
    H, N = 16, 25
    w = _weights(H)
    x0 = RNG.uniform(0, 1, 5)
    T = RNG.uniform(0, 1, N)
    mask = (RNG.random((N, H)) > 0.2) / 0.8
    out_c, cache_c = _forward(compiled, w, x0, T, mask, use_bn)
    out_p, cache_p = _forward(_kernels_py, w, x0, T, mask, use_bn)
    np.testing.assert_allclose(out_c, out_p, rtol=1e-12, atol=1e-14)
    g = RNG.normal(size=(N, 5))
    gc = _backward(compiled, w, cache_c, g)
    gp = _backward(_kernels_py, w, cache_p, g)
    assert gc.keys() == gp.keys()
    for k in gc:
        np.testing.assert_allclose(gc[k], gp[k], rtol=1e-10, atol=1e-13, err_msg=k)


def test_rollout_gradient_by_finite_differences():
    H, N = 6, 8
    w = _weights(H)
    x0 = RNG.uniform(0, 1, 5)
    T = RNG.uniform(0, 1, N)
    mask = np.ones((N, H))
    g = RNG.normal(size=(N, 5))
    _, cache = _forward(compiled, w, x0, T, mask, True)
    grads = _backward(compiled, w, cache, g)
    eps = 1e-6
    for name in ("W1x", "b2", "bn_beta", "Wd"):
        flat = w[name].reshape(-1)
        for idx in RNG.choice(flat.size, size=4, replace=False):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = np.sum(_forward(compiled, w, x0, T, mask, True)[0] * g)
            flat[idx] = orig - eps
            dn = np.sum(_forward(compiled, w, x0, T, mask, True)[0] * g)
            flat[idx] = orig
            fd = (up - dn) / (2 * eps)
            assert grads[name].reshape(-1)[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9), name


def test_moment_rhs_backends_agree():
    p = KineticParameters.reference().physical_vector()
    s = SolubilityModel()
    sol = np.array([s.c0, s.c1, s.c2, s.c3, 0.0])
    c = PhysicalConstants()
    ms = c.unit_ms_scale * c.k_v * c.rho
    for _ in range(100):
        y = np.array([RNG.uniform(0, 3e7), RNG.uniform(0, 1e6), RNG.uniform(0, 6e4),
                      RNG.uniform(0, 7e3), RNG.uniform(0.1, 0.5)])
        T = RNG.uniform(273.15, 323.15)
        a = compiled.moment_rhs(y, T, p, sol, c.mass_factor, ms, c.R)
        b = _kernels_py.moment_rhs(y, T, p, sol, c.mass_factor, ms, c.R)
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=0)
