"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--hidden 64] [--steps 101] [--repeat 20]

Prints the median wall time of one rollout forward pass, one backward
pass and one right-hand-side evaluation for each available backend.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from crystal_pirnn import _kernels_py
from crystal_pirnn.pbm import KineticParameters, PhysicalConstants, SolubilityModel


def _backends():
    out = {"python": _kernels_py}
    try:
        from crystal_pirnn import _kernels
        out["cython"] = _kernels
    except ImportError:
        print("compiled extension not built; timing the fallback only")
    return out


def _median_time(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--steps", type=int, default=101)
    p.add_argument("--repeat", type=int, default=20)
    a = p.parse_args()
    H, N = a.hidden, a.steps
    rng = np.random.default_rng(0)
    u = lambda *s: rng.uniform(-0.3, 0.3, size=s)
    w = dict(W1x=u(4 * H, 6), W1h=u(4 * H, H), b1=u(4 * H), W2x=u(4 * H, H), W2h=u(4 * H, H),
             b2=u(4 * H), gamma=1 + u(H), beta=u(H), mean=u(H), var=1 + np.abs(u(H)),
             Wd=u(5, H), bd=u(5))
    x0, T, mask = rng.uniform(0, 1, 5), rng.uniform(0, 1, N), np.ones((N, H))
    g = rng.normal(size=(N, 5))
    theta = KineticParameters.reference().physical_vector()
    s = SolubilityModel()
    sol = np.array([s.c0, s.c1, s.c2, s.c3, 0.0])
    c = PhysicalConstants()
    y = np.array([2e7, 5e5, 3e4, 4e3, 0.3])

    print(f"hidden={H} steps={N} repeat={a.repeat}")
    print(f"{'backend':<8}{'forward [ms]':>14}{'backward [ms]':>15}{'rhs [us]':>11}")
    for name, k in _backends().items():
        fwd = lambda: k.rollout_forward(w["W1x"], w["W1h"], w["b1"], w["W2x"], w["W2h"], w["b2"],
                                        w["gamma"], w["beta"], w["mean"], w["var"], w["Wd"],
                                        w["bd"], x0, T, mask, True)
        _, cache = fwd()
        bwd = lambda: k.rollout_backward(w["W1x"], w["W1h"], w["W2x"], w["W2h"], w["gamma"],
                                         w["mean"], w["var"], w["Wd"], cache, g)
        rhs = lambda: k.moment_rhs(y, 300.0, theta, sol, c.mass_factor,
                                   c.unit_ms_scale * c.k_v * c.rho, c.R)
        tf, tb = _median_time(fwd, a.repeat), _median_time(bwd, a.repeat)
        tr = _median_time(rhs, a.repeat * 50)
        print(f"{name:<8}{1e3 * tf:>14.3f}{1e3 * tb:>15.3f}{1e6 * tr:>11.2f}")


if __name__ == "__main__":
    main()
