# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels.

Signatures, cache layout and results match :mod:`crystal_pirnn._kernels_py`;
the per-step matrix-vector products go through BLAS (``dgemv``/``dger``).
All arrays are C-contiguous float64, so a row-major (m, n) matrix is seen by
BLAS as its column-major transpose.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, log1p, fabs, pow, sqrt
from scipy.linalg.cython_blas cimport dgemv, dger

cnp.import_array()

BN_EPS = 1e-5
cdef double _BN_EPS = 1e-5


cdef inline double _sig(double z) nogil:
    return 0.5 * (1.0 + tanh(0.5 * z))


cdef inline double _softplus(double z) nogil:
    if z > 0.0:
        return z + log1p(exp(-z))
    return log1p(exp(z))


cdef inline void _matvec(double[:, ::1] W, double* x, double* y, double beta) nogil:
    """y = W @ x + beta * y."""
    cdef int m = W.shape[0], n = W.shape[1], one = 1
    cdef double alpha = 1.0
    cdef char trans = b'T'
    dgemv(&trans, &n, &m, &alpha, &W[0, 0], &n, x, &one, &beta, y, &one)


cdef inline void _matTvec(double[:, ::1] W, double* x, double* y, double beta) nogil:
    """y = W.T @ x + beta * y."""
    cdef int m = W.shape[0], n = W.shape[1], one = 1
    cdef double alpha = 1.0
    cdef char trans = b'N'
    dgemv(&trans, &n, &m, &alpha, &W[0, 0], &n, x, &one, &beta, y, &one)


cdef inline void _outer_acc(double[:, ::1] G, double* a, double* b) nogil:
    """G += outer(a, b)."""
    cdef int m = G.shape[0], n = G.shape[1], one = 1
    cdef double alpha = 1.0
    dger(&n, &m, &alpha, b, &one, a, &one, &G[0, 0], &n)


def moment_rhs(y, double T_kelvin, theta, sol, double mass_factor, double ms_factor,
               double R, out=None):
    """Moment right-hand side on plain floats (see the numpy twin)."""
    cdef double mu0 = y[0], mu1 = y[1], mu2 = y[2], mu3 = y[3], C = y[4]
    cdef double kb2 = theta[0], alpha = theta[1], beta = theta[2]
    cdef double kg = theta[3], Eag = theta[4], gam = theta[5]
    cdef double T = T_kelvin
    cdef double cs = (1.0 + <double>sol[4]) * (<double>sol[0] + T * (<double>sol[1] + T * (
        <double>sol[2] + T * <double>sol[3])))
    cdef double drive = C - cs, G = 0.0, B2 = 0.0, excess, m_s, dmu3
    if drive > 0.0:
        G = kg * exp(-Eag / (R * T)) * pow(drive, gam)
    excess = C / cs - 1.0
    m_s = ms_factor * mu3 if mu3 > 0.0 else 0.0
    if excess > 0.0 and m_s > 0.0:
        B2 = kb2 * pow(excess, alpha) * pow(m_s, beta)
    if out is None:
        out = np.empty(5)
    cdef double[::1] o = out
    dmu3 = 3.0 * G * mu2
    o[0] = B2
    o[1] = G * mu0
    o[2] = 2.0 * G * mu1
    o[3] = dmu3
    o[4] = -mass_factor * dmu3
    return out


cdef void _cell_forward(double* z, double* a, double* c_prev, double* c, double* h, int H) nogil:
    cdef int j
    for j in range(2 * H):
        a[j] = _sig(z[j])
    for j in range(2 * H, 3 * H):
        a[j] = tanh(z[j])
    for j in range(3 * H, 4 * H):
        a[j] = _sig(z[j])
    for j in range(H):
        c[j] = a[H + j] * c_prev[j] + a[j] * a[2 * H + j]
        h[j] = a[3 * H + j] * tanh(c[j])


cdef void _cell_backward(double* dh, double* dc_next, double* a, double* c, double* c_prev,
                         double* dz, int H) nogil:
    """Gate pre-activation gradients; ``dc_next`` is updated in place."""
    cdef int j
    cdef double tc, dc, ai, af, ag, ao
    for j in range(H):
        ai = a[j]
        af = a[H + j]
        ag = a[2 * H + j]
        ao = a[3 * H + j]
        tc = tanh(c[j])
        dc = dh[j] * ao * (1.0 - tc * tc) + dc_next[j]
        dz[j] = dc * ag * ai * (1.0 - ai)
        dz[H + j] = dc * c_prev[j] * af * (1.0 - af)
        dz[2 * H + j] = dc * ai * (1.0 - ag * ag)
        dz[3 * H + j] = dh[j] * tc * ao * (1.0 - ao)
        dc_next[j] = dc * af


def rollout_forward(double[:, ::1] W1x, double[:, ::1] W1h, double[::1] b1,
                    double[:, ::1] W2x, double[:, ::1] W2h, double[::1] b2,
                    double[::1] bn_gamma, double[::1] bn_beta, double[::1] bn_mean,
                    double[::1] bn_var, double[:, ::1] Wd, double[::1] bd,
                    double[::1] x0, double[::1] tin, double[:, ::1] drop_mask, bint use_bn):
    """Autoregressive rollout of the two-layer LSTM decoder (see the numpy twin)."""
    cdef Py_ssize_t N = tin.shape[0]
    cdef int H = W1h.shape[1]
    cdef Py_ssize_t k
    cdef int j, q
    out_a = np.empty((N, 5))
    inp_a = np.zeros((N, 6))
    g1_a = np.zeros((N, 4 * H))
    g2_a = np.zeros((N, 4 * H))
    c1_a = np.zeros((N, H))
    c2_a = np.zeros((N, H))
    h1_a = np.zeros((N, H))
    h2_a = np.zeros((N, H))
    u_a = np.zeros((N, H))
    y_a = np.zeros((N, 5))
    cdef double[:, ::1] out = out_a, inp = inp_a, g1 = g1_a, g2 = g2_a
    cdef double[:, ::1] c1 = c1_a, c2 = c2_a, h1 = h1_a, h2 = h2_a, u = u_a, y = y_a
    cdef double[::1] z = np.empty(4 * H), ud = np.empty(H)
    cdef double[::1] scale = np.ones(H), shift = np.zeros(H)
    if use_bn:
        for j in range(H):
            scale[j] = bn_gamma[j] / sqrt(bn_var[j] + _BN_EPS)
            shift[j] = bn_beta[j] - bn_mean[j] * scale[j]
    for q in range(5):
        out[0, q] = x0[q]
    with nogil:
        for k in range(1, N):
            for q in range(5):
                inp[k, q] = out[k - 1, q]
            inp[k, 5] = tin[k]
            for j in range(4 * H):
                z[j] = b1[j]
            _matvec(W1x, &inp[k, 0], &z[0], 1.0)
            _matvec(W1h, &h1[k - 1, 0], &z[0], 1.0)
            _cell_forward(&z[0], &g1[k, 0], &c1[k - 1, 0], &c1[k, 0], &h1[k, 0], H)

            for j in range(4 * H):
                z[j] = b2[j]
            _matvec(W2x, &h1[k, 0], &z[0], 1.0)
            _matvec(W2h, &h2[k - 1, 0], &z[0], 1.0)
            _cell_forward(&z[0], &g2[k, 0], &c2[k - 1, 0], &c2[k, 0], &h2[k, 0], H)

            for j in range(H):
                u[k, j] = h2[k, j] * scale[j] + shift[j] if use_bn else h2[k, j]
                ud[j] = u[k, j] * drop_mask[k, j]
            for q in range(5):
                y[k, q] = bd[q]
            _matvec(Wd, &ud[0], &y[k, 0], 1.0)
            for q in range(5):
                out[k, q] = _softplus(y[k, q])
    cache = dict(inp=inp_a, gates1=g1_a, gates2=g2_a, c1=c1_a, c2=c2_a, h1=h1_a, h2=h2_a,
                 u=u_a, y=y_a, drop_mask=np.asarray(drop_mask), use_bn=bool(use_bn))
    return out_a, cache


def rollout_backward(double[:, ::1] W1x, double[:, ::1] W1h, double[:, ::1] W2x,
                     double[:, ::1] W2h, double[::1] bn_gamma, double[::1] bn_mean,
                     double[::1] bn_var, double[:, ::1] Wd, cache, double[:, ::1] gout):
    """Backpropagation through time for :func:`rollout_forward`."""
    cdef double[:, ::1] inp = cache["inp"], g1 = cache["gates1"], g2 = cache["gates2"]
    cdef double[:, ::1] c1 = cache["c1"], c2 = cache["c2"], h1 = cache["h1"], h2 = cache["h2"]
    cdef double[:, ::1] u = cache["u"], y = cache["y"], mask = cache["drop_mask"]
    cdef bint use_bn = cache["use_bn"]
    cdef Py_ssize_t N = gout.shape[0]
    cdef int H = W1h.shape[1]
    cdef Py_ssize_t k
    cdef int j, q
    res = dict(W1x=np.zeros_like(np.asarray(W1x)), W1h=np.zeros_like(np.asarray(W1h)),
               W2x=np.zeros_like(np.asarray(W2x)), W2h=np.zeros_like(np.asarray(W2h)),
               Wd=np.zeros_like(np.asarray(Wd)), b1=np.zeros(4 * H), b2=np.zeros(4 * H),
               bd=np.zeros(5), bn_gamma=np.zeros(H), bn_beta=np.zeros(H), x0=np.zeros(5))
    cdef double[:, ::1] dW1x = res["W1x"], dW1h = res["W1h"], dW2x = res["W2x"]
    cdef double[:, ::1] dW2h = res["W2h"], dWd = res["Wd"]
    cdef double[::1] db1 = res["b1"], db2 = res["b2"], dbd = res["bd"]
    cdef double[::1] dgam = res["bn_gamma"], dbet = res["bn_beta"], dx0 = res["x0"]
    cdef double[::1] inv_std = np.ones(H)
    cdef double[::1] gx = np.zeros(5), dy = np.zeros(5), ud = np.zeros(H), du = np.zeros(H)
    cdef double[::1] dh1 = np.zeros(H), dh2 = np.zeros(H)
    cdef double[::1] dh1_next = np.zeros(H), dh2_next = np.zeros(H)
    cdef double[::1] dc1 = np.zeros(H), dc2 = np.zeros(H)
    cdef double[::1] dz = np.zeros(4 * H), dinp = np.zeros(6), gx_next = np.zeros(5)
    if use_bn:
        for j in range(H):
            inv_std[j] = 1.0 / sqrt(bn_var[j] + _BN_EPS)
    with nogil:
        for k in range(N - 1, 0, -1):
            for q in range(5):
                gx[q] = gout[k, q] + gx_next[q]
                dy[q] = gx[q] * _sig(y[k, q])
                dbd[q] += dy[q]
            for j in range(H):
                ud[j] = u[k, j] * mask[k, j]
            _outer_acc(dWd, &dy[0], &ud[0])
            _matTvec(Wd, &dy[0], &du[0], 0.0)
            for j in range(H):
                du[j] = du[j] * mask[k, j]
                if use_bn:
                    dbet[j] += du[j]
                    dgam[j] += du[j] * (h2[k, j] - bn_mean[j]) * inv_std[j]
                    dh2[j] = du[j] * bn_gamma[j] * inv_std[j] + dh2_next[j]
                else:
                    dh2[j] = du[j] + dh2_next[j]

            _cell_backward(&dh2[0], &dc2[0], &g2[k, 0], &c2[k, 0], &c2[k - 1, 0], &dz[0], H)
            _outer_acc(dW2x, &dz[0], &h1[k, 0])
            _outer_acc(dW2h, &dz[0], &h2[k - 1, 0])
            for j in range(4 * H):
                db2[j] += dz[j]
            for j in range(H):
                dh1[j] = dh1_next[j]
            _matTvec(W2x, &dz[0], &dh1[0], 1.0)
            _matTvec(W2h, &dz[0], &dh2_next[0], 0.0)

            _cell_backward(&dh1[0], &dc1[0], &g1[k, 0], &c1[k, 0], &c1[k - 1, 0], &dz[0], H)
            _outer_acc(dW1x, &dz[0], &inp[k, 0])
            _outer_acc(dW1h, &dz[0], &h1[k - 1, 0])
            for j in range(4 * H):
                db1[j] += dz[j]
            _matTvec(W1h, &dz[0], &dh1_next[0], 0.0)
            _matTvec(W1x, &dz[0], &dinp[0], 0.0)
            for q in range(5):
                gx_next[q] = dinp[q]
        for q in range(5):
            dx0[q] = gout[0, q] + gx_next[q]
    return res
