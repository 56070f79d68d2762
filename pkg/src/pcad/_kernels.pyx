# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled per-point kernels: max-pool with argmax and fused batch-norm + ReLU.

Same contracts as ``_kernels_py``.  Inner loops run over the contiguous channel
axis without branches so the compiler can vectorize them; per-channel sums
accumulate in double precision.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def max_pool(real[:, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], W = x.shape[1], C = x.shape[2], b, w, c
    dt = np.float32 if real is float else np.float64
    vals = np.empty((B, C), dtype=dt)
    idx = np.zeros((B, C), dtype=np.int64)
    cdef real[:, ::1] v = vals
    cdef cnp.int64_t[:, ::1] ix = idx
    cdef real *vp
    cdef real *xp
    cdef cnp.int64_t *ip
    cdef bint better
    with nogil:
        for b in range(B):
            vp = &v[b, 0]
            ip = &ix[b, 0]
            xp = &x[b, 0, 0]
            for c in range(C):
                vp[c] = xp[c]
            for w in range(1, W):
                xp = &x[b, w, 0]
                for c in range(C):
                    better = xp[c] > vp[c]
                    vp[c] = xp[c] if better else vp[c]
                    ip[c] = w if better else ip[c]
    return vals, idx


def bn_train(real[:, ::1] z, real[::1] gamma, real[::1] beta, double eps, bint relu):
    cdef Py_ssize_t N = z.shape[0], C = z.shape[1], n, c
    dt = np.float32 if real is float else np.float64
    y_arr = np.empty((N, C), dtype=dt)
    xhat_arr = np.empty((N, C), dtype=dt)
    acc_arr = np.zeros(C, dtype=np.float64)
    mean_arr = np.empty(C, dtype=dt)
    var_arr = np.empty(C, dtype=dt)
    inv_arr = np.empty(C, dtype=dt)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef double[::1] acc = acc_arr
    cdef real[::1] mean = mean_arr
    cdef real[::1] var = var_arr
    cdef real[::1] inv = inv_arr
    cdef real *zp
    cdef real *yp
    cdef real *hp
    cdef real *mp = &mean[0]
    cdef real *ivp = &inv[0]
    cdef real *gp = &gamma[0]
    cdef real *bp = &beta[0]
    cdef double *ap = &acc[0]
    cdef real d, t
    cdef real lo = 0 if relu else -np.inf
    with nogil:
        for n in range(N):
            zp = &z[n, 0]
            for c in range(C):
                ap[c] += zp[c]
        for c in range(C):
            mp[c] = <real>(ap[c] / N)
            ap[c] = 0
        for n in range(N):
            zp = &z[n, 0]
            for c in range(C):
                d = zp[c] - mp[c]
                ap[c] += d * d
        for c in range(C):
            var[c] = <real>(ap[c] / N)
            ivp[c] = <real>(1.0 / sqrt(ap[c] / N + eps))
        for n in range(N):
            zp = &z[n, 0]
            yp = &y[n, 0]
            hp = &xhat[n, 0]
            for c in range(C):
                d = (zp[c] - mp[c]) * ivp[c]
                hp[c] = d
                t = d * gp[c] + bp[c]
                yp[c] = t if t > lo else lo
    return y_arr, xhat_arr, inv_arr, mean_arr, var_arr


def bn_eval(real[:, ::1] z, real[::1] mean, real[::1] var, real[::1] gamma, real[::1] beta,
            double eps, bint relu):
    """Normalize with stored statistics, overwriting ``z`` in place."""
    cdef Py_ssize_t N = z.shape[0], C = z.shape[1], n, c
    dt = np.float32 if real is float else np.float64
    scale_arr = np.empty(C, dtype=dt)
    shift_arr = np.empty(C, dtype=dt)
    cdef real[::1] scale = scale_arr
    cdef real[::1] shift = shift_arr
    cdef double s
    for c in range(C):
        s = gamma[c] / sqrt(<double>var[c] + eps)
        scale[c] = <real>s
        shift[c] = <real>(beta[c] - mean[c] * s)
    cdef real *zp
    cdef real *sp = &scale[0]
    cdef real *tp = &shift[0]
    cdef real t
    cdef real lo = 0 if relu else -np.inf
    with nogil:
        for n in range(N):
            zp = &z[n, 0]
            for c in range(C):
                t = zp[c] * sp[c] + tp[c]
                zp[c] = t if t > lo else lo
    return np.asarray(z)


def bn_backward(real[:, ::1] dy, real[:, ::1] y, real[:, ::1] xhat, real[::1] gamma,
                real[::1] inv, bint relu):
    cdef Py_ssize_t N = dy.shape[0], C = dy.shape[1], n, c
    dt = np.float32 if real is float else np.float64
    dz_arr = np.empty((N, C), dtype=dt)
    s1_arr = np.zeros(C, dtype=np.float64)
    s2_arr = np.zeros(C, dtype=np.float64)
    k_arr = np.empty(C, dtype=dt)
    m1_arr = np.empty(C, dtype=dt)
    m2_arr = np.empty(C, dtype=dt)
    cdef real[:, ::1] dz = dz_arr
    cdef double[::1] s1 = s1_arr
    cdef double[::1] s2 = s2_arr
    cdef real[::1] k = k_arr
    cdef real[::1] m1 = m1_arr
    cdef real[::1] m2 = m2_arr
    cdef real *gp
    cdef real *yp
    cdef real *hp
    cdef real *dp
    cdef double *s1p = &s1[0]
    cdef double *s2p = &s2[0]
    cdef real *kp = &k[0]
    cdef real *m1p = &m1[0]
    cdef real *m2p = &m2[0]
    cdef real g
    cdef double kk
    cdef real lo = 0 if relu else -np.inf
    with nogil:
        for n in range(N):
            gp = &dy[n, 0]
            yp = &y[n, 0]
            hp = &xhat[n, 0]
            for c in range(C):
                g = gp[c] * (yp[c] > lo)
                s1p[c] += g
                s2p[c] += g * hp[c]
        for c in range(C):
            kk = <double>gamma[c] * inv[c] / N
            kp[c] = <real>(kk * N)
            m1p[c] = <real>(kk * s1p[c])
            m2p[c] = <real>(kk * s2p[c])
        for n in range(N):
            gp = &dy[n, 0]
            yp = &y[n, 0]
            hp = &xhat[n, 0]
            dp = &dz[n, 0]
            for c in range(C):
                g = gp[c] * (yp[c] > lo)
                dp[c] = kp[c] * g - m1p[c] - hp[c] * m2p[c]
    return dz_arr, s2_arr.astype(dt), s1_arr.astype(dt)


def adam_update(real[::1] w, real[::1] g, real[::1] m, real[::1] v, double step, double b1,
                double b2, double c2, double eps):
    """One ADAM step on flat arrays, in place; ``step`` is ``lr / (1 - b1**t)``."""
    cdef Py_ssize_t n = w.shape[0], i
    cdef real rb1 = <real>b1, rb2 = <real>b2, ob1 = <real>(1 - b1), ob2 = <real>(1 - b2)
    cdef real rstep = <real>step, ic2 = <real>(1.0 / c2), reps = <real>eps
    cdef real *wp = &w[0]
    cdef real *gp = &g[0]
    cdef real *mp = &m[0]
    cdef real *vp = &v[0]
    cdef real gi, mi, vi
    with nogil:
        for i in range(n):
            gi = gp[i]
            mi = rb1 * mp[i] + ob1 * gi
            vi = rb2 * vp[i] + ob2 * gi * gi
            mp[i] = mi
            vp[i] = vi
            wp[i] -= rstep * mi / (sqrt(vi * ic2) + reps)
