# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Same signatures and gate layouts. Matrix products and the forward
transcendentals stay with numpy (BLAS and SIMD ufuncs, both faster than
scalar C here); the gate derivative algebra in the backward passes and the
penalty sums run as fused C loops instead of chains of temporaries.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, cos, sin

cnp.import_array()

NAME = "compiled"


cdef inline double _sig(double v) noexcept nogil:
    return 1.0 / (1.0 + exp(-v))


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _sigmoid_(a):
    # in place; numpy's vectorized exp beats a scalar libm loop here
    np.negative(a, out=a)
    with np.errstate(over="ignore"):  # overflow to inf yields the exact limit 0
        np.exp(a, out=a)
    a += 1.0
    np.reciprocal(a, out=a)
    return a


def gru_forward(x, h, W, U, b):
    x, h, U = _c64(x), _c64(h), _c64(U)
    cdef Py_ssize_t B = h.shape[0], H = h.shape[1], bi, j
    a_arr = x @ _c64(W)
    a_arr += b
    zr_arr = h @ U[:, : 2 * H]
    zr_arr += a_arr[:, : 2 * H]
    _sigmoid_(zr_arr)
    z_arr = zr_arr[:, :H].copy()
    r_arr = zr_arr[:, H:].copy()
    rh_arr = r_arr * h
    n_arr = rh_arr @ U[:, 2 * H :]
    n_arr += a_arr[:, 2 * H :]
    np.tanh(n_arr, out=n_arr)
    hn_arr = np.empty((B, H))
    cdef const double[:, ::1] z = z_arr
    cdef const double[:, ::1] n = n_arr
    cdef const double[:, ::1] hv = h
    cdef double[:, ::1] hn = hn_arr
    with nogil:
        for bi in range(B):
            for j in range(H):
                hn[bi, j] = (1.0 - z[bi, j]) * n[bi, j] + z[bi, j] * hv[bi, j]
    return hn_arr, z_arr, r_arr, n_arr


def gru_backward(dh_new, x, h, W, U, z, r, n):
    h, U = _c64(h), _c64(U)
    cdef const double[:, ::1] dhn = _c64(dh_new)
    cdef const double[:, ::1] hv = h
    cdef const double[:, ::1] zv = _c64(z)
    cdef const double[:, ::1] rv = _c64(r)
    cdef const double[:, ::1] nv = _c64(n)
    cdef Py_ssize_t B = h.shape[0], H = h.shape[1], bi, j
    dA_arr = np.empty((B, 3 * H))
    dh_arr = np.empty((B, H))
    rh_arr = np.empty((B, H))
    cdef double[:, ::1] dA = dA_arr
    cdef double[:, ::1] dh = dh_arr
    cdef double[:, ::1] rh = rh_arr
    cdef double dz
    with nogil:
        for bi in range(B):
            for j in range(H):
                dz = dhn[bi, j] * (hv[bi, j] - nv[bi, j])
                dA[bi, j] = dz * zv[bi, j] * (1.0 - zv[bi, j])
                dA[bi, 2 * H + j] = dhn[bi, j] * (1.0 - zv[bi, j]) * (1.0 - nv[bi, j] * nv[bi, j])
                dh[bi, j] = dhn[bi, j] * zv[bi, j]
                rh[bi, j] = rv[bi, j] * hv[bi, j]
    dpre_n = dA_arr[:, 2 * H :]
    drh_arr = dpre_n @ U[:, 2 * H :].T
    cdef const double[:, ::1] drh = drh_arr
    with nogil:
        for bi in range(B):
            for j in range(H):
                dA[bi, H + j] = drh[bi, j] * hv[bi, j] * rv[bi, j] * (1.0 - rv[bi, j])
                dh[bi, j] += drh[bi, j] * rv[bi, j]
    dh_arr += dA_arr[:, : 2 * H] @ U[:, : 2 * H].T
    dU = np.empty_like(U)
    dU[:, : 2 * H] = h.T @ dA_arr[:, : 2 * H]
    dU[:, 2 * H :] = rh_arr.T @ dpre_n
    x = _c64(x)
    return dA_arr @ _c64(W).T, dh_arr, x.T @ dA_arr, dU, dA_arr.sum(axis=0)


def lstm_forward(x, h, c, W, U, b):
    h = _c64(h)
    a_arr = _c64(x) @ _c64(W)
    a_arr += h @ _c64(U)
    a_arr += b
    cdef Py_ssize_t B = h.shape[0], H = h.shape[1], bi, j
    g_arr = np.tanh(a_arr[:, 2 * H : 3 * H])
    _sigmoid_(a_arr)
    i_arr, f_arr, o_arr = a_arr[:, :H].copy(), a_arr[:, H : 2 * H].copy(), a_arr[:, 3 * H :].copy()
    cn_arr = np.empty((B, H))
    cdef const double[:, ::1] cv = _c64(c)
    cdef const double[:, ::1] gi = i_arr
    cdef const double[:, ::1] gf = f_arr
    cdef const double[:, ::1] gg = g_arr
    cdef double[:, ::1] cn = cn_arr
    with nogil:
        for bi in range(B):
            for j in range(H):
                cn[bi, j] = gf[bi, j] * cv[bi, j] + gi[bi, j] * gg[bi, j]
    tc_arr = np.tanh(cn_arr)
    return o_arr * tc_arr, cn_arr, i_arr, f_arr, g_arr, o_arr, tc_arr


def lstm_backward(dh_new, dc_new, x, h, c, W, U, i, f, g, o, tc):
    cdef const double[:, ::1] dhn = _c64(dh_new)
    cdef const double[:, ::1] dcn = _c64(dc_new)
    cdef const double[:, ::1] cv = _c64(c)
    cdef const double[:, ::1] iv = _c64(i)
    cdef const double[:, ::1] fv = _c64(f)
    cdef const double[:, ::1] gv = _c64(g)
    cdef const double[:, ::1] ov = _c64(o)
    cdef const double[:, ::1] tcv = _c64(tc)
    cdef Py_ssize_t B = cv.shape[0], H = cv.shape[1], bi, j
    cdef double dct
    dA_arr = np.empty((B, 4 * H))
    dc_arr = np.empty((B, H))
    cdef double[:, ::1] dA = dA_arr
    cdef double[:, ::1] dc = dc_arr
    with nogil:
        for bi in range(B):
            for j in range(H):
                dct = dcn[bi, j] + dhn[bi, j] * ov[bi, j] * (1.0 - tcv[bi, j] * tcv[bi, j])
                dA[bi, j] = dct * gv[bi, j] * iv[bi, j] * (1.0 - iv[bi, j])
                dA[bi, H + j] = dct * cv[bi, j] * fv[bi, j] * (1.0 - fv[bi, j])
                dA[bi, 2 * H + j] = dct * iv[bi, j] * (1.0 - gv[bi, j] * gv[bi, j])
                dA[bi, 3 * H + j] = dhn[bi, j] * tcv[bi, j] * ov[bi, j] * (1.0 - ov[bi, j])
                dc[bi, j] = dct * fv[bi, j]
    x, h = _c64(x), _c64(h)
    return dA_arr @ _c64(W).T, dA_arr @ _c64(U).T, dc_arr, x.T @ dA_arr, h.T @ dA_arr, dA_arr.sum(axis=0)


def sos_synthesize(omega, phase, amp, t):
    cdef const double[:, ::1] om = np.ascontiguousarray(omega, dtype=np.float64)
    cdef const double[:, ::1] ph = np.ascontiguousarray(phase, dtype=np.float64)
    cdef const double[:, ::1] am = np.ascontiguousarray(amp, dtype=np.float64)
    cdef const double[::1] tv = np.ascontiguousarray(t, dtype=np.float64)
    cdef Py_ssize_t R = om.shape[0], P = om.shape[1], N = tv.shape[0]
    cdef Py_ssize_t ri, p, k
    cdef double arg, sr, si
    re_arr = np.empty((R, N))
    im_arr = np.empty((R, N))
    cdef double[:, ::1] re = re_arr
    cdef double[:, ::1] im = im_arr
    with nogil:
        for ri in range(R):
            for k in range(N):
                sr = 0.0
                si = 0.0
                for p in range(P):
                    arg = om[ri, p] * tv[k] + ph[ri, p]
                    sr = sr + am[ri, p] * cos(arg)
                    si = si + am[ri, p] * sin(arg)
                re[ri, k] = sr
                im[ri, k] = si
    return re_arr, im_arr


def quad_penalty(theta, anchors, weights, double coef):
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const double[:, ::1] an = np.ascontiguousarray(anchors, dtype=np.float64)
    cdef const double[:, ::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t E = an.shape[0], M = an.shape[1], e, i
    cdef double total = 0.0, d, wd
    grad_arr = np.zeros(M)
    cdef double[::1] grad = grad_arr
    with nogil:
        for e in range(E):
            for i in range(M):
                d = th[i] - an[e, i]
                wd = w[e, i] * d
                total += wd * d
                grad[i] += wd
        for i in range(M):
            grad[i] = coef * grad[i]
    return 0.5 * coef * total, grad_arr
