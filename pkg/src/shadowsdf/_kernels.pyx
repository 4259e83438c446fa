# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the functions in ``shadowsdf.kernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf, log1p, logf, fabs, fabsf, fmin, fminf, fmax, fmaxf, sqrt, sin, INFINITY, NAN

cnp.import_array()

# Branch-free loops so the C compiler can vectorise them against the SIMD
# math library.  exp arguments are clamped so no denormals are produced.

cdef void _sp_d(const double* x, double* out, double* dout, Py_ssize_t n, double beta, bint want_d) noexcept nogil:
    cdef Py_ssize_t i
    cdef double bx, e, one, inv = 1.0 / beta
    for i in range(n):
        bx = beta * x[i]
        e = exp(-fmin(fabs(bx), 700.0))
        one = 1.0 + e
        out[i] = (fmax(bx, 0.0) + log1p(e)) * inv
        if want_d:
            dout[i] = (1.0 if bx > 0 else e) / one


cdef void _sp_f(const float* x, float* out, float* dout, Py_ssize_t n, float beta, bint want_d) noexcept nogil:
    cdef Py_ssize_t i
    cdef float bx, e, one, inv = 1.0 / beta
    for i in range(n):
        bx = beta * x[i]
        e = expf(-fminf(fabsf(bx), 40.0))
        one = 1.0 + e
        out[i] = (fmaxf(bx, 0.0) + logf(one)) * inv
        if want_d:
            dout[i] = (1.0 if bx > 0 else e) / one


cdef void _sig_d(const double* x, double* out, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef double e
    for i in range(n):
        e = exp(-fmin(fabs(x[i]), 700.0))
        out[i] = (1.0 if x[i] > 0 else e) / (1.0 + e)


cdef void _sig_f(const float* x, float* out, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef float e
    for i in range(n):
        e = expf(-fminf(fabsf(x[i]), 40.0))
        out[i] = (1.0 if x[i] > 0 else e) / (1.0 + e)


def _softplus_impl(x, double beta, bint want_d):
    cdef cnp.ndarray xc = np.ascontiguousarray(x)
    cdef cnp.ndarray out = np.empty_like(xc)
    cdef cnp.ndarray dout = np.empty_like(xc) if want_d else out
    cdef Py_ssize_t n = xc.size
    if xc.dtype == np.float64:
        with nogil:
            _sp_d(<double*>cnp.PyArray_DATA(xc), <double*>cnp.PyArray_DATA(out),
                  <double*>cnp.PyArray_DATA(dout), n, beta, want_d)
    elif xc.dtype == np.float32:
        with nogil:
            _sp_f(<float*>cnp.PyArray_DATA(xc), <float*>cnp.PyArray_DATA(out),
                  <float*>cnp.PyArray_DATA(dout), n, <float>beta, want_d)
    else:
        raise TypeError(f"unsupported dtype {xc.dtype}")
    return out, dout


def softplus(x, double beta=1.0):
    return _softplus_impl(x, beta, False)[0]


def softplus_sigmoid(x, double beta=1.0):
    return _softplus_impl(x, beta, True)


def sigmoid(x):
    cdef cnp.ndarray xc = np.ascontiguousarray(x)
    cdef cnp.ndarray out = np.empty_like(xc)
    cdef Py_ssize_t n = xc.size
    if xc.dtype == np.float64:
        with nogil:
            _sig_d(<double*>cnp.PyArray_DATA(xc), <double*>cnp.PyArray_DATA(out), n)
    elif xc.dtype == np.float32:
        with nogil:
            _sig_f(<float*>cnp.PyArray_DATA(xc), <float*>cnp.PyArray_DATA(out), n)
    else:
        raise TypeError(f"unsupported dtype {xc.dtype}")
    return out


def sample_pdf(double[:, ::1] bins, double[:, ::1] weights, int n_samples):
    cdef Py_ssize_t n = bins.shape[0], k = weights.shape[1]
    cdef Py_ssize_t r, j, s
    out_arr = np.empty((n, n_samples), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double total, acc, prev, u, w, frac
    for r in range(n):
        total = 0.0
        for j in range(k):
            total += weights[r, j] + 1e-5
        j = 0
        prev = 0.0
        acc = (weights[r, 0] + 1e-5) / total
        for s in range(n_samples):
            u = (s + 0.5) / n_samples
            while acc <= u and j < k - 1:
                j += 1
                prev = acc
                acc = acc + (weights[r, j] + 1e-5) / total
            if j == k - 1:
                acc = 1.0
            w = acc - prev
            if w < 1e-12:
                frac = 0.0
            else:
                frac = (u - prev) / w
            out[r, s] = bins[r, j] + frac * (bins[r, j + 1] - bins[r, j])
    return out_arr


cdef inline double _prim_sdf(const double[:, ::1] prims, double x, double y, double z) noexcept nogil:
    cdef Py_ssize_t i
    cdef double best = INFINITY, d, qx, qy, qz, ox, oy, oz, h
    cdef int kind
    for i in range(prims.shape[0]):
        kind = <int>prims[i, 0]
        if kind == 0:
            qx = x - prims[i, 1]
            qy = y - prims[i, 2]
            qz = z - prims[i, 3]
            d = sqrt(qx * qx + qy * qy + qz * qz) - prims[i, 4]
        elif kind == 1:
            d = x * prims[i, 1] + y * prims[i, 2] + z * prims[i, 3] - prims[i, 4]
        elif kind == 2:
            qx = fabs(x - prims[i, 1]) - prims[i, 4]
            qy = fabs(y - prims[i, 2]) - prims[i, 5]
            qz = fabs(z - prims[i, 3]) - prims[i, 6]
            ox = qx if qx > 0 else 0.0
            oy = qy if qy > 0 else 0.0
            oz = qz if qz > 0 else 0.0
            h = qx
            if qy > h:
                h = qy
            if qz > h:
                h = qz
            if h > 0:
                h = 0.0
            d = sqrt(ox * ox + oy * oy + oz * oz) + h
        else:
            h = prims[i, 1] + prims[i, 2] * sin(prims[i, 3] * x) * sin(prims[i, 3] * y)
            d = (z - h) / sqrt(1.0 + 2.0 * (prims[i, 2] * prims[i, 3]) ** 2)
        if d < best:
            best = d
    return best


def analytic_sdf(const double[:, ::1] prims, const double[:, ::1] p):
    cdef Py_ssize_t i, n = p.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            out[i] = _prim_sdf(prims, p[i, 0], p[i, 1], p[i, 2])
    return out_arr


def march_analytic(const double[:, ::1] prims, const double[:, ::1] origins,
                   const double[:, ::1] dirs, const double[::1] tmin,
                   const double[::1] tmax, int n_steps, int n_bisect):
    cdef Py_ssize_t r, i, n = origins.shape[0]
    cdef int b
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double t, lo, hi, mid, dt, ox, oy, oz, dx, dy, dz
    with nogil:
        for r in range(n):
            ox = origins[r, 0]; oy = origins[r, 1]; oz = origins[r, 2]
            dx = dirs[r, 0]; dy = dirs[r, 1]; dz = dirs[r, 2]
            out[r] = NAN
            if n_steps < 2:
                continue
            dt = (tmax[r] - tmin[r]) / (n_steps - 1)
            for i in range(n_steps):
                t = tmin[r] + dt * i
                if _prim_sdf(prims, ox + t * dx, oy + t * dy, oz + t * dz) < 0:
                    if i == 0:
                        out[r] = tmin[r]
                    else:
                        lo = tmin[r] + dt * (i - 1)
                        hi = t
                        for b in range(n_bisect):
                            mid = 0.5 * (lo + hi)
                            if _prim_sdf(prims, ox + mid * dx, oy + mid * dy, oz + mid * dz) < 0:
                                hi = mid
                            else:
                                lo = mid
                        out[r] = 0.5 * (lo + hi)
                    break
    return out_arr
