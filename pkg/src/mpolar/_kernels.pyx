# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel kernels: calibration solve, forward model, polar factorisation.

Scalar math runs in double precision regardless of the container dtype, with
a fixed per-pixel operation order, so results are bit-identical for any tile
width or thread count.  Row bands are distributed over an OpenMP pool.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport acos, cos, fabs, sqrt

ctypedef fused floating:
    float
    double

cdef double _PI = 3.14159265358979323846264338327950288
cdef double _DEGENERATE_DET = 1e-12
cdef double _D_MAX = 1.0 - 1e-9


cdef inline void _matmul44(const double* a, const double* b, double* out) noexcept nogil:
    cdef int i, j
    for i in range(4):
        for j in range(4):
            out[4 * i + j] = (
                a[4 * i + 0] * b[0 + j]
                + a[4 * i + 1] * b[4 + j]
                + a[4 * i + 2] * b[8 + j]
                + a[4 * i + 3] * b[12 + j]
            )


cdef inline void _matmul33(const double* a, const double* b, double* out) noexcept nogil:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            out[3 * i + j] = (
                a[3 * i + 0] * b[0 + j]
                + a[3 * i + 1] * b[3 + j]
                + a[3 * i + 2] * b[6 + j]
            )


cdef inline double _det3(const double* m) noexcept nogil:
    return (
        m[0] * (m[4] * m[8] - m[5] * m[7])
        - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
    )


cdef inline void _inv3(const double* m, double det, double* out) noexcept nogil:
    cdef double r = 1.0 / det
    out[0] = (m[4] * m[8] - m[5] * m[7]) * r
    out[1] = (m[2] * m[7] - m[1] * m[8]) * r
    out[2] = (m[1] * m[5] - m[2] * m[4]) * r
    out[3] = (m[5] * m[6] - m[3] * m[8]) * r
    out[4] = (m[0] * m[8] - m[2] * m[6]) * r
    out[5] = (m[2] * m[3] - m[0] * m[5]) * r
    out[6] = (m[3] * m[7] - m[4] * m[6]) * r
    out[7] = (m[1] * m[6] - m[0] * m[7]) * r
    out[8] = (m[0] * m[4] - m[1] * m[3]) * r


cdef inline void _eig_sym3_desc(const double* s, double* lam) noexcept nogil:
    """Trigonometric closed-form eigenvalues, descending, clipped at zero."""
    cdef double p1 = s[1] * s[1] + s[2] * s[2] + s[5] * s[5]
    cdef double q = (s[0] + s[4] + s[8]) / 3.0
    cdef double p2 = (s[0] - q) ** 2 + (s[4] - q) ** 2 + (s[8] - q) ** 2 + 2.0 * p1
    cdef double p = sqrt(p2 / 6.0) if p2 > 0.0 else 0.0
    cdef double b[9]
    cdef double detb, r, theta, l1, l2, l3
    cdef int k

    if p <= 0.0:
        l1 = l2 = l3 = q
    else:
        for k in range(9):
            b[k] = s[k] / p
        b[0] -= q / p
        b[4] -= q / p
        b[8] -= q / p
        detb = _det3(b)
        r = detb / 2.0
        if r < -1.0:
            r = -1.0
        elif r > 1.0:
            r = 1.0
        theta = acos(r) / 3.0
        l1 = q + 2.0 * p * cos(theta)
        l3 = q + 2.0 * p * cos(theta + 2.0 * _PI / 3.0)
        l2 = 3.0 * q - l1 - l3
    lam[0] = l1 if l1 > 0.0 else 0.0
    lam[1] = l2 if l2 > 0.0 else 0.0
    lam[2] = l3 if l3 > 0.0 else 0.0


cdef inline void _solve_px(const floating* ipx, const double* ainv, const double* ginv,
                           floating* out) noexcept nogil:
    cdef double ibuf[16]
    cdef double t1[16]
    cdef double t2[16]
    cdef int k
    for k in range(16):
        ibuf[k] = <double> ipx[k]
    _matmul44(ainv, ibuf, t1)
    _matmul44(t1, ginv, t2)
    for k in range(16):
        out[k] = <floating> t2[k]


def solve_mueller(floating[:, :, ::1] intens, double[:, :, ::1] ainv, double[:, :, ::1] ginv,
                  floating[:, :, :, ::1] out, int per_pixel, int tile, int threads):
    """out[r, c] = ainv[...] @ intens[r, c].reshape(4, 4) @ ginv[...]."""
    cdef Py_ssize_t h = intens.shape[0]
    cdef Py_ssize_t w = intens.shape[1]
    cdef Py_ssize_t r, c, c0, cend, ci
    if tile < 1:
        tile = <int> w
    with nogil:
        for r in prange(h, num_threads=threads, schedule="static"):
            c0 = 0
            while c0 < w:
                cend = c0 + tile
                if cend > w:
                    cend = w
                for c in range(c0, cend):
                    ci = (r * w + c) if per_pixel else 0
                    _solve_px(&intens[r, c, 0], &ainv[ci, 0, 0], &ginv[ci, 0, 0],
                              &out[r, c, 0, 0])
                c0 = cend
    return None


def forward_mueller(floating[:, :, :, ::1] mueller, double[:, :, ::1] a, double[:, :, ::1] g,
                    floating[:, :, ::1] out, int per_pixel, int tile, int threads):
    """out[r, c] = (a[...] @ mueller[r, c] @ g[...]) flattened to 16 channels."""
    cdef Py_ssize_t h = mueller.shape[0]
    cdef Py_ssize_t w = mueller.shape[1]
    cdef Py_ssize_t r, c, c0, cend, ci
    if tile < 1:
        tile = <int> w
    with nogil:
        for r in prange(h, num_threads=threads, schedule="static"):
            c0 = 0
            while c0 < w:
                cend = c0 + tile
                if cend > w:
                    cend = w
                for c in range(c0, cend):
                    ci = (r * w + c) if per_pixel else 0
                    _solve_px(&mueller[r, c, 0, 0], &a[ci, 0, 0], &g[ci, 0, 0],
                              &out[r, c, 0])
                c0 = cend
    return None


cdef inline int _decompose_px(const double* m, int valid,
                              double* md, double* mr, double* mdelta,
                              signed char* sign_out, unsigned char* dclamp) noexcept nogil:
    """Factor one normalized Mueller matrix; returns 1 when degenerate."""
    cdef double dvec[3]
    cdef double mdinv[16]
    cdef double mprime[16]
    cdef double small[9]
    cdef double gram[9]
    cdef double lam[3]
    cdef double bracket[9]
    cdef double brinv[9]
    cdef double rhs[9]
    cdef double sdelta[9]
    cdef double sdinv[9]
    cdef double srot[9]
    cdef double d2, d, a, scale, invk, inva, proj, det_small, detb, detd
    cdef double sq1, sq2, sq3, kappa, sigma, tau, sgn
    cdef int i, j, k, degen

    dvec[0] = m[1]
    dvec[1] = m[2]
    dvec[2] = m[3]
    d2 = dvec[0] * dvec[0] + dvec[1] * dvec[1] + dvec[2] * dvec[2]
    d = sqrt(d2)
    dclamp[0] = 0
    if d >= _D_MAX:
        scale = _D_MAX / d
        dvec[0] *= scale
        dvec[1] *= scale
        dvec[2] *= scale
        d = _D_MAX
        d2 = d * d
        dclamp[0] = 1
    a = sqrt(1.0 - d2)

    # Diattenuator and its closed-form inverse
    md[0] = 1.0
    for k in range(3):
        md[1 + k] = dvec[k]
        md[4 * (1 + k)] = dvec[k]
    inva = 1.0 / a
    invk = 1.0 / (1.0 - d2)
    for i in range(3):
        for j in range(3):
            proj = (dvec[i] * dvec[j] / d2) if d2 > 1e-30 else 0.0
            md[4 * (1 + i) + 1 + j] = (a if i == j else 0.0) + (1.0 - a) * proj
            mdinv[4 * (1 + i) + 1 + j] = inva * ((1.0 if i == j else 0.0) - proj) + proj * invk
    mdinv[0] = invk
    for k in range(3):
        mdinv[1 + k] = -dvec[k] * invk
        mdinv[4 * (1 + k)] = -dvec[k] * invk

    _matmul44(m, mdinv, mprime)

    for i in range(3):
        for j in range(3):
            small[3 * i + j] = mprime[4 * (1 + i) + 1 + j]

    # Depolariser frame: first column carries the polarizance residue
    mdelta[0] = 1.0
    mdelta[1] = 0.0
    mdelta[2] = 0.0
    mdelta[3] = 0.0
    for k in range(3):
        mdelta[4 * (1 + k)] = mprime[4 * (1 + k)]

    mr[0] = 1.0
    for k in range(3):
        mr[1 + k] = 0.0
        mr[4 * (1 + k)] = 0.0

    for i in range(3):
        for j in range(3):
            gram[3 * i + j] = (
                small[3 * i + 0] * small[3 * j + 0]
                + small[3 * i + 1] * small[3 * j + 1]
                + small[3 * i + 2] * small[3 * j + 2]
            )
    det_small = _det3(small)
    sgn = -1.0 if det_small < 0.0 else 1.0
    sign_out[0] = <signed char> sgn

    degen = 1 if (valid and fabs(det_small) < _DEGENERATE_DET) else 0
    if valid and not degen:
        _eig_sym3_desc(gram, lam)
        sq1 = sqrt(lam[0])
        sq2 = sqrt(lam[1])
        sq3 = sqrt(lam[2])
        kappa = sq1 * sq2 + sq2 * sq3 + sq3 * sq1
        sigma = sq1 + sq2 + sq3
        tau = sq1 * sq2 * sq3
        for k in range(9):
            bracket[k] = gram[k]
        bracket[0] += kappa
        bracket[4] += kappa
        bracket[8] += kappa
        detb = _det3(bracket)
        if detb == 0.0:
            degen = 1
        else:
            _inv3(bracket, detb, brinv)
            for k in range(9):
                rhs[k] = sigma * gram[k]
            rhs[0] += tau
            rhs[4] += tau
            rhs[8] += tau
            _matmul33(brinv, rhs, sdelta)
            for k in range(9):
                sdelta[k] *= sgn
            detd = _det3(sdelta)
            if fabs(detd) < _DEGENERATE_DET:
                degen = 1
            else:
                _inv3(sdelta, detd, sdinv)
                _matmul33(sdinv, small, srot)

    if valid and not degen:
        for i in range(3):
            for j in range(3):
                mdelta[4 * (1 + i) + 1 + j] = sdelta[3 * i + j]
                mr[4 * (1 + i) + 1 + j] = srot[3 * i + j]
    else:
        for i in range(3):
            for j in range(3):
                mdelta[4 * (1 + i) + 1 + j] = 1.0 if i == j else 0.0
                mr[4 * (1 + i) + 1 + j] = 1.0 if i == j else 0.0
    return degen if valid else 0


cdef inline void _px_wrapper(const floating* mpx, unsigned char valid,
                             floating* md, floating* mr, floating* mdelta,
                             signed char* sign, unsigned char* degen,
                             unsigned char* dclamp) noexcept nogil:
    cdef double mbuf[16]
    cdef double mdbuf[16]
    cdef double mrbuf[16]
    cdef double mdelbuf[16]
    cdef int k
    for k in range(16):
        mbuf[k] = <double> mpx[k]
    degen[0] = <unsigned char> _decompose_px(mbuf, valid, mdbuf, mrbuf, mdelbuf, sign, dclamp)
    for k in range(16):
        md[k] = <floating> mdbuf[k]
        mr[k] = <floating> mrbuf[k]
        mdelta[k] = <floating> mdelbuf[k]


def decompose_lu_chipman(floating[:, :, :, ::1] mueller, unsigned char[:, ::1] valid,
                         floating[:, :, :, ::1] md, floating[:, :, :, ::1] mr,
                         floating[:, :, :, ::1] mdelta, signed char[:, ::1] sign,
                         unsigned char[:, ::1] degen, unsigned char[:, ::1] dclamp,
                         int threads):
    cdef Py_ssize_t h = mueller.shape[0]
    cdef Py_ssize_t w = mueller.shape[1]
    cdef Py_ssize_t r, c

    with nogil:
        for r in prange(h, num_threads=threads, schedule="static"):
            for c in range(w):
                _px_wrapper(&mueller[r, c, 0, 0], valid[r, c],
                            &md[r, c, 0, 0], &mr[r, c, 0, 0], &mdelta[r, c, 0, 0],
                            &sign[r, c], &degen[r, c], &dclamp[r, c])
    return None
