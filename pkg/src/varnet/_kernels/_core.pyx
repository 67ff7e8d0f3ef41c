# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the policy forward/VJP and box-QP kernels.

Layout conventions are documented in ``_fallback.py``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, fabs, nextafter

cnp.import_array()

ctypedef cnp.int64_t i64

cdef double TANH_MAX = nextafter(1.0, 0.0)


cdef inline double _tanh(double s) noexcept nogil:
    # saturated tanh rounds to +-1; keep it strictly inside the open interval
    cdef double t = tanh(s)
    if t > TANH_MAX:
        return TANH_MAX
    if t < -TANH_MAX:
        return -TANH_MAX
    return t


cdef Py_ssize_t _net_forward(const double* th, const i64* lay, Py_ssize_t start,
                             Py_ssize_t count, double* h) noexcept nogil:
    # h[0:n_in] holds the input; layer outputs are appended consecutively.
    cdef Py_ssize_t off_in = 0, off_out, i, r, c, nin, nout, wo, bo
    cdef i64 act
    cdef double s
    for i in range(start, start + count):
        nin = lay[5 * i]
        nout = lay[5 * i + 1]
        act = lay[5 * i + 2]
        wo = lay[5 * i + 3]
        bo = lay[5 * i + 4]
        off_out = off_in + nin
        for r in range(nout):
            s = th[bo + r]
            for c in range(nin):
                s += th[wo + r * nin + c] * h[off_in + c]
            h[off_out + r] = _tanh(s) if act else s
        off_in = off_out
    return off_in


cdef void _net_backward(const double* th, const i64* lay, Py_ssize_t start, Py_ssize_t count,
                        const double* h, double* g, double* gtmp, double* grad) noexcept nogil:
    # g: cotangent of the output on entry, of the input on exit.
    cdef Py_ssize_t j, i, r, c, nin, nout, wo, bo, off_in = 0, off_out
    cdef i64 act
    cdef double s
    for j in range(count):
        off_in += lay[5 * (start + j)]
    for j in range(count - 1, -1, -1):
        i = start + j
        nin = lay[5 * i]
        nout = lay[5 * i + 1]
        act = lay[5 * i + 2]
        wo = lay[5 * i + 3]
        bo = lay[5 * i + 4]
        off_out = off_in
        off_in -= nin
        if act:
            for r in range(nout):
                g[r] *= 1.0 - h[off_out + r] * h[off_out + r]
        for r in range(nout):
            grad[bo + r] += g[r]
            for c in range(nin):
                grad[wo + r * nin + c] += g[r] * h[off_in + c]
        for c in range(nin):
            s = 0.0
            for r in range(nout):
                s += th[wo + r * nin + c] * g[r]
            gtmp[c] = s
        for c in range(nin):
            g[c] = gtmp[c]


cdef Py_ssize_t _scratch_size(const i64[:, ::1] layout, Py_ssize_t start, Py_ssize_t count):
    cdef Py_ssize_t i, total = layout[start, 0]
    for i in range(start, start + count):
        total += layout[i, 1]
    return total


cdef Py_ssize_t _max_width(const i64[:, ::1] layout):
    cdef Py_ssize_t i, w = 1
    for i in range(layout.shape[0]):
        w = max(w, layout[i, 0], layout[i, 1])
    return w


def forward(const double[::1] theta, const i64[:, ::1] layout, Py_ssize_t n_util, Py_ssize_t n_inv,
            const double[::1] w_u, const double[:, ::1] w_local, const double[::1] qbar):
    cdef Py_ssize_t m, k, out, d_u, m_count = w_local.shape[0], nl = w_local.shape[1]
    cdef double[::1] hu = np.empty(_scratch_size(layout, 0, n_util))
    cdef double[::1] hi
    cdef double[::1] q = np.empty(m_count)
    for k in range(w_u.shape[0]):
        hu[k] = w_u[k]
    out = _net_forward(&theta[0], &layout[0, 0], 0, n_util, &hu[0])
    d_u = layout[n_util - 1, 1]
    u = np.asarray(hu[out : out + d_u]).copy()
    if m_count:
        hi = np.empty(_scratch_size(layout, n_util, n_inv))
        for m in range(m_count):
            for k in range(d_u):
                hi[k] = hu[out + k]
            for k in range(nl):
                hi[d_u + k] = w_local[m, k]
            k = _net_forward(&theta[0], &layout[0, 0], n_util + m * n_inv, n_inv, &hi[0])
            q[m] = qbar[m] * hi[k]
    return u, np.asarray(q)


def vjp(const double[::1] theta, const i64[:, ::1] layout, Py_ssize_t n_util, Py_ssize_t n_inv,
        const double[::1] w_u, const double[:, ::1] w_local, const double[::1] qbar,
        const double[::1] cot):
    cdef Py_ssize_t m, k, out, oi, d_u, m_count = w_local.shape[0], nl = w_local.shape[1]
    cdef Py_ssize_t width = _max_width(layout)
    cdef double[::1] hu = np.empty(_scratch_size(layout, 0, n_util))
    cdef double[::1] hi
    cdef double[::1] g = np.empty(width)
    cdef double[::1] gtmp = np.empty(width)
    cdef double[::1] du
    cdef double[::1] grad = np.zeros(theta.shape[0])
    cdef double[::1] q = np.empty(m_count)
    for k in range(w_u.shape[0]):
        hu[k] = w_u[k]
    out = _net_forward(&theta[0], &layout[0, 0], 0, n_util, &hu[0])
    d_u = layout[n_util - 1, 1]
    du = np.zeros(d_u)
    if m_count:
        hi = np.empty(_scratch_size(layout, n_util, n_inv))
        for m in range(m_count):
            for k in range(d_u):
                hi[k] = hu[out + k]
            for k in range(nl):
                hi[d_u + k] = w_local[m, k]
            oi = _net_forward(&theta[0], &layout[0, 0], n_util + m * n_inv, n_inv, &hi[0])
            q[m] = qbar[m] * hi[oi]
            g[0] = cot[m] * qbar[m]
            _net_backward(&theta[0], &layout[0, 0], n_util + m * n_inv, n_inv, &hi[0],
                          &g[0], &gtmp[0], &grad[0])
            for k in range(d_u):
                du[k] += g[k]
    for k in range(d_u):
        g[k] = du[k]
    _net_backward(&theta[0], &layout[0, 0], 0, n_util, &hu[0], &g[0], &gtmp[0], &grad[0])
    return np.asarray(q), np.asarray(grad)


def box_qp(const double[:, ::1] H, const double[::1] c, const double[::1] lo, const double[::1] hi,
           const double[::1] x0, double step, double tol, Py_ssize_t max_iter):
    cdef Py_ssize_t n = c.shape[0], i, j, it = 0
    cdef double[::1] x = np.empty(n)
    cdef double[::1] grad = np.empty(n)
    cdef double s, res, t
    for i in range(n):
        x[i] = min(max(x0[i], lo[i]), hi[i])
    while True:
        res = 0.0
        for i in range(n):
            s = c[i]
            for j in range(n):
                s += H[i, j] * x[j]
            grad[i] = s
            t = min(max(x[i] - s, lo[i]), hi[i])
            res = max(res, fabs(x[i] - t))
        if res < tol or it >= max_iter:
            return np.asarray(x), it, res
        for i in range(n):
            x[i] = min(max(x[i] - step * grad[i], lo[i]), hi[i])
        it += 1
