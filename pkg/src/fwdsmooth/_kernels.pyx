# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled backward-kernel application for Gaussian autoregressive transitions."""

import numpy as np

cdef extern from "_kernels_impl.h" nogil:
    int fs_gauss_backward_apply(Py_ssize_t n_prev, Py_ssize_t n_cur, const double *lw,
                                 const double *m, const double *x, double sigma,
                                 Py_ssize_t q, const double *F, double *out,
                                 double *log_den)


def gauss_backward_apply(const double[::1] log_w, const double[::1] mean_prev,
                         const double[::1] x_cur, double sigma,
                         const double[:, ::1] features_t):
    """Normalised backward kernel applied to previous-time features.

    ``log_w`` must be finite (clamp zero weights before calling).  Returns
    ``(out, log_den)`` where ``out`` has shape ``(len(x_cur), q)`` and
    ``log_den[i] = log sum_j exp(log_w[j] - (x_cur[i] - mean_prev[j])**2 / (2 sigma**2))``.
    """
    cdef Py_ssize_t n_prev = log_w.shape[0]
    cdef Py_ssize_t n_cur = x_cur.shape[0]
    cdef Py_ssize_t q = features_t.shape[0]
    if mean_prev.shape[0] != n_prev or features_t.shape[1] != n_prev:
        raise ValueError("previous-time arrays have mismatched lengths")
    out = np.empty((n_cur, q), dtype=np.float64)
    log_den = np.empty(n_cur, dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] ld = log_den
    if n_cur == 0 or q == 0:
        log_den[:] = 0.0
        if n_cur and q == 0:
            raise ValueError("need at least one feature row")
        return out, log_den
    cdef int status
    with nogil:
        status = fs_gauss_backward_apply(n_prev, n_cur, &log_w[0], &mean_prev[0], &x_cur[0], sigma,
                                q, &features_t[0, 0], &o[0, 0], &ld[0])
    if status != 0:
        raise MemoryError("backward kernel scratch allocation failed")
    return out, log_den
