# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fused gated low-rank linear layer, row
normalization and row cosine.  Matrix products go through BLAS dgemm
from scipy's Cython bindings; the elementwise parts run as plain C loops
without temporaries.  Signatures mirror ``_pykernels``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _gemm(bint ta, bint tb, double alpha, const double[:, ::1] A,
                const double[:, ::1] B, double beta, double[:, ::1] C) noexcept nogil:
    # Row-major C = alpha * op(A) op(B) + beta * C, computed as the
    # column-major product C^T = op(B)^T op(A)^T.
    cdef int m = C.shape[0]
    cdef int n = C.shape[1]
    cdef int k = A.shape[0] if ta else A.shape[1]
    cdef int lda = A.shape[1]
    cdef int ldb = B.shape[1]
    cdef int ldc = n
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    if m == 0 or n == 0:
        return
    if k == 0:
        return
    dgemm(&cb, &ca, &n, &m, &k, &alpha, <double*>&B[0, 0], &ldb, <double*>&A[0, 0], &lda,
          &beta, &C[0, 0], &ldc)


def lora_forward(const double[:, ::1] H, const double[:, ::1] W0, const double[::1] b,
                 const double[:, ::1] A, const double[:, ::1] B, double s):
    cdef Py_ssize_t n = H.shape[0]
    cdef Py_ssize_t dout = W0.shape[0]
    cdef Py_ssize_t r = A.shape[0]
    cdef Py_ssize_t i, j
    Z_arr = np.empty((n, dout))
    HA_arr = np.zeros((n, r))
    cdef double[:, ::1] Z = Z_arr
    cdef double[:, ::1] HA = HA_arr
    with nogil:
        for i in range(n):
            for j in range(dout):
                Z[i, j] = b[j]
        _gemm(False, True, 1.0, H, W0, 1.0, Z)
        _gemm(False, True, 1.0, H, A, 0.0, HA)
        if s != 0.0:
            _gemm(False, True, s, HA, B, 1.0, Z)
    return Z_arr, HA_arr


def lora_backward(const double[:, ::1] dZ, const double[:, ::1] H, const double[:, ::1] HA,
                  const double[:, ::1] W0, const double[:, ::1] A, const double[:, ::1] B,
                  double s, bint need_dH, bint need_dW, bint need_low=True):
    cdef Py_ssize_t n = dZ.shape[0]
    cdef Py_ssize_t dout = dZ.shape[1]
    cdef Py_ssize_t din = H.shape[1]
    cdef Py_ssize_t r = A.shape[0]
    cdef Py_ssize_t i, j
    cdef double ds = 0.0
    cdef double acc
    dZB_arr = np.zeros((n, r))
    dA_arr = np.zeros((r, din))
    dB_arr = np.zeros((dout, r))
    cdef double[:, ::1] dZB = dZB_arr
    cdef double[:, ::1] dA = dA_arr
    cdef double[:, ::1] dB = dB_arr
    cdef double[:, ::1] dH
    cdef double[:, ::1] dW0
    cdef double[::1] db
    dH_arr = dW0_arr = db_arr = None
    with nogil:
        if need_low or (need_dH and s != 0.0):
            _gemm(False, False, 1.0, dZ, B, 0.0, dZB)
        if need_low:
            _gemm(True, False, s, dZB, H, 0.0, dA)
            _gemm(True, False, s, dZ, HA, 0.0, dB)
            for i in range(n):
                for j in range(r):
                    ds += dZB[i, j] * HA[i, j]
    if need_dH:
        dH_arr = np.zeros((n, din))
        dH = dH_arr
        with nogil:
            _gemm(False, False, 1.0, dZ, W0, 0.0, dH)
            if s != 0.0:
                _gemm(False, False, s, dZB, A, 1.0, dH)
    if need_dW:
        dW0_arr = np.zeros((dout, din))
        db_arr = np.zeros(dout)
        dW0 = dW0_arr
        db = db_arr
        with nogil:
            _gemm(True, False, 1.0, dZ, H, 0.0, dW0)
            for j in range(dout):
                acc = 0.0
                for i in range(n):
                    acc += dZ[i, j]
                db[j] = acc
    return dH_arr, dA_arr, dB_arr, ds, dW0_arr, db_arr


def normalize_rows_forward(const double[:, ::1] E):
    cdef Py_ssize_t n = E.shape[0]
    cdef Py_ssize_t e = E.shape[1]
    cdef Py_ssize_t i, j
    cdef double acc, inv
    U_arr = np.empty((n, e))
    N_arr = np.empty(n)
    cdef double[:, ::1] U = U_arr
    cdef double[::1] norms = N_arr
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(e):
                acc += E[i, j] * E[i, j]
            norms[i] = sqrt(acc)
            inv = 1.0 / norms[i]
            for j in range(e):
                U[i, j] = E[i, j] * inv
    return U_arr, N_arr


def normalize_rows_backward(const double[:, ::1] dU, const double[:, ::1] U, const double[::1] norms):
    cdef Py_ssize_t n = U.shape[0]
    cdef Py_ssize_t e = U.shape[1]
    cdef Py_ssize_t i, j
    cdef double proj, inv
    dE_arr = np.empty((n, e))
    cdef double[:, ::1] dE = dE_arr
    with nogil:
        for i in range(n):
            proj = 0.0
            for j in range(e):
                proj += dU[i, j] * U[i, j]
            inv = 1.0 / norms[i]
            for j in range(e):
                dE[i, j] = (dU[i, j] - U[i, j] * proj) * inv
    return dE_arr


def cosine_rows_forward(const double[:, ::1] D, const double[::1] t):
    cdef Py_ssize_t n = D.shape[0]
    cdef Py_ssize_t e = D.shape[1]
    cdef Py_ssize_t i, j
    cdef double tt = 0.0, dd, dt, tnorm
    C_arr = np.empty(n)
    N_arr = np.empty(n)
    cdef double[::1] cos = C_arr
    cdef double[::1] norms = N_arr
    with nogil:
        for j in range(e):
            tt += t[j] * t[j]
        tnorm = sqrt(tt)
        for i in range(n):
            dd = 0.0
            dt = 0.0
            for j in range(e):
                dd += D[i, j] * D[i, j]
                dt += D[i, j] * t[j]
            norms[i] = sqrt(dd)
            cos[i] = (dt / tnorm) / norms[i]
    return C_arr, N_arr


def cosine_rows_backward(const double[::1] g, const double[:, ::1] D, const double[::1] t,
                         const double[::1] cos, const double[::1] norms):
    cdef Py_ssize_t n = D.shape[0]
    cdef Py_ssize_t e = D.shape[1]
    cdef Py_ssize_t i, j
    cdef double tt = 0.0, tnorm, inv, a, c
    dD_arr = np.empty((n, e))
    cdef double[:, ::1] dD = dD_arr
    with nogil:
        for j in range(e):
            tt += t[j] * t[j]
        tnorm = sqrt(tt)
        for i in range(n):
            inv = 1.0 / norms[i]
            a = g[i] * inv / tnorm
            c = g[i] * cos[i] * inv * inv
            for j in range(e):
                dD[i, j] = a * t[j] - c * D[i, j]
    return dD_arr
