# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 1-D convolution kernels (zero 'same' padding, odd kernel length).

Each batch item is unfolded into a (Cin*K, L) column buffer and multiplied with
the (Cout, Cin*K) weight matrix through BLAS dgemm.
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void gemm_rm(char ta, char tb, int m, int n, int k, double alpha,
                         const double* A, int lda, const double* B, int ldb,
                         double beta, double* C, int ldc) noexcept nogil:
    # row-major C = op(A) op(B) via column-major dgemm on swapped operands
    dgemm(&tb, &ta, &n, &m, &k, &alpha, <double*>B, &ldb, <double*>A, &lda, &beta, C, &ldc)


cdef void im2col(const double* x, Py_ssize_t Cin, Py_ssize_t L, Py_ssize_t K, double* cols) noexcept nogil:
    cdef Py_ssize_t pad = K // 2
    cdef Py_ssize_t i, k, l, shift, lo, hi
    cdef double* row
    cdef const double* xp
    for i in range(Cin):
        xp = x + i * L
        for k in range(K):
            row = cols + (i * K + k) * L
            shift = k - pad
            lo = -shift if shift < 0 else 0
            hi = L - shift if shift > 0 else L
            for l in range(lo):
                row[l] = 0.0
            for l in range(lo, hi):
                row[l] = xp[l + shift]
            for l in range(hi, L):
                row[l] = 0.0


cdef void col2im_add(const double* cols, Py_ssize_t Cin, Py_ssize_t L, Py_ssize_t K, double* gx) noexcept nogil:
    cdef Py_ssize_t pad = K // 2
    cdef Py_ssize_t i, k, l, shift, lo, hi
    cdef const double* row
    cdef double* gp
    for i in range(Cin):
        gp = gx + i * L
        for k in range(K):
            row = cols + (i * K + k) * L
            shift = k - pad
            lo = -shift if shift < 0 else 0
            hi = L - shift if shift > 0 else L
            for l in range(lo, hi):
                gp[l + shift] += row[l]


def conv1d(const double[:, :, ::1] x, const double[:, :, ::1] w, const double[::1] bias):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t Cout = w.shape[0], K = w.shape[2]
    cdef int CK = <int>(Cin * K)
    cdef Py_ssize_t b, o, l
    out_arr = np.empty((B, Cout, L), dtype=np.float64)
    cols_arr = np.empty((Cin * K, L), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] cols = cols_arr
    cdef double* op
    if B == 0 or L == 0:
        return out_arr
    with nogil:
        for b in range(B):
            for o in range(Cout):
                op = &out[b, o, 0]
                for l in range(L):
                    op[l] = bias[o]
            im2col(&x[b, 0, 0], Cin, L, K, &cols[0, 0])
            gemm_rm(b'N', b'N', <int>Cout, <int>L, CK, 1.0, &w[0, 0, 0], CK,
                    &cols[0, 0], <int>L, 1.0, &out[b, 0, 0], <int>L)
    return out_arr


def conv1d_grad(const double[:, :, ::1] x, const double[:, :, ::1] w, const double[:, :, ::1] g):
    """Gradients of :func:`conv1d` w.r.t. input, weights and bias given output grad ``g``."""
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t Cout = w.shape[0], K = w.shape[2]
    cdef int CK = <int>(Cin * K)
    cdef Py_ssize_t b, o, l
    cdef double acc
    cdef const double* gp
    gx_arr = np.zeros((B, Cin, L), dtype=np.float64)
    gw_arr = np.zeros((Cout, Cin, K), dtype=np.float64)
    gb_arr = np.zeros(Cout, dtype=np.float64)
    cols_arr = np.empty((Cin * K, L), dtype=np.float64)
    gcols_arr = np.empty((Cin * K, L), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, ::1] gcols = gcols_arr
    if B == 0 or L == 0:
        return gx_arr, gw_arr, gb_arr
    with nogil:
        for b in range(B):
            for o in range(Cout):
                gp = &g[b, o, 0]
                acc = 0.0
                for l in range(L):
                    acc = acc + gp[l]
                gb[o] += acc
            im2col(&x[b, 0, 0], Cin, L, K, &cols[0, 0])
            # gw += g_b @ cols_b^T
            gemm_rm(b'N', b'T', <int>Cout, CK, <int>L, 1.0, &g[b, 0, 0], <int>L,
                    &cols[0, 0], <int>L, 1.0, &gw[0, 0, 0], CK)
            # gcols = w^T @ g_b, then scatter back onto the input grid
            gemm_rm(b'T', b'N', CK, <int>L, <int>Cout, 1.0, &w[0, 0, 0], CK,
                    &g[b, 0, 0], <int>L, 0.0, &gcols[0, 0], <int>L)
            col2im_add(&gcols[0, 0], Cin, L, K, &gx[b, 0, 0])
    return gx_arr, gw_arr, gb_arr
