# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels (NHWC, float64).

Same contracts as ``lsplab._fallback``. Convolutions gather patches in C and
hand the products to BLAS ``dgemm``; col2im scatter is done in C as well.
"""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

# rows of the patch matrix processed per GEMM call
DEF CHUNK = 4096


cdef void _gemm_rm(int m, int n, int k, double alpha, const double *a, int lda, bint trans_a,
                   const double *b, int ldb, bint trans_b, double beta, double *c, int ldc) noexcept nogil:
    """Row-major C[m,n] = alpha * op(A) @ op(B) + beta * C via column-major dgemm on transposes."""
    cdef char ta = b'T' if trans_b else b'N'
    cdef char tb = b'T' if trans_a else b'N'
    dgemm(&ta, &tb, &n, &m, &k, &alpha, <double *> b, &ldb, <double *> a, &lda, &beta, c, &ldc)


cdef void _gather(const double[:, :, :, ::1] x, double *col, Py_ssize_t row0, Py_ssize_t rows,
                  Py_ssize_t ho, Py_ssize_t wo, Py_ssize_t kh, Py_ssize_t kw, int pad) noexcept nogil:
    cdef Py_ssize_t h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef Py_ssize_t kkc = kh * kw * cin
    cdef Py_ssize_t r, i, oy, ox, ky, kx, iy, ix, rem
    cdef double *dst
    for r in range(rows):
        i = (row0 + r) // (ho * wo)
        rem = (row0 + r) - i * ho * wo
        oy = rem // wo
        ox = rem - oy * wo
        dst = col + r * kkc
        for ky in range(kh):
            iy = oy + ky - pad
            for kx in range(kw):
                ix = ox + kx - pad
                if iy < 0 or iy >= h or ix < 0 or ix >= wd:
                    memset(dst, 0, cin * sizeof(double))
                else:
                    memcpy(dst, &x[i, iy, ix, 0], cin * sizeof(double))
                dst += cin


cdef void _scatter(double[:, :, :, ::1] dx, const double *col, Py_ssize_t row0, Py_ssize_t rows,
                   Py_ssize_t ho, Py_ssize_t wo, Py_ssize_t kh, Py_ssize_t kw, int pad) noexcept nogil:
    cdef Py_ssize_t h = dx.shape[1], wd = dx.shape[2], cin = dx.shape[3]
    cdef Py_ssize_t kkc = kh * kw * cin
    cdef Py_ssize_t r, i, oy, ox, ky, kx, iy, ix, ci, rem
    cdef const double *src
    cdef double *tgt
    for r in range(rows):
        i = (row0 + r) // (ho * wo)
        rem = (row0 + r) - i * ho * wo
        oy = rem // wo
        ox = rem - oy * wo
        src = col + r * kkc
        for ky in range(kh):
            iy = oy + ky - pad
            for kx in range(kw):
                ix = ox + kx - pad
                if iy >= 0 and iy < h and ix >= 0 and ix < wd:
                    tgt = &dx[i, iy, ix, 0]
                    for ci in range(cin):
                        tgt[ci] += src[ci]
                src += cin


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b, int pad):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    cdef Py_ssize_t ho = h + 2 * pad - kh + 1, wo = wd + 2 * pad - kw + 1
    cdef Py_ssize_t kkc = kh * kw * cin, total = n * ho * wo
    out_arr = np.empty((n, ho, wo, cout), dtype=np.float64)
    col_arr = np.empty((min(total, CHUNK), kkc), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, ::1] col = col_arr
    cdef double *optr = &out[0, 0, 0, 0]
    cdef Py_ssize_t row0, rows, r, co
    with nogil:
        for r in range(total):
            for co in range(cout):
                optr[r * cout + co] = b[co]
        row0 = 0
        while row0 < total:
            rows = min(CHUNK, total - row0)
            _gather(x, &col[0, 0], row0, rows, ho, wo, kh, kw, pad)
            _gemm_rm(<int> rows, <int> cout, <int> kkc, 1.0, &col[0, 0], <int> kkc, False,
                     &w[0, 0, 0, 0], <int> cout, False, 1.0, optr + row0 * cout, <int> cout)
            row0 += rows
    return out_arr


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] dout, int pad, bint need_dx=True, bint need_dw=True):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    cdef Py_ssize_t ho = dout.shape[1], wo = dout.shape[2]
    cdef Py_ssize_t kkc = kh * kw * cin, total = n * ho * wo
    dx_arr = np.zeros((n, h, wd, cin), dtype=np.float64) if need_dx else None
    dw_arr = np.zeros((kh, kw, cin, cout), dtype=np.float64) if need_dw else None
    db_arr = np.zeros(cout, dtype=np.float64) if need_dw else None
    col_arr = np.empty((min(total, CHUNK), kkc), dtype=np.float64)
    cdef double[:, ::1] col = col_arr
    cdef double[:, :, :, ::1] dx
    cdef double[:, :, :, ::1] dw
    cdef double[::1] db
    cdef double *dwp = NULL
    if need_dx:
        dx = dx_arr
    if need_dw:
        dw = dw_arr
        db = db_arr
        dwp = &dw[0, 0, 0, 0]
    cdef const double *gptr = &dout[0, 0, 0, 0]
    cdef const double *wptr = &w[0, 0, 0, 0]
    cdef Py_ssize_t row0, rows, r, co
    with nogil:
        if need_dw:
            for r in range(total):
                for co in range(cout):
                    db[co] += gptr[r * cout + co]
        row0 = 0
        while row0 < total:
            rows = min(CHUNK, total - row0)
            if need_dw:
                _gather(x, &col[0, 0], row0, rows, ho, wo, kh, kw, pad)
                # dW[kkc, cout] += col^T @ dout_chunk
                _gemm_rm(<int> kkc, <int> cout, <int> rows, 1.0, &col[0, 0], <int> kkc, True,
                         gptr + row0 * cout, <int> cout, False, 1.0, dwp, <int> cout)
            if need_dx:
                # dcol[rows, kkc] = dout_chunk @ W^T
                _gemm_rm(<int> rows, <int> kkc, <int> cout, 1.0, gptr + row0 * cout, <int> cout, False,
                         wptr, <int> cout, True, 0.0, &col[0, 0], <int> kkc)
                _scatter(dx, &col[0, 0], row0, rows, ho, wo, kh, kw, pad)
            row0 += rows
    return dx_arr, dw_arr, db_arr


def maxpool2_forward(const double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1] // 2, wd = x.shape[2] // 2, c = x.shape[3]
    out_arr = np.empty((n, h, wd, c), dtype=np.float64)
    idx_arr = np.empty((n, h, wd, c), dtype=np.int8)
    cdef double[:, :, :, ::1] out = out_arr
    cdef signed char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t i, y, xx, ch
    cdef double best, v
    cdef signed char arg
    with nogil:
        for i in range(n):
            for y in range(h):
                for xx in range(wd):
                    for ch in range(c):
                        best = x[i, 2 * y, 2 * xx, ch]
                        arg = 0
                        v = x[i, 2 * y, 2 * xx + 1, ch]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[i, 2 * y + 1, 2 * xx, ch]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[i, 2 * y + 1, 2 * xx + 1, ch]
                        if v > best:
                            best = v
                            arg = 3
                        out[i, y, xx, ch] = best
                        idx[i, y, xx, ch] = arg
    return out_arr, idx_arr


def maxpool2_backward(const double[:, :, :, ::1] dout, const signed char[:, :, :, ::1] idx, input_shape):
    n, h, wd, c = input_shape
    dx_arr = np.zeros((n, h, wd, c), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t i, y, xx, ch
    cdef Py_ssize_t nn = dout.shape[0], hh = dout.shape[1], ww = dout.shape[2], cc = dout.shape[3]
    cdef signed char a
    with nogil:
        for i in range(nn):
            for y in range(hh):
                for xx in range(ww):
                    for ch in range(cc):
                        a = idx[i, y, xx, ch]
                        dx[i, 2 * y + (a >> 1), 2 * xx + (a & 1), ch] = dout[i, y, xx, ch]
    return dx_arr
