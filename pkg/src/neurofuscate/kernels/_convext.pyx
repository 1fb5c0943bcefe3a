# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv kernel: weight-stationary loops over a float64 accumulator plane."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(cnp.ndarray[cnp.float32_t, ndim=3] x,
                   cnp.ndarray[cnp.float32_t, ndim=4] weight,
                   bias,
                   int stride,
                   int pad):
    cdef int f_n = weight.shape[0]
    cdef int c_n = weight.shape[1]
    cdef int kh = weight.shape[2]
    cdef int kw = weight.shape[3]
    cdef int h = x.shape[1]
    cdef int w = x.shape[2]
    cdef int oh = (h + 2 * pad - kh) // stride + 1
    cdef int ow = (w + 2 * pad - kw) // stride + 1

    cdef cnp.ndarray[cnp.float32_t, ndim=3] out = np.empty((f_n, oh, ow), dtype=np.float32)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] acc = np.empty((oh, ow), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] b64
    if bias is not None:
        b64 = np.asarray(bias, dtype=np.float64)
    else:
        b64 = np.zeros(f_n, dtype=np.float64)

    cdef double wv
    cdef int f, c, u, v, i, j, ih, iw, j0, j1, i0, i1
    for f in range(f_n):
        acc[:, :] = b64[f]
        for c in range(c_n):
            for u in range(kh):
                for v in range(kw):
                    wv = <double>weight[f, c, u, v]
                    if wv == 0.0:
                        continue
                    # valid output rows: 0 <= i*stride - pad + u < h
                    # (C division truncates toward zero; negatives clamp anyway)
                    i0 = (pad - u + stride - 1) // stride
                    if i0 < 0:
                        i0 = 0
                    i1 = 0 if h - 1 + pad - u < 0 else (h - 1 + pad - u) // stride + 1
                    if i1 > oh:
                        i1 = oh
                    j0 = (pad - v + stride - 1) // stride
                    if j0 < 0:
                        j0 = 0
                    j1 = 0 if w - 1 + pad - v < 0 else (w - 1 + pad - v) // stride + 1
                    if j1 > ow:
                        j1 = ow
                    for i in range(i0, i1):
                        ih = i * stride - pad + u
                        iw = j0 * stride - pad + v
                        for j in range(j0, j1):
                            acc[i, j] += wv * <double>x[c, ih, iw]
                            iw += stride
        for i in range(oh):
            for j in range(ow):
                out[f, i, j] = <float>acc[i, j]
    return out
