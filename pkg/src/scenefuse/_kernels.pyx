# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fused masked attention and aggregation loops.

Attention runs one BLAS gemm per batch slice with the masked softmax fused
in between, so no [B, Lq, Lk] temporaries are allocated beyond the saved
probabilities.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, sqrt, INFINITY
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

NAME = "cython"

# masses closer than this count as tied; lowest index wins
cdef double TIE_TOL = 1e-12


cdef inline void _gemm(char ta, char tb, int M, int N, int K, floating alpha,
                       floating* A, int lda, floating* B, int ldb, floating beta,
                       floating* C, int ldc) noexcept nogil:
    # row-major C[M,N] = alpha * op(A) @ op(B) + beta * C, via column-major BLAS on transposes
    if floating is double:
        dgemm(&tb, &ta, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)
    else:
        sgemm(&tb, &ta, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


def attention_forward(floating[:, :, ::1] q, floating[:, :, ::1] k, floating[:, :, ::1] v,
                      const unsigned char[:, ::1] key_mask, double scale):
    cdef int B = q.shape[0], Lq = q.shape[1], d = q.shape[2]
    cdef int Lk = k.shape[1], dv = v.shape[2]
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((B, Lq, dv), dtype=dtype)
    probs_arr = np.zeros((B, Lq, Lk), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef floating[:, :, ::1] probs = probs_arr
    cdef Py_ssize_t b, i, j
    cdef floating m, e
    cdef double s
    cdef bint any_valid
    cdef floating* row
    if B == 0 or Lq == 0 or Lk == 0:
        return out_arr, probs_arr
    with nogil:
        for b in range(B):
            any_valid = False
            for j in range(Lk):
                if key_mask[b, j]:
                    any_valid = True
                    break
            if not any_valid:
                continue
            _gemm(c'N', c'T', Lq, Lk, d, <floating>scale, &q[b, 0, 0], d, &k[b, 0, 0], d,
                  <floating>0.0, &probs[b, 0, 0], Lk)
            for i in range(Lq):
                row = &probs[b, i, 0]
                m = -INFINITY
                for j in range(Lk):
                    if key_mask[b, j] and row[j] > m:
                        m = row[j]
                s = 0.0
                for j in range(Lk):
                    if key_mask[b, j]:
                        if floating is double:
                            e = exp(row[j] - m)
                        else:
                            e = expf(row[j] - m)
                        row[j] = <floating>e
                        s = s + e
                    else:
                        row[j] = 0
                for j in range(Lk):
                    row[j] = <floating>(row[j] / s)
            _gemm(c'N', c'N', Lq, dv, Lk, <floating>1.0, &probs[b, 0, 0], Lk, &v[b, 0, 0], dv,
                  <floating>0.0, &out[b, 0, 0], dv)
    return out_arr, probs_arr


def attention_backward(floating[:, :, ::1] g, floating[:, :, ::1] q, floating[:, :, ::1] k,
                       floating[:, :, ::1] v, floating[:, :, ::1] probs, double scale):
    cdef int B = q.shape[0], Lq = q.shape[1], d = q.shape[2]
    cdef int Lk = k.shape[1], dv = v.shape[2]
    dtype = np.float64 if floating is double else np.float32
    gq_arr = np.zeros((B, Lq, d), dtype=dtype)
    gk_arr = np.zeros((B, Lk, d), dtype=dtype)
    gv_arr = np.zeros((B, Lk, dv), dtype=dtype)
    gs_arr = np.empty((Lq, Lk), dtype=dtype)
    cdef floating[:, :, ::1] gq = gq_arr
    cdef floating[:, :, ::1] gk = gk_arr
    cdef floating[:, :, ::1] gv = gv_arr
    cdef floating[:, ::1] gs = gs_arr
    cdef Py_ssize_t b, i, j
    cdef double dot
    cdef floating* prow
    cdef floating* grow
    if B == 0 or Lq == 0 or Lk == 0:
        return gq_arr, gk_arr, gv_arr
    with nogil:
        for b in range(B):
            _gemm(c'T', c'N', Lk, dv, Lq, <floating>1.0, &probs[b, 0, 0], Lk, &g[b, 0, 0], dv,
                  <floating>0.0, &gv[b, 0, 0], dv)
            _gemm(c'N', c'T', Lq, Lk, dv, <floating>1.0, &g[b, 0, 0], dv, &v[b, 0, 0], dv,
                  <floating>0.0, &gs[0, 0], Lk)
            for i in range(Lq):
                prow = &probs[b, i, 0]
                grow = &gs[i, 0]
                dot = 0.0
                for j in range(Lk):
                    dot = dot + prow[j] * grow[j]
                for j in range(Lk):
                    grow[j] = <floating>(prow[j] * (grow[j] - dot))
            _gemm(c'N', c'N', Lq, d, Lk, <floating>scale, &gs[0, 0], Lk, &k[b, 0, 0], d,
                  <floating>0.0, &gq[b, 0, 0], d)
            _gemm(c'T', c'N', Lk, d, Lq, <floating>scale, &gs[0, 0], Lk, &q[b, 0, 0], d,
                  <floating>0.0, &gk[b, 0, 0], d)
    return gq_arr, gk_arr, gv_arr


def greedy_cover(double[:, ::1] points, double[::1] probs, double threshold):
    cdef Py_ssize_t n = points.shape[0], i, j, best, remaining
    cdef double dx, dy, mass, best_mass
    within_arr = np.zeros((n, n), dtype=np.uint8)
    uncovered_arr = np.ones(n, dtype=np.uint8)
    cdef unsigned char[:, ::1] within = within_arr
    cdef unsigned char[::1] uncovered = uncovered_arr
    picks = []
    for i in range(n):
        for j in range(n):
            dx = points[i, 0] - points[j, 0]
            dy = points[i, 1] - points[j, 1]
            within[i, j] = sqrt(dx * dx + dy * dy) <= threshold
    mass_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] masses = mass_arr
    remaining = n
    while remaining > 0:
        best_mass = -INFINITY
        for i in range(n):
            masses[i] = -INFINITY
            if not uncovered[i]:
                continue
            mass = 0.0
            for j in range(n):
                if uncovered[j] and within[i, j]:
                    mass = mass + probs[j]
            masses[i] = mass
            if mass > best_mass:
                best_mass = mass
        best = -1
        for i in range(n):
            if uncovered[i] and masses[i] >= best_mass - TIE_TOL:
                best = i
                break
        picks.append(best)
        for j in range(n):
            if uncovered[j] and within[best, j]:
                uncovered[j] = 0
                remaining -= 1
    return np.asarray(picks, dtype=np.int64)


def nearest_assign(double[:, ::1] points, double[:, ::1] centers):
    cdef Py_ssize_t n = points.shape[0], m = centers.shape[0], i, j, best
    cdef double dx, dy, dist, best_d
    out_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    for i in range(n):
        best = 0
        best_d = INFINITY
        for j in range(m):
            dx = points[i, 0] - centers[j, 0]
            dy = points[i, 1] - centers[j, 1]
            dist = sqrt(dx * dx + dy * dy)
            if dist < best_d:
                best_d = dist
                best = j
        out[i] = best
    return out_arr
