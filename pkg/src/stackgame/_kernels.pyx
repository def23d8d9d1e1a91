# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled path kernels (same contract as ``_kernels_py``)."""

import numpy as np


def affine_paths(X0, F, f, G, g, W1, w1, c1, W2, w2, c2, Phi1, Phi2, dW, double dt):
    cdef double[::1] x0 = np.ascontiguousarray(X0, dtype=np.float64)
    cdef double[:, :, ::1] Fm = np.ascontiguousarray(F, dtype=np.float64)
    cdef double[:, ::1] fm = np.ascontiguousarray(f, dtype=np.float64)
    cdef double[:, :, ::1] Gm = np.ascontiguousarray(G, dtype=np.float64)
    cdef double[:, ::1] gm = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, :, ::1] A1 = np.ascontiguousarray(W1, dtype=np.float64)
    cdef double[:, ::1] a1 = np.ascontiguousarray(w1, dtype=np.float64)
    cdef double[::1] k1 = np.ascontiguousarray(c1, dtype=np.float64)
    cdef double[:, :, ::1] A2 = np.ascontiguousarray(W2, dtype=np.float64)
    cdef double[:, ::1] a2 = np.ascontiguousarray(w2, dtype=np.float64)
    cdef double[::1] k2 = np.ascontiguousarray(c2, dtype=np.float64)
    cdef double[:, ::1] T1 = np.ascontiguousarray(Phi1, dtype=np.float64)
    cdef double[:, ::1] T2 = np.ascontiguousarray(Phi2, dtype=np.float64)
    cdef double[:, ::1] dw = np.ascontiguousarray(dW, dtype=np.float64)
    cdef Py_ssize_t P = dw.shape[0], S = dw.shape[1], d = x0.shape[0]
    out_J = np.zeros((P, 2))
    out_X = np.empty((P, d))
    tmp = np.empty(d)
    cdef double[:, ::1] J = out_J
    cdef double[:, ::1] XT = out_X
    cdef double[::1] y = tmp
    cdef Py_ssize_t p, k, i, j
    cdef double q1, q2, dr, sg, xi
    with nogil:
        for p in range(P):
            for i in range(d):
                XT[p, i] = x0[i]
            for k in range(S):
                q1 = k1[k]
                q2 = k2[k]
                for i in range(d):
                    dr = 0.0
                    sg = 0.0
                    for j in range(d):
                        dr = dr + A1[k, i, j] * XT[p, j]
                        sg = sg + A2[k, i, j] * XT[p, j]
                    q1 = q1 + XT[p, i] * (0.5 * dr + a1[k, i])
                    q2 = q2 + XT[p, i] * (0.5 * sg + a2[k, i])
                J[p, 0] += q1 * dt
                J[p, 1] += q2 * dt
                xi = dw[p, k]
                for i in range(d):
                    dr = fm[k, i]
                    sg = gm[k, i]
                    for j in range(d):
                        dr = dr + Fm[k, i, j] * XT[p, j]
                        sg = sg + Gm[k, i, j] * XT[p, j]
                    y[i] = XT[p, i] + dr * dt + sg * xi
                for i in range(d):
                    XT[p, i] = y[i]
            q1 = 0.0
            q2 = 0.0
            for i in range(d):
                dr = 0.0
                sg = 0.0
                for j in range(d):
                    dr = dr + T1[i, j] * XT[p, j]
                    sg = sg + T2[i, j] * XT[p, j]
                q1 = q1 + 0.5 * XT[p, i] * dr
                q2 = q2 + 0.5 * XT[p, i] * sg
            J[p, 0] += q1
            J[p, 1] += q2
    return out_J, out_X
