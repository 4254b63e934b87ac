# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops in :mod:`shapeopt._kernels_py`.

Signatures and return conventions are identical to the numpy fallback.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, acos, cos, M_PI

cnp.import_array()


def assemble_p1(nodes, tris):
    cdef double[:, ::1] P = np.ascontiguousarray(nodes, dtype=np.float64)
    cdef long long[:, ::1] T = np.ascontiguousarray(tris, dtype=np.int64)
    cdef Py_ssize_t m = T.shape[0]
    cdef Py_ssize_t e, i, j, k
    rows_a = np.empty(9 * m, dtype=np.int64)
    cols_a = np.empty(9 * m, dtype=np.int64)
    kv_a = np.empty(9 * m, dtype=np.float64)
    mv_a = np.empty(9 * m, dtype=np.float64)
    area_a = np.empty(m, dtype=np.float64)
    grad_a = np.empty((m, 3, 2), dtype=np.float64)
    cdef long long[::1] rows = rows_a
    cdef long long[::1] cols = cols_a
    cdef double[::1] kv = kv_a
    cdef double[::1] mv = mv_a
    cdef double[::1] area = area_a
    cdef double[:, :, ::1] grad = grad_a
    cdef double x0, x1, x2, y0, y1, y2, det, a
    cdef double gx[3]
    cdef double gy[3]
    for e in range(m):
        x0 = P[T[e, 0], 0]; y0 = P[T[e, 0], 1]
        x1 = P[T[e, 1], 0]; y1 = P[T[e, 1], 1]
        x2 = P[T[e, 2], 0]; y2 = P[T[e, 2], 1]
        det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        gx[0] = (y1 - y2) / det; gy[0] = (x2 - x1) / det
        gx[1] = (y2 - y0) / det; gy[1] = (x0 - x2) / det
        gx[2] = (y0 - y1) / det; gy[2] = (x1 - x0) / det
        a = 0.5 * det
        area[e] = a
        for i in range(3):
            grad[e, i, 0] = gx[i]
            grad[e, i, 1] = gy[i]
            for j in range(3):
                k = 9 * e + 3 * i + j
                rows[k] = T[e, i]
                cols[k] = T[e, j]
                kv[k] = a * (gx[i] * gx[j] + gy[i] * gy[j])
                mv[k] = a * (2.0 if i == j else 1.0) / 12.0
    return rows_a, cols_a, kv_a, mv_a, area_a, grad_a


cdef int _solve3(double A[3][3], double *b, double *x) nogil:
    """Gaussian elimination with partial pivoting on a copy; 0 on success."""
    cdef double M[3][4]
    cdef int i, j, r, p
    cdef double f, t
    for i in range(3):
        for j in range(3):
            M[i][j] = A[i][j]
        M[i][3] = b[i]
    for i in range(3):
        p = i
        for r in range(i + 1, 3):
            if fabs(M[r][i]) > fabs(M[p][i]):
                p = r
        if fabs(M[p][i]) == 0.0:
            return 1
        if p != i:
            for j in range(4):
                t = M[i][j]; M[i][j] = M[p][j]; M[p][j] = t
        for r in range(i + 1, 3):
            f = M[r][i] / M[i][i]
            for j in range(i, 4):
                M[r][j] -= f * M[i][j]
    for i in range(2, -1, -1):
        t = M[i][3]
        for j in range(i + 1, 3):
            t -= M[i][j] * x[j]
        x[i] = t / M[i][i]
    return 0


cdef double _rcond_sym3(double A[3][3]) nogil:
    """Ratio of smallest to largest eigenvalue of a symmetric PSD 3x3 matrix."""
    cdef double p1 = A[0][1] * A[0][1] + A[0][2] * A[0][2] + A[1][2] * A[1][2]
    cdef double q, p2, p, r, phi, e1, e3
    cdef double B[3][3]
    cdef int a, b
    if p1 == 0.0:
        e1 = max(A[0][0], max(A[1][1], A[2][2]))
        e3 = min(A[0][0], min(A[1][1], A[2][2]))
    else:
        q = (A[0][0] + A[1][1] + A[2][2]) / 3.0
        p2 = (A[0][0] - q) ** 2 + (A[1][1] - q) ** 2 + (A[2][2] - q) ** 2 + 2.0 * p1
        p = sqrt(p2 / 6.0)
        for a in range(3):
            for b in range(3):
                B[a][b] = (A[a][b] - (q if a == b else 0.0)) / p
        r = 0.5 * (B[0][0] * (B[1][1] * B[2][2] - B[1][2] * B[2][1])
                   - B[0][1] * (B[1][0] * B[2][2] - B[1][2] * B[2][0])
                   + B[0][2] * (B[1][0] * B[2][1] - B[1][1] * B[2][0]))
        if r <= -1.0:
            phi = M_PI / 3.0
        elif r >= 1.0:
            phi = 0.0
        else:
            phi = acos(r) / 3.0
        e1 = q + 2.0 * p * cos(phi)
        e3 = q + 2.0 * p * cos(phi + 2.0 * M_PI / 3.0)
    if e1 <= 0.0:
        return 0.0
    return max(e3, 0.0) / e1


def patch_fit(nodes, centroids, values, ptr, idx):
    cdef double[:, ::1] X = np.ascontiguousarray(nodes, dtype=np.float64)
    cdef double[:, ::1] C = np.ascontiguousarray(centroids, dtype=np.float64)
    cdef double[:, ::1] V = np.ascontiguousarray(values, dtype=np.float64)
    cdef long long[::1] pp = np.ascontiguousarray(ptr, dtype=np.int64)
    cdef long long[::1] ii = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t n = pp.shape[0] - 1
    cdef Py_ssize_t k = V.shape[1]
    out_a = np.zeros((n, k), dtype=np.float64)
    res_a = np.zeros(n, dtype=np.float64)
    rc_a = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] out = out_a
    cdef double[::1] res = res_a
    cdef double[::1] rc = rc_a
    cdef Py_ssize_t i, q, e, c, a, b
    cdef double A[3][3]
    cdef double rhs[3]
    cdef double sol[3]
    cdef double phi[3]
    cdef double s, dx, dy, fit, r2, v2
    for i in range(n):
        s = 0.0
        for q in range(pp[i], pp[i + 1]):
            e = ii[q]
            dx = C[e, 0] - X[i, 0]
            dy = C[e, 1] - X[i, 1]
            s += dx * dx + dy * dy
        if pp[i + 1] > pp[i]:
            s = sqrt(s / (pp[i + 1] - pp[i]))
        if s == 0.0:
            s = 1.0
        for a in range(3):
            for b in range(3):
                A[a][b] = 0.0
        for q in range(pp[i], pp[i + 1]):
            e = ii[q]
            phi[0] = 1.0
            phi[1] = (C[e, 0] - X[i, 0]) / s
            phi[2] = (C[e, 1] - X[i, 1]) / s
            for a in range(3):
                for b in range(3):
                    A[a][b] += phi[a] * phi[b]
        rc[i] = _rcond_sym3(A)
        r2 = 0.0
        v2 = 0.0
        for c in range(k):
            for a in range(3):
                rhs[a] = 0.0
            for q in range(pp[i], pp[i + 1]):
                e = ii[q]
                phi[0] = 1.0
                phi[1] = (C[e, 0] - X[i, 0]) / s
                phi[2] = (C[e, 1] - X[i, 1]) / s
                for a in range(3):
                    rhs[a] += phi[a] * V[e, c]
            if rc[i] > 1e-10 and _solve3(A, rhs, sol) == 0:
                pass
            else:
                sol[0] = rhs[0] / max(A[0][0], 1.0)
                sol[1] = 0.0
                sol[2] = 0.0
            out[i, c] = sol[0]
            for q in range(pp[i], pp[i + 1]):
                e = ii[q]
                fit = sol[0] + sol[1] * (C[e, 0] - X[i, 0]) / s + sol[2] * (C[e, 1] - X[i, 1]) / s
                r2 += (fit - V[e, c]) ** 2
                v2 += V[e, c] ** 2
        res[i] = sqrt(r2 / max(v2, 1e-300))
    return out_a, res_a, rc_a


def contour_segments(nodes, tris, values, double level):
    cdef double[:, ::1] P = np.ascontiguousarray(nodes, dtype=np.float64)
    cdef long long[:, ::1] T = np.ascontiguousarray(tris, dtype=np.int64)
    cdef double[::1] U = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t m = T.shape[0]
    seg_a = np.empty((m, 2, 2), dtype=np.float64)
    cdef double[:, :, ::1] seg = seg_a
    cdef Py_ssize_t e, j, lone, s = 0
    cdef int cnt
    cdef long long i0, i1, i2
    cdef double v[3]
    cdef double a, b
    for e in range(m):
        cnt = 0
        for j in range(3):
            v[j] = U[T[e, j]] - level
            if v[j] > 0:
                cnt += 1
        if cnt == 0 or cnt == 3:
            continue
        lone = 0
        for j in range(3):
            if (cnt == 1 and v[j] > 0) or (cnt == 2 and not v[j] > 0):
                lone = j
                break
        i0 = T[e, lone]
        i1 = T[e, (lone + 1) % 3]
        i2 = T[e, (lone + 2) % 3]
        a = v[lone] / (v[lone] - v[(lone + 1) % 3])
        b = v[lone] / (v[lone] - v[(lone + 2) % 3])
        seg[s, 0, 0] = P[i0, 0] + a * (P[i1, 0] - P[i0, 0])
        seg[s, 0, 1] = P[i0, 1] + a * (P[i1, 1] - P[i0, 1])
        seg[s, 1, 0] = P[i0, 0] + b * (P[i2, 0] - P[i0, 0])
        seg[s, 1, 1] = P[i0, 1] + b * (P[i2, 1] - P[i0, 1])
        s += 1
    return seg_a[:s].copy()
