# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels.

Mirrors ``cmha._kernels._fallback`` operation by operation; the tests compare
both lanes on identical inputs.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport atan2, fabs, sqrt

cnp.import_array()

LANE = "compiled"


def sinkhorn_core(kernel, int n_iters):
    z_arr = np.array(kernel, dtype=np.float64, copy=True, order="C")
    cdef double[:, ::1] z = z_arr
    cdef Py_ssize_t n = z.shape[0] - 1
    cdef Py_ssize_t m = z.shape[1] - 1
    cdef Py_ssize_t i, j, it
    cdef double total, scale, res, row_res, col_res

    for it in range(n_iters):
        for i in range(n):
            total = 0.0
            for j in range(m + 1):
                total += z[i, j]
            if total <= 0.0:
                raise ValueError("degenerate scores: zero row mass")
            for j in range(m + 1):
                z[i, j] /= total
        # dustbin row carries the complementary marginal m
        total = 0.0
        for j in range(m + 1):
            total += z[n, j]
        if total > 0.0:
            scale = m / total
            for j in range(m + 1):
                z[n, j] *= scale
        for j in range(m):
            total = 0.0
            for i in range(n + 1):
                total += z[i, j]
            if total <= 0.0:
                raise ValueError("degenerate scores: zero column mass")
            for i in range(n + 1):
                z[i, j] /= total
        # dustbin column carries the complementary marginal n
        total = 0.0
        for i in range(n + 1):
            total += z[i, m]
        if total > 0.0:
            scale = n / total
            for i in range(n + 1):
                z[i, m] *= scale

    row_res = 0.0
    for i in range(n):
        total = 0.0
        for j in range(m + 1):
            total += z[i, j]
        res = fabs(total - 1.0)
        if res > row_res:
            row_res = res
    col_res = 0.0
    for j in range(m):
        total = 0.0
        for i in range(n + 1):
            total += z[i, j]
        res = fabs(total - 1.0)
        if res > col_res:
            col_res = res
    return z_arr, row_res, col_res


def triplet_angles(coords, neighbor_order, int k):
    cdef double[:, ::1] pts = np.ascontiguousarray(coords, dtype=np.float64)
    cdef long long[:, ::1] order = np.ascontiguousarray(
        neighbor_order, dtype=np.int64
    )
    cdef Py_ssize_t n = pts.shape[0]
    out_arr = np.zeros((n, n, k), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    if n == 0 or k == 0:
        return out_arr

    cdef Py_ssize_t i, j, r, pos, a
    cdef double v1x, v1y, v1z, v2x, v2y, v2z
    cdef double cx, cy, cz, sin_n, cos_v, n1, n2

    for i in range(n):
        for j in range(n):
            v1x = pts[j, 0] - pts[i, 0]
            v1y = pts[j, 1] - pts[i, 1]
            v1z = pts[j, 2] - pts[i, 2]
            n1 = sqrt(v1x * v1x + v1y * v1y + v1z * v1z)
            pos = 0
            for r in range(k):
                a = order[i, pos]
                if a == j:
                    pos += 1
                    a = order[i, pos]
                pos += 1
                if n1 < 1e-15:
                    out[i, j, r] = 0.0
                    continue
                v2x = pts[a, 0] - pts[i, 0]
                v2y = pts[a, 1] - pts[i, 1]
                v2z = pts[a, 2] - pts[i, 2]
                n2 = sqrt(v2x * v2x + v2y * v2y + v2z * v2z)
                if n2 < 1e-15:
                    out[i, j, r] = 0.0
                    continue
                cx = v1y * v2z - v1z * v2y
                cy = v1z * v2x - v1x * v2z
                cz = v1x * v2y - v1y * v2x
                sin_n = sqrt(cx * cx + cy * cy + cz * cz)
                cos_v = v1x * v2x + v1y * v2y + v1z * v2z
                out[i, j, r] = atan2(sin_n, cos_v)
    return out_arr


cdef double _rotate_pair(double b[3][3], double v[3][3], Py_ssize_t p, Py_ssize_t q):
    cdef double app = b[0][p] * b[0][p] + b[1][p] * b[1][p] + b[2][p] * b[2][p]
    cdef double aqq = b[0][q] * b[0][q] + b[1][q] * b[1][q] + b[2][q] * b[2][q]
    cdef double apq = b[0][p] * b[0][q] + b[1][p] * b[1][q] + b[2][p] * b[2][q]
    cdef double tau, t, c, s, bp, bq, vp, vq
    cdef Py_ssize_t row
    if apq == 0.0 or fabs(apq) <= 1e-15 * sqrt(app * aqq):
        return 0.0
    tau = (aqq - app) / (2.0 * apq)
    if tau >= 0.0:
        t = 1.0 / (tau + sqrt(1.0 + tau * tau))
    else:
        t = -1.0 / (-tau + sqrt(1.0 + tau * tau))
    c = 1.0 / sqrt(1.0 + t * t)
    s = c * t
    for row in range(3):
        bp = b[row][p]
        bq = b[row][q]
        b[row][p] = c * bp - s * bq
        b[row][q] = s * bp + c * bq
        vp = v[row][p]
        vq = v[row][q]
        v[row][p] = c * vp - s * vq
        v[row][q] = s * vp + c * vq
    return fabs(apq)


def jacobi_svd3(a):
    a_arr = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] am = a_arr
    cdef double b[3][3]
    cdef double v[3][3]
    cdef Py_ssize_t i, j, sweep
    cdef double off, r

    for i in range(3):
        for j in range(3):
            b[i][j] = am[i, j]
            v[i][j] = 1.0 if i == j else 0.0

    for sweep in range(30):
        off = 0.0
        r = _rotate_pair(b, v, 0, 1)
        if r > off:
            off = r
        r = _rotate_pair(b, v, 0, 2)
        if r > off:
            off = r
        r = _rotate_pair(b, v, 1, 2)
        if r > off:
            off = r
        if off == 0.0:
            break

    cdef double norms[3]
    for j in range(3):
        norms[j] = sqrt(b[0][j] * b[0][j] + b[1][j] * b[1][j] + b[2][j] * b[2][j])

    # selection order: descending norm, index breaking ties
    cdef Py_ssize_t order[3]
    cdef bint used[3]
    cdef Py_ssize_t slot, best
    for j in range(3):
        used[j] = False
    for slot in range(3):
        best = -1
        for j in range(3):
            if used[j]:
                continue
            if best < 0 or norms[j] > norms[best]:
                best = j
        order[slot] = best
        used[best] = True

    s_arr = np.empty(3, dtype=np.float64)
    u_arr = np.empty((3, 3), dtype=np.float64)
    v_arr = np.empty((3, 3), dtype=np.float64)
    cdef double[::1] s_out = s_arr
    cdef double[:, ::1] u_out = u_arr
    cdef double[:, ::1] v_out = v_arr
    cdef double tol, sj, dot, norm
    cdef Py_ssize_t col, axis, filled

    for slot in range(3):
        s_out[slot] = norms[order[slot]]
        for i in range(3):
            v_out[i, slot] = v[i][order[slot]]

    tol = 1e-13 * s_out[0] if s_out[0] > 0.0 else 0.0
    cdef double cand[3]
    for slot in range(3):
        sj = s_out[slot]
        col = order[slot]
        if sj > tol and sj > 0.0:
            for i in range(3):
                u_out[i, slot] = b[i][col] / sj
        else:
            filled = 0
            for axis in range(3):
                cand[0] = 0.0
                cand[1] = 0.0
                cand[2] = 0.0
                cand[axis] = 1.0
                for j in range(slot):
                    dot = (
                        cand[0] * u_out[0, j]
                        + cand[1] * u_out[1, j]
                        + cand[2] * u_out[2, j]
                    )
                    for i in range(3):
                        cand[i] -= dot * u_out[i, j]
                norm = sqrt(cand[0] * cand[0] + cand[1] * cand[1] + cand[2] * cand[2])
                if norm > 1e-6:
                    for i in range(3):
                        u_out[i, slot] = cand[i] / norm
                    filled = 1
                    break
            if not filled:
                raise RuntimeError("failed to complete orthogonal basis")
    return u_arr, s_arr, v_arr


def count_inliers_batch(rotations, translations, src, tgt, double radius):
    cdef double[:, :, ::1] rot = np.ascontiguousarray(rotations, dtype=np.float64)
    cdef double[:, ::1] tr = np.ascontiguousarray(translations, dtype=np.float64)
    cdef double[:, ::1] p = np.ascontiguousarray(src, dtype=np.float64)
    cdef double[:, ::1] q = np.ascontiguousarray(tgt, dtype=np.float64)
    cdef Py_ssize_t n_cand = rot.shape[0]
    cdef Py_ssize_t n_pairs = p.shape[0]
    out_arr = np.zeros(n_cand, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t c, i
    cdef double mx, my, mz, dx, dy, dz
    cdef long long count

    for c in range(n_cand):
        count = 0
        for i in range(n_pairs):
            mx = rot[c, 0, 0] * p[i, 0] + rot[c, 0, 1] * p[i, 1] + rot[c, 0, 2] * p[i, 2] + tr[c, 0]
            my = rot[c, 1, 0] * p[i, 0] + rot[c, 1, 1] * p[i, 1] + rot[c, 1, 2] * p[i, 2] + tr[c, 1]
            mz = rot[c, 2, 0] * p[i, 0] + rot[c, 2, 1] * p[i, 1] + rot[c, 2, 2] * p[i, 2] + tr[c, 2]
            dx = mx - q[i, 0]
            dy = my - q[i, 1]
            dz = mz - q[i, 2]
            if sqrt(dx * dx + dy * dy + dz * dz) < radius:
                count += 1
        out[c] = count
    return out_arr
