# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled assembly and geometry kernels (same contracts as _kernels_py)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expm1, fabs, fmin

cnp.import_array()

cdef int EI[3]
cdef int EJ[3]
EI[:] = [1, 2, 0]
EJ[:] = [2, 0, 1]


cdef inline void _grads(const double[:, ::1] pts, const cnp.int64_t[:, ::1] tris,
                        Py_ssize_t t, double g[3][2], double *area) noexcept nogil:
    cdef Py_ssize_t a = tris[t, 0], b = tris[t, 1], c = tris[t, 2]
    cdef double x0 = pts[a, 0], y0 = pts[a, 1]
    cdef double x1 = pts[b, 0], y1 = pts[b, 1]
    cdef double x2 = pts[c, 0], y2 = pts[c, 1]
    cdef double det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    area[0] = 0.5 * det
    g[0][0] = (y1 - y2) / det
    g[0][1] = (x2 - x1) / det
    g[1][0] = (y2 - y0) / det
    g[1][1] = (x0 - x2) / det
    g[2][0] = (y0 - y1) / det
    g[2][1] = (x1 - x0) / det


def stiffness_triplets(const double[:, ::1] points, const cnp.int64_t[:, ::1] tris,
                       const double[::1] coef):
    cdef Py_ssize_t nt = tris.shape[0], t, i, j, k
    rows_a = np.empty(9 * nt, dtype=np.int64)
    cols_a = np.empty(9 * nt, dtype=np.int64)
    vals_a = np.empty(9 * nt, dtype=np.float64)
    cdef cnp.int64_t[::1] rows = rows_a
    cdef cnp.int64_t[::1] cols = cols_a
    cdef double[::1] vals = vals_a
    cdef double g[3][2]
    cdef double area, s
    with nogil:
        for t in range(nt):
            _grads(points, tris, t, g, &area)
            s = area * coef[t]
            k = 9 * t
            for i in range(3):
                for j in range(3):
                    rows[k] = tris[t, i]
                    cols[k] = tris[t, j]
                    vals[k] = (g[i][0] * g[j][0] + g[i][1] * g[j][1]) * s
                    k += 1
    return rows_a, cols_a, vals_a


cdef inline double _bern(double x) noexcept nogil:
    if fabs(x) > 1e-10:
        return x / expm1(x)
    return 1.0 - 0.5 * x


def bernoulli(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    flat = arr.ravel()
    out = np.empty_like(flat)
    cdef double[::1] xv = flat
    cdef double[::1] ov = out
    cdef Py_ssize_t n = flat.shape[0], i
    with nogil:
        for i in range(n):
            ov[i] = _bern(xv[i])
    return out.reshape(arr.shape)


def sg_triplets(const double[:, ::1] points, const cnp.int64_t[:, ::1] tris,
                const double[::1] psi, const double[::1] coef):
    cdef Py_ssize_t nt = tris.shape[0], t, e, k
    rows_a = np.empty(12 * nt, dtype=np.int64)
    cols_a = np.empty(12 * nt, dtype=np.int64)
    vals_a = np.empty(12 * nt, dtype=np.float64)
    cdef cnp.int64_t[::1] rows = rows_a
    cdef cnp.int64_t[::1] cols = cols_a
    cdef double[::1] vals = vals_a
    cdef double g[3][2]
    cdef double area, w, c, pi, pj
    cdef cnp.int64_t a, b
    with nogil:
        for t in range(nt):
            _grads(points, tris, t, g, &area)
            for e in range(3):
                a = tris[t, EI[e]]
                b = tris[t, EJ[e]]
                w = -(g[EI[e]][0] * g[EJ[e]][0] + g[EI[e]][1] * g[EJ[e]][1]) * area * coef[t]
                pi = psi[a]
                pj = psi[b]
                c = exp(fmin(pi, pj)) * _bern(-fabs(pj - pi)) * w
                k = 12 * t + 4 * e
                rows[k] = a; cols[k] = b; vals[k] = -c
                rows[k + 1] = b; cols[k + 1] = a; vals[k + 1] = -c
                rows[k + 2] = a; cols[k + 2] = a; vals[k + 2] = c
                rows[k + 3] = b; cols[k + 3] = b; vals[k + 3] = c
    return rows_a, cols_a, vals_a


cdef inline Py_ssize_t _bisect(const double[::1] grid, double v) noexcept nogil:
    # index of the last grid line <= v, clipped to a valid cell
    cdef Py_ssize_t lo = 0, hi = grid.shape[0] - 1, mid
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if grid[mid] <= v:
            lo = mid
        else:
            hi = mid
    return lo


def locate(const double[::1] xs, const double[::1] ys, const double[:, ::1] points,
           const cnp.int64_t[:, ::1] tris, const double[:, ::1] query):
    cdef Py_ssize_t nq = query.shape[0], nx = xs.shape[0] - 1, q, ci, cj, t
    tri_a = np.empty(nq, dtype=np.int64)
    bary_a = np.empty((nq, 3), dtype=np.float64)
    cdef cnp.int64_t[::1] tri = tri_a
    cdef double[:, ::1] bary = bary_a
    cdef double qx, qy, xi, eta, x0, y0, v0x, v0y, v1x, v1y, dx, dy, det, l1, l2
    cdef int second
    with nogil:
        for q in range(nq):
            qx = query[q, 0]
            qy = query[q, 1]
            ci = _bisect(xs, qx)
            cj = _bisect(ys, qy)
            xi = (qx - xs[ci]) / (xs[ci + 1] - xs[ci])
            eta = (qy - ys[cj]) / (ys[cj + 1] - ys[cj])
            if (ci + cj) % 2 == 0:
                second = eta > xi
            else:
                second = xi + eta > 1.0
            t = 2 * (cj * nx + ci) + second
            tri[q] = t
            x0 = points[tris[t, 0], 0]
            y0 = points[tris[t, 0], 1]
            v0x = points[tris[t, 1], 0] - x0
            v0y = points[tris[t, 1], 1] - y0
            v1x = points[tris[t, 2], 0] - x0
            v1y = points[tris[t, 2], 1] - y0
            dx = qx - x0
            dy = qy - y0
            det = v0x * v1y - v0y * v1x
            l1 = (dx * v1y - dy * v1x) / det
            l2 = (v0x * dy - v0y * dx) / det
            bary[q, 0] = 1.0 - l1 - l2
            bary[q, 1] = l1
            bary[q, 2] = l2
    return tri_a, bary_a


def disc_members(const double[:, ::1] centroids, const double[:, ::1] centers,
                 double radius):
    cdef Py_ssize_t nt = centroids.shape[0], nc = centers.shape[0], t, c
    mask_a = np.zeros(nt, dtype=bool)
    cdef cnp.npy_bool[::1] mask = mask_a
    cdef double r2 = radius * radius, dx, dy
    with nogil:
        for t in range(nt):
            for c in range(nc):
                dx = centroids[t, 0] - centers[c, 0]
                dy = centroids[t, 1] - centers[c, 1]
                if dx * dx + dy * dy <= r2:
                    mask[t] = True
                    break
    return mask_a
