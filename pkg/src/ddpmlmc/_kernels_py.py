"""Pure-numpy implementations of the assembly and geometry kernels.

These mirror the compiled versions in ``_kernels.pyx`` one-to-one and are
used whenever the extension is not built (or ``DDPMLMC_PURE_PYTHON=1``).
"""

import numpy as np

# local edge k is opposite local vertex k
_EDGE_I = np.array([1, 2, 0])
_EDGE_J = np.array([2, 0, 1])


def _gradients(points, tris):
    p0 = points[tris[:, 0]]
    p1 = points[tris[:, 1]]
    p2 = points[tris[:, 2]]
    det = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (
        p2[:, 0] - p0[:, 0]
    ) * (p1[:, 1] - p0[:, 1])
    area = 0.5 * det
    # gradient of barycentric coordinate k is rot90 of the opposite edge / det
    grads = np.empty((len(tris), 3, 2))
    grads[:, 0, 0] = p1[:, 1] - p2[:, 1]
    grads[:, 0, 1] = p2[:, 0] - p1[:, 0]
    grads[:, 1, 0] = p2[:, 1] - p0[:, 1]
    grads[:, 1, 1] = p0[:, 0] - p2[:, 0]
    grads[:, 2, 0] = p0[:, 1] - p1[:, 1]
    grads[:, 2, 1] = p1[:, 0] - p0[:, 0]
    grads /= det[:, None, None]
    return area, grads


def stiffness_triplets(points, tris, coef):
    """COO triplets of the P1 matrix for ``-div(coef grad .)``, coef per element."""
    area, grads = _gradients(points, tris)
    local = np.einsum("tik,tjk->tij", grads, grads) * (area * coef)[:, None, None]
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    return rows, cols, local.ravel()


def bernoulli(x):
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    small = np.abs(x) <= 1e-10
    huge = x > 700.0
    mid = ~(small | huge)
    out[mid] = x[mid] / np.expm1(x[mid])
    out[huge] = x[huge] * np.exp(-x[huge])
    out[small] = 1.0 - 0.5 * x[small]
    return out


def sg_triplets(points, tris, psi, coef):
    """Exponentially fitted P1 matrix for ``-div(coef exp(psi) grad w)``.

    Each edge carries the exact 1D flux coefficient of ``exp(psi)`` for
    ``psi`` linear along the edge, which keeps the matrix symmetric and an
    M-matrix on weakly acute meshes.
    """
    area, grads = _gradients(points, tris)
    i = tris[:, _EDGE_I]
    j = tris[:, _EDGE_J]
    # cotangent weight of each edge, scaled by the element coefficient
    w = -np.einsum("tek,tek->te", grads[:, _EDGE_I], grads[:, _EDGE_J]) * (
        area * coef
    )[:, None]
    pi = psi[i]
    pj = psi[j]
    c = np.exp(np.minimum(pi, pj)) * bernoulli(-np.abs(pj - pi)) * w
    rows = np.stack([i, j, i, j], axis=-1).ravel()
    cols = np.stack([j, i, i, j], axis=-1).ravel()
    vals = np.stack([-c, -c, c, c], axis=-1).ravel()
    return rows, cols, vals


def locate(xs, ys, points, tris, query):
    """Locate query points in a layered structured grid.

    Returns the containing triangle index and barycentric coordinates with
    respect to that triangle's vertex order.
    """
    nx = len(xs) - 1
    ny = len(ys) - 1
    qx = query[:, 0]
    qy = query[:, 1]
    ci = np.clip(np.searchsorted(xs, qx, side="right") - 1, 0, nx - 1)
    cj = np.clip(np.searchsorted(ys, qy, side="right") - 1, 0, ny - 1)
    xi = (qx - xs[ci]) / (xs[ci + 1] - xs[ci])
    eta = (qy - ys[cj]) / (ys[cj + 1] - ys[cj])
    even = (ci + cj) % 2 == 0
    second = np.where(even, eta > xi, xi + eta > 1.0)
    tri = 2 * (cj * nx + ci) + second.astype(np.int64)
    p = points[tris[tri]]
    v0 = p[:, 1] - p[:, 0]
    v1 = p[:, 2] - p[:, 0]
    d = query - p[:, 0]
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (d[:, 0] * v1[:, 1] - d[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * d[:, 1] - v0[:, 1] * d[:, 0]) / det
    bary = np.stack([1.0 - l1 - l2, l1, l2], axis=-1)
    return tri, bary


def disc_members(centroids, centers, radius):
    """Mask of elements whose centroid lies within ``radius`` of any center."""
    mask = np.zeros(len(centroids), dtype=bool)
    r2 = radius * radius
    for c in centers:
        d = centroids - c
        mask |= d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] <= r2
    return mask
