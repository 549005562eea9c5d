import numpy as np
import pytest

from ddpmlmc import kernels
from ddpmlmc.mesh import build_device_mesh

IMPLS = kernels.implementations()


def test_backend_flag_matches_dispatch():
    assert kernels.BACKEND in IMPLS


def test_bernoulli_limits():
    x = np.array([-50.0, -1e-12, 0.0, 1e-12, 1.0, 50.0, 800.0])
    for impl in IMPLS.values():
        b = np.asarray(impl.bernoulli(x))
        assert b[2] == 1.0
        assert abs(b[1] - 1.0) < 1e-11 and abs(b[3] - 1.0) < 1e-11
        np.testing.assert_allclose(b[4], 1.0 / np.expm1(1.0), rtol=1e-14)
        assert b[-1] >= 0.0 and np.isfinite(b).all()
        # B(-x) = B(x) + x
        np.testing.assert_allclose(np.asarray(impl.bernoulli(-x[4:6])), b[4:6] + x[4:6],
                                   rtol=1e-13)


@pytest.mark.skipif(len(IMPLS) < 2, reason="compiled kernels not built")
def test_backends_agree(geometry, rng):
    m = build_device_mesh(geometry, 5.0)
    py, cy = IMPLS["python"], IMPLS["cython"]
    P = np.ascontiguousarray(m.vertices)
    T = np.ascontiguousarray(m.triangles, dtype=np.int64)
    coef = rng.uniform(1, 10, m.n_triangles)
    for a, b in zip(py.stiffness_triplets(P, T, coef), cy.stiffness_triplets(P, T, coef)):
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-14)
    psi = rng.normal(0, 5, m.n_vertices)
    for a, b in zip(py.sg_triplets(P, T, psi, coef), cy.sg_triplets(P, T, psi, coef)):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)
    q = rng.uniform([0, 0], [60, 78], (500, 2))
    xs, ys = np.ascontiguousarray(m.xs), np.ascontiguousarray(m.ys)
    ta, ba = py.locate(xs, ys, P, T, q)
    tb, bb = cy.locate(xs, ys, P, T, q)
    np.testing.assert_array_equal(ta, tb)
    np.testing.assert_allclose(ba, bb, atol=1e-14)
    c = np.ascontiguousarray(m.centroids)
    np.testing.assert_array_equal(py.disc_members(c, q[:20], 3.0), cy.disc_members(c, q[:20], 3.0))


def test_stiffness_rows_sum_to_zero(mesh5):
    rows, cols, vals = kernels.stiffness_triplets(mesh5.vertices, mesh5.triangles,
                                                  np.ones(mesh5.n_triangles))
    s = np.bincount(rows, weights=vals, minlength=mesh5.n_vertices)
    assert np.abs(s).max() < 1e-12


def test_locate_barycentric(mesh5, rng):
    q = rng.uniform([0, 0], [60, 78], (200, 2))
    tri, bary = mesh5.locate(q)
    assert (bary >= -1e-12).all()
    np.testing.assert_allclose(bary.sum(axis=1), 1.0, atol=1e-13)
    back = np.einsum("ik,ikj->ij", bary, mesh5.vertices[mesh5.triangles[tri]])
    np.testing.assert_allclose(back, q, atol=1e-12)
