"""Random dopant samples, the coefficient fields they induce, and level-coupled solves.

Every sample is a pure function of a 64-bit seed.  Seeds are derived from
``(global seed, level, index)`` through ``numpy.random.SeedSequence`` and
drive a counter-based Philox generator, so sample ``i`` is the same no matter
which thread draws it or in which order.
"""

from __future__ import annotations

import csv
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import fem, kernels
from .fem import PER_NM3_TO_PER_CM3, PhysicalParams
from .mesh import SI, DeviceGeometry, TriMesh, build_device_mesh


class SamplingError(ValueError):
    pass


class LevelSolveError(RuntimeError):
    """A solver failure tagged with the level and sample it came from."""

    def __init__(self, msg, level=None, key=None, cause=None):
        super().__init__(msg)
        self.level = level
        self.key = key
        self.cause = cause


def sample_seed(global_seed, level, index):
    """64-bit seed of sample ``index`` on ``level``."""
    ss = np.random.SeedSequence([int(global_seed) & (2**64 - 1), int(level), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class DopantSample:
    seed: int
    positions: np.ndarray
    charge_sign: np.ndarray
    count: int
    depth: float
    empty_warning: bool = False

    def __post_init__(self):
        self.positions.setflags(write=False)
        self.charge_sign.setflags(write=False)


def expected_count(C_dop, area, depth):
    """Dopants in a slab of cross-section ``area`` (nm^2) and ``depth`` (nm)."""
    return int(round(C_dop * area * depth / PER_NM3_TO_PER_CM3))


def draw_dopants(seed, geometry: DeviceGeometry, C_dop, depth=60.0, sign=-1) -> DopantSample:
    """Uniformly distributed dopants in the silicon layer."""
    if not C_dop > 0:
        raise SamplingError("C_dop must be positive")
    if not depth > 0:
        raise SamplingError("depth must be positive")
    x0, x1, y0, y1 = geometry.si_box
    count = expected_count(C_dop, geometry.si_area, depth)
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    u = rng.random((count, 2))
    # keep strictly inside the open box
    u = np.where(u == 0.0, 0.5, u)
    pos = np.column_stack([x0 + (x1 - x0) * u[:, 0], y0 + (y1 - y0) * u[:, 1]])
    empty = count == 0
    if empty:
        warnings.warn("dopant concentration too low for the silicon area; sample is empty",
                      RuntimeWarning, stacklevel=2)
    return DopantSample(
        seed=int(seed),
        positions=pos,
        charge_sign=np.full(count, int(sign), dtype=np.int64),
        count=count,
        depth=float(depth),
        empty_warning=empty,
    )


def _gauss_stencil(sigma, n_radial=6, n_angular=12):
    """Offsets and weights of a truncated 2D Gaussian (radius 3 sigma).

    Radial Gauss-Legendre nodes on [0, 3 sigma] with the density
    ``r exp(-r^2 / 2 sigma^2)`` folded into the weights; uniform angles.
    """
    t, w = np.polynomial.legendre.leggauss(n_radial)
    R = 3.0 * sigma
    r = 0.5 * R * (t + 1.0)
    wr = 0.5 * R * w * r * np.exp(-0.5 * (r / sigma) ** 2)
    th = 2.0 * np.pi * (np.arange(n_angular) + 0.5) / n_angular
    off = np.stack([np.outer(r, np.cos(th)).ravel(), np.outer(r, np.sin(th)).ravel()], axis=1)
    wt = np.repeat(wr, n_angular)
    return off, wt / wt.sum()


def _reflect(vals, lo, hi):
    vals = np.where(vals < lo, 2 * lo - vals, vals)
    vals = np.where(vals > hi, 2 * hi - vals, vals)
    return np.clip(vals, lo, hi)


def _si_box(mesh):
    ys = [(a, b) for tag, a, b in mesh.domain.layer_bounds() if tag == SI]
    if len(ys) != 1:
        raise SamplingError("expected exactly one silicon layer")
    return 0.0, mesh.domain.width, ys[0][0], ys[0][1]


@dataclass(frozen=True)
class SampleFields:
    """Per-element permittivity and nodal dopant load of one sample on one mesh.

    ``charge`` is ``int C_dop phi_i`` (cm^-3 nm^2); ``density`` is the lumped
    nodal concentration (cm^-3) on silicon.
    """

    permittivity: np.ndarray
    charge: np.ndarray
    density: np.ndarray


def realize_fields(sample: DopantSample, mesh: TriMesh, params: PhysicalParams,
                   r_dop=1.0) -> SampleFields:
    """Map a dopant sample to coefficient fields on ``mesh``.

    Elements whose centroid lies within ``r_dop`` of a dopant, or that contain
    one, take ``A_dop``.  Each dopant carries a Gaussian charge bump with
    standard deviation ``r_dop/2`` truncated at three deviations; stencil points
    leaving silicon are mirrored back, so the total charge is exact on every
    mesh.
    """
    A = fem.nominal_permittivity(mesh, params)
    n = mesh.n_vertices
    charge = np.zeros(n)
    if sample.count:
        x0, x1, y0, y1 = _si_box(mesh)
        pos = sample.positions
        if np.any((pos[:, 0] <= x0) | (pos[:, 0] >= x1) | (pos[:, 1] <= y0) | (pos[:, 1] >= y1)):
            raise SamplingError("dopant outside the silicon subdomain")
        tri, _ = mesh.locate(pos)
        mask = kernels.disc_members(mesh.centroids, pos, r_dop)
        mask[tri] = True
        mask &= mesh.subdomain == SI
        A = A.copy()
        A[mask] = params.A_dop

        off, wt = _gauss_stencil(0.5 * r_dop)
        pts = (pos[:, None, :] + off[None, :, :]).reshape(-1, 2)
        pts[:, 0] = _reflect(pts[:, 0], x0, x1)
        pts[:, 1] = _reflect(pts[:, 1], y0, y1)
        ptri, bary = mesh.locate(pts)
        scale = PER_NM3_TO_PER_CM3 / sample.depth
        q = (np.repeat(sample.charge_sign.astype(float), len(wt)) * np.tile(wt, sample.count)) * scale
        np.add.at(charge, mesh.triangles[ptri].ravel(), (bary * q[:, None]).ravel())
    m = mesh.lumped_mass(SI)
    density = np.divide(charge, m, out=np.zeros(n), where=m > 0)
    return SampleFields(A, charge, density)


def integrated_charge(fields: SampleFields, depth):
    """Total dopant charge in units of the elementary charge."""
    return float(np.sum(fields.charge)) * depth / PER_NM3_TO_PER_CM3


@dataclass(frozen=True)
class CoupledSample:
    sample: DopantSample
    fine_level: int
    coarse_level: int | None


@dataclass
class DeviceSampler:
    """Seeded device QoI evaluator with per-level mesh cache.

    Called as ``sampler(key, h_fine, h_coarse)`` with ``key = (stream, index)``;
    returns ``(q_fine, q_coarse)`` with ``q_coarse = None`` when ``h_coarse`` is
    None.  Both evaluations use the same dopant sample.
    """

    geometry: DeviceGeometry = field(default_factory=DeviceGeometry)
    params: PhysicalParams = field(default_factory=PhysicalParams)
    seed: int = 0
    depth: float = 60.0
    r_dop: float = 1.0
    qoi: str = "mean-potential"
    qoi_contact: str | None = None
    tol: float = 1e-8
    collect_timings: bool = False

    def __post_init__(self):
        self._meshes = {}
        self._bcs = {}
        self._lock = threading.Lock()
        self.timings = []

    def mesh(self, h):
        with self._lock:
            if h not in self._meshes:
                m = build_device_mesh(self.geometry, h)
                self._meshes[h] = m
                self._bcs[h] = fem.boundary_data(m, self.params)
            return self._meshes[h], self._bcs[h]

    def draw(self, key):
        stream, index = key
        return draw_dopants(sample_seed(self.seed, stream, index), self.geometry,
                            self.params.C_dop, self.depth, self.params.dopant_sign)

    def solve(self, sample, h, level=None, check_bounds=False):
        mesh, bc = self.mesh(h)
        f = realize_fields(sample, mesh, self.params, self.r_dop)
        try:
            sol = fem.gummel_iterate(mesh, f.permittivity, f.charge, self.params, bc,
                                     tol=self.tol, check_bounds=check_bounds)
        except (fem.SolverError, fem.IterationError, fem.AssemblyError) as exc:
            raise LevelSolveError(f"solve failed at h={h} (level {level}): {exc}",
                                  level=level, key=sample.seed, cause=exc) from exc
        sol.qoi = fem.evaluate_qoi(sol, mesh, self.qoi, self.qoi_contact)
        if self.collect_timings:
            with self._lock:
                self.timings.append((h, dict(sol.timings)))
        return sol

    def __call__(self, key, h_fine, h_coarse=None):
        cs = CoupledSample(self.draw(key), key[0], None if h_coarse is None else key[0] - 1)
        return coupled_solve(cs, self, h_fine, h_coarse)


def coupled_solve(sample: CoupledSample, sampler: DeviceSampler, h_fine, h_coarse=None):
    """QoI of one dopant sample on the fine mesh and (optionally) the coarse mesh."""
    qf = sampler.solve(sample.sample, h_fine, sample.fine_level).qoi
    if h_coarse is None:
        return qf, None
    if h_coarse == h_fine:
        return qf, qf
    qc = sampler.solve(sample.sample, h_coarse, sample.coarse_level).qoi
    return qf, qc


def dump_samples_csv(samples, path):
    """Debug dump: one row per dopant (seed, index, x, y, sign)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "dopant", "x", "y", "sign"])
        for s in samples:
            for k in range(s.count):
                w.writerow([s.seed, k, repr(float(s.positions[k, 0])),
                            repr(float(s.positions[k, 1])), int(s.charge_sign[k])])
