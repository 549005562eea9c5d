"""Layered device geometries and their conforming triangulations.

The device cross-section is a stack of rectangular layers (silicon at the
bottom, oxide, then the liquid).  Meshes are layered structured grids: one
set of vertical grid lines shared by every layer and per-layer horizontal
lines, each cell split into two right triangles with alternating diagonals.
All lengths are nanometres.

Refinement re-meshes at a smaller target size instead of subdividing, so
arbitrary real refinement ratios are supported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

SI, OX, LIQ = 0, 1, 2
SUBDOMAIN_NAMES = {SI: "si", OX: "ox", LIQ: "liq"}
SUBDOMAIN_CODES = {v: k for k, v in SUBDOMAIN_NAMES.items()}

NEUMANN = -1
GAMMA = -2

SIDES = ("bottom", "top", "left", "right")
MAX_TRIANGLES = 20_000_000


class GeometryError(ValueError):
    pass


class MeshError(ValueError):
    pass


class RefinementError(MeshError):
    pass


@dataclass(frozen=True)
class Contact:
    """An Ohmic/gate contact on one side of the bounding rectangle.

    For ``left``/``right`` contacts ``layer`` restricts the contact to the
    vertical extent of that layer; ``bottom``/``top`` contacts span the side.
    """

    name: str
    side: str
    voltage: float = 0.0
    layer: str | None = None

    def __post_init__(self):
        if self.side not in SIDES:
            raise GeometryError(f"contact {self.name!r}: unknown side {self.side!r}")
        if self.layer is not None and self.layer not in SUBDOMAIN_CODES:
            raise GeometryError(f"contact {self.name!r}: unknown layer {self.layer!r}")


@dataclass(frozen=True)
class Layer:
    tag: int
    thickness: float


@dataclass(frozen=True)
class LayeredDomain:
    """Rectangle ``[0, width] x [0, sum(thickness)]`` split into horizontal layers.

    ``gamma`` names the pair of adjacent layer tags whose common boundary is
    the interface carrying the dipole/surface-charge conditions.
    """

    width: float
    layers: tuple[Layer, ...]
    contacts: tuple[Contact, ...] = ()
    gamma: tuple[int, int] | None = None

    def __post_init__(self):
        if not (self.width > 0) or not math.isfinite(self.width):
            raise GeometryError("domain width must be strictly positive")
        if not self.layers:
            raise GeometryError("domain needs at least one layer")
        for layer in self.layers:
            if not (layer.thickness > 0) or not math.isfinite(layer.thickness):
                raise GeometryError(
                    f"layer {SUBDOMAIN_NAMES.get(layer.tag, layer.tag)} has "
                    f"non-positive thickness {layer.thickness}"
                )
        if not self.contacts:
            raise GeometryError("Dirichlet boundary must have nonzero length")
        names = [c.name for c in self.contacts]
        if len(set(names)) != len(names):
            raise GeometryError("contact names must be unique")
        tags = [layer.tag for layer in self.layers]
        for c in self.contacts:
            if c.layer is not None and SUBDOMAIN_CODES[c.layer] not in tags:
                raise GeometryError(f"contact {c.name!r} refers to a missing layer")
        if self.gamma is not None:
            a, b = self.gamma
            if not any(
                {tags[k], tags[k + 1]} == {a, b} for k in range(len(tags) - 1)
            ):
                raise GeometryError("interface layers are not adjacent")

    @property
    def height(self):
        return float(sum(layer.thickness for layer in self.layers))

    @property
    def min_feature(self):
        return min([self.width] + [layer.thickness for layer in self.layers])

    def layer_bounds(self):
        """``(tag, y0, y1)`` for each layer from bottom to top."""
        out = []
        y = 0.0
        for layer in self.layers:
            out.append((layer.tag, y, y + layer.thickness))
            y += layer.thickness
        return out

    def area(self, tag):
        return self.width * sum(l.thickness for l in self.layers if l.tag == tag)


def _default_contacts():
    return (
        Contact("gate", "bottom", -1.0),
        Contact("electrode", "top", 0.0),
    )


@dataclass(frozen=True)
class DeviceGeometry:
    """Nanowire sensor cross-section: silicon, oxide and liquid layers.

    The gate contact sits under the silicon and the reference electrode on
    top of the liquid.  ``liq_thickness`` has no canonical value; 20 nm is
    enough for the Poisson-Boltzmann screening layer to decay.
    """

    oxide_thickness: float = 8.0
    si_thickness: float = 50.0
    width: float = 60.0
    liq_thickness: float = 20.0
    contacts: tuple[Contact, ...] = field(default_factory=_default_contacts)

    def __post_init__(self):
        object.__setattr__(self, "contacts", tuple(self.contacts))
        self.domain()  # validates

    def domain(self) -> LayeredDomain:
        return LayeredDomain(
            width=self.width,
            layers=(
                Layer(SI, self.si_thickness),
                Layer(OX, self.oxide_thickness),
                Layer(LIQ, self.liq_thickness),
            ),
            contacts=self.contacts,
            gamma=(OX, LIQ),
        )

    @property
    def si_area(self):
        return self.width * self.si_thickness

    @property
    def si_box(self):
        """``(x0, x1, y0, y1)`` of the silicon layer."""
        return (0.0, self.width, 0.0, self.si_thickness)


def unit_square(contacts=None) -> LayeredDomain:
    """Single-layer unit square, all four sides grounded unless told otherwise."""
    if contacts is None:
        contacts = tuple(Contact(s, s, 0.0) for s in SIDES)
    return LayeredDomain(1.0, (Layer(SI, 1.0),), tuple(contacts))


def strip(length, height, contacts) -> LayeredDomain:
    """Silicon-only rectangle, handy for 1D-like continuity checks."""
    return LayeredDomain(float(length), (Layer(SI, float(height)),), tuple(contacts))


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Conforming triangulation with subdomain and boundary tags.

    ``edges``/``edge_tag`` list the boundary edges (tag = contact index or
    ``NEUMANN``) followed by the interface edges (tag ``GAMMA``).  ``xs`` and
    ``ys`` are the grid lines used for O(1) point location.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    subdomain: np.ndarray
    edges: np.ndarray
    edge_tag: np.ndarray
    h: float
    level: int
    h_target: float
    xs: np.ndarray
    ys: np.ndarray
    domain: LayeredDomain

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @cached_property
    def areas(self):
        p = self.vertices[self.triangles]
        a = p[:, 1] - p[:, 0]
        b = p[:, 2] - p[:, 0]
        return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])

    @cached_property
    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    @property
    def contact_names(self):
        return tuple(c.name for c in self.domain.contacts)

    def contact(self, name) -> Contact:
        for c in self.domain.contacts:
            if c.name == name:
                return c
        raise KeyError(name)

    def contact_nodes(self, name):
        idx = self.contact_names.index(name)
        return np.unique(self.edges[self.edge_tag == idx])

    @cached_property
    def dirichlet_nodes(self):
        return np.unique(self.edges[self.edge_tag >= 0])

    @cached_property
    def interface_edges(self):
        return self.edges[self.edge_tag == GAMMA]

    def subdomain_nodes(self, tag):
        return np.unique(self.triangles[self.subdomain == tag])

    def lumped_mass(self, tag=None):
        """Nodal areas (one third of each adjacent triangle), optionally per subdomain."""
        w = self.areas / 3.0
        if tag is not None:
            w = np.where(self.subdomain == tag, w, 0.0)
        return np.bincount(
            self.triangles.ravel(), weights=np.repeat(w, 3), minlength=self.n_vertices
        )

    def node_side(self, side):
        """Indices of nodes lying on one side of the bounding rectangle."""
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        tol = 1e-12 * max(self.domain.width, self.domain.height)
        target = {
            "bottom": (y, 0.0),
            "top": (y, self.domain.height),
            "left": (x, 0.0),
            "right": (x, self.domain.width),
        }[side]
        return np.flatnonzero(np.abs(target[0] - target[1]) <= tol)

    def locate(self, points):
        from . import kernels

        return kernels.locate(self.xs, self.ys, self.vertices, self.triangles, points)


def _grid_lines(length, spacing):
    n = max(1, math.ceil(length / spacing - 1e-9))
    return np.linspace(0.0, length, n + 1)


def build_layered_mesh(domain: LayeredDomain, h_target: float, level: int = 0) -> TriMesh:
    """Triangulate a layered domain with maximal element diameter close to ``h_target``.

    Cell spacing is ``h_target / sqrt(2)`` rounded down to fit each extent, so
    the realized diameter never exceeds the target.
    """
    if not (h_target > 0) or not math.isfinite(h_target):
        raise MeshError(f"h_target must be positive, got {h_target}")
    if h_target > domain.min_feature * math.sqrt(2) + 1e-12:
        raise GeometryError(
            f"h_target={h_target} exceeds the smallest geometric feature "
            f"({domain.min_feature})"
        )
    spacing = h_target / math.sqrt(2.0)
    est = 2 * math.ceil(domain.width / spacing) * math.ceil(domain.height / spacing)
    if est > MAX_TRIANGLES or spacing < 1e-9 * max(domain.width, domain.height):
        raise RefinementError(
            f"target size {h_target} is below the representable resolution "
            f"(~{est} triangles)"
        )

    xs = _grid_lines(domain.width, spacing)
    ys_parts = []
    cell_layer = []
    y0 = 0.0
    for layer in domain.layers:
        lines = _grid_lines(layer.thickness, spacing) + y0
        ys_parts.append(lines if not ys_parts else lines[1:])
        cell_layer.extend([layer.tag] * (len(lines) - 1))
        y0 += layer.thickness
    ys = np.concatenate(ys_parts)
    ys[-1] = domain.height
    nx, ny = len(xs) - 1, len(ys) - 1

    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    ii, jj = ii.ravel(), jj.ravel()
    p00 = jj * (nx + 1) + ii
    p10 = p00 + 1
    p01 = p00 + nx + 1
    p11 = p01 + 1
    even = (ii + jj) % 2 == 0
    t0 = np.where(even[:, None], np.column_stack([p00, p10, p11]),
                  np.column_stack([p00, p10, p01]))
    t1 = np.where(even[:, None], np.column_stack([p00, p11, p01]),
                  np.column_stack([p10, p11, p01]))
    triangles = np.empty((2 * len(ii), 3), dtype=np.int64)
    triangles[0::2] = t0
    triangles[1::2] = t1
    subdomain = np.repeat(np.asarray(cell_layer, dtype=np.int64)[jj], 2)

    edges, tags = _tag_edges(domain, xs, ys, nx, ny)

    p = vertices[triangles]
    diam = np.max(
        np.stack([np.linalg.norm(p[:, a] - p[:, b], axis=1) for a, b in ((0, 1), (1, 2), (2, 0))]),
        axis=0,
    )
    for arr in (vertices, triangles, subdomain, edges, tags, xs, ys):
        arr.setflags(write=False)
    return TriMesh(
        vertices=vertices,
        triangles=triangles,
        subdomain=subdomain,
        edges=edges,
        edge_tag=tags,
        h=float(diam.max()),
        level=level,
        h_target=float(h_target),
        xs=xs,
        ys=ys,
        domain=domain,
    )


def _tag_edges(domain, xs, ys, nx, ny):
    def node(i, j):
        return j * (nx + 1) + i

    edges = []
    mids = []  # (side, midpoint coordinate along the side)
    i = np.arange(nx)
    j = np.arange(ny)
    sides = {
        "bottom": (np.column_stack([node(i, 0), node(i + 1, 0)]), 0.5 * (xs[:-1] + xs[1:])),
        "top": (np.column_stack([node(i, ny), node(i + 1, ny)]), 0.5 * (xs[:-1] + xs[1:])),
        "left": (np.column_stack([node(0, j), node(0, j + 1)]), 0.5 * (ys[:-1] + ys[1:])),
        "right": (np.column_stack([node(nx, j), node(nx, j + 1)]), 0.5 * (ys[:-1] + ys[1:])),
    }
    bounds = {tag: (y0, y1) for tag, y0, y1 in domain.layer_bounds()}
    tag_list = []
    for side, (e, mid) in sides.items():
        t = np.full(len(e), NEUMANN, dtype=np.int64)
        for k, c in enumerate(domain.contacts):
            if c.side != side:
                continue
            if c.layer is None or side in ("bottom", "top"):
                on = np.ones(len(e), dtype=bool)
            else:
                y0, y1 = bounds[SUBDOMAIN_CODES[c.layer]]
                on = (mid > y0) & (mid < y1)
            t[on & (t == NEUMANN)] = k
        edges.append(e)
        tag_list.append(t)
        mids.append(mid)

    if domain.gamma is not None:
        for (ta, _, y1), (tb, _, _) in zip(domain.layer_bounds(), domain.layer_bounds()[1:]):
            if {ta, tb} == set(domain.gamma):
                jg = int(np.argmin(np.abs(ys - y1)))
                edges.append(np.column_stack([node(i, jg), node(i + 1, jg)]))
                tag_list.append(np.full(nx, GAMMA, dtype=np.int64))
    return np.concatenate(edges).astype(np.int64), np.concatenate(tag_list)


def build_device_mesh(geometry: DeviceGeometry, h_target: float) -> TriMesh:
    return build_layered_mesh(geometry.domain(), h_target)


def refine_to(mesh: TriMesh, ratio: float) -> TriMesh:
    """Re-mesh at ``h_target / ratio``; ratio 1 reproduces the same mesh."""
    if not (ratio >= 1.0) or not math.isfinite(ratio):
        raise ValueError(f"refinement ratio must be >= 1, got {ratio}")
    target = mesh.h_target / ratio
    if target <= np.finfo(float).tiny or target < 1e-9 * mesh.domain.min_feature:
        raise RefinementError(f"target size {target} is below machine resolution")
    level = mesh.level + 1 if ratio > 1.0 else mesh.level
    return build_layered_mesh(mesh.domain, target, level=level)


def triangle_quality(vertices, triangles):
    """Per-triangle ``h_K / rho_K`` (diameter over inradius)."""
    p = np.asarray(vertices, dtype=float)[np.asarray(triangles)]
    la = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    lb = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    lc = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    area = 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    perim = la + lb + lc
    if np.any(area <= 1e-14 * perim**2):
        raise MeshError("degenerate triangle (zero area)")
    rho = 2.0 * area / perim
    return np.maximum(np.maximum(la, lb), lc) / rho


def shape_regularity(mesh) -> float:
    """Largest diameter-to-inradius ratio over all triangles."""
    return float(triangle_quality(mesh.vertices, mesh.triangles).max())


def export_mesh(mesh: TriMesh, path):
    """Plain-text dump: vertices, triangles with subdomain, tagged edges."""
    with open(path, "w") as fh:
        fh.write(f"# TriMesh level={mesh.level} h={mesh.h!r} h_target={mesh.h_target!r}\n")
        fh.write(f"# contacts: {' '.join(mesh.contact_names)}\n")
        fh.write(f"vertices {mesh.n_vertices}\n")
        for k, (x, y) in enumerate(mesh.vertices):
            fh.write(f"{k} {x!r} {y!r}\n")
        fh.write(f"triangles {mesh.n_triangles}\n")
        for k, (tri, sd) in enumerate(zip(mesh.triangles, mesh.subdomain)):
            fh.write(f"{k} {tri[0]} {tri[1]} {tri[2]} {SUBDOMAIN_NAMES[int(sd)]}\n")
        fh.write(f"edges {len(mesh.edges)}\n")
        names = mesh.contact_names
        for (a, b), t in zip(mesh.edges, mesh.edge_tag):
            label = names[t] if t >= 0 else ("neumann" if t == NEUMANN else "gamma")
            fh.write(f"{a} {b} {label}\n")


def with_contacts(geometry: DeviceGeometry, contacts) -> DeviceGeometry:
    return replace(geometry, contacts=tuple(contacts))
