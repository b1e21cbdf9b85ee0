"""Structured hexahedral grids, region tagging and boundary bookkeeping.

Nodes are numbered ``i + (nx+1)*(j + (ny+1)*k)`` and elements
``ex + nx*(ey + ny*ez)``.  The eight local nodes of an element follow the
usual counter-clockwise ordering, bottom face first::

        7-------6
       /|      /|
      4-------5 |      z
      | 3-----|-2      |  y
      |/      |/       | /
      0-------1        |/___ x
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# element region labels
DESIGN = 0
HEAT = 1
FLUID = 2
REGION_NAMES = {DESIGN: "design", HEAT: "heat-source", FLUID: "fluid"}

# node boundary labels, ordered by precedence when faces meet at an edge
INTERIOR = 0
DIRICHLET = 1
INSULATED = 2
SYMMETRY = 3
BOUNDARY_NAMES = {INTERIOR: "interior", DIRICHLET: "dirichlet",
                  INSULATED: "insulated", SYMMETRY: "symmetry"}
_BOUNDARY_CODES = {v: k for k, v in BOUNDARY_NAMES.items()}

FACES = ("x-", "x+", "y-", "y+", "z-", "z+")

# local node offsets (i, j, k) of the reference hexahedron
LOCAL_OFFSETS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
])

# local nodes on each element face, outward-normal counter-clockwise
_LOCAL_FACE_NODES = {
    "x-": (0, 4, 7, 3), "x+": (1, 2, 6, 5),
    "y-": (0, 1, 5, 4), "y+": (3, 7, 6, 2),
    "z-": (0, 3, 2, 1), "z+": (4, 5, 6, 7),
}


class MisalignmentError(ValueError):
    """A box region does not coincide with element faces."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``lo <= x <= hi``."""
    lo: tuple
    hi: tuple

    def volume(self):
        return float(np.prod(np.subtract(self.hi, self.lo)))


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder or annulus ``r_inner <= r < r_outer``, ``z0 <= z <= z1``."""
    center: tuple
    r_inner: float
    r_outer: float
    z_range: tuple

    def volume(self):
        z0, z1 = self.z_range
        return float(np.pi * (self.r_outer**2 - self.r_inner**2) * (z1 - z0))

    def contains(self, xyz):
        xyz = np.atleast_2d(xyz)
        r = np.hypot(xyz[:, 0] - self.center[0], xyz[:, 1] - self.center[1])
        z0, z1 = self.z_range
        return ((r >= self.r_inner) & (r < self.r_outer)
                & (xyz[:, 2] >= z0) & (xyz[:, 2] <= z1))


@dataclass(frozen=True, eq=False)
class StructuredMesh:
    nx: int
    ny: int
    nz: int
    lx: float
    ly: float
    lz: float
    elements: np.ndarray = field(repr=False)  # (n_elements, 8) node indices

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def node_shape(self):
        return (self.nx + 1, self.ny + 1, self.nz + 1)

    @property
    def dx(self):
        return self.lx / self.nx

    @property
    def dy(self):
        return self.ly / self.ny

    @property
    def dz(self):
        return self.lz / self.nz

    @property
    def spacing(self):
        return np.array([self.dx, self.dy, self.dz])

    @property
    def h_e(self):
        return float(np.sqrt(self.dx**2 + self.dy**2 + self.dz**2))

    @property
    def n_nodes(self):
        return (self.nx + 1) * (self.ny + 1) * (self.nz + 1)

    @property
    def n_elements(self):
        return self.nx * self.ny * self.nz

    @property
    def element_volume(self):
        return self.dx * self.dy * self.dz

    def element_volumes(self):
        return np.full(self.n_elements, self.element_volume)

    def node_index(self, i, j, k):
        return i + (self.nx + 1) * (j + (self.ny + 1) * k)

    def element_index(self, ex, ey, ez):
        return ex + self.nx * (ey + self.ny * ez)

    def node_coords(self):
        i, j, k = np.unravel_index(np.arange(self.n_nodes), self.node_shape, order="F")
        return np.column_stack([i * self.dx, j * self.dy, k * self.dz])

    def element_ijk(self):
        return np.unravel_index(np.arange(self.n_elements), self.shape, order="F")

    def centroids(self):
        ex, ey, ez = self.element_ijk()
        return np.column_stack([(ex + 0.5) * self.dx, (ey + 0.5) * self.dy,
                                (ez + 0.5) * self.dz])

    def element_coords(self, e):
        """Corner coordinates (8, 3) of element ``e``."""
        return self.node_coords()[self.elements[e]]

    def to_grid(self, values):
        """Reshape per-element or per-node values to an (x, y, z) array."""
        values = np.asarray(values)
        if values.shape[0] == self.n_elements:
            return values.reshape(self.shape, order="F")
        if values.shape[0] == self.n_nodes:
            return values.reshape(self.node_shape, order="F")
        raise ValueError(f"cannot reshape {values.shape[0]} values onto mesh {self.shape}")

    def from_grid(self, grid):
        return np.asarray(grid).reshape(-1, order="F")


def build_grid(nx, ny, nz, lx, ly, lz):
    """Build a uniform ``nx x ny x nz`` grid of trilinear hexahedra."""
    for name, n in (("nx", nx), ("ny", ny), ("nz", nz)):
        if int(n) != n or n < 1:
            raise ValueError(f"{name} must be a positive integer, got {n!r}")
    for name, length in (("lx", lx), ("ly", ly), ("lz", lz)):
        if not length > 0:
            raise ValueError(f"{name} must be positive, got {length!r}")
    nx, ny, nz = int(nx), int(ny), int(nz)
    ex, ey, ez = np.unravel_index(np.arange(nx * ny * nz), (nx, ny, nz), order="F")
    off = LOCAL_OFFSETS
    i = ex[:, None] + off[None, :, 0]
    j = ey[:, None] + off[None, :, 1]
    k = ez[:, None] + off[None, :, 2]
    elements = i + (nx + 1) * (j + (ny + 1) * k)
    return StructuredMesh(nx, ny, nz, float(lx), float(ly), float(lz), elements)


@dataclass(frozen=True, eq=False)
class DofMap:
    """Blocked numbering: pressure dofs first, then temperature dofs."""
    n_nodes: int

    @property
    def n_dofs(self):
        return 2 * self.n_nodes

    def p(self, nodes):
        return np.asarray(nodes)

    def t(self, nodes):
        return np.asarray(nodes) + self.n_nodes

    def element_dofs(self, mesh):
        """(n_elements, 16) global dofs, element pressure dofs then temperature dofs."""
        return np.hstack([mesh.elements, mesh.elements + self.n_nodes])


def dof_map(mesh):
    return DofMap(mesh.n_nodes)


@dataclass(frozen=True, eq=False)
class RegionTags:
    region: np.ndarray          # per-element label
    node_label: np.ndarray      # per-node boundary label
    face_label: dict            # box side -> label name
    pressure_pins: np.ndarray   # node indices with P = 0

    @property
    def design(self):
        return self.region == DESIGN

    @property
    def heat(self):
        return self.region == HEAT

    @property
    def fluid(self):
        return self.region == FLUID

    @property
    def n_design(self):
        return int(np.count_nonzero(self.design))

    def dirichlet_t_nodes(self):
        return np.flatnonzero(self.node_label == DIRICHLET)


def _snap_axis(values, h, n, axis, snap):
    """Map physical coordinates to node-plane indices along one axis."""
    idx = np.asarray(values, dtype=float) / h
    near = np.rint(idx)
    if not snap and np.any(np.abs(idx - near) > 1e-6):
        raise MisalignmentError(
            f"region boundary {values} not aligned with element faces on the "
            f"{axis}-axis (spacing {h:g})")
    return np.clip(near.astype(int), 0, n)


def _box_mask(mesh, box, snap):
    lo, hi = [], []
    for a, (axis, h, n) in enumerate(zip("xyz", mesh.spacing, mesh.shape)):
        i0, i1 = _snap_axis([box.lo[a], box.hi[a]], h, n, axis, snap)
        if snap and box.hi[a] > box.lo[a] and i1 == i0:
            # never snap a non-empty box away entirely
            if i1 < n:
                i1 += 1
            else:
                i0 -= 1
        lo.append(i0)
        hi.append(i1)
    ex, ey, ez = mesh.element_ijk()
    return ((ex >= lo[0]) & (ex < hi[0]) & (ey >= lo[1]) & (ey < hi[1])
            & (ez >= lo[2]) & (ez < hi[2]))


def region_mask(mesh, region, snap=False):
    """Boolean element mask of a Box (face-aligned) or Cylinder (centroid test)."""
    if region is None:
        return np.zeros(mesh.n_elements, dtype=bool)
    if isinstance(region, Box):
        return _box_mask(mesh, region, snap)
    if isinstance(region, Cylinder):
        return region.contains(mesh.centroids())
    raise TypeError(f"unsupported region type {type(region).__name__}")


def _face_nodes(mesh, face):
    """Node indices lying on one side of the outer box."""
    i, j, k = np.unravel_index(np.arange(mesh.n_nodes), mesh.node_shape, order="F")
    coord = {"x": i, "y": j, "z": k}[face[0]]
    n = {"x": mesh.nx, "y": mesh.ny, "z": mesh.nz}[face[0]]
    return np.flatnonzero(coord == (0 if face[1] == "-" else n))


def tag_regions(mesh, spec):
    """Label elements (design / heat source / fluid) and boundary nodes.

    ``spec`` needs ``design``, ``heat_source``, ``boundary`` (side -> label),
    ``pressure_pins`` (points snapped to the nearest node) and ``snap_regions``.
    """
    snap = getattr(spec, "snap_regions", False)
    region = np.full(mesh.n_elements, FLUID, dtype=np.int8)
    region[region_mask(mesh, spec.design, snap)] = DESIGN
    region[region_mask(mesh, spec.heat_source, snap)] = HEAT

    node_label = np.full(mesh.n_nodes, INTERIOR, dtype=np.int8)
    face_label = {}
    for face in FACES:
        name = spec.boundary.get(face, "insulated")
        if name not in _BOUNDARY_CODES or name == "interior":
            raise ValueError(f"unknown boundary label {name!r} on side {face}")
        face_label[face] = name
    # lowest precedence first so Dirichlet wins on shared edges
    for code in (SYMMETRY, INSULATED, DIRICHLET):
        for face, name in face_label.items():
            if _BOUNDARY_CODES[name] == code:
                node_label[_face_nodes(mesh, face)] = code

    pins = []
    for point in spec.pressure_pins:
        ijk = np.rint(np.asarray(point, dtype=float) / mesh.spacing).astype(int)
        ijk = np.clip(ijk, 0, mesh.shape)
        pins.append(mesh.node_index(*ijk))
    pins = np.unique(np.asarray(pins, dtype=np.int64))
    if pins.size == 0:
        raise ValueError("at least one pressure pin node is required")
    return RegionTags(region, node_label, face_label, pins)


def boundary_faces(mesh, tags):
    """Exterior faces grouped by boundary label.

    Returns ``{label: (elements, face_nodes)}`` where ``face_nodes`` is an
    ``(n_faces, 4)`` array of node indices.
    """
    ex, ey, ez = mesh.element_ijk()
    out = {}
    for face in FACES:
        axis = "xyz".index(face[0])
        coord = (ex, ey, ez)[axis]
        n = mesh.shape[axis]
        elems = np.flatnonzero(coord == (0 if face[1] == "-" else n - 1))
        nodes = mesh.elements[elems][:, list(_LOCAL_FACE_NODES[face])]
        label = tags.face_label[face]
        if label in out:
            e0, n0 = out[label]
            out[label] = (np.concatenate([e0, elems]), np.vstack([n0, nodes]))
        else:
            out[label] = (elems, nodes)
    return out
