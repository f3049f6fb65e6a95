"""
Mesh Module - Line and quadrilateral meshes
===========================================
Interval, rectangle, annular shell and hemisphere-capped cylinder shell meshes.

Every generated mesh is the image of a logical tensor grid (xi, eta) under an
exact geometric map, so refinement only inserts logical breakpoints and new
boundary nodes land on the true curved boundary. Boundary refinement bisects
the whole layer of cells next to a logical side, which keeps the mesh
conforming while grading the layers toward that side.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import MeshError, require_dim

logger = logging.getLogger(__name__)

GRID_NAMES = {
    "hyper_cube": 2,
    "hyper_rectangle": 4,
    "hyper_shell": 2,
    "hemisphere_cylinder_shell": 4,
}

# Reference quad corners, counterclockwise.
Q1_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

# Logical breakpoints of the hull segments: nose right, right side, aft end, left side, nose left.
_HULL_BREAKS = (0.0, 0.25, 0.375, 0.625, 0.75, 1.0)
_HULL_IDS = (0, 2, 3, 4, 1)


# ============== REFERENCE ELEMENT ==============

def shape_values(ref: np.ndarray) -> np.ndarray:
    """Lagrange shape functions at reference points, (n, d) -> (n, 2**d)."""
    ref = np.atleast_2d(ref)
    if ref.shape[1] == 1:
        r = ref[:, 0]
        return np.stack([(1 - r) / 2, (1 + r) / 2], axis=1)
    r, s = ref[:, 0:1], ref[:, 1:2]
    return (1 + r * Q1_CORNERS[:, 0]) * (1 + s * Q1_CORNERS[:, 1]) / 4


def shape_gradients(ref: np.ndarray) -> np.ndarray:
    """Reference gradients, (n, d) -> (n, 2**d, d)."""
    ref = np.atleast_2d(ref)
    if ref.shape[1] == 1:
        return np.tile(np.array([[-0.5], [0.5]]), (ref.shape[0], 1, 1))
    r, s = ref[:, 0:1], ref[:, 1:2]
    dr = Q1_CORNERS[:, 0] * (1 + s * Q1_CORNERS[:, 1]) / 4
    ds = Q1_CORNERS[:, 1] * (1 + r * Q1_CORNERS[:, 0]) / 4
    return np.stack([dr, ds], axis=2)


def rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


# ============== DATA TYPES ==============

@dataclass(frozen=True)
class GridSpec:
    """Named coarse grid with its sizes.

    sizes per name:
        hyper_cube: [a, b]
        hyper_rectangle: [x0, y0, x1, y1]
        hyper_shell: [R_inner, R_outer]
        hemisphere_cylinder_shell: [R_nose, R_outer, L_body, L_outer]
    """
    name: str
    sizes: Tuple[float, ...]
    angular_cells: int = 8

    def __post_init__(self):
        if self.name not in GRID_NAMES:
            raise MeshError(f"Unknown grid name {self.name!r}; expected one of {sorted(GRID_NAMES)}")
        sizes = tuple(float(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) != GRID_NAMES[self.name]:
            raise MeshError(f"{self.name} needs {GRID_NAMES[self.name]} sizes, got {len(sizes)}")
        if not all(math.isfinite(s) for s in sizes):
            raise MeshError(f"{self.name} sizes must be finite: {sizes}")
        if self.name == "hyper_cube" and not sizes[0] < sizes[1]:
            raise MeshError(f"hyper_cube needs a < b, got {sizes}")
        if self.name == "hyper_rectangle" and not (sizes[0] < sizes[2] and sizes[1] < sizes[3]):
            raise MeshError(f"hyper_rectangle needs x0 < x1 and y0 < y1, got {sizes}")
        if self.name == "hyper_shell":
            if not 0 < sizes[0] < sizes[1]:
                raise MeshError(f"hyper_shell needs 0 < R_inner < R_outer, got {sizes}")
            if self.angular_cells < 3:
                raise MeshError(f"hyper_shell needs at least 3 angular cells, got {self.angular_cells}")
        if self.name == "hemisphere_cylinder_shell":
            r_nose, r_outer, l_body, l_outer = sizes
            if min(sizes) <= 0 or not r_nose < r_outer or not l_body < l_outer:
                raise MeshError(
                    f"hemisphere_cylinder_shell needs positive sizes with R_nose < R_outer "
                    f"and L_body < L_outer, got {sizes}"
                )

    @property
    def dim(self) -> int:
        return 1 if self.name == "hyper_cube" else 2


@dataclass(frozen=True)
class Manifold:
    """Geometry attached to a boundary id: flat, circle(center, radius) or cylinder(axis).

    A cylinder in 2D is the pair of straight sides of a capped body parallel to
    `axis`, with `center`/`radius` describing its hemispherical cap.
    """
    kind: str
    center: Tuple[float, float] = (0.0, 0.0)
    radius: float = 0.0
    axis: Tuple[float, float] = (0.0, 1.0)

    def transformed(self, dtheta: float, dr: np.ndarray, pivot: np.ndarray) -> "Manifold":
        rot = rotation(dtheta)
        center = rot @ (np.asarray(self.center) - pivot) + pivot + dr
        axis = rot @ np.asarray(self.axis)
        return replace(self, center=tuple(float(c) for c in center), axis=tuple(float(a) for a in axis))


@dataclass(frozen=True, eq=False)
class _TensorGrid:
    """Logical grid behind a generated mesh plus the rigid placement of its map."""
    spec: GridSpec
    xi: Tuple[float, ...]
    eta: Tuple[float, ...] = ()
    angle: float = 0.0
    offset: Tuple[float, float] = (0.0, 0.0)

    @property
    def periodic(self) -> bool:
        return self.spec.name in ("hyper_shell", "hemisphere_cylinder_shell")


class BoundaryFaces(NamedTuple):
    nodes: np.ndarray    # (F, 2) in 2D, (F, 1) in 1D
    cells: np.ndarray    # (F,)
    normals: np.ndarray  # (F, d), outward unit normals
    measures: np.ndarray  # (F,), face length (1 in 1D)
    centers: np.ndarray  # (F, d)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming mesh of line cells (dim 1) or counterclockwise quads (dim 2)."""
    dim: int
    nodes: np.ndarray
    cells: np.ndarray
    boundary: Dict[int, np.ndarray]
    face_cells: Dict[int, np.ndarray]
    manifolds: Dict[int, Manifold] = field(default_factory=dict)
    grid: Optional[_TensorGrid] = None

    def __post_init__(self):
        ids = sorted(self.boundary)
        if ids != list(range(len(ids))):
            raise MeshError(f"Boundary ids must be contiguous from 0, got {ids}")
        self.nodes.setflags(write=False)
        self.cells.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def boundary_ids(self) -> List[int]:
        return sorted(self.boundary)

    def boundary_nodes(self, boundary_id: Optional[int] = None) -> np.ndarray:
        """Sorted unique node indices on one boundary id, or on the whole boundary."""
        if boundary_id is None:
            return np.unique(np.concatenate([faces.ravel() for faces in self.boundary.values()]))
        if boundary_id not in self.boundary:
            raise MeshError(f"Unknown boundary id {boundary_id}; mesh has {self.boundary_ids}")
        return np.unique(self.boundary[boundary_id])

    @cached_property
    def cell_centers(self) -> np.ndarray:
        return self.nodes[self.cells].mean(axis=1)

    @cached_property
    def cell_measures(self) -> np.ndarray:
        """Cell lengths (1D) or straight-edged polygon areas (2D)."""
        pts = self.nodes[self.cells]
        if self.dim == 1:
            return np.abs(pts[:, 1, 0] - pts[:, 0, 0])
        x, y = pts[..., 0], pts[..., 1]
        return 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)

    @cached_property
    def locator(self) -> "CellLocator":
        return CellLocator(self)


# ============== GEOMETRIC MAPS ==============

def _hull_points(xi: np.ndarray, radius: float, length: float) -> np.ndarray:
    """Closed hull: semicircular nose (center origin, pointing -y) plus a rectangle aft to y=length."""
    xi = np.mod(xi, 1.0)
    b = _HULL_BREAKS
    seg = np.clip(np.searchsorted(b, xi, side="right") - 1, 0, 4)
    s = (xi - np.take(b, seg)) / (np.take(b, seg + 1) - np.take(b, seg))
    phi = np.where(seg == 0, -math.pi / 2 + s * math.pi / 2, math.pi + s * math.pi / 2)
    x = np.select(
        [seg == 1, seg == 2, seg == 3],
        [np.full_like(s, radius), radius - 2 * radius * s, np.full_like(s, -radius)],
        radius * np.cos(phi),
    )
    y = np.select(
        [seg == 1, seg == 2, seg == 3],
        [s * length, np.full_like(s, length), length - s * length],
        radius * np.sin(phi),
    )
    return np.stack([x, y], axis=-1)


def _map_points(grid: _TensorGrid, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    spec = grid.spec
    sz = spec.sizes
    if spec.name == "hyper_cube":
        x = sz[0] + (sz[1] - sz[0]) * xi
        return (x + grid.offset[0])[..., None]
    if spec.name == "hyper_rectangle":
        pts = np.stack([sz[0] + (sz[2] - sz[0]) * xi, sz[1] + (sz[3] - sz[1]) * eta], axis=-1)
    elif spec.name == "hyper_shell":
        radius = sz[0] + (sz[1] - sz[0]) * eta
        phi = 2 * math.pi * xi
        pts = np.stack([radius * np.cos(phi), radius * np.sin(phi)], axis=-1)
    else:
        inner = _hull_points(xi, sz[0], sz[2])
        outer = _hull_points(xi, sz[1], sz[3])
        pts = (1 - eta)[..., None] * inner + eta[..., None] * outer
    return pts @ rotation(grid.angle).T + np.asarray(grid.offset)


def _side_ids(spec: GridSpec, side: str, xi_mid: np.ndarray) -> np.ndarray:
    """Boundary id of each face on a logical side ('xi0', 'xi1', 'eta0', 'eta1')."""
    n = len(xi_mid)
    if spec.name == "hyper_cube":
        return np.full(n, 0 if side == "xi0" else 1)
    if spec.name == "hyper_rectangle":
        return np.full(n, {"xi0": 0, "eta0": 1, "xi1": 2, "eta1": 3}[side])
    if spec.name == "hyper_shell":
        return np.full(n, 0 if side == "eta0" else 1)
    if side == "eta1":
        return np.full(n, 5)
    seg = np.clip(np.searchsorted(_HULL_BREAKS, xi_mid, side="right") - 1, 0, 4)
    return np.take(_HULL_IDS, seg)


def _logical_side(spec: GridSpec, boundary_id: int) -> str:
    sides = {
        "hyper_cube": {0: "xi0", 1: "xi1"},
        "hyper_rectangle": {0: "xi0", 1: "eta0", 2: "xi1", 3: "eta1"},
        "hyper_shell": {0: "eta0", 1: "eta1"},
        "hemisphere_cylinder_shell": {0: "eta0", 1: "eta0", 2: "eta0", 3: "eta0", 4: "eta0", 5: "eta1"},
    }[spec.name]
    if boundary_id not in sides:
        raise MeshError(f"Boundary id {boundary_id} is not a normal-extremal side of {spec.name}")
    return sides[boundary_id]


def _manifolds(spec: GridSpec) -> Dict[int, Manifold]:
    sz = spec.sizes
    if spec.name == "hyper_cube":
        return {0: Manifold("flat"), 1: Manifold("flat")}
    if spec.name == "hyper_rectangle":
        return {i: Manifold("flat") for i in range(4)}
    if spec.name == "hyper_shell":
        return {0: Manifold("circle", radius=sz[0]), 1: Manifold("circle", radius=sz[1])}
    return {
        0: Manifold("circle", radius=sz[0]),
        1: Manifold("circle", radius=sz[0]),
        2: Manifold("cylinder", radius=sz[0]),
        3: Manifold("flat"),
        4: Manifold("cylinder", radius=sz[0]),
        5: Manifold("cylinder", radius=sz[1]),
    }


def _build(grid: _TensorGrid, manifolds: Dict[int, Manifold]) -> Mesh:
    spec = grid.spec
    xi = np.asarray(grid.xi)
    if spec.dim == 1:
        nodes = _map_points(grid, xi, np.zeros_like(xi))
        n = len(xi)
        cells = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1)
        boundary = {0: np.array([[0]]), 1: np.array([[n - 1]])}
        face_cells = {0: np.array([0]), 1: np.array([n - 2])}
        return Mesh(1, nodes, cells, boundary, face_cells, manifolds, grid)

    eta = np.asarray(grid.eta)
    nx, ny = len(xi) - 1, len(eta) - 1
    ncol = nx if grid.periodic else nx + 1
    XI, ETA = np.meshgrid(xi[:ncol], eta)
    nodes = _map_points(grid, XI, ETA).reshape(-1, 2)

    def node(i, j):
        return j * ncol + np.mod(i, ncol)

    I, J = np.meshgrid(np.arange(nx), np.arange(ny))
    I, J = I.ravel(), J.ravel()
    cells = np.stack([node(I, J), node(I + 1, J), node(I + 1, J + 1), node(I, J + 1)], axis=1)
    pts = nodes[cells[0]]
    area = 0.5 * np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1])
    if area < 0:
        cells = cells[:, [0, 3, 2, 1]]

    def cell_index(i, j):
        return j * nx + i

    faces: Dict[int, List[np.ndarray]] = {}
    owners: Dict[int, List[np.ndarray]] = {}

    def add(side, a, b, owner, xi_mid):
        ids = _side_ids(spec, side, xi_mid)
        for bid in np.unique(ids):
            sel = ids == bid
            faces.setdefault(int(bid), []).append(np.stack([a[sel], b[sel]], axis=1))
            owners.setdefault(int(bid), []).append(owner[sel])

    i = np.arange(nx)
    mid = 0.5 * (xi[:-1] + xi[1:])
    add("eta0", node(i, 0), node(i + 1, 0), cell_index(i, 0), mid)
    add("eta1", node(i, ny), node(i + 1, ny), cell_index(i, ny - 1), mid)
    if not grid.periodic:
        j = np.arange(ny)
        add("xi0", node(0, j), node(0, j + 1), cell_index(0, j), np.zeros(ny))
        add("xi1", node(nx, j), node(nx, j + 1), cell_index(nx - 1, j), np.ones(ny))

    boundary = {bid: np.concatenate(parts) for bid, parts in faces.items()}
    face_cells = {bid: np.concatenate(parts) for bid, parts in owners.items()}
    return Mesh(2, nodes, cells, boundary, face_cells, manifolds, grid)


# ============== OPERATIONS ==============

def generate(spec: GridSpec) -> Mesh:
    """Builds the coarse mesh for a grid spec.

    Returns:
        hyper_cube: one line cell, ids 0 = left, 1 = right
        hyper_rectangle: one quad, ids 0..3 = x-min, y-min, x-max, y-max
        hyper_shell: angular_cells x 1 quads, id 0 = inner circle, id 1 = outer circle
        hemisphere_cylinder_shell: 8 x 1 quads, ids 0 = nose right, 1 = nose left,
            2 = right side, 3 = aft end, 4 = left side, 5 = outer hull
    """
    if spec.name == "hyper_shell":
        xi = tuple(np.linspace(0.0, 1.0, spec.angular_cells + 1))
    elif spec.name == "hemisphere_cylinder_shell":
        xi = tuple(np.linspace(0.0, 1.0, 9))
    else:
        xi = (0.0, 1.0)
    eta = () if spec.dim == 1 else (0.0, 1.0)
    mesh = _build(_TensorGrid(spec, xi, eta), _manifolds(spec))
    logger.debug("Generated %s: %d cells, %d nodes", spec.name, mesh.n_cells, mesh.n_nodes)
    return mesh


def _require_grid(m: Mesh) -> _TensorGrid:
    if m.grid is None:
        raise MeshError("Mesh has no generating grid (restored from a checkpoint?); refinement is unavailable")
    return m.grid


def _bisect_all(breaks: Tuple[float, ...]) -> Tuple[float, ...]:
    b = np.asarray(breaks)
    out = np.empty(2 * len(b) - 1)
    out[0::2] = b
    out[1::2] = 0.5 * (b[:-1] + b[1:])
    return tuple(out)


def refine_global(m: Mesh, cycles: int) -> Mesh:
    """Bisects every cell in every logical direction, `cycles` times."""
    if cycles < 0:
        raise MeshError(f"cycles must be >= 0, got {cycles}")
    if cycles == 0:
        return m
    grid = _require_grid(m)
    xi, eta = grid.xi, grid.eta
    for _ in range(cycles):
        xi = _bisect_all(xi)
        if eta:
            eta = _bisect_all(eta)
    mesh = _build(replace(grid, xi=xi, eta=eta), m.manifolds)
    logger.debug("Global refinement x%d: %d cells", cycles, mesh.n_cells)
    return mesh


def refine_boundary(m: Mesh, boundary_id: int, cycles: int) -> Mesh:
    """Bisects, in the boundary-normal direction only, the cell layer touching a boundary.

    After k >= 1 cycles the two layers next to the boundary have equal thickness
    and the thickness doubles moving away from it.

    Raises:
        MeshError: boundary id is not a normal-extremal side of the mesh family
    """
    if cycles < 0:
        raise MeshError(f"cycles must be >= 0, got {cycles}")
    if cycles == 0:
        return m
    grid = _require_grid(m)
    side = _logical_side(grid.spec, boundary_id)
    breaks = list(grid.xi if side.startswith("xi") else grid.eta)
    for _ in range(cycles):
        if side.endswith("0"):
            breaks.insert(1, 0.5 * (breaks[0] + breaks[1]))
        else:
            breaks.insert(len(breaks) - 1, 0.5 * (breaks[-2] + breaks[-1]))
    if side.startswith("xi"):
        grid = replace(grid, xi=tuple(breaks))
    else:
        grid = replace(grid, eta=tuple(breaks))
    mesh = _build(grid, m.manifolds)
    logger.debug("Boundary %d refinement x%d: %d cells", boundary_id, cycles, mesh.n_cells)
    return mesh


def transform_rigid(m: Mesh, dtheta: float, dr: Sequence[float], pivot: Sequence[float] = (0.0, 0.0)) -> Mesh:
    """Maps every node x -> R(dtheta)(x - pivot) + pivot + dr.

    Connectivity, boundary ids and manifold tags are kept; circle centers move
    with the nodes. A 1D mesh only translates (dtheta must be 0).
    """
    if m.dim == 1:
        if dtheta != 0.0:
            raise MeshError("1D meshes cannot rotate (dtheta must be 0)")
        shift = float(np.asarray(dr, dtype=float).ravel()[0])
        nodes = m.nodes + shift
        grid = m.grid and replace(m.grid, offset=(m.grid.offset[0] + shift, 0.0))
        return replace(m, nodes=nodes.copy(), grid=grid)

    dr = np.asarray(dr, dtype=float)
    pivot = np.asarray(pivot, dtype=float)
    rot = rotation(dtheta)
    nodes = (m.nodes - pivot) @ rot.T + pivot + dr
    manifolds = {bid: man.transformed(dtheta, dr, pivot) for bid, man in m.manifolds.items()}
    grid = None
    if m.grid is not None:
        offset = rot @ (np.asarray(m.grid.offset) - pivot) + pivot + dr
        grid = replace(m.grid, angle=m.grid.angle + dtheta, offset=(float(offset[0]), float(offset[1])))
    return replace(m, nodes=nodes, manifolds=manifolds, grid=grid)


def boundary_faces(m: Mesh, boundary_id: int) -> BoundaryFaces:
    """Faces of one boundary id with outward unit normals."""
    if boundary_id not in m.boundary:
        raise MeshError(f"Unknown boundary id {boundary_id}; mesh has {m.boundary_ids}")
    faces = m.boundary[boundary_id]
    owners = m.face_cells[boundary_id]
    cell_centers = m.cell_centers[owners]
    if m.dim == 1:
        centers = m.nodes[faces[:, 0]]
        normals = np.sign(centers - cell_centers)
        return BoundaryFaces(faces, owners, normals, np.ones(len(faces)), centers)
    a, b = m.nodes[faces[:, 0]], m.nodes[faces[:, 1]]
    tangent = b - a
    lengths = np.linalg.norm(tangent, axis=1)
    normals = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1) / lengths[:, None]
    centers = 0.5 * (a + b)
    flip = np.einsum("ij,ij->i", normals, centers - cell_centers) < 0
    normals[flip] *= -1
    return BoundaryFaces(faces, owners, normals, lengths, centers)


def mesh_sizes(m: Mesh) -> Tuple[float, float]:
    """(h_min, h_max) over cell diameters."""
    pts = m.nodes[m.cells]
    k = pts.shape[1]
    diam = np.zeros(m.n_cells)
    for a in range(k):
        for b in range(a + 1, k):
            diam = np.maximum(diam, np.linalg.norm(pts[:, a] - pts[:, b], axis=1))
    return float(diam.min()), float(diam.max())


# ============== POINT LOCATION ==============

class CellLocator:
    """Bucket grid over cell bounding boxes plus Newton inversion of the cell map."""

    TOLERANCE = 1e-12

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        corners = mesh.nodes[mesh.cells]
        lo, hi = corners.min(axis=1), corners.max(axis=1)
        pad = 1e-10 * max(1.0, float(np.max(hi - lo)))
        self.lo, self.hi = lo - pad, hi + pad
        self.origin = self.lo.min(axis=0)
        extent = np.maximum(self.hi.max(axis=0) - self.origin, 1e-300)
        per_axis = max(1, int(round(mesh.n_cells ** (1.0 / mesh.dim))))
        self.shape = np.full(mesh.dim, per_axis)
        self.width = extent / per_axis

        first = self._bucket_coords(self.lo)
        last = self._bucket_coords(self.hi)
        buckets: List[List[int]] = [[] for _ in range(int(np.prod(self.shape)))]
        for c in range(mesh.n_cells):
            ranges = [range(first[c, k], last[c, k] + 1) for k in range(mesh.dim)]
            if mesh.dim == 1:
                keys = list(ranges[0])
            else:
                keys = [i * self.shape[1] + j for i in ranges[0] for j in ranges[1]]
            for key in keys:
                buckets[key].append(c)
        counts = np.array([len(b) for b in buckets])
        self.pointer = np.concatenate([[0], np.cumsum(counts)])
        self.cells = np.array([c for b in buckets for c in b], dtype=int)

    def _bucket_coords(self, pts: np.ndarray) -> np.ndarray:
        idx = np.floor((pts - self.origin) / self.width).astype(int)
        return np.clip(idx, 0, self.shape - 1)

    def _bucket_key(self, pts: np.ndarray) -> np.ndarray:
        idx = self._bucket_coords(pts)
        if self.mesh.dim == 1:
            return idx[:, 0]
        return idx[:, 0] * self.shape[1] + idx[:, 1]

    def locate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Finds the containing cell and reference coordinates of each point.

        Returns:
            (cells, ref) with cells = -1 for points outside the mesh; ties go to
            the lowest cell index.
        """
        mesh = self.mesh
        points = np.asarray(points, dtype=float).reshape(-1, mesh.dim)
        n = points.shape[0]
        found = np.full(n, -1)
        ref = np.zeros((n, mesh.dim))
        if n == 0:
            return found, ref

        keys = self._bucket_key(points)
        starts, counts = self.pointer[keys], self.pointer[keys + 1] - self.pointer[keys]
        owner = np.repeat(np.arange(n), counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        cand = self.cells[np.repeat(starts, counts) + offsets]
        p = points[owner]
        inside_box = np.all((p >= self.lo[cand]) & (p <= self.hi[cand]), axis=1)
        owner, cand, p = owner[inside_box], cand[inside_box], p[inside_box]
        if owner.size == 0:
            return found, ref

        corners = mesh.nodes[mesh.cells[cand]]
        if mesh.dim == 1:
            x0, x1 = corners[:, 0, 0], corners[:, 1, 0]
            r = (2 * (p[:, 0] - x0) / (x1 - x0) - 1)[:, None]
            ok = np.all(np.abs(r) <= 1 + 1e-10, axis=1)
        else:
            r, ok = self._invert_bilinear(corners, p)

        order = np.lexsort((cand[ok], owner[ok]))
        hit_owner, hit_cand, hit_ref = owner[ok][order], cand[ok][order], r[ok][order]
        first, index = np.unique(hit_owner, return_index=True)
        found[first] = hit_cand[index]
        ref[first] = np.clip(hit_ref[index], -1.0, 1.0)
        return found, ref

    def _invert_bilinear(self, corners: np.ndarray, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        r = np.zeros((p.shape[0], 2))
        scale = np.max(np.abs(corners.max(axis=1) - corners.min(axis=1)), axis=1)
        for _ in range(30):
            phi = shape_values(r)
            dphi = shape_gradients(r)
            x = np.einsum("na,nai->ni", phi, corners)
            jac = np.einsum("nai,naj->nij", corners, dphi)
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            det = np.where(np.abs(det) < 1e-300, 1e-300, det)
            res = p - x
            step = np.stack([
                (jac[:, 1, 1] * res[:, 0] - jac[:, 0, 1] * res[:, 1]) / det,
                (-jac[:, 1, 0] * res[:, 0] + jac[:, 0, 0] * res[:, 1]) / det,
            ], axis=1)
            step = np.clip(step, -4.0, 4.0)
            r = np.clip(r + step, -3.0, 3.0)
            if np.all(np.abs(step) < self.TOLERANCE):
                break
        x = np.einsum("na,nai->ni", shape_values(r), corners)
        close = np.linalg.norm(x - p, axis=1) <= 1e-10 * np.maximum(scale, 1.0)
        ok = close & np.all(np.abs(r) <= 1 + 1e-10, axis=1)
        return r, ok
