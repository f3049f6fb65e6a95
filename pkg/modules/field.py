"""
Field Module - Finite element fields and their files
====================================================
Point evaluation (with nearest-boundary-vertex extrapolation outside the
mesh), restart checkpoints, VTK output and phase-change isolines.
"""

import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, TextIO, Tuple, Union

import faiss
import numpy as np
import pandas as pd

from .errors import CheckpointError, FieldError, PointNotFoundError, require_dim
from .mesh import Manifold, Mesh, shape_values

logger = logging.getLogger(__name__)

CHECKPOINT_HEADER = "meltsim-checkpoint v1"
VTK_CELL_TYPES = {1: 3, 2: 9}

PathLike = Union[str, Path]


# ============== OUTPUT FILES ==============

@contextmanager
def open_output(path: PathLike) -> Iterator[TextIO]:
    """Text file writer that replaces `path` only when the block completes.

    Usage:
        with open_output("out/checkpoint.txt") as fh:
            fh.write("...")
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    try:
        with open(partial, "w", encoding="utf-8") as fh:
            yield fh
        os.replace(partial, path)
    finally:
        if partial.exists():
            partial.unlink()


# ============== FIELD ==============

class _BoundaryVertexIndex:
    """Exact nearest boundary vertex (Euclidean, lowest node index on ties).

    faiss proposes candidates in single precision; the final choice is made
    in double precision.
    """

    CANDIDATES = 16

    def __init__(self, mesh: Mesh):
        self.nodes = mesh.boundary_nodes()
        self.coords = mesh.nodes[self.nodes]
        self.index = faiss.IndexFlatL2(mesh.dim)
        self.index.add(np.ascontiguousarray(self.coords, dtype=np.float32))

    def nearest(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        query = np.ascontiguousarray(points, dtype=np.float32)
        k = min(self.CANDIDATES, len(self.nodes))
        _, found = self.index.search(query, k)
        out = np.empty(len(points), dtype=int)
        for i, candidates in enumerate(found):
            candidates = candidates[candidates >= 0]
            dist = np.sum((self.coords[candidates] - points[i]) ** 2, axis=1)
            best = dist.min()
            slack = 1e-6 * max(best, 1e-30) + 1e-12
            if k < len(self.nodes) and dist.max() <= best + slack:
                candidates = self._within(query[i:i + 1], best)
                dist = np.sum((self.coords[candidates] - points[i]) ** 2, axis=1)
                best = dist.min()
            ties = candidates[dist == best]
            out[i] = self.nodes[ties].min()
        return out

    def _within(self, query: np.ndarray, squared: float) -> np.ndarray:
        radius = float(squared) * (1 + 1e-4) + 1e-10
        _, _, labels = self.index.range_search(query, radius)
        return labels.astype(int)


@dataclass(frozen=True, eq=False)
class FeField:
    """Nodal values of a continuous P1/Q1 field on a mesh."""
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.mesh.n_nodes,):
            raise FieldError(f"Field has {values.shape} values for a mesh of {self.mesh.n_nodes} nodes")
        if not np.all(np.isfinite(values)):
            raise FieldError("Field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def family(self) -> str:
        return "P1" if self.mesh.dim == 1 else "Q1"

    @cached_property
    def _boundary_index(self) -> _BoundaryVertexIndex:
        return _BoundaryVertexIndex(self.mesh)

    def _interpolate(self, cells: np.ndarray, ref: np.ndarray) -> np.ndarray:
        phi = shape_values(ref)
        return np.einsum("na,na->n", phi, self.values[self.mesh.cells[cells]])

    def eval_points(self, points: np.ndarray) -> np.ndarray:
        """Values at an (n, d) array of points inside the mesh.

        Raises:
            PointNotFoundError: some point lies outside the mesh
        """
        points = np.asarray(points, dtype=float).reshape(-1, self.mesh.dim)
        cells, ref = self.mesh.locator.locate(points)
        if np.any(cells < 0):
            k = int(np.argmax(cells < 0))
            raise PointNotFoundError(f"Point {points[k].tolist()} is outside the mesh")
        return self._interpolate(cells, ref)

    def eval(self, x: Sequence[float]) -> float:
        return float(self.eval_points(np.asarray(x, dtype=float).reshape(1, -1))[0])

    def eval_extrapolated(self, points: np.ndarray) -> np.ndarray:
        """Like eval_points, but points outside the mesh take the value of the nearest boundary vertex."""
        points = np.asarray(points, dtype=float).reshape(-1, self.mesh.dim)
        cells, ref = self.mesh.locator.locate(points)
        out = np.empty(len(points))
        inside = cells >= 0
        if inside.any():
            out[inside] = self._interpolate(cells[inside], ref[inside])
        if not inside.all():
            out[~inside] = self.values[self._boundary_index.nearest(points[~inside])]
        return out

    def sampler(self):
        """Callable points -> temperatures, total over the plane."""
        return self.eval_extrapolated


def init_from_field(mesh: Mesh, old: FeField) -> FeField:
    """Interpolates (or extrapolates) an old field onto the nodes of a new mesh."""
    return FeField(mesh, old.eval_extrapolated(mesh.nodes))


# ============== CHECKPOINTS ==============

def _hex_row(values: Sequence[float]) -> str:
    return " ".join(float(v).hex() for v in values)


def write_checkpoint(f: FeField, rigid, t: float, path: PathLike,
                     virtual: Optional[Sequence[float]] = None) -> Path:
    """Writes everything needed to resume a trajectory.

    Floats are stored as hexadecimal so a read gives back identical bits.
    RIGID_STATE holds theta, r0, r1, then the rate and the global pose when present.
    """
    mesh = f.mesh
    state = [rigid.theta, rigid.r0, rigid.r1]
    if rigid.rate is not None or virtual is not None:
        state += list(rigid.rate if rigid.rate is not None else (0.0, 0.0, 0.0))
    if virtual is not None:
        state += list(virtual)
    faces = [(bid, int(c), row) for bid in mesh.boundary_ids
             for c, row in zip(mesh.face_cells[bid], mesh.boundary[bid])]
    with open_output(path) as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        fh.write(f"NODES {mesh.n_nodes} {mesh.dim}\n")
        fh.writelines(_hex_row(p) + "\n" for p in mesh.nodes)
        fh.write(f"CELLS {mesh.n_cells} {mesh.cells.shape[1]}\n")
        fh.writelines(" ".join(str(int(n)) for n in c) + "\n" for c in mesh.cells)
        fh.write(f"BOUNDARY {len(faces)}\n")
        fh.writelines(f"{bid} {c} " + " ".join(str(int(n)) for n in row) + "\n" for bid, c, row in faces)
        fh.write(f"MANIFOLD {len(mesh.manifolds)}\n")
        for bid, man in sorted(mesh.manifolds.items()):
            fh.write(f"{bid} {man.kind} {_hex_row([*man.center, man.radius, *man.axis])}\n")
        fh.write(f"DOFS {mesh.n_nodes}\n")
        fh.writelines(float(v).hex() + "\n" for v in f.values)
        fh.write(f"RIGID_STATE {len(state)}\n")
        fh.writelines(float(v).hex() + "\n" for v in state)
        fh.write(f"TIME 1\n{float(t).hex()}\n")
    logger.debug("Checkpoint written to %s (t=%g)", path, t)
    return Path(path)


class _SectionReader:
    def __init__(self, lines: List[str]):
        self.lines = lines
        self.pos = 0

    def next_line(self) -> str:
        if self.pos >= len(self.lines):
            raise CheckpointError("Checkpoint is truncated")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def section(self, name: str) -> Tuple[List[str], List[List[str]]]:
        head = self.next_line().split()
        if not head or head[0] != name:
            raise CheckpointError(f"Expected section {name} at line {self.pos}, got {' '.join(head)!r}")
        try:
            count = int(head[1])
        except (IndexError, ValueError):
            raise CheckpointError(f"Section {name} at line {self.pos} has no length")
        return head[1:], [self.next_line().split() for _ in range(count)]


def _floats(row: List[str], where: str) -> List[float]:
    try:
        return [float.fromhex(v) for v in row]
    except ValueError:
        raise CheckpointError(f"Malformed number in {where}: {' '.join(row)!r}")


def _ints(row: List[str], where: str) -> List[int]:
    try:
        return [int(v) for v in row]
    except ValueError:
        raise CheckpointError(f"Malformed index in {where}: {' '.join(row)!r}")


def _parse_checkpoint(lines: List[str]):
    reader = _SectionReader(lines)
    head, rows = reader.section("NODES")
    dim = _ints(head[1:2], "NODES")[0] if len(head) > 1 else 0
    if dim not in (1, 2):
        raise CheckpointError(f"Unsupported dimension {dim}")
    nodes = np.array([_floats(r, "NODES") for r in rows], dtype=float).reshape(-1, dim)
    _, rows = reader.section("CELLS")
    cells = np.array([_ints(r, "CELLS") for r in rows], dtype=int)
    _, rows = reader.section("BOUNDARY")
    boundary: Dict[int, List[List[int]]] = {}
    owners: Dict[int, List[int]] = {}
    for r in rows:
        bid, cell, *face = _ints(r, "BOUNDARY")
        boundary.setdefault(bid, []).append(face)
        owners.setdefault(bid, []).append(cell)
    _, rows = reader.section("MANIFOLD")
    manifolds = {}
    for r in rows:
        if len(r) != 7:
            raise CheckpointError(f"Malformed MANIFOLD row: {' '.join(r)!r}")
        cx, cy, radius, ax, ay = _floats(r[2:], "MANIFOLD")
        manifolds[_ints(r[:1], "MANIFOLD")[0]] = Manifold(r[1], (cx, cy), radius, (ax, ay))
    _, rows = reader.section("DOFS")
    values = np.array([_floats(r, "DOFS")[0] for r in rows])
    _, rows = reader.section("RIGID_STATE")
    state = [_floats(r, "RIGID_STATE")[0] for r in rows]
    _, rows = reader.section("TIME")
    times = [_floats(r, "TIME")[0] for r in rows]
    if len(state) not in (3, 6, 9):
        raise CheckpointError(f"RIGID_STATE needs 3, 6 or 9 values, got {len(state)}")
    if len(times) != 1:
        raise CheckpointError(f"TIME needs 1 value, got {len(times)}")
    mesh = Mesh(dim, nodes, cells,
                {b: np.array(v, dtype=int) for b, v in boundary.items()},
                {b: np.array(v, dtype=int) for b, v in owners.items()},
                manifolds)
    return FeField(mesh, values), state, times[0]


def read_checkpoint(path: PathLike, with_virtual: bool = False):
    """Restores (field, rigid state, time), plus the global pose when with_virtual.

    The restored mesh has no generating grid: it can be transformed and
    evaluated but not refined.

    Raises:
        CheckpointError: wrong header or malformed/truncated content
    """
    from .rbd import RigidState

    lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        found = lines[0].strip() if lines else ""
        raise CheckpointError(f"Unsupported checkpoint version: {found!r} (expected {CHECKPOINT_HEADER!r})")
    try:
        field, state, t = _parse_checkpoint(lines[1:])
    except CheckpointError:
        raise
    except (ValueError, IndexError, FieldError) as e:
        raise CheckpointError(f"Malformed checkpoint {path}: {e}")
    rigid = RigidState(*state[:3], rate=tuple(state[3:6]) if len(state) >= 6 else None)
    logger.debug("Checkpoint read from %s (t=%g)", path, t)
    if with_virtual:
        virtual = tuple(state[6:9]) if len(state) == 9 else None
        return field, rigid, t, virtual
    return field, rigid, t


# ============== VTK ==============

def export_vtk(f: FeField, path: PathLike, t: float = 0.0, deterministic: bool = False) -> Path:
    """Legacy ASCII VTK unstructured grid with the point scalar "u" and a TIME field."""
    mesh = f.mesh
    title = f"meltsim field u at t={t!r}"
    if not deterministic:
        title += f" written {datetime.now().isoformat(timespec='seconds')}"
    points = np.zeros((mesh.n_nodes, 3))
    points[:, :mesh.dim] = mesh.nodes
    k = mesh.cells.shape[1]
    with open_output(path) as fh:
        fh.write("# vtk DataFile Version 2.0\n")
        fh.write(title + "\n")
        fh.write("ASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write("FIELD FieldData 1\n")
        fh.write(f"TIME 1 1 double\n{t:.17g}\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        fh.writelines("%.17g %.17g %.17g\n" % tuple(p) for p in points)
        fh.write(f"CELLS {mesh.n_cells} {mesh.n_cells * (k + 1)}\n")
        fh.writelines(f"{k} " + " ".join(str(int(n)) for n in c) + "\n" for c in mesh.cells)
        fh.write(f"CELL_TYPES {mesh.n_cells}\n")
        fh.writelines(f"{VTK_CELL_TYPES[mesh.dim]}\n" for _ in range(mesh.n_cells))
        fh.write(f"POINT_DATA {mesh.n_nodes}\n")
        fh.write("SCALARS u double 1\n")
        fh.write("LOOKUP_TABLE default\n")
        fh.writelines("%.17g\n" % v for v in f.values)
    return Path(path)


def read_vtk(path: PathLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    """Parses a file written by export_vtk.

    Returns:
        (points (n, 3), cells (m, k), cell types (m,), values (n,), time)
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# vtk DataFile"):
        raise FieldError(f"{path} is not a legacy VTK file")
    tokens = " ".join(lines[2:]).split()
    pos = 0

    def take(n: int) -> List[str]:
        nonlocal pos
        if pos + n > len(tokens):
            raise FieldError(f"{path} is truncated")
        chunk = tokens[pos:pos + n]
        pos += n
        return chunk

    t = 0.0
    points = cells = types = values = None
    while pos < len(tokens):
        word = take(1)[0]
        if word == "FIELD":
            _, arrays = take(2)
            for _ in range(int(arrays)):
                name, comps, tuples, _ = take(4)
                data = [float(v) for v in take(int(comps) * int(tuples))]
                if name == "TIME":
                    t = data[0]
        elif word == "POINTS":
            n, _ = take(2)
            points = np.array(take(3 * int(n)), dtype=float).reshape(-1, 3)
        elif word == "CELLS":
            m, size = take(2)
            flat = np.array(take(int(size)), dtype=int)
            k = flat[0]
            cells = flat.reshape(int(m), k + 1)[:, 1:]
        elif word == "CELL_TYPES":
            m = int(take(1)[0])
            types = np.array(take(m), dtype=int)
        elif word == "POINT_DATA":
            take(1)
        elif word == "SCALARS":
            take(3)
            if tokens[pos] == "LOOKUP_TABLE":
                take(2)
            values = np.array(take(len(points)), dtype=float)
    if points is None or cells is None or values is None:
        raise FieldError(f"{path} is missing POINTS, CELLS or POINT_DATA")
    return points, cells, types, values, t


# ============== ISOLINES ==============

_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0))


def _crossing(f: FeField, a: int, b: int, level: float):
    """Key and location of the level crossing on the mesh edge (a, b)."""
    va, vb = f.values[a], f.values[b]
    if va == level:
        return ("node", a), f.mesh.nodes[a]
    if vb == level:
        return ("node", b), f.mesh.nodes[b]
    s = (level - va) / (vb - va)
    key = ("edge", min(a, b), max(a, b))
    return key, f.mesh.nodes[a] + s * (f.mesh.nodes[b] - f.mesh.nodes[a])


def _cell_segments(corner_values: np.ndarray, level: float) -> List[Tuple[int, int]]:
    """Pairs of crossed local edges (marching squares; saddles split by the cell-center value)."""
    above = corner_values >= level
    crossed = [e for e, (a, b) in enumerate(_EDGES) if above[a] != above[b]]
    if len(crossed) == 2:
        return [(crossed[0], crossed[1])]
    if len(crossed) == 4:
        center_above = corner_values.mean() >= level
        if center_above == above[0]:
            return [(0, 1), (2, 3)]
        return [(3, 0), (1, 2)]
    return []


def _chain(segments: List[Tuple[tuple, tuple]], points: Dict[tuple, np.ndarray]) -> List[np.ndarray]:
    neighbours: Dict[tuple, List[tuple]] = {}
    for a, b in segments:
        if a == b:
            continue
        neighbours.setdefault(a, []).append(b)
        neighbours.setdefault(b, []).append(a)
    unused = {k: list(v) for k, v in neighbours.items()}

    def walk(start):
        path = [start]
        current = start
        while unused.get(current):
            nxt = unused[current].pop(0)
            unused[nxt].remove(current)
            path.append(nxt)
            current = nxt
            if current == start:
                break
        return path

    polylines = []
    for key in sorted(neighbours, key=lambda k: (len(neighbours[k]) % 2 == 0, k)):
        while unused.get(key):
            polylines.append(np.array([points[k] for k in walk(key)]))
    return polylines


@require_dim(2, argument="f")
def extract_isoline(f: FeField, level: float) -> List[np.ndarray]:
    """Level set of a 2D field as polylines ((n, 2) arrays; closed ones repeat their first point)."""
    mesh = f.mesh
    values = f.values
    points: Dict[tuple, np.ndarray] = {}
    segments = []
    for cell in mesh.cells:
        corner_values = values[cell]
        for e0, e1 in _cell_segments(corner_values, level):
            keys = []
            for e in (e0, e1):
                a, b = _EDGES[e]
                key, x = _crossing(f, int(cell[a]), int(cell[b]), level)
                points[key] = x
                keys.append(key)
            segments.append(tuple(keys))
    polylines = _chain(segments, points)
    logger.debug("Isoline %g: %d polylines from %d segments", level, len(polylines), len(segments))
    return polylines


def write_isolines(polylines: Sequence[np.ndarray], path: PathLike) -> Path:
    """CSV with columns polyline, x, y."""
    frames = [pd.DataFrame({"polyline": i, "x": p[:, 0], "y": p[:, 1]}) for i, p in enumerate(polylines)]
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["polyline", "x", "y"])
    with open_output(path) as fh:
        table.to_csv(fh, index=False, float_format="%.17g")
    return Path(path)
