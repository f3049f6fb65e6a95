"""
Assembly Module - Finite element matrices and vectors
=====================================================
Continuous piecewise (bi)linear elements on line and quad meshes:

    M_AB = (phi_A, phi_B)
    C_AB = (phi_A, v . grad phi_B)
    K_AB = (grad phi_A, alpha grad phi_B)
    f_A  = (phi_A, s) + (phi_A, h)_{Gamma_N}

Dirichlet data are imposed by lifting: the prescribed values are moved to the
right-hand side and the Dirichlet rows and columns are eliminated.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, MeshError
from .mesh import Mesh, boundary_faces, shape_gradients, shape_values

logger = logging.getLogger(__name__)

SpaceFunction = Callable[[np.ndarray, float], np.ndarray]


def gauss_legendre(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Points and weights on [-1, 1]."""
    return np.polynomial.legendre.leggauss(order)


# ============== QUADRATURE ==============

@dataclass(frozen=True, eq=False)
class CellQuadrature:
    """Mapped quadrature data for all cells.

    Shapes: points (M, Q, d), phi (Q, k), grads (M, Q, k, d), jxw (M, Q)
    """
    points: np.ndarray
    phi: np.ndarray
    grads: np.ndarray
    jxw: np.ndarray

    @property
    def flat_points(self) -> np.ndarray:
        return self.points.reshape(-1, self.points.shape[-1])


def _reference_rule(dim: int, order: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = gauss_legendre(order)
    if dim == 1:
        return x[:, None], w
    r, s = np.meshgrid(x, x, indexing="ij")
    wr, ws = np.meshgrid(w, w, indexing="ij")
    return np.stack([r.ravel(), s.ravel()], axis=1), (wr * ws).ravel()


def cell_quadrature(mesh: Mesh, order: int = 2) -> CellQuadrature:
    """Maps a Gauss-Legendre rule (order points per direction) onto every cell.

    Raises:
        AssemblyError: a cell has a non-positive Jacobian at a quadrature point
    """
    ref, weights = _reference_rule(mesh.dim, order)
    phi = shape_values(ref)
    dphi = shape_gradients(ref)
    corners = mesh.nodes[mesh.cells]
    points = np.einsum("qa,mai->mqi", phi, corners)
    jac = np.einsum("mai,qaj->mqij", corners, dphi)
    if mesh.dim == 1:
        det = jac[..., 0, 0]
        inv = 1.0 / np.where(det == 0, np.inf, det)
        grads = dphi[None, :, :, 0:1] * inv[:, :, None, None]
    else:
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        safe = np.where(det == 0, np.inf, det)
        inv = np.empty_like(jac)
        inv[..., 0, 0] = jac[..., 1, 1] / safe
        inv[..., 1, 1] = jac[..., 0, 0] / safe
        inv[..., 0, 1] = -jac[..., 0, 1] / safe
        inv[..., 1, 0] = -jac[..., 1, 0] / safe
        grads = np.einsum("qaj,mqji->mqai", dphi, inv)
    if np.any(det <= 0):
        bad = int(np.argmax(np.any(det <= 0, axis=1)))
        raise AssemblyError(f"Degenerate cell {bad}: non-positive Jacobian {det[bad].min():.3e}")
    return CellQuadrature(points, phi, grads, det * weights)


# ============== SPACE & SYSTEM ==============

@dataclass(frozen=True, eq=False)
class FeSpace:
    """One nodal degree of freedom per mesh node (Q1 on quads, P1 on lines)."""
    mesh: Mesh
    quadrature_order: int = 2

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_nodes

    @property
    def family(self) -> str:
        return "P1" if self.mesh.dim == 1 else "Q1"

    @cached_property
    def quadrature(self) -> CellQuadrature:
        return cell_quadrature(self.mesh, self.quadrature_order)

    def boundary_dofs(self, boundary_ids: Iterable[int]) -> np.ndarray:
        ids = list(boundary_ids)
        if not ids:
            return np.zeros(0, dtype=int)
        return np.unique(np.concatenate([self.mesh.boundary_nodes(b) for b in ids]))


@dataclass(eq=False)
class SparseSystem:
    """A = matrix, f = rhs, plus the Dirichlet dofs and their prescribed values."""
    matrix: sp.csr_matrix
    rhs: np.ndarray
    dirichlet_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    dirichlet_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def recover(self, solution: np.ndarray) -> np.ndarray:
        """Writes the prescribed values into a solution vector (U = U_0 + G)."""
        out = np.array(solution, dtype=float)
        out[self.dirichlet_dofs] = self.dirichlet_values
        return out


def _assemble(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    cells = mesh.cells
    k = cells.shape[1]
    rows = np.repeat(cells, k, axis=1).ravel()
    cols = np.tile(cells, (1, k)).ravel()
    matrix = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    return matrix


def _sample(function: SpaceFunction, points: np.ndarray, t: float, what: str) -> np.ndarray:
    values = np.asarray(function(points, t), dtype=float)
    if not np.all(np.isfinite(values)):
        raise AssemblyError(f"Non-finite {what} at a quadrature point")
    return values


# ============== MATRICES ==============

def build_mass(space: FeSpace) -> sp.csr_matrix:
    """M_AB = sum_e (phi_a, phi_b)_e."""
    q = space.quadrature
    local = np.einsum("qa,qb,mq->mab", q.phi, q.phi, q.jxw)
    return _assemble(space.mesh, local)


def build_convection_diffusion(space: FeSpace, velocity: Optional[SpaceFunction],
                               diffusivity: SpaceFunction, t: float = 0.0) -> sp.csr_matrix:
    """Fused C + K.

    Raises:
        AssemblyError: non-finite coefficient or non-positive diffusivity
    """
    q = space.quadrature
    m, nq, _, d = q.grads.shape
    pts = q.flat_points
    alpha = _sample(diffusivity, pts, t, "diffusivity").reshape(m, nq)
    if np.any(alpha <= 0):
        raise AssemblyError(f"Diffusivity must be positive, got min {alpha.min():.3e}")
    local = np.einsum("mqai,mqbi,mq,mq->mab", q.grads, q.grads, alpha, q.jxw)
    if velocity is not None:
        v = _sample(velocity, pts, t, "velocity").reshape(m, nq, -1)
        if v.shape[2] != d:
            raise AssemblyError(f"Velocity has {v.shape[2]} components, mesh dimension is {d}")
        local += np.einsum("qa,mqi,mqbi,mq->mab", q.phi, v, q.grads, q.jxw)
    return _assemble(space.mesh, local)


def build_rhs(space: FeSpace, source: Optional[SpaceFunction],
              neumann: Sequence[Tuple[int, SpaceFunction]] = (), t: float = 0.0) -> np.ndarray:
    """f_a = (phi_a, s) + sum over Neumann boundaries of (phi_a, h).

    Raises:
        MeshError: unknown boundary id
    """
    mesh = space.mesh
    f = np.zeros(space.n_dofs)
    if source is not None:
        q = space.quadrature
        s = _sample(source, q.flat_points, t, "source").reshape(q.jxw.shape)
        np.add.at(f, mesh.cells, np.einsum("qa,mq,mq->ma", q.phi, s, q.jxw))
    for boundary_id, flux in neumann:
        faces = boundary_faces(mesh, boundary_id)
        if mesh.dim == 1:
            np.add.at(f, faces.nodes[:, 0], _sample(flux, faces.centers, t, "boundary flux"))
            continue
        x, w = gauss_legendre(2)
        phi = np.stack([(1 - x) / 2, (1 + x) / 2], axis=1)
        a, b = mesh.nodes[faces.nodes[:, 0]], mesh.nodes[faces.nodes[:, 1]]
        pts = np.einsum("qk,fki->fqi", phi, np.stack([a, b], axis=1))
        h = _sample(flux, pts.reshape(-1, 2), t, "boundary flux").reshape(len(a), -1)
        contrib = np.einsum("qk,fq,q,f->fk", phi, h, w, faces.measures / 2)
        np.add.at(f, faces.nodes, contrib)
    return f


def apply_dirichlet_lifting(system: SparseSystem, g: SpaceFunction, boundary_ids: Iterable[int],
                            t: float, mesh: Mesh, neumann_ids: Iterable[int] = ()) -> SparseSystem:
    """Eliminates Dirichlet dofs with the lifting U = U_0 + G.

    Subtracts A G from the right-hand side, zeroes the Dirichlet rows and columns
    keeping their (positive) diagonal, and sets the rhs there so the solve
    returns the prescribed value. `SparseSystem.recover` restores it exactly.

    Raises:
        AssemblyError: a boundary id is both Dirichlet and Neumann
    """
    boundary_ids = list(boundary_ids)
    overlap = set(boundary_ids) & set(neumann_ids)
    if overlap:
        raise AssemblyError(f"Boundary id(s) {sorted(overlap)} are both Dirichlet and Neumann")
    if not boundary_ids:
        return system
    dofs = np.unique(np.concatenate([mesh.boundary_nodes(b) for b in boundary_ids]))
    values = _sample(g, mesh.nodes[dofs], t, "Dirichlet value")

    matrix = system.matrix.tocsr(copy=True)
    lift = np.zeros(matrix.shape[0])
    lift[dofs] = values
    rhs = system.rhs - matrix @ lift

    diag = matrix.diagonal()[dofs]
    diag = np.where(diag > 0, diag, 1.0)
    keep = np.ones(matrix.shape[0])
    keep[dofs] = 0.0
    mask = sp.diags(keep)
    matrix = (mask @ matrix @ mask).tocsr()
    matrix = matrix + sp.csr_matrix((diag, (dofs, dofs)), shape=matrix.shape)
    matrix = matrix.tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    rhs[dofs] = diag * values

    all_dofs = np.concatenate([system.dirichlet_dofs, dofs])
    all_values = np.concatenate([system.dirichlet_values, values])
    all_dofs, first = np.unique(all_dofs, return_index=True)
    return SparseSystem(matrix, rhs, all_dofs, all_values[first])


def dense_oracle(space: FeSpace, velocity: Optional[SpaceFunction], diffusivity: SpaceFunction,
                 t: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Brute-force (M, C+K) by looping over cells and quadrature points into dense arrays."""
    q = space.quadrature
    n = space.n_dofs
    mass = np.zeros((n, n))
    ck = np.zeros((n, n))
    for c, cell in enumerate(space.mesh.cells):
        for k in range(q.jxw.shape[1]):
            x = q.points[c, k][None, :]
            alpha = float(np.asarray(diffusivity(x, t)).ravel()[0])
            v = None if velocity is None else np.asarray(velocity(x, t), dtype=float).ravel()
            for a, A in enumerate(cell):
                for b, B in enumerate(cell):
                    mass[A, B] += q.phi[k, a] * q.phi[k, b] * q.jxw[c, k]
                    value = alpha * np.dot(q.grads[c, k, a], q.grads[c, k, b])
                    if v is not None:
                        value += q.phi[k, a] * np.dot(v, q.grads[c, k, b])
                    ck[A, B] += value * q.jxw[c, k]
    return mass, ck
