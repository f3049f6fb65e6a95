"""
PDE Module - Theta-scheme convection-diffusion solver
=====================================================
Solves u_t + v . grad u - div(alpha grad u) = s with strong (u = g) and
natural (alpha du/dn = h, outward normal) boundary conditions:

    (M + dt theta (C+K)) U^{j+1}
        = (M - dt (1-theta) (C+K)) U^j + dt (theta f^{j+1} + (1-theta) f^j)

Also holds the Stefan-condition melt-film flux, Stefan and Peclet numbers,
and the steady melt-film studies built on them.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.optimize
import scipy.sparse as sp

from .assembly import (
    FeSpace, SparseSystem, apply_dirichlet_lifting, build_convection_diffusion,
    build_mass, build_rhs,
)
from .errors import MeshError, require_positive
from .exprfn import ConstantFunction, is_zero_function
from .field import FeField
from .linsolve import SolverSettings, bicgstab_solve, cg_solve
from .mesh import GridSpec, generate, refine_boundary, refine_global

logger = logging.getLogger(__name__)

SpaceFunction = Callable[[np.ndarray, float], np.ndarray]
Observer = Callable[[int, float, FeField], None]


# ============== PROBLEM DATA ==============

@dataclass(frozen=True)
class BoundaryCondition:
    """kind 'strong' prescribes u = function; kind 'natural' prescribes alpha du/dn = function."""
    kind: str
    function: SpaceFunction

    def __post_init__(self):
        if self.kind not in ("strong", "natural"):
            raise ValueError(f"Boundary condition kind must be 'strong' or 'natural', got {self.kind!r}")


@dataclass(eq=False)
class AmbientProblem:
    space: FeSpace
    diffusivity: SpaceFunction
    boundary_conditions: Dict[int, BoundaryCondition]
    initial_values: Union[SpaceFunction, FeField, np.ndarray]
    velocity: Optional[SpaceFunction] = None
    source: Optional[SpaceFunction] = None
    theta: float = 0.5
    step_size: float = 0.01
    end_time: float = 1.0
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        ids = set(self.space.mesh.boundary_ids)
        missing = sorted(ids - set(self.boundary_conditions))
        extra = sorted(set(self.boundary_conditions) - ids)
        if missing or extra:
            raise ValueError(
                f"Every boundary id needs exactly one condition: missing {missing}, unknown {extra}"
            )
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")

    @property
    def mesh(self):
        return self.space.mesh

    @property
    def strong_ids(self) -> List[int]:
        return sorted(b for b, bc in self.boundary_conditions.items() if bc.kind == "strong")

    @property
    def natural(self) -> List[Tuple[int, SpaceFunction]]:
        return [(b, bc.function) for b, bc in sorted(self.boundary_conditions.items()) if bc.kind == "natural"]

    @property
    def symmetric(self) -> bool:
        return is_zero_function(self.velocity)

    def dirichlet_function(self) -> SpaceFunction:
        """One function for all strong boundaries, sampled at space.boundary_dofs(strong_ids).

        A node shared by two strong boundaries takes the value of the lower id.
        """
        ids = self.strong_ids
        dofs = self.space.boundary_dofs(ids)
        owners = np.full(len(dofs), -1)
        for b in reversed(ids):
            owners[np.isin(dofs, self.mesh.boundary_nodes(b))] = b
        conditions = self.boundary_conditions

        def g(points: np.ndarray, t: float) -> np.ndarray:
            if len(points) != len(dofs):
                raise ValueError(f"Strong boundary values expect {len(dofs)} points, got {len(points)}")
            out = np.empty(len(points))
            for b in ids:
                sel = owners == b
                out[sel] = conditions[b].function(points[sel], t)
            return out

        return g


# ============== THETA SCHEME ==============

def theta_system(mass: sp.spmatrix, ck: sp.spmatrix, u: np.ndarray, f_old: np.ndarray,
                 f_new: np.ndarray, dt: float, theta: float) -> SparseSystem:
    """Matrix and right-hand side of one theta step, before boundary conditions."""
    matrix = (mass + (dt * theta) * ck).tocsr()
    rhs = mass @ u - (dt * (1.0 - theta)) * (ck @ u) + dt * (theta * f_new + (1.0 - theta) * f_old)
    return SparseSystem(matrix, rhs)


class ThetaStepper:
    """Assembled operators of one AmbientProblem, reused across steps."""

    def __init__(self, problem: AmbientProblem):
        self.problem = problem
        self.mass = build_mass(problem.space)
        self.ck = build_convection_diffusion(problem.space, problem.velocity, problem.diffusivity)
        self._dirichlet = problem.dirichlet_function() if problem.strong_ids else None
        self._rhs_cache: Dict[float, np.ndarray] = {}
        self.iterations: List[int] = []

    def rhs(self, t: float) -> np.ndarray:
        if t not in self._rhs_cache:
            self._rhs_cache = {t: build_rhs(self.problem.space, self.problem.source, self.problem.natural, t)}
        return self._rhs_cache[t]

    def constrain(self, system: SparseSystem, t: float) -> SparseSystem:
        if self._dirichlet is None:
            return system
        natural_ids = [b for b, _ in self.problem.natural]
        return apply_dirichlet_lifting(system, self._dirichlet, self.problem.strong_ids, t,
                                       self.problem.mesh, natural_ids)

    def solve(self, system: SparseSystem, guess: Optional[np.ndarray] = None) -> np.ndarray:
        settings = self.problem.solver
        info: Dict[str, float] = {}
        solver = cg_solve if self.problem.symmetric else bicgstab_solve
        x = solver(system.matrix, system.rhs, tol=settings.tolerance, max_iter=settings.max_iterations,
                   x0=guess, jacobi=settings.jacobi, info=info)
        self.iterations.append(int(info.get("iterations", 0)))
        return system.recover(x)

    def step(self, u: np.ndarray, t: float, dt: float) -> np.ndarray:
        theta = self.problem.theta
        f_old = self.rhs(t)
        f_new = build_rhs(self.problem.space, self.problem.source, self.problem.natural, t + dt)
        self._rhs_cache = {t + dt: f_new}
        system = theta_system(self.mass, self.ck, u, f_old, f_new, dt, theta)
        return self.solve(self.constrain(system, t + dt), guess=u)

    def initial(self, t: float = 0.0) -> np.ndarray:
        problem = self.problem
        iv = problem.initial_values
        nodes = problem.mesh.nodes
        if isinstance(iv, FeField):
            values = np.array(iv.values, dtype=float)
        elif isinstance(iv, np.ndarray):
            values = np.array(iv, dtype=float)
        else:
            values = np.asarray(iv(nodes, t), dtype=float)
        if values.shape != (problem.space.n_dofs,):
            raise ValueError(f"Initial values have shape {values.shape}, expected ({problem.space.n_dofs},)")
        if self._dirichlet is not None:
            dofs = problem.space.boundary_dofs(problem.strong_ids)
            values[dofs] = self._dirichlet(nodes[dofs], t)
        return values


def step_theta(problem: AmbientProblem, u_j: np.ndarray, t_j: float, dt: float) -> np.ndarray:
    """One theta-scheme step from t_j to t_j + dt (CG when v = 0, BiCGStab otherwise)."""
    return ThetaStepper(problem).step(np.asarray(u_j, dtype=float), t_j, dt)


def _time_levels(end_time: float, step_size: float) -> np.ndarray:
    n = max(1, int(math.ceil(end_time / step_size - 1e-9)))
    levels = np.arange(n + 1) * step_size
    levels[-1] = end_time
    return levels


def run_unsteady(problem: AmbientProblem, observers: Sequence[Observer] = (),
                 start_time: float = 0.0) -> Tuple[FeField, pd.DataFrame]:
    """Integrates from start_time to problem.end_time, landing on end_time exactly.

    Observers are called as observer(step, t, field) for the initial state and
    after every step.

    Returns:
        (final field, history with columns step, time, min, max, iterations)
    """
    if not problem.end_time > start_time:
        raise ValueError(f"end_time must exceed the start time, got {problem.end_time} <= {start_time}")
    if not problem.step_size > 0:
        raise ValueError(f"step_size must be positive, got {problem.step_size}")
    stepper = ThetaStepper(problem)
    mesh = problem.mesh
    u = stepper.initial(start_time)
    times = start_time + _time_levels(problem.end_time - start_time, problem.step_size)
    times[-1] = problem.end_time
    rows = []

    def notify(step: int, t: float, iterations: int) -> None:
        current = FeField(mesh, u)
        rows.append({"step": step, "time": t, "min": float(u.min()), "max": float(u.max()),
                     "iterations": iterations})
        for observer in observers:
            observer(step, t, current)

    notify(0, times[0], 0)
    for step in range(1, len(times)):
        u = stepper.step(u, times[step - 1], times[step] - times[step - 1])
        notify(step, times[step], stepper.iterations[-1])
    logger.debug("Ran %d steps to t=%g (%d solver iterations)", len(times) - 1, times[-1],
                 sum(stepper.iterations))
    return FeField(mesh, u), pd.DataFrame(rows)


def solve_steady(problem: AmbientProblem, t: float = 0.0) -> FeField:
    """Solves (C + K) U = f with the strong conditions at time t."""
    stepper = ThetaStepper(problem)
    system = SparseSystem(stepper.ck, stepper.rhs(t))
    return FeField(problem.mesh, stepper.solve(stepper.constrain(system, t)))


def boundary_mean(f: FeField, boundary_id: int) -> float:
    """Mean nodal value over one boundary id."""
    return float(np.mean(f.values[f.mesh.boundary_nodes(boundary_id)]))


def steady_boundary_temperature(problem: AmbientProblem, boundary_id: int, transient: bool = False) -> float:
    """Mean temperature on a boundary once the problem has settled.

    With transient=True the problem is integrated to end_time; otherwise the
    steady system is solved directly.
    """
    if boundary_id not in problem.boundary_conditions:
        raise MeshError(f"Unknown boundary id {boundary_id}; mesh has {problem.mesh.boundary_ids}")
    final = run_unsteady(problem)[0] if transient else solve_steady(problem)
    return boundary_mean(final, boundary_id)


# ============== PECLET NUMBERS ==============

@require_positive("alpha")
def local_peclet(v_mag: float, h_cell: float, alpha: float) -> float:
    """Pe_h = v h / (2 alpha)."""
    return v_mag * h_cell / (2.0 * alpha)


@require_positive("alpha")
def global_peclet(v_mag: float, L: float, alpha: float) -> float:
    """Pe = v L / alpha."""
    return v_mag * L / alpha


def peclet_report(problem: AmbientProblem) -> Dict[str, float]:
    """Worst local Peclet number over cells (coefficients sampled at cell centers)."""
    mesh = problem.mesh
    centers = mesh.cell_centers
    pts = mesh.nodes[mesh.cells]
    diam = np.max(np.linalg.norm(pts[:, :, None, :] - pts[:, None, :, :], axis=-1), axis=(1, 2))
    alpha = np.asarray(problem.diffusivity(centers, 0.0), dtype=float).ravel()
    if problem.velocity is None:
        speed = np.zeros(mesh.n_cells)
    else:
        v = np.asarray(problem.velocity(centers, 0.0), dtype=float).reshape(mesh.n_cells, -1)
        speed = np.linalg.norm(v, axis=1)
    cell_pe = speed * diam / (2.0 * alpha)
    worst = int(np.argmax(cell_pe))
    extent = float(np.max(mesh.nodes.max(axis=0) - mesh.nodes.min(axis=0)))
    return {
        "max_local_peclet": float(cell_pe[worst]),
        "cell": worst,
        "max_global_peclet": float(np.max(speed) * extent / np.min(alpha)),
    }


# ============== STEFAN CONDITION ==============

@dataclass(frozen=True)
class StefanFilmParams:
    """Thermal data of the solid phase and the melt film.

    T_w and delta are constants or functions of an (n, d) point array.
    """
    k_L: float
    k_S: float
    rho_S: float
    cp_S: float
    h_m: float
    T_m: float
    T_w: Union[float, Callable[[np.ndarray], np.ndarray]]
    delta: Union[float, Callable[[np.ndarray], np.ndarray]]

    def __post_init__(self):
        for name in ("k_L", "k_S", "rho_S", "cp_S", "h_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not callable(self.delta) and not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    @property
    def diffusivity(self) -> float:
        """Thermal diffusivity of the solid, k_S / (rho_S c_pS)."""
        return self.k_S / (self.rho_S * self.cp_S)


def ice_params(wall_temperature: float = 1.0, film_thickness: float = 1e-6,
               melting_temperature: float = 0.0) -> StefanFilmParams:
    """Water ice near its melting point."""
    return StefanFilmParams(k_L=0.5611, k_S=2.14, rho_S=917.0, cp_S=2110.0, h_m=3.34e6,
                            T_m=melting_temperature, T_w=wall_temperature, delta=film_thickness)


def _at(value, x: np.ndarray) -> np.ndarray:
    if callable(value):
        return np.asarray(value(x), dtype=float)
    return np.full(len(x), float(value))


def stefan_flux(params: StefanFilmParams, v: float, x) -> Union[float, np.ndarray]:
    """Neumann value h = q+ / (rho_S c_pS) with q+ = -k_L (T_m - T_w)/delta - rho_S h_m v."""
    points = np.atleast_2d(np.asarray(x, dtype=float))
    delta = _at(params.delta, points)
    if np.any(delta <= 0):
        raise ValueError("Melt film thickness must be positive")
    q = -params.k_L * (params.T_m - _at(params.T_w, points)) / delta - params.rho_S * params.h_m * v
    h = q / (params.rho_S * params.cp_S)
    return float(h[0]) if np.ndim(x) <= 1 else h


def stefan_velocity(params: StefanFilmParams, x) -> float:
    """Interface velocity v* at which the film flux is entirely consumed by melting (h = 0)."""
    points = np.atleast_2d(np.asarray(x, dtype=float))
    delta = _at(params.delta, points)[0]
    return float(-params.k_L * (params.T_m - _at(params.T_w, points)[0]) / (delta * params.rho_S * params.h_m))


@require_positive("h_m")
def stefan_number(c_pS: float, T_h: float, T_m: float, h_m: float) -> float:
    """Ste = c_pS (T_h - T_m) / h_m."""
    return c_pS * (T_h - T_m) / h_m


# ============== MELT FILM STUDIES ==============

def stefan_equilibrium_velocity(params: StefanFilmParams, solid_temperature: float, depth: float) -> float:
    """Velocity at which the Stefan flux exactly warms incoming solid from T_s to T_m.

    Balances h(v) = v (T_m - T_s) / (1 - exp(-v L / alpha_S)) on a slab of depth L.
    """
    alpha = params.diffusivity
    gap = params.T_m - solid_temperature
    point = np.zeros((1, 1))
    upper = stefan_velocity(params, point)

    def balance(v: float) -> float:
        return stefan_flux(params, v, point[0]) - v * gap / -math.expm1(-v * depth / alpha)

    return float(scipy.optimize.brentq(balance, upper * 1e-9, upper))


def stefan_film_problem(params: StefanFilmParams, velocity: float, solid_temperature: float,
                        depth: float, width: Optional[float] = None, cycles: int = 6,
                        boundary_cycles: int = 4, flux_scale: float = 1.0,
                        theta: float = 1.0, step_size: float = 50.0, end_time: float = 5000.0,
                        initial: Optional[FeField] = None) -> AmbientProblem:
    """Slab of solid ahead of a melting contact surface, in the frame of the moving body.

    1D (width None): x is the distance from the contact surface (id 0, Stefan flux)
    to the far boundary (id 1, T = T_s). 2D: rectangle [0, width] x [0, depth]
    with the contact surface at y = 0 (id 1), T_s at y = depth (id 3) and
    adiabatic sides (ids 0, 2). Solid flows toward the contact at `velocity`.
    """
    if width is None:
        mesh = refine_global(generate(GridSpec("hyper_cube", (0.0, depth))), cycles)
        contact, far = 0, 1
        flow = ConstantFunction(-velocity)
    else:
        mesh = refine_global(generate(GridSpec("hyper_rectangle", (0.0, 0.0, width, depth))), cycles)
        contact, far = 1, 3
        flow = ConstantFunction([0.0, -velocity])
    mesh = refine_boundary(mesh, contact, boundary_cycles)
    h = flux_scale * stefan_flux(params, velocity, np.zeros(mesh.dim))
    conditions = {b: BoundaryCondition("natural", ConstantFunction(0.0)) for b in mesh.boundary_ids}
    conditions[contact] = BoundaryCondition("natural", ConstantFunction(h))
    conditions[far] = BoundaryCondition("strong", ConstantFunction(solid_temperature))
    return AmbientProblem(
        space=FeSpace(mesh),
        diffusivity=ConstantFunction(params.diffusivity),
        boundary_conditions=conditions,
        initial_values=initial if initial is not None else ConstantFunction(solid_temperature),
        velocity=flow,
        theta=theta,
        step_size=step_size,
        end_time=end_time,
        solver=SolverSettings(tolerance=1e-12),
    )


def contact_temperature(problem: AmbientProblem) -> float:
    """Steady temperature on the contact surface of a stefan_film_problem."""
    return steady_boundary_temperature(problem, 0 if problem.mesh.dim == 1 else 1)
