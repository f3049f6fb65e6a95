"""
Verification Module - Exact solutions and convergence studies
=============================================================
Steady exact solution of the 1D problem u' v = alpha u'' with u(1) = g,
manufactured solutions in 1D and 2D that relax from u = g toward a steady
boundary layer as 1 - exp(-beta t^2), L2 error norms and observed orders.

Studies:
    spatial  - theta = 1/2, dt tied to h, error against the manufactured solution
    temporal - fixed fine mesh, dt halved; error against a Richardson-extrapolated
               reference computed on the same mesh, so the spatial error cancels
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .assembly import FeSpace, build_mass, cell_quadrature
from .errors import VerificationError, require_positive
from .exprfn import ConstantFunction, ParsedFunction
from .field import FeField
from .linsolve import SolverSettings
from .mesh import GridSpec, generate, refine_global
from .pde import AmbientProblem, BoundaryCondition, run_unsteady

logger = logging.getLogger(__name__)

DEFAULT_BETA = 10.0
ZERO_TOL = 1e-12
SERIES_TOL = 1e-6

THREADS_ENV = "MELTSIM_THREADS"

# Reference orders (p spatial, q temporal); NaN where the spatial order is not defined.
TABLE_1D = [
    (-5, 2, -2, 1.996, 2.000), (-5, 2, -1, 1.992, 1.999),
    (-5, 1, -2, 1.998, 1.999), (-5, 1, -1, 1.997, 1.999),
    (-1, 2, -2, 2.022, 2.001), (-1, 2, -1, 2.008, 2.002),
    (-1, 1, -2, 2.015, 2.001), (-1, 1, -1, 2.008, 2.002),
    (0, 2, -2, math.nan, 2.000), (0, 2, -1, math.nan, 2.000),
    (0, 1, -2, math.nan, 2.000), (0, 1, -1, math.nan, 2.000),
]
TABLE_2D = [
    (2, -5, -2, 2.036, 2.058), (2, -5, -1, 2.036, 2.058),
    (2, -1, -2, 2.013, 2.042), (2, -1, -1, 2.012, 2.042),
    (1, -5, -2, 1.999, 2.058), (1, -5, -1, 1.999, 2.059),
    (1, -1, -2, 2.007, 2.029), (1, -1, -1, 2.007, 2.029),
]


# ============== EXACT SOLUTIONS ==============

@require_positive("alpha")
def exact_steady_1d(v: float, alpha: float, g: float, x: float) -> float:
    """g (exp(v x/alpha) - 1)/(exp(v/alpha) - 1), or g x when v/alpha vanishes."""
    if abs(v / alpha) < ZERO_TOL:
        return g * x
    return g * math.expm1(v * x / alpha) / math.expm1(v / alpha)


@require_positive("alpha")
def neumann_steady(v: float, alpha: float, g: float) -> float:
    """Flux at x = 0 holding the steady state: v g/(1 - exp(v/alpha)), or -g alpha when v = 0."""
    if abs(v / alpha) < ZERO_TOL:
        return -g * alpha
    return -v * g / math.expm1(v / alpha)


STEADY_1D = "if(abs(v/alpha) < eps, g*x, g*(exp(v*x/alpha) - 1)/(exp(v/alpha) - 1))"

# ramp = 1 - exp(-beta t^2); shape = (exp(v x/alpha) - 1)/(exp(v/alpha) - 1)
MMS_1D_EXACT = (
    "g*(1 + (if(abs(v/alpha) < eps, x, (exp(v*x/alpha) - 1)/(exp(v/alpha) - 1)) - 1)"
    "*(1 - exp(-beta*t^2)))"
)
MMS_1D_FLUX = (
    "if(abs(v/alpha) < eps, g*alpha*(exp(-beta*t^2) - 1),"
    " g*v*(exp(-beta*t^2) - 1)/(exp(v/alpha) - 1))"
)
MMS_1D_SOURCE = (
    "2*beta*g*t*exp(-beta*t^2)"
    "*(if(abs(v/alpha) < eps, x, (exp(v*x/alpha) - 1)/(exp(v/alpha) - 1)) - 1)"
)

# a = vmax/alpha; steady part g (exp(a x y) - 1)/(exp(a y) - 1), equal to g x as y -> 0
_U2 = "if(abs(a*y) < eps, g*x, g*(exp(a*x*y) - 1)/(exp(a*y) - 1))"
_U2_YY = (
    "if(abs(a*y) < eps, g*x*(x - 1)*(2*x - 1)*a^2/6,"
    " g*(a^2*x^2*exp(a*x*y)/(exp(a*y) - 1)"
    " - 2*a*x*exp(a*x*y)*a*exp(a*y)/(exp(a*y) - 1)^2"
    " - (exp(a*x*y) - 1)*a^2*exp(a*y)/(exp(a*y) - 1)^2"
    " + 2*(exp(a*x*y) - 1)*a^2*exp(2*a*y)/(exp(a*y) - 1)^3))"
)
_RAMP = "(1 - exp(-beta*t^2))"
MMS_2D_EXACT = f"g + ({_U2} - g)*{_RAMP}"
MMS_2D_SOURCE = f"({_U2} - g)*2*beta*t*exp(-beta*t^2) - alpha*{_RAMP}*{_U2_YY}"
MMS_2D_FLUX_X0 = f"if(abs(a*y) < eps, -{_RAMP}*g*alpha, -{_RAMP}*g*vmax*y/(exp(a*y) - 1))"
MMS_2D_FLUX_Y0 = f"-{_RAMP}*g*vmax*x*(x - 1)/2"
MMS_2D_FLUX_Y1 = (
    f"alpha*{_RAMP}*g*(a*x*exp(a*x)*(exp(a) - 1) - (exp(a*x) - 1)*a*exp(a))/(exp(a) - 1)^2"
)


# ============== MANUFACTURED CASES ==============

@dataclass(frozen=True, eq=False)
class MmsCase:
    """A manufactured problem on the unit interval or square, t in [0, end_time]."""
    name: str
    dim: int
    params: Dict[str, float]
    velocity: Callable
    diffusivity: ConstantFunction
    exact: ParsedFunction
    source: ParsedFunction
    natural: Dict[int, ParsedFunction]
    strong: Tuple[int, ...]
    end_time: float = 1.0

    @property
    def grid(self) -> GridSpec:
        if self.dim == 1:
            return GridSpec("hyper_cube", (0.0, 1.0))
        return GridSpec("hyper_rectangle", (0.0, 0.0, 1.0, 1.0))

    @property
    def layout(self) -> List[str]:
        """Boundary kinds in id order."""
        ids = sorted(set(self.natural) | set(self.strong))
        return ["strong" if b in self.strong else "natural" for b in ids]

    def boundary_conditions(self) -> Dict[int, BoundaryCondition]:
        conditions = {b: BoundaryCondition("natural", h) for b, h in self.natural.items()}
        conditions.update({b: BoundaryCondition("strong", self.exact) for b in self.strong})
        return conditions

    def problem(self, cycles: int, step_size: float, theta: float = 0.5,
                tolerance: float = 1e-12) -> AmbientProblem:
        mesh = refine_global(generate(self.grid), cycles)
        return AmbientProblem(
            space=FeSpace(mesh),
            diffusivity=self.diffusivity,
            boundary_conditions=self.boundary_conditions(),
            initial_values=self.exact,
            velocity=self.velocity,
            source=self.source,
            theta=theta,
            step_size=step_size,
            end_time=self.end_time,
            solver=SolverSettings(tolerance=tolerance),
        )


def _check_params(alpha: float, beta: float) -> None:
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")


def mms1d(v: float, alpha: float, g: float, beta: float = DEFAULT_BETA) -> MmsCase:
    """Natural flux at x = 0 (id 0), u = g at x = 1 (id 1), constant velocity v."""
    _check_params(alpha, beta)
    constants = {"v": v, "alpha": alpha, "g": g, "beta": beta, "eps": ZERO_TOL}
    return MmsCase(
        name=f"mms1d v={v:g} alpha={alpha:g} g={g:g}",
        dim=1,
        params={"v": v, "alpha": alpha, "g": g, "beta": beta},
        velocity=ConstantFunction(v),
        diffusivity=ConstantFunction(alpha),
        exact=ParsedFunction(MMS_1D_EXACT, constants),
        source=ParsedFunction(MMS_1D_SOURCE, constants),
        natural={0: ParsedFunction(MMS_1D_FLUX, constants)},
        strong=(1,),
    )


def mms2d(vmax: float, alpha: float, g: float, beta: float = DEFAULT_BETA) -> MmsCase:
    """Velocity (vmax y, 0); u = g on x = 1 (id 2), natural fluxes on x = 0, y = 0, y = 1 (ids 0, 1, 3)."""
    _check_params(alpha, beta)
    if vmax == 0:
        raise ValueError("mms2d needs a nonzero vmax")
    constants = {"vmax": vmax, "alpha": alpha, "g": g, "beta": beta, "a": vmax / alpha, "eps": SERIES_TOL}
    return MmsCase(
        name=f"mms2d vmax={vmax:g} alpha={alpha:g} g={g:g}",
        dim=2,
        params={"vmax": vmax, "alpha": alpha, "g": g, "beta": beta},
        velocity=ParsedFunction("vmax*y; 0", constants),
        diffusivity=ConstantFunction(alpha),
        exact=ParsedFunction(MMS_2D_EXACT, constants),
        source=ParsedFunction(MMS_2D_SOURCE, constants),
        natural={
            0: ParsedFunction(MMS_2D_FLUX_X0, constants),
            1: ParsedFunction(MMS_2D_FLUX_Y0, constants),
            3: ParsedFunction(MMS_2D_FLUX_Y1, constants),
        },
        strong=(2,),
    )


# ============== NORMS & ORDERS ==============

def l2_error(f: FeField, exact: Callable, t: float = 0.0, order: int = 3) -> float:
    """sqrt of the integral of (u_h - exact)^2 with an order-point Gauss rule per direction."""
    q = cell_quadrature(f.mesh, order)
    u_h = np.einsum("qa,ma->mq", q.phi, f.values[f.mesh.cells])
    u = np.asarray(exact(q.flat_points, t), dtype=float).reshape(u_h.shape)
    return float(math.sqrt(np.sum((u_h - u) ** 2 * q.jxw)))


def l2_difference(space: FeSpace, a: np.ndarray, b: np.ndarray) -> float:
    """L2 norm of the difference of two fields on the same space."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(math.sqrt(max(d @ (build_mass(space) @ d), 0.0)))


def observed_order(levels: Sequence[Tuple[float, float]]) -> float:
    """Least-squares slope of log(error) against log(scale).

    Raises:
        VerificationError: fewer than 2 levels or a non-positive error
    """
    if len(levels) < 2:
        raise VerificationError(f"Need at least 2 levels to fit an order, got {len(levels)}")
    scales = np.array([s for s, _ in levels], dtype=float)
    errors = np.array([e for _, e in levels], dtype=float)
    if np.any(errors <= 0) or np.any(scales <= 0):
        raise VerificationError(f"Errors and scales must be positive, got {errors.tolist()}")
    slope, _ = np.polyfit(np.log(scales), np.log(errors), 1)
    return float(slope)


def _local_orders(scales: Sequence[float], errors: Sequence[float]) -> List[float]:
    orders = [math.nan]
    for k in range(1, len(errors)):
        orders.append(math.log(errors[k - 1] / errors[k]) / math.log(scales[k - 1] / scales[k]))
    return orders


class ErrorRecorder:
    """Observer collecting the L2 error against an exact solution at every step."""

    def __init__(self, exact: Callable):
        self.exact = exact
        self.rows: List[Dict[str, float]] = []

    def __call__(self, step: int, t: float, f: FeField) -> None:
        self.rows.append({"step": step, "time": t, "error": l2_error(f, self.exact, t)})

    @property
    def table(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["step", "time", "error"])


# ============== STUDIES ==============

@dataclass(frozen=True)
class StudySettings:
    """Refinement schedule of a convergence study.

    spatial: cycles first_cycle .. first_cycle + levels - 1, dt = dt_per_h * h
    temporal: mesh at temporal_cycles, dt = dt0 / 2^k for k <= levels; the
        error of level k is its L2 distance to level k + 1
    """
    mode: str = "spatial"
    first_cycle: int = 4
    levels: int = 5
    dt_per_h: float = 0.5
    temporal_cycles: int = 8
    dt0: float = 0.05
    theta: float = 0.5
    tolerance: float = 1e-12

    def __post_init__(self):
        if self.mode not in ("spatial", "temporal"):
            raise ValueError(f"mode must be 'spatial' or 'temporal', got {self.mode!r}")
        if self.levels < 2:
            raise ValueError(f"A study needs at least 2 levels, got {self.levels}")

    @classmethod
    def for_dim(cls, dim: int, mode: str = "spatial") -> "StudySettings":
        if dim == 1:
            return cls(mode=mode, first_cycle=4, temporal_cycles=8)
        return cls(mode=mode, first_cycle=3, temporal_cycles=5)


@dataclass(eq=False)
class ConvergenceReport:
    name: str
    mode: str
    levels: pd.DataFrame
    order: float
    parameters: Dict[str, float] = field(default_factory=dict)

    def to_csv(self, path) -> None:
        self.levels.to_csv(path, index=False, float_format="%.17g")


def _report(name: str, mode: str, scales: List[float], errors: List[float],
            parameters: Dict[str, float]) -> ConvergenceReport:
    table = pd.DataFrame({
        "level": range(len(scales)),
        "scale": scales,
        "error": errors,
        "local_order": _local_orders(scales, errors),
    })
    order = observed_order(list(zip(scales, errors)))
    logger.info("%s (%s): order %.3f", name, mode, order)
    return ConvergenceReport(name, mode, table, order, dict(parameters))


def run_convergence_study(case: MmsCase, settings: Optional[StudySettings] = None) -> ConvergenceReport:
    """Errors at end_time over a refinement schedule and the fitted order (p or q).

    Spatial levels are measured against the exact solution. Temporal levels use
    differences between successive step sizes, which scale like dt^q for any q.
    """
    settings = settings or StudySettings.for_dim(case.dim)
    scales: List[float] = []
    errors: List[float] = []
    if settings.mode == "spatial":
        for cycles in range(settings.first_cycle, settings.first_cycle + settings.levels):
            h = 1.0 / 2 ** cycles
            problem = case.problem(cycles, settings.dt_per_h * h, settings.theta, settings.tolerance)
            final, _ = run_unsteady(problem)
            scales.append(h)
            errors.append(l2_error(final, case.exact, case.end_time))
            logger.info("%s: h=%.5g error=%.6e", case.name, h, errors[-1])
        return _report(case.name, "spatial", scales, errors, case.params)

    steps = [settings.dt0 / 2 ** k for k in range(settings.levels + 1)]
    results = []
    for dt in steps:
        problem = case.problem(settings.temporal_cycles, dt, settings.theta, settings.tolerance)
        results.append(run_unsteady(problem)[0].values)
    space = problem.space
    # same mesh at every level, so consecutive differences carry no spatial error
    for k, dt in enumerate(steps[:-1]):
        scales.append(dt)
        errors.append(l2_difference(space, results[k], results[k + 1]))
        logger.info("%s: dt=%.5g difference=%.6e", case.name, dt, errors[-1])
    return _report(case.name, "temporal", scales, errors, case.params)


def exact_steady_study(v: float = -1.0, alpha: float = 1.0, g: float = -1.0,
                       cycles: Sequence[int] = (3, 4, 5, 6, 7), end_time: float = 20.0,
                       step_size: float = 0.1) -> ConvergenceReport:
    """Backward Euler to a late time against the steady exact solution, over spatial refinements."""
    constants = {"v": v, "alpha": alpha, "g": g, "eps": ZERO_TOL}
    exact = ParsedFunction(STEADY_1D, constants)
    scales, errors = [], []
    for level in cycles:
        mesh = refine_global(generate(GridSpec("hyper_cube", (0.0, 1.0))), level)
        problem = AmbientProblem(
            space=FeSpace(mesh),
            diffusivity=ConstantFunction(alpha),
            boundary_conditions={
                0: BoundaryCondition("natural", ConstantFunction(neumann_steady(v, alpha, g))),
                1: BoundaryCondition("strong", ConstantFunction(g)),
            },
            initial_values=ConstantFunction(g),
            velocity=ConstantFunction(v),
            theta=1.0,
            step_size=step_size,
            end_time=end_time,
            solver=SolverSettings(tolerance=1e-12),
        )
        final, _ = run_unsteady(problem)
        scales.append(1.0 / 2 ** level)
        errors.append(l2_error(final, exact, end_time))
    return _report(f"steady v={v:g} alpha={alpha:g} g={g:g}", "spatial", scales, errors,
                   {"v": v, "alpha": alpha, "g": g})


# ============== TABLES ==============

def table_rows(dim: int) -> List[Dict[str, float]]:
    """Parameter rows with their reference orders p_ref, q_ref."""
    if dim == 1:
        return [{"v": v, "alpha": a, "g": g, "p_ref": p, "q_ref": q} for v, a, g, p, q in TABLE_1D]
    if dim == 2:
        return [{"alpha": a, "vmax": vm, "g": g, "p_ref": p, "q_ref": q} for a, vm, g, p, q in TABLE_2D]
    raise ValueError(f"dim must be 1 or 2, got {dim}")


def case_for(dim: int, row: Dict[str, float], beta: float = DEFAULT_BETA) -> MmsCase:
    if dim == 1:
        return mms1d(row["v"], row["alpha"], row["g"], beta)
    return mms2d(row["vmax"], row["alpha"], row["g"], beta)


def worker_count() -> int:
    """Thread cap from MELTSIM_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        count = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if count < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return count


def run_row(dim: int, row: Dict[str, float], spatial: Optional[StudySettings] = None,
            temporal: Optional[StudySettings] = None, beta: float = DEFAULT_BETA) -> Dict[str, float]:
    case = case_for(dim, row, beta)
    p = run_convergence_study(case, spatial or StudySettings.for_dim(dim, "spatial")).order
    q = run_convergence_study(case, temporal or StudySettings.for_dim(dim, "temporal")).order
    return {**row, "p": p, "q": q}


def run_table(dim: int, rows: Optional[List[Dict[str, float]]] = None,
              spatial: Optional[StudySettings] = None, temporal: Optional[StudySettings] = None,
              threads: Optional[int] = None) -> pd.DataFrame:
    """p and q for every row, cases fanned out over a thread pool."""
    rows = table_rows(dim) if rows is None else rows
    threads = worker_count() if threads is None else threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda row: run_row(dim, row, spatial, temporal), rows))
    return pd.DataFrame(results)
