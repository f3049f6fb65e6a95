"""
Coupling Module - Trajectory of a body melting through its surroundings
=======================================================================
Each outer step of length dt_i = substeps * step_size:

    a. run `substeps` theta-scheme steps with the convection velocity
       superposed from the body rate
    b. keep the final field
    c. s* = minimize_state over that field
    d. rate += (s* - s) / dt_i
    e. global pose += (s* - s) + dt_i * old rate

then the mesh follows the body rigidly, the field is carried onto the moved
mesh and s <- s*.
"""

import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.stats

from .assembly import FeSpace
from .errors import require_dim
from .exprfn import ConstantFunction
from .field import FeField, export_vtk, extract_isoline, init_from_field, open_output, write_checkpoint, write_isolines
from .mesh import transform_rigid
from .pde import AmbientProblem, BoundaryCondition, run_unsteady
from .rbd import BodyGeometry, RbdProblem, RbdSettings, RigidState, centroid, feasibility, minimize_state

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = [
    "step", "time", "theta", "r0", "r1", "theta_dot", "r0_dot", "r1_dot",
    "theta_V", "r0_V", "r1_V", "flux",
]

_OVERRIDE = re.compile(r"^\s*(\d+)\s*@\s*(\d+)\s*(\*?=)\s*([-+0-9.eE]+)\s*$")


# ============== CONVECTION ==============

class RigidFlow:
    """Convection velocity seen from a body moving with `rate` about `pivot`.

    v(x) = -((r0_dot, r1_dot) + theta_dot * perp(x - pivot)), perp(a, b) = (-b, a)
    """

    def __init__(self, rate: Sequence[float], pivot: Sequence[float]):
        self.rate = tuple(float(v) for v in rate)
        self.pivot = np.asarray(pivot, dtype=float)

    @property
    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.rate)

    @property
    def is_vector(self) -> bool:
        return True

    def __call__(self, points: np.ndarray, t: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        omega, vx, vy = self.rate
        rel = points - self.pivot
        return -np.stack([vx - omega * rel[:, 1], vy + omega * rel[:, 0]], axis=1)


def convection_from_rate(rate: Optional[Sequence[float]], pivot: Sequence[float] = (0.0, 0.0)):
    """Velocity function for a body rate (theta_dot, r0_dot, r1_dot); a constant when not rotating."""
    rate = (0.0, 0.0, 0.0) if rate is None else tuple(float(v) for v in rate)
    if rate[0] == 0.0:
        return ConstantFunction([-rate[1], -rate[2]])
    return RigidFlow(rate, pivot)


# ============== BOUNDARY SCHEDULE ==============

@dataclass(frozen=True)
class BcOverride:
    """From outer step `step` on, boundary `boundary_id` takes value (or value *= factor)."""
    step: int
    boundary_id: int
    value: float
    multiply: bool = False

    def apply(self, condition: BoundaryCondition) -> BoundaryCondition:
        function = condition.function
        if not isinstance(function, ConstantFunction) or function.is_vector:
            raise ValueError(f"Boundary {self.boundary_id} override needs a scalar constant condition")
        current = float(function.value[0])
        new = current * self.value if self.multiply else self.value
        return BoundaryCondition(condition.kind, ConstantFunction(new))


def parse_bc_schedule(text: str) -> Tuple[BcOverride, ...]:
    """Parses "10@0*=1.2, 15@1=-2" (step@boundary_id then *=factor or =value)."""
    overrides = []
    for item in filter(None, (part.strip() for part in text.split(","))):
        match = _OVERRIDE.match(item)
        if not match:
            raise ValueError(f"Invalid boundary schedule entry {item!r}; expected 'step@id*=factor' or 'step@id=value'")
        step, bid, op, value = match.groups()
        overrides.append(BcOverride(int(step), int(bid), float(value), op == "*="))
    return tuple(sorted(overrides, key=lambda o: o.step))


def format_bc_schedule(overrides: Sequence[BcOverride]) -> str:
    return ", ".join(f"{o.step}@{o.boundary_id}{'*=' if o.multiply else '='}{o.value!r}" for o in overrides)


# ============== CONFIGURATION & STATE ==============

@dataclass(eq=False)
class CouplingConfig:
    """Everything a trajectory run needs besides its current state.

    `template` supplies the coefficients, boundary conditions, theta and the
    inner step size; its velocity is replaced by the superposed convection.
    """
    template: AmbientProblem
    body: BodyGeometry
    gravity: Tuple[float, float]
    melting_temperature: float
    max_change: Tuple[float, float, float]
    steps: int
    substeps: int
    rbd_settings: RbdSettings = field(default_factory=RbdSettings)
    schedule: Tuple[BcOverride, ...] = ()

    def __post_init__(self):
        if self.steps < 1 or self.substeps < 1:
            raise ValueError(f"steps and substeps must be >= 1, got {self.steps} and {self.substeps}")
        if not self.template.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.template.step_size}")
        ids = set(self.template.boundary_conditions)
        for override in self.schedule:
            if override.boundary_id not in ids:
                raise ValueError(f"Schedule refers to unknown boundary id {override.boundary_id}")

    @property
    def interval(self) -> float:
        """Outer step length dt_i."""
        return self.substeps * self.template.step_size


@dataclass(frozen=True, eq=False)
class TrajectoryState:
    index: int
    time: float
    rigid: RigidState
    virtual: np.ndarray
    field: FeField
    conditions: Dict[int, BoundaryCondition]
    min_feasibility: float = math.nan

    @property
    def rate(self) -> np.ndarray:
        return np.asarray(self.rigid.rate if self.rigid.rate is not None else (0.0, 0.0, 0.0), dtype=float)

    @property
    def flux(self) -> float:
        """Value of the first natural boundary condition when it is a scalar constant."""
        for _, condition in sorted(self.conditions.items()):
            if condition.kind == "natural":
                function = condition.function
                if isinstance(function, ConstantFunction) and not function.is_vector:
                    return float(function.value[0])
                return math.nan
        return math.nan

    def row(self) -> Dict[str, float]:
        pose, rate, virtual = self.rigid.as_array(), self.rate, self.virtual
        return {
            "step": self.index, "time": self.time,
            "theta": pose[0], "r0": pose[1], "r1": pose[2],
            "theta_dot": rate[0], "r0_dot": rate[1], "r1_dot": rate[2],
            "theta_V": virtual[0], "r0_V": virtual[1], "r1_V": virtual[2],
            "flux": self.flux,
        }


@require_dim(2, argument="initial")
def initial_state(cfg: CouplingConfig, initial: FeField, rigid: Optional[RigidState] = None,
                  time: float = 0.0, virtual: Optional[Sequence[float]] = None, index: int = 0) -> TrajectoryState:
    """Starting state; the global pose starts at the body pose unless given."""
    rigid = rigid or RigidState(0.0, 0.0, 0.0)
    if rigid.rate is None:
        rigid = replace(rigid, rate=(0.0, 0.0, 0.0))
    virtual = rigid.as_array() if virtual is None else np.asarray(virtual, dtype=float)
    return TrajectoryState(index, time, rigid, virtual, initial, dict(cfg.template.boundary_conditions))


# ============== STEPS ==============

def _conditions_for(ts: TrajectoryState, cfg: CouplingConfig) -> Dict[int, BoundaryCondition]:
    conditions = dict(ts.conditions)
    for override in cfg.schedule:
        if override.step == ts.index:
            conditions[override.boundary_id] = override.apply(conditions[override.boundary_id])
            logger.info("Step %d: boundary %d condition set to %s", ts.index, override.boundary_id,
                        conditions[override.boundary_id].function)
    return conditions


def ambient_problem(ts: TrajectoryState, cfg: CouplingConfig,
                    conditions: Optional[Dict[int, BoundaryCondition]] = None) -> AmbientProblem:
    """The theta-scheme problem of one outer interval, on the current mesh."""
    template = cfg.template
    pivot = centroid(cfg.body, ts.rigid)
    return replace(
        template,
        space=FeSpace(ts.field.mesh, template.space.quadrature_order),
        velocity=convection_from_rate(ts.rate, pivot),
        boundary_conditions=conditions if conditions is not None else ts.conditions,
        initial_values=ts.field,
        end_time=ts.time + cfg.interval,
    )


def trajectory_step(ts: TrajectoryState, cfg: CouplingConfig) -> TrajectoryState:
    """One outer step (ambient run, placement, rate and pose updates, mesh move)."""
    dt = cfg.interval
    conditions = _conditions_for(ts, cfg)
    problem = ambient_problem(ts, cfg, conditions)
    melted, history = run_unsteady(problem, start_time=ts.time)
    if len(history) - 1 != cfg.substeps:
        raise ValueError(f"Outer step ran {len(history) - 1} inner steps, expected {cfg.substeps}")

    rbd = RbdProblem(cfg.body, cfg.gravity, cfg.melting_temperature, melted.eval_extrapolated,
                     cfg.max_change, cfg.rbd_settings)
    target = minimize_state(rbd, ts.rigid)
    change = target.as_array() - ts.rigid.as_array()
    min_g = float(feasibility(rbd, target).min())

    old_rate = ts.rate
    rate = old_rate + change / dt
    virtual = ts.virtual + change + dt * old_rate

    if np.any(change != 0.0):
        pivot = centroid(cfg.body, ts.rigid)
        shift = centroid(cfg.body, target) - pivot
        mesh = transform_rigid(melted.mesh, change[0], shift, pivot)
        melted = init_from_field(mesh, melted)

    new = TrajectoryState(ts.index + 1, problem.end_time, RigidState.from_array(target.as_array(), rate),
                          virtual, melted, conditions, min_g)
    logger.info("Step %d t=%.6g: pose=(%.6g, %.6g, %.6g) rate=(%.6g, %.6g, %.6g) flux=%g",
                new.index, new.time, *target.as_array(), *rate, new.flux)
    return new


def run_trajectory(cfg: CouplingConfig, state: TrajectoryState, steps: Optional[int] = None,
                   output_dir: Optional[Path] = None, deterministic: bool = False) -> Tuple[TrajectoryState, pd.DataFrame]:
    """Runs outer steps, writing per-step VTK, isoline CSV, trajectory CSV and a checkpoint when output_dir is set.

    Returns:
        (final state, trajectory table with TRAJECTORY_COLUMNS plus min_feasibility)
    """
    steps = cfg.steps if steps is None else steps
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    rows = [state.row()]
    for _ in range(steps):
        state = trajectory_step(state, cfg)
        rows.append({**state.row(), "min_feasibility": state.min_feasibility})
        if output_dir is not None:
            _write_step(state, cfg, Path(output_dir), pd.DataFrame(rows), deterministic)
    table = pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS + ["min_feasibility"])
    return state, table


def _write_step(state: TrajectoryState, cfg: CouplingConfig, output_dir: Path,
                table: pd.DataFrame, deterministic: bool) -> None:
    stem = output_dir / f"step_{state.index:04d}"
    export_vtk(state.field, stem.with_suffix(".vtk"), state.time, deterministic=deterministic)
    write_isolines(extract_isoline(state.field, cfg.melting_temperature), f"{stem}_pci.csv")
    with open_output(output_dir / "trajectory.csv") as fh:
        table.reindex(columns=TRAJECTORY_COLUMNS + ["min_feasibility"]).to_csv(fh, index=False, float_format="%.17g")
    write_checkpoint(state.field, state.rigid, state.time, output_dir / "checkpoint.txt", virtual=state.virtual)


# ============== ANALYSIS ==============

def steady_rate(history: pd.DataFrame, window: int = 3, column: str = "r1_dot") -> Tuple[float, float]:
    """Plateau rate (mean of the last `window` values) and the last relative change."""
    values = history[column].to_numpy(dtype=float)
    if len(values) < max(window, 2):
        raise ValueError(f"Need at least {max(window, 2)} rows to judge a plateau, got {len(values)}")
    plateau = float(values[-window:].mean())
    last, previous = values[-1], values[-2]
    change = abs(last - previous) / abs(last) if last != 0 else math.inf
    return plateau, float(change)


def linear_fit(fluxes: Sequence[float], rates: Sequence[float]) -> Tuple[float, float, float]:
    """(slope, intercept, R^2) of rates against fluxes."""
    if len(fluxes) != len(rates) or len(fluxes) < 2:
        raise ValueError("linear_fit needs two equally long sequences of at least 2 values")
    fit = scipy.stats.linregress(np.asarray(fluxes, dtype=float), np.asarray(rates, dtype=float))
    return float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2)
