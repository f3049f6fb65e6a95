"""
Rigid Body Module - Gravity-driven placement of a body in its melt
==================================================================
The body settles by minimizing its gravitational potential

    Psi(s) = -b . centroid(s)

subject to every sampled hull point lying in melt (T(x_k) - T_m >= 0) and to
per-step bounds |s - s0| <= max_change. The state s = (theta, r0, r1) rotates
the reference hull about the body origin and translates it by (r0, r1).
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.optimize

from .errors import RbdError
from .mesh import rotation

logger = logging.getLogger(__name__)

Sampler = Callable[[np.ndarray], np.ndarray]

BODY_SHAPES = {"circle": 1, "sphere_cylinder": 2}


# ============== STATE & GEOMETRY ==============

@dataclass(frozen=True)
class RigidState:
    """Pose (theta, r0, r1) and, optionally, its rate per unit time."""
    theta: float
    r0: float
    r1: float
    rate: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        values = [self.theta, self.r0, self.r1] + list(self.rate or ())
        if not all(math.isfinite(v) for v in values):
            raise RbdError(f"Rigid state must be finite, got {values}")
        if self.rate is not None:
            if len(self.rate) != 3:
                raise RbdError(f"Rate needs 3 components, got {len(self.rate)}")
            object.__setattr__(self, "rate", tuple(float(v) for v in self.rate))

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.r0, self.r1], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float], rate: Optional[Sequence[float]] = None) -> "RigidState":
        theta, r0, r1 = (float(v) for v in values)
        return cls(theta, r0, r1, None if rate is None else tuple(float(v) for v in rate))


@dataclass(frozen=True, eq=False)
class BodyGeometry:
    """Rigid hull in its body frame.

    shapes:
        circle: sizes (radius,), centered at the origin
        sphere_cylinder: sizes (R_nose, L_body); semicircular nose centered at
            the origin pointing toward -y, joined to a rectangle reaching y = L_body
    """
    shape: str
    sizes: Tuple[float, ...]
    hull_samples: int = 32

    def __post_init__(self):
        if self.shape not in BODY_SHAPES:
            raise RbdError(f"Unknown body shape {self.shape!r}; expected one of {sorted(BODY_SHAPES)}")
        sizes = tuple(float(s) for s in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if len(sizes) != BODY_SHAPES[self.shape]:
            raise RbdError(f"{self.shape} needs {BODY_SHAPES[self.shape]} sizes, got {len(sizes)}")
        if not all(math.isfinite(s) and s > 0 for s in sizes):
            raise RbdError(f"{self.shape} sizes must be positive, got {sizes}")
        if self.hull_samples < 8:
            raise RbdError(f"hull_samples must be at least 8, got {self.hull_samples}")

    @property
    def perimeter(self) -> float:
        if self.shape == "circle":
            return 2 * math.pi * self.sizes[0]
        radius, length = self.sizes
        return math.pi * radius + 2 * length + 2 * radius

    def outline(self, s: np.ndarray) -> np.ndarray:
        """Hull point at arc length s, counterclockwise from the lowest point (0, -R)."""
        s = np.mod(np.asarray(s, dtype=float), self.perimeter)
        if self.shape == "circle":
            radius = self.sizes[0]
            phi = -math.pi / 2 + s / radius
            return np.stack([radius * np.cos(phi), radius * np.sin(phi)], axis=-1)
        radius, length = self.sizes
        quarter = math.pi * radius / 2
        ends = np.cumsum([quarter, length, 2 * radius, length, quarter])
        seg = np.searchsorted(ends, s, side="right").clip(0, 4)
        local = s - np.concatenate([[0.0], ends[:-1]])[seg]
        phi = np.where(seg == 0, -math.pi / 2 + local / radius, math.pi + local / radius)
        x = np.select([seg == 1, seg == 2, seg == 3],
                      [np.full_like(s, radius), radius - local, np.full_like(s, -radius)],
                      radius * np.cos(phi))
        y = np.select([seg == 1, seg == 2, seg == 3],
                      [local, np.full_like(s, length), length - local],
                      radius * np.sin(phi))
        return np.stack([x, y], axis=-1)

    @cached_property
    def reference_hull(self) -> np.ndarray:
        """hull_samples points equally spaced by arc length, shape (N, 2)."""
        s = np.arange(self.hull_samples) * (self.perimeter / self.hull_samples)
        return self.outline(s)

    @cached_property
    def reference_centroid(self) -> np.ndarray:
        if self.shape == "circle":
            return np.zeros(2)
        radius, length = self.sizes
        nose_area = math.pi * radius ** 2 / 2
        body_area = 2 * radius * length
        y = (nose_area * (-4 * radius / (3 * math.pi)) + body_area * length / 2) / (nose_area + body_area)
        return np.array([0.0, y])

    @property
    def area(self) -> float:
        if self.shape == "circle":
            return math.pi * self.sizes[0] ** 2
        radius, length = self.sizes
        return math.pi * radius ** 2 / 2 + 2 * radius * length


def centroid_area(hull: np.ndarray) -> Tuple[float, np.ndarray]:
    """Area and centroid of a closed counterclockwise polygon (Green's theorem).

    Raises:
        RbdError: degenerate or clockwise polygon
    """
    pts = np.asarray(hull, dtype=float)
    if len(pts) > 1 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(pts) < 3:
        raise RbdError(f"A polygon needs at least 3 vertices, got {len(pts)}")
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    extent = np.max(pts.max(axis=0) - pts.min(axis=0))
    if area <= 1e-14 * extent ** 2:
        raise RbdError(f"Degenerate or clockwise polygon (signed area {area:.3e})")
    cx = np.sum((x + xn) * cross) / (6 * area)
    cy = np.sum((y + yn) * cross) / (6 * area)
    return float(area), np.array([cx, cy])


# ============== PROBLEM ==============

@dataclass(frozen=True)
class RbdSettings:
    """Minimizer tolerances. tol_g and tol_f are in temperature and energy units."""
    tol_g: float = 1e-6
    tol_f: float = 1e-10
    step_tol: float = 1e-6
    max_outer: int = 10
    max_inner: int = 200
    fd_step: float = 1e-6


@dataclass(frozen=True, eq=False)
class RbdProblem:
    body: BodyGeometry
    gravity: Tuple[float, float]
    melting_temperature: float
    sampler: Sampler
    max_change: Tuple[float, float, float]
    settings: RbdSettings = field(default_factory=RbdSettings)

    def __post_init__(self):
        gravity = tuple(float(v) for v in self.gravity)
        if len(gravity) != 2 or not all(math.isfinite(v) for v in gravity):
            raise RbdError(f"gravity must be 2 finite components, got {self.gravity}")
        change = tuple(float(v) for v in self.max_change)
        if len(change) != 3 or any(not v >= 0 for v in change):
            raise RbdError(f"max_change must be 3 non-negative values (theta, r0, r1), got {self.max_change}")
        object.__setattr__(self, "gravity", gravity)
        object.__setattr__(self, "max_change", change)


def _place(body: BodyGeometry, x: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ rotation(x[0]).T + x[1:3]


def hull_points(body: BodyGeometry, s: RigidState) -> np.ndarray:
    """Hull samples of a body placed at state s, shape (N, 2)."""
    return _place(body, s.as_array(), body.reference_hull)


def centroid(body: BodyGeometry, s: RigidState) -> np.ndarray:
    return _place(body, s.as_array(), body.reference_centroid[None, :])[0]


def potential_energy(p: RbdProblem, s: RigidState) -> float:
    """Psi = -b . centroid(s)."""
    return float(-np.dot(p.gravity, centroid(p.body, s)))


def feasibility(p: RbdProblem, s: RigidState) -> np.ndarray:
    """g_k = T(x_k) - T_m at every hull sample; all g_k >= 0 means the body sits in melt."""
    return _constraints(p, s.as_array())


def _constraints(p: RbdProblem, x: np.ndarray) -> np.ndarray:
    values = np.asarray(p.sampler(_place(p.body, x, p.body.reference_hull)), dtype=float)
    return values - p.melting_temperature


# ============== MINIMIZER ==============

class _StateSearch:
    """Augmented-Lagrangian search over the free coordinates of one step."""

    def __init__(self, p: RbdProblem, x0: np.ndarray):
        self.p = p
        self.x0 = x0
        change = np.asarray(p.max_change)
        self.free = change > 0
        self.lower = x0 - change
        self.upper = x0 + change
        norm = float(np.linalg.norm(p.gravity))
        self.direction = np.asarray(p.gravity) / norm if norm > 0 else np.zeros(2)
        self.centroid = p.body.reference_centroid
        self.evaluations = 0

    def full(self, z: np.ndarray) -> np.ndarray:
        x = self.x0.copy()
        x[self.free] = z
        return x

    def objective(self, x: np.ndarray) -> float:
        """Potential per unit gravity magnitude (same minimizers as Psi)."""
        return float(-np.dot(self.direction, rotation(x[0]) @ self.centroid + x[1:3]))

    def constraints(self, x: np.ndarray) -> np.ndarray:
        self.evaluations += 1
        return _constraints(self.p, x)

    def feasible(self, x: np.ndarray) -> bool:
        return bool(self.constraints(x).min() >= -self.p.settings.tol_g)

    def lagrangian(self, z: np.ndarray, lam: np.ndarray, mu: float) -> float:
        x = self.full(z)
        g = self.constraints(x)
        shifted = np.maximum(0.0, lam - mu * g)
        return self.objective(x) + float(np.sum(shifted ** 2 - lam ** 2)) / (2 * mu)

    def gradient(self, z: np.ndarray, lam: np.ndarray, mu: float) -> np.ndarray:
        grad = np.empty_like(z)
        for i in range(len(z)):
            h = self.p.settings.fd_step * max(1.0, abs(z[i]))
            up, down = z.copy(), z.copy()
            up[i] += h
            down[i] -= h
            grad[i] = (self.lagrangian(up, lam, mu) - self.lagrangian(down, lam, mu)) / (2 * h)
        return grad

    def augmented_lagrangian(self, info: Dict) -> np.ndarray:
        settings = self.p.settings
        bounds = list(zip(self.lower[self.free], self.upper[self.free]))
        z = self.x0[self.free].copy()
        lam = np.zeros(len(self.p.body.reference_hull))
        mu = 10.0
        violation = np.inf
        for outer in range(settings.max_outer):
            result = scipy.optimize.minimize(
                self.lagrangian, z, args=(lam, mu), jac=self.gradient, method="L-BFGS-B",
                bounds=bounds, options={"maxiter": settings.max_inner},
            )
            if result.status == 1:
                info["inner_capped"] = True
            z = np.clip(result.x, self.lower[self.free], self.upper[self.free])
            g = self.constraints(self.full(z))
            new_violation = float(np.max(np.maximum(0.0, -g)))
            lam = np.maximum(0.0, lam - mu * g)
            logger.debug("AL outer %d: psi=%.12g violation=%.3e mu=%g", outer,
                         self.objective(self.full(z)), new_violation, mu)
            info["outer_iterations"] = outer + 1
            if new_violation <= settings.tol_g:
                break
            if new_violation > 0.25 * violation:
                mu *= 10.0
            violation = new_violation
        return self.full(z)

    def restore(self, x: np.ndarray) -> np.ndarray:
        """Largest feasible step from x0 toward x (bisection)."""
        if self.feasible(x):
            return x
        good, bad = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (good + bad)
            if self.feasible(self.x0 + mid * (x - self.x0)):
                good = mid
            else:
                bad = mid
        return self.x0 + good * (x - self.x0)

    def polish(self, x: np.ndarray) -> np.ndarray:
        """Compass search: feasible coordinate moves that lower the objective, step halving to step_tol."""
        settings = self.p.settings
        free = np.flatnonzero(self.free)
        step = max(0.25 * float(np.max(np.asarray(self.p.max_change)[free])), settings.step_tol)
        value = self.objective(x)
        while True:
            improved = False
            for i in free:
                for sign in (-1.0, 1.0):
                    candidate = x.copy()
                    candidate[i] = np.clip(x[i] + sign * step, self.lower[i], self.upper[i])
                    if candidate[i] == x[i]:
                        continue
                    trial = self.objective(candidate)
                    if value - trial > settings.tol_f and self.feasible(candidate):
                        x, value, improved = candidate, trial, True
            if improved:
                continue
            if step <= settings.step_tol:
                return x
            step = max(0.5 * step, settings.step_tol)


def minimize_state(p: RbdProblem, s0: RigidState, info: Optional[Dict] = None) -> RigidState:
    """Lowest-potential state reachable within one step's bounds while staying in melt.

    An infeasible start (any hull sample below T_m) is returned unchanged. The
    returned state carries no rate.

    Args:
        p: the placement problem
        s0: start state
        info: optional dict filled with "feasible_start", "outer_iterations",
            "inner_capped" and "evaluations"
    """
    info = {} if info is None else info
    info.update(feasible_start=True, outer_iterations=0, inner_capped=False, evaluations=0)
    x0 = s0.as_array()
    search = _StateSearch(p, x0)
    if search.constraints(x0).min() < 0:
        info["feasible_start"] = False
        logger.info("Body is not fully surrounded by melt; state unchanged")
        return RigidState.from_array(x0)
    if not search.free.any():
        return RigidState.from_array(x0)

    x = search.augmented_lagrangian(info)
    x = search.restore(x)
    x = search.polish(x)
    if search.objective(x) > search.objective(x0):
        x = x0
    info["evaluations"] = search.evaluations
    if info["inner_capped"]:
        logger.warning("Inner minimizer hit its iteration cap; returning best feasible state")
    logger.debug("Minimized state %s -> %s (%d constraint evaluations)", x0, x, search.evaluations)
    return RigidState.from_array(x)


def energy_landscape(p: RbdProblem, s: RigidState, samples: int = 181,
                     r1_span: float = 1.0) -> pd.DataFrame:
    """Slices of Psi through s along theta (one full turn) and along r1.

    Returns:
        DataFrame with columns axis ("theta" or "r1"), value, psi, feasible
    """
    if samples < 2:
        raise ValueError(f"samples must be at least 2, got {samples}")
    rows = []
    for axis, values in (
        ("theta", s.theta + np.linspace(-math.pi, math.pi, samples)),
        ("r1", s.r1 + np.linspace(-r1_span, r1_span, samples)),
    ):
        for value in values:
            state = RigidState(float(value), s.r0, s.r1) if axis == "theta" else RigidState(s.theta, s.r0, float(value))
            rows.append({
                "axis": axis,
                "value": float(value),
                "psi": potential_energy(p, state),
                "feasible": bool(feasibility(p, state).min() >= 0),
            })
    return pd.DataFrame(rows)
