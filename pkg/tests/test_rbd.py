import math

import numpy as np
import pytest

from modules.errors import RbdError
from modules.rbd import (
    BodyGeometry, RbdProblem, RbdSettings, RigidState, centroid, centroid_area, energy_landscape,
    feasibility, hull_points, minimize_state, potential_energy,
)


def melt_disc(points):
    """Melt inside |x| < 2, solid outside (T_m = 0)."""
    return 4.0 - np.sum(points ** 2, axis=1)


def all_liquid(points):
    return np.ones(len(points))


def all_solid(points):
    return -np.ones(len(points))


def _problem(sampler, max_change, body=None, gravity=(0.0, -1.0)):
    return RbdProblem(body or BodyGeometry("circle", (1.0,)), gravity, 0.0, sampler, max_change)


def test_rigid_state():
    s = RigidState.from_array([0.1, 0.2, 0.3], rate=[1, 2, 3])
    np.testing.assert_array_equal(s.as_array(), [0.1, 0.2, 0.3])
    assert s.rate == (1.0, 2.0, 3.0)
    with pytest.raises(RbdError, match="finite"):
        RigidState(math.nan, 0.0, 0.0)
    with pytest.raises(RbdError, match="3 components"):
        RigidState(0.0, 0.0, 0.0, rate=(1.0, 2.0))


@pytest.mark.parametrize("shape, sizes, samples", [
    ("square", (1.0,), 32),
    ("circle", (1.0, 2.0), 32),
    ("sphere_cylinder", (1.0, -2.0), 32),
    ("circle", (1.0,), 4),
])
def test_invalid_body(shape, sizes, samples):
    with pytest.raises(RbdError):
        BodyGeometry(shape, sizes, samples)


def test_circle_geometry():
    body = BodyGeometry("circle", (2.0,))
    hull = body.reference_hull
    assert hull.shape == (32, 2)
    np.testing.assert_allclose(hull[0], [0.0, -2.0], atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(hull, axis=1), 2.0)
    assert body.perimeter == pytest.approx(4 * math.pi)
    assert body.area == pytest.approx(4 * math.pi)
    area, c = centroid_area(hull)
    assert area == pytest.approx(16 * 4 * math.sin(math.pi / 16))
    np.testing.assert_allclose(c, 0.0, atol=1e-14)


def test_sphere_cylinder_geometry():
    body = BodyGeometry("sphere_cylinder", (1.0, 2.0), hull_samples=512)
    assert body.perimeter == pytest.approx(math.pi + 6.0)
    assert body.area == pytest.approx(math.pi / 2 + 4.0)
    outline = body.outline(np.array([0.0, math.pi / 2, math.pi / 2 + 2.0, math.pi / 2 + 4.0, math.pi + 6.0]))
    np.testing.assert_allclose(outline, [[0, -1], [1, 0], [1, 2], [-1, 2], [0, -1]], atol=1e-12)
    area, c = centroid_area(body.reference_hull)
    assert area == pytest.approx(body.area, rel=1e-3)
    np.testing.assert_allclose(c, body.reference_centroid, atol=1e-3)
    assert body.reference_centroid[1] == pytest.approx((4.0 - 2 / 3) / (math.pi / 2 + 4.0))


def test_centroid_area():
    square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    area, c = centroid_area(square)
    assert area == pytest.approx(1.0)
    np.testing.assert_allclose(c, [0.5, 0.5])
    area, _ = centroid_area(np.vstack([square, square[:1]]))
    assert area == pytest.approx(1.0)
    with pytest.raises(RbdError, match="clockwise"):
        centroid_area(square[::-1])
    with pytest.raises(RbdError, match="clockwise"):
        centroid_area(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
    with pytest.raises(RbdError, match="at least 3"):
        centroid_area(square[:2])


def test_placement_and_energy():
    body = BodyGeometry("sphere_cylinder", (1.0, 2.0))
    s = RigidState(math.pi, 0.5, -1.0)
    yc = body.reference_centroid[1]
    np.testing.assert_allclose(centroid(body, s), [0.5, -1.0 - yc], atol=1e-14)
    np.testing.assert_allclose(hull_points(body, s)[0], [0.5, 0.0], atol=1e-14)
    p = RbdProblem(body, (0.0, -9.81), 0.0, all_liquid, (0.1, 0.1, 0.1))
    assert potential_energy(p, s) == pytest.approx(9.81 * (-1.0 - yc))
    assert feasibility(p, s).shape == (32,)


def test_problem_validation():
    with pytest.raises(RbdError, match="gravity"):
        _problem(all_liquid, (0.1, 0.1, 0.1), gravity=(0.0, 1.0, 0.0))
    with pytest.raises(RbdError, match="max_change"):
        _problem(all_liquid, (0.1, -0.1, 0.1))
    with pytest.raises(RbdError, match="max_change"):
        _problem(all_liquid, (0.1, 0.1))


def test_body_sinks_to_the_bottom_of_its_melt():
    p = _problem(melt_disc, (math.pi / 16, 0.5, 1.5))
    info = {}
    s = minimize_state(p, RigidState(0.0, 0.0, 0.0), info)
    assert -1.01 <= s.r1 <= -0.99
    assert abs(s.r0) < 0.05
    assert info["feasible_start"]
    assert info["evaluations"] > 0
    assert feasibility(p, s).min() >= -p.settings.tol_g
    assert s.rate is None


def test_liquid_surroundings_move_to_the_bound():
    p = _problem(all_liquid, (0.0, 0.0, 0.5))
    s = minimize_state(p, RigidState(0.2, 0.1, 1.0))
    assert s.r1 == pytest.approx(0.5, abs=1e-12)
    assert (s.theta, s.r0) == (0.2, 0.1)
    p = _problem(all_liquid, (0.0, 0.3, 0.0), gravity=(2.0, 0.0))
    assert minimize_state(p, RigidState(0.0, 0.0, 0.0)).r0 == pytest.approx(0.3, abs=1e-12)


def test_body_balanced_on_its_nose_tips_over():
    body = BodyGeometry("sphere_cylinder", (1.0, 2.0))
    p = _problem(all_liquid, (math.pi / 8, 0.0, 0.0), body=body)
    s = minimize_state(p, RigidState(0.0, 0.0, 0.0))
    assert abs(s.theta) == pytest.approx(math.pi / 8)
    assert potential_energy(p, s) < potential_energy(p, RigidState(0.0, 0.0, 0.0))


def test_infeasible_start_is_returned_unchanged():
    info = {}
    s0 = RigidState(0.1, 0.2, 0.3, rate=(1.0, 0.0, 0.0))
    s = minimize_state(_problem(all_solid, (0.1, 0.1, 0.1)), s0, info)
    np.testing.assert_array_equal(s.as_array(), s0.as_array())
    assert not info["feasible_start"]
    assert info["outer_iterations"] == 0


def test_frozen_state_is_returned_unchanged():
    s = minimize_state(_problem(all_liquid, (0.0, 0.0, 0.0)), RigidState(0.0, 1.0, 2.0))
    assert (s.theta, s.r0, s.r1) == (0.0, 1.0, 2.0)


def test_settings_are_used():
    settings = RbdSettings(step_tol=1e-3, max_outer=2)
    p = RbdProblem(BodyGeometry("circle", (1.0,)), (0.0, -1.0), 0.0, melt_disc, (0.0, 0.0, 1.5), settings)
    info = {}
    s = minimize_state(p, RigidState(0.0, 0.0, 0.0), info)
    assert info["outer_iterations"] <= 2
    assert -1.01 <= s.r1 <= -0.99


def test_energy_landscape():
    p = _problem(melt_disc, (0.1, 0.1, 0.1))
    table = energy_landscape(p, RigidState(0.0, 0.0, 0.0), samples=5, r1_span=1.2)
    assert list(table.columns) == ["axis", "value", "psi", "feasible"]
    assert len(table) == 10
    theta = table[table["axis"] == "theta"]
    np.testing.assert_allclose(theta["psi"], 0.0, atol=1e-15)
    r1 = table[table["axis"] == "r1"]
    np.testing.assert_allclose(r1["value"], [-1.2, -0.6, 0.0, 0.6, 1.2], atol=1e-15)
    np.testing.assert_allclose(r1["psi"], r1["value"])
    assert r1["feasible"].tolist() == [False, True, True, True, False]
    with pytest.raises(ValueError, match="samples"):
        energy_landscape(p, RigidState(0.0, 0.0, 0.0), samples=1)


def test_centroid_matches_fan_triangulation():
    hull = BodyGeometry("sphere_cylinder", (0.7, 1.9), hull_samples=40).reference_hull
    a, b, c = hull[0], hull[1:-1], hull[2:]
    cross = (b[:, 0] - a[0]) * (c[:, 1] - a[1]) - (b[:, 1] - a[1]) * (c[:, 0] - a[0])
    areas = 0.5 * cross
    centers = (a + b + c) / 3
    area, center = centroid_area(hull)
    assert area == pytest.approx(areas.sum(), abs=1e-12)
    np.testing.assert_allclose(center, (areas[:, None] * centers).sum(axis=0) / areas.sum(), atol=1e-12)


def test_minimizer_matches_grid_search():
    body = BodyGeometry("circle", (1.0,))
    p = _problem(melt_disc, (0.0, 0.5, 1.5), body=body)
    r0, r1 = np.meshgrid(np.arange(-50, 51) * 0.01, np.arange(-150, 151) * 0.01, indexing="ij")
    offsets = np.stack([r0.ravel(), r1.ravel()], axis=1)
    points = body.reference_hull[None, :, :] + offsets[:, None, :]
    feasible = melt_disc(points.reshape(-1, 2)).reshape(len(offsets), -1).min(axis=1) >= 0.0
    grid_best = offsets[feasible, 1].min()
    found = potential_energy(p, minimize_state(p, RigidState(0.0, 0.0, 0.0)))
    assert grid_best - 0.01 - 1e-5 <= found <= grid_best + 1e-9
