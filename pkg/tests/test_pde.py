import math
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp

from modules.assembly import FeSpace, build_mass
from modules.config import build_problem, load_config
from modules.exprfn import ConstantFunction, ParsedFunction
from modules.linsolve import SolverSettings, direct_solve_dense
from modules.mesh import GridSpec, generate, refine_global
from modules.pde import (
    AmbientProblem, BoundaryCondition, contact_temperature, global_peclet, ice_params, local_peclet,
    peclet_report, run_unsteady, solve_steady, stefan_equilibrium_velocity, stefan_film_problem,
    stefan_flux, stefan_number, stefan_velocity, steady_boundary_temperature, step_theta, theta_system,
)


def _donea(configs, name):
    problem = build_problem(load_config(configs / name))
    return run_unsteady(problem)


def _heat_problem(cycles=5, step_size=1e-3, end_time=0.1, theta=0.5):
    mesh = refine_global(generate(GridSpec("hyper_cube", (0.0, 1.0))), cycles)
    zero = BoundaryCondition("strong", ConstantFunction(0.0))
    return AmbientProblem(
        space=FeSpace(mesh),
        diffusivity=ConstantFunction(1.0),
        boundary_conditions={0: zero, 1: zero},
        initial_values=ParsedFunction("sin(pi*x)", "pi=3.141592653589793"),
        theta=theta,
        step_size=step_size,
        end_time=end_time,
        solver=SolverSettings(tolerance=1e-12),
    )


def test_donea_huerta_stays_non_negative(configs):
    final, history = _donea(configs, "donea_huerta.cfg")
    assert len(history) == 121
    assert history["time"].iloc[-1] == 1.2
    assert final.values.min() >= -1e-8
    assert final.values[-1] == 0.0
    assert history["iterations"].iloc[1:].gt(0).all()


def test_donea_huerta_peclet(configs):
    report = peclet_report(build_problem(load_config(configs / "donea_huerta.cfg")))
    assert report["max_local_peclet"] == pytest.approx(0.625)
    assert report["max_global_peclet"] == pytest.approx(10.0)


def test_high_peclet_galerkin_oscillates(configs):
    final, _ = _donea(configs, "donea_huerta_pe6.cfg")
    u = final.values
    assert u.max() > 1.2
    turns = np.count_nonzero(np.diff(np.sign(np.diff(u))) != 0)
    assert turns >= 2


def test_outflow_refinement_damps_the_overshoot(configs):
    uniform, _ = _donea(configs, "donea_huerta_pe6.cfg")
    refined, _ = _donea(configs, "donea_huerta_refined.cfg")
    assert refined.mesh.n_cells == 11
    assert refined.values.max() < uniform.values.max()
    assert refined.values.min() >= -1e-6


def test_heat_equation_decay():
    final, _ = run_unsteady(_heat_problem())
    mid = int(np.argmin(np.abs(final.mesh.nodes[:, 0] - 0.5)))
    assert final.values[mid] == pytest.approx(math.exp(-math.pi ** 2 * 0.1), rel=2e-3)


def test_run_lands_on_end_time():
    problem = _heat_problem(cycles=3, step_size=0.1, end_time=0.25)
    seen = []
    _, history = run_unsteady(problem, [lambda step, t, f: seen.append((step, t))])
    assert history["time"].tolist() == pytest.approx([0.0, 0.1, 0.2, 0.25])
    assert history["time"].iloc[-1] == 0.25
    assert [s for s, _ in seen] == [0, 1, 2, 3]


def test_step_theta_matches_first_step():
    problem = _heat_problem(cycles=3, step_size=0.01, end_time=0.01)
    final, _ = run_unsteady(problem)
    u0 = problem.initial_values(problem.mesh.nodes, 0.0)
    u0[[0, -1]] = 0.0
    np.testing.assert_allclose(step_theta(problem, u0, 0.0, 0.01), final.values, atol=1e-12)


def test_backward_euler_reaches_steady_state():
    mesh = refine_global(generate(GridSpec("hyper_cube", (0.0, 1.0))), 3)
    problem = AmbientProblem(
        space=FeSpace(mesh),
        diffusivity=ConstantFunction(1.0),
        boundary_conditions={0: BoundaryCondition("natural", ConstantFunction(1.0)),
                             1: BoundaryCondition("strong", ConstantFunction(2.0))},
        initial_values=ConstantFunction(0.0),
        theta=1.0,
        step_size=0.5,
        end_time=40.0,
        solver=SolverSettings(tolerance=1e-12),
    )
    x = mesh.nodes[:, 0]
    np.testing.assert_allclose(solve_steady(problem).values, 3.0 - x, atol=1e-9)
    assert steady_boundary_temperature(problem, 0, transient=True) == pytest.approx(3.0, abs=1e-9)


def test_poisson_steady_solve(unit_interval):
    zero = BoundaryCondition("strong", ConstantFunction(0.0))
    problem = AmbientProblem(FeSpace(unit_interval), ConstantFunction(1.0), {0: zero, 1: zero},
                             ConstantFunction(0.0), source=ConstantFunction(2.0),
                             solver=SolverSettings(tolerance=1e-13))
    x = unit_interval.nodes[:, 0]
    np.testing.assert_allclose(solve_steady(problem).values, x * (1 - x), atol=1e-10)


def test_problem_validation(unit_interval):
    zero = BoundaryCondition("strong", ConstantFunction(0.0))
    with pytest.raises(ValueError, match="missing \\[1\\]"):
        AmbientProblem(FeSpace(unit_interval), ConstantFunction(1.0), {0: zero}, ConstantFunction(0.0))
    with pytest.raises(ValueError, match="theta"):
        AmbientProblem(FeSpace(unit_interval), ConstantFunction(1.0), {0: zero, 1: zero},
                       ConstantFunction(0.0), theta=1.5)
    with pytest.raises(ValueError, match="strong' or 'natural"):
        BoundaryCondition("robin", ConstantFunction(0.0))
    problem = _heat_problem(cycles=2)
    with pytest.raises(ValueError, match="end_time"):
        run_unsteady(problem, start_time=1.0)
    with pytest.raises(ValueError, match="Initial values"):
        run_unsteady(AmbientProblem(problem.space, problem.diffusivity, problem.boundary_conditions,
                                    np.zeros(3), end_time=0.1))


def test_peclet_numbers():
    assert local_peclet(1.0, 0.125, 0.1) == pytest.approx(0.625)
    assert local_peclet(1.0, 0.125, 0.01) == pytest.approx(6.25)
    assert global_peclet(1.0, 1.0, 0.01) == pytest.approx(100.0)
    with pytest.raises(ValueError):
        local_peclet(1.0, 0.1, 0.0)


def test_stefan_condition_for_ice():
    params = ice_params()
    assert params.diffusivity == pytest.approx(1.1060175e-6, rel=1e-5)
    assert stefan_flux(params, 0.0, (0.0,)) == pytest.approx(0.28999, rel=1e-4)
    v_star = stefan_velocity(params, (0.0,))
    assert v_star == pytest.approx(1.83200e-4, rel=1e-4)
    assert stefan_flux(params, v_star, (0.0,)) == pytest.approx(0.0, abs=1e-12)
    assert stefan_flux(params, 2 * v_star, (0.0,)) < 0
    assert stefan_number(2110.0, 1.0, 0.0, 3.34e6) == pytest.approx(6.317e-4, rel=1e-3)
    with pytest.raises(ValueError):
        stefan_number(2110.0, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        ice_params(film_thickness=0.0)


def test_stefan_flux_with_variable_film():
    params = ice_params(film_thickness=1.0)
    params = replace(params, delta=lambda x: 1e-6 * (1 + x[:, 0] ** 2))
    h = stefan_flux(params, 0.0, np.array([[0.0], [1.0]]))
    assert h[0] == pytest.approx(2 * h[1])


def test_melt_film_equilibrium():
    params = ice_params()
    v_eq = stefan_equilibrium_velocity(params, -10.0, 0.05)
    assert v_eq == pytest.approx(1.8205e-4, rel=2e-3)
    assert contact_temperature(stefan_film_problem(params, v_eq, -10.0, 0.05)) == pytest.approx(0.0, abs=0.05)


def test_melt_film_contact_band():
    # flux that would warm solid arriving at -9.8 to T_m; here it arrives at -10,
    # so the contact settles near -0.2
    params = ice_params()
    v = stefan_equilibrium_velocity(params, -9.8, 0.05)
    contact = contact_temperature(stefan_film_problem(params, v, -10.0, 0.05))
    hot = contact_temperature(stefan_film_problem(params, v, -10.0, 0.05, flux_scale=1.05))
    cold = contact_temperature(stefan_film_problem(params, v, -10.0, 0.05, flux_scale=0.95))
    assert -0.5 <= contact <= 0.0
    assert hot > 0.0
    assert cold < -0.5


def test_contact_temperature_falls_with_velocity():
    params = ice_params()
    temps = [contact_temperature(stefan_film_problem(params, v, -10.0, 0.05)) for v in (1.6e-4, 1.82e-4, 2.0e-4)]
    assert temps[0] > temps[1] > temps[2]


def test_transient_film_settles(configs):
    problem = build_problem(load_config(configs / "stefan_film.cfg"))
    steady = steady_boundary_temperature(problem, 0)
    settled = steady_boundary_temperature(problem, 0, transient=True)
    assert settled == pytest.approx(steady, abs=0.05)
    assert steady == pytest.approx(0.43, abs=0.05)


def test_scalar_theta_step():
    one = sp.csr_matrix([[1.0]])
    system = theta_system(one, one, np.array([1.0]), np.zeros(1), np.zeros(1), dt=1.0, theta=1.0)
    assert direct_solve_dense(system.matrix.toarray(), system.rhs)[0] == pytest.approx(0.5)


def test_crank_nicolson_is_exact_for_linear_in_time(unit_interval):
    # u = t x with v = 1, alpha = 1: s = x + t, -alpha u_x(0) = -t, u(1) = t
    problem = AmbientProblem(
        space=FeSpace(unit_interval),
        diffusivity=ConstantFunction(1.0),
        boundary_conditions={0: BoundaryCondition("natural", ParsedFunction("-t")),
                             1: BoundaryCondition("strong", ParsedFunction("t"))},
        initial_values=ConstantFunction(0.0),
        velocity=ConstantFunction(1.0),
        source=ParsedFunction("x + t"),
        theta=0.5,
        step_size=0.1,
        end_time=1.0,
        solver=SolverSettings(tolerance=1e-13),
    )
    x = unit_interval.nodes[:, 0]
    worst = []
    run_unsteady(problem, [lambda step, t, f: worst.append(np.abs(f.values - t * x).max())])
    assert len(worst) == 11
    assert max(worst) < 1e-10


@pytest.mark.parametrize("theta", [0.5, 1.0])
def test_insulated_domain_conserves_heat(unit_square, theta):
    insulated = BoundaryCondition("natural", ConstantFunction(0.0))
    problem = AmbientProblem(
        space=FeSpace(unit_square),
        diffusivity=ConstantFunction(1.0),
        boundary_conditions={b: insulated for b in unit_square.boundary_ids},
        initial_values=ParsedFunction("x^2 + y"),
        theta=theta,
        step_size=0.01,
        end_time=0.2,
        solver=SolverSettings(tolerance=1e-13),
    )
    mass = build_mass(problem.space)
    totals = []
    final, _ = run_unsteady(problem, [lambda step, t, f: totals.append(float(np.sum(mass @ f.values)))])
    np.testing.assert_allclose(totals, totals[0], rtol=0, atol=1e-10)
    assert final.values.max() - final.values.min() < 1.0


@pytest.mark.parametrize("step_size", [0.05, 0.2])
def test_backward_euler_keeps_dirichlet_bounds(unit_interval, step_size):
    # consistent mass needs dt of order h^2 or more; at dt = 1e-3 and h = 1/8 the
    # first steps undershoot below 0
    problem = AmbientProblem(
        space=FeSpace(unit_interval),
        diffusivity=ConstantFunction(1.0),
        boundary_conditions={0: BoundaryCondition("strong", ConstantFunction(1.0)),
                             1: BoundaryCondition("strong", ConstantFunction(0.0))},
        initial_values=ConstantFunction(0.0),
        theta=1.0,
        step_size=step_size,
        end_time=1.0,
        solver=SolverSettings(tolerance=1e-13),
    )
    _, history = run_unsteady(problem)
    assert history["min"].min() >= -1e-10
    assert history["max"].max() <= 1.0 + 1e-10
