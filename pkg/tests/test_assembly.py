import numpy as np
import pytest

from modules.assembly import (
    FeSpace, SparseSystem, apply_dirichlet_lifting, build_convection_diffusion, build_mass,
    build_rhs, cell_quadrature, dense_oracle,
)
from modules.errors import AssemblyError
from modules.exprfn import ConstantFunction, ParsedFunction
from modules.linsolve import direct_solve_dense
from modules.mesh import Mesh


def test_mass_sums_to_area(unit_interval, unit_square, shell):
    assert build_mass(FeSpace(unit_interval)).sum() == pytest.approx(1.0)
    assert build_mass(FeSpace(unit_square)).sum() == pytest.approx(1.0)
    assert build_mass(FeSpace(shell)).sum() == pytest.approx(shell.cell_measures.sum())


def test_constants_are_in_the_kernel(unit_square):
    ck = build_convection_diffusion(FeSpace(unit_square), ConstantFunction([1.0, -2.0]), ConstantFunction(0.5))
    np.testing.assert_allclose(ck @ np.ones(unit_square.n_nodes), 0.0, atol=1e-13)


def test_diffusion_is_symmetric(shell):
    k = build_convection_diffusion(FeSpace(shell), None, ParsedFunction("1 + x^2"))
    assert abs(k - k.T).max() < 1e-13


def test_matches_dense_oracle(shell):
    space = FeSpace(shell)
    velocity = ParsedFunction("y; -x")
    diffusivity = ParsedFunction("1 + 0.1*x*y")
    mass, ck = dense_oracle(space, velocity, diffusivity)
    np.testing.assert_allclose(build_mass(space).toarray(), mass, atol=1e-13)
    np.testing.assert_allclose(build_convection_diffusion(space, velocity, diffusivity).toarray(), ck, atol=1e-13)


def test_rhs_sums(unit_square):
    space = FeSpace(unit_square)
    assert build_rhs(space, ConstantFunction(1.0)).sum() == pytest.approx(1.0)
    f = build_rhs(space, ConstantFunction(1.0), [(0, ConstantFunction(1.0)), (3, ParsedFunction("x"))])
    assert f.sum() == pytest.approx(2.5)
    assert build_rhs(space, None).sum() == 0.0


def test_poisson_is_nodally_exact(unit_interval):
    space = FeSpace(unit_interval)
    system = SparseSystem(build_convection_diffusion(space, None, ConstantFunction(1.0)),
                          build_rhs(space, ConstantFunction(2.0)))
    system = apply_dirichlet_lifting(system, ConstantFunction(0.0), [0, 1], 0.0, unit_interval)
    u = system.recover(direct_solve_dense(system.matrix.toarray(), system.rhs))
    x = unit_interval.nodes[:, 0]
    np.testing.assert_allclose(u, x * (1 - x), atol=1e-14)


def test_lifting_recovers_prescribed_values(unit_square):
    space = FeSpace(unit_square)
    system = SparseSystem(build_convection_diffusion(space, None, ConstantFunction(1.0)), np.zeros(space.n_dofs))
    system = apply_dirichlet_lifting(system, ParsedFunction("x"), [0, 2], 0.0, unit_square, neumann_ids=[1, 3])
    u = system.recover(direct_solve_dense(system.matrix.toarray(), system.rhs))
    np.testing.assert_allclose(u, unit_square.nodes[:, 0], atol=1e-13)
    assert len(system.dirichlet_dofs) == 10


def test_assembly_errors(unit_square):
    space = FeSpace(unit_square)
    system = SparseSystem(build_mass(space), np.zeros(space.n_dofs))
    with pytest.raises(AssemblyError, match="both Dirichlet and Neumann"):
        apply_dirichlet_lifting(system, ConstantFunction(0.0), [0], 0.0, unit_square, neumann_ids=[0])
    with pytest.raises(AssemblyError, match="positive"):
        build_convection_diffusion(space, None, ConstantFunction(0.0))
    with pytest.raises(AssemblyError, match="components"):
        build_convection_diffusion(space, ConstantFunction(1.0), ConstantFunction(1.0))
    with pytest.raises(AssemblyError, match="Non-finite"):
        build_rhs(space, _nan_source)


def _nan_source(points, t):
    return np.full(len(points), np.nan)


def test_clockwise_cell_is_rejected():
    nodes = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]])
    mesh = Mesh(2, nodes, np.array([[0, 1, 2, 3]]), {0: np.array([[0, 1]])}, {0: np.array([0])})
    with pytest.raises(AssemblyError, match="Degenerate cell 0"):
        cell_quadrature(mesh)
