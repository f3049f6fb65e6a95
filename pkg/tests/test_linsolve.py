import numpy as np
import pytest
import scipy.sparse as sp

from modules.errors import SolverError
from modules.linsolve import bicgstab_solve, cg_solve, direct_solve_dense


def _laplacian(n: int) -> sp.csr_matrix:
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsr()


def test_cg_matches_dense_solve():
    a = _laplacian(40)
    b = np.linspace(1.0, 2.0, 40)
    info = {}
    x = cg_solve(a, b, tol=1e-12, info=info)
    np.testing.assert_allclose(x, np.linalg.solve(a.toarray(), b), rtol=1e-9)
    assert 0 < info["iterations"] <= 80
    assert info["residual"] <= 1e-12


def test_jacobi_preconditioned_cg():
    a = _laplacian(30) + sp.diags(np.linspace(0.0, 10.0, 30))
    b = np.ones(30)
    x = cg_solve(a, b, tol=1e-12, jacobi=True)
    np.testing.assert_allclose(a @ x, b, atol=1e-9)


def test_bicgstab_nonsymmetric():
    n = 50
    a = (_laplacian(n) + sp.diags([0.4 * np.ones(n - 1), -0.4 * np.ones(n - 1)], [-1, 1])).tocsr()
    b = np.sin(np.arange(n))
    info = {}
    x = bicgstab_solve(a, b, tol=1e-12, info=info)
    np.testing.assert_allclose(x, direct_solve_dense(a.toarray(), b), rtol=1e-8, atol=1e-10)
    assert info["residual"] <= 1e-11
    x = bicgstab_solve(a, b, tol=1e-12, jacobi=True)
    np.testing.assert_allclose(a @ x, b, atol=1e-10)


def test_zero_rhs_returns_zero():
    info = {}
    for solver in (cg_solve, bicgstab_solve):
        x = solver(_laplacian(5), np.zeros(5), x0=np.ones(5), info=info)
        np.testing.assert_array_equal(x, 0.0)
        assert info["iterations"] == 0


def test_cg_breakdown_on_indefinite_matrix():
    with pytest.raises(SolverError) as info:
        cg_solve(sp.diags([1.0, -1.0]).tocsr(), np.ones(2))
    assert info.value.breakdown


def test_iteration_cap():
    with pytest.raises(SolverError, match="did not converge") as info:
        cg_solve(_laplacian(40), np.ones(40), tol=1e-12, max_iter=1)
    assert info.value.iterations == 1
    assert not info.value.breakdown


def test_singular_dense_matrix():
    with pytest.raises(SolverError, match="singular"):
        direct_solve_dense(np.array([[1.0, 2.0], [2.0, 4.0]]), np.ones(2))
    with pytest.raises(SolverError, match="square"):
        direct_solve_dense(np.ones((2, 3)), np.ones(2))
