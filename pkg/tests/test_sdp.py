"""
Unit tests for the semidefinite programming layer.
Tests problem indexing, structural validation, the interior-point backend and eigenvalue checks.
"""

import numpy as np
import pytest

from src.sdp import (
    AsymmetricMatrixError,
    SdpProblem,
    SdpStatus,
    SdpStructureError,
    min_eigenvalue,
    solve,
    write_sparse_dump,
)
from src.settings import SolverOptions


def _forced_gamma_problem():
    """max gamma s.t. Q11 = 1, gamma + Q11 = 2 with a 1x1 block."""
    problem = SdpProblem(psd_blocks=[1], free_scalars=1)
    q, gamma = problem.entry_index(0, 0, 0), problem.scalar_index(0)
    problem.add_equality({q: 1.0}, 1.0)
    problem.add_equality({gamma: 1.0, q: 1.0}, 2.0)
    problem.objective = {gamma: 1.0}
    return problem


def test_entry_indexing_is_upper_triangle_row_major():
    """Test global indices over two blocks and the scalars."""
    problem = SdpProblem(psd_blocks=[2, 3], free_scalars=2)
    assert [problem.entry_index(0, i, j) for i, j in [(0, 0), (0, 1), (1, 1)]] == [0, 1, 2]
    assert problem.entry_index(1, 0, 0) == 3
    assert problem.entry_index(1, 2, 1) == problem.entry_index(1, 1, 2) == 7
    assert problem.scalar_index(1) == 10
    assert problem.num_variables == 11


def test_structure_errors_raised_before_solving():
    """Test out-of-range indices and non-finite data."""
    problem = SdpProblem(psd_blocks=[2])
    problem.add_equality({5: 1.0}, 0.0)
    with pytest.raises(SdpStructureError):
        solve(problem)
    bad = SdpProblem(psd_blocks=[0])
    with pytest.raises(SdpStructureError):
        bad.validate()
    nan_rhs = SdpProblem(psd_blocks=[1])
    nan_rhs.add_equality({0: 1.0}, float("nan"))
    with pytest.raises(SdpStructureError):
        solve(nan_rhs)


def test_forced_gamma():
    """Test that the equalities force gamma = 1 and Q11 = 1."""
    solution = solve(_forced_gamma_problem())
    assert solution.status == SdpStatus.OPTIMAL
    assert solution.scalar_values[0] == pytest.approx(1.0, abs=1e-6)
    assert solution.block_values[0][0, 0] == pytest.approx(1.0, abs=1e-6)
    assert solution.objective_value == pytest.approx(1.0, abs=1e-6)


def test_unbounded_gamma():
    """Test max gamma s.t. gamma = Q11, Q11 >= 0."""
    problem = SdpProblem(psd_blocks=[1], free_scalars=1)
    problem.add_equality({problem.scalar_index(0): 1.0, problem.entry_index(0, 0, 0): -1.0}, 0.0)
    problem.objective = {problem.scalar_index(0): 1.0}
    assert solve(problem).status == SdpStatus.UNBOUNDED


def test_infeasible_negative_diagonal():
    """Test Q11 = -1 on a PSD block."""
    problem = SdpProblem(psd_blocks=[2])
    problem.add_equality({problem.entry_index(0, 0, 0): 1.0}, -1.0)
    assert solve(problem).status == SdpStatus.INFEASIBLE


def test_off_diagonal_coefficient_counts_both_positions():
    """Test min trace(Q) s.t. Q12 + Q21 = 2, whose optimum is Q = [[1, 1], [1, 1]]."""
    problem = SdpProblem(psd_blocks=[2])
    problem.add_equality({problem.entry_index(0, 0, 1): 1.0}, 2.0)
    problem.objective = {problem.entry_index(0, 0, 0): -1.0, problem.entry_index(0, 1, 1): -1.0}
    solution = solve(problem)
    assert solution.status == SdpStatus.OPTIMAL
    assert solution.block_values[0] == pytest.approx(np.ones((2, 2)), abs=1e-5)
    assert solution.objective_value == pytest.approx(-2.0, abs=1e-5)


def test_objective_reproduced_from_returned_variables():
    """Test that the reported objective is re-evaluated from block and scalar values."""
    problem = _forced_gamma_problem()
    solution = solve(problem)
    value = problem.evaluate_functional(problem.objective, solution.block_values, solution.scalar_values)
    assert value == pytest.approx(solution.objective_value, abs=1e-8)


def test_redundant_rows_are_harmless():
    """Test duplicated and all-zero equalities in the presolve."""
    problem = _forced_gamma_problem()
    problem.add_equality({problem.entry_index(0, 0, 0): 2.0}, 2.0)
    problem.add_equality({}, 0.0)
    solution = solve(problem)
    assert solution.status == SdpStatus.OPTIMAL
    assert solution.scalar_values[0] == pytest.approx(1.0, abs=1e-6)


def test_inconsistent_zero_row_is_infeasible():
    """Test 0 = 1 detected without iterating."""
    problem = _forced_gamma_problem()
    problem.add_equality({}, 1.0)
    assert solve(problem).status == SdpStatus.INFEASIBLE


def test_iteration_limit_returns_best_iterate():
    """Test that a one-iteration budget reports the limit with block shapes intact."""
    problem = SdpProblem(psd_blocks=[3], free_scalars=1)
    for i in range(3):
        problem.add_equality({problem.entry_index(0, i, i): 1.0}, 1.0)
    problem.add_equality({problem.entry_index(0, 0, 1): 1.0, problem.scalar_index(0): -1.0}, 0.0)
    problem.objective = {problem.scalar_index(0): 1.0}
    solution = solve(problem, SolverOptions(max_iters=1))
    assert solution.status == SdpStatus.ITERATION_LIMIT
    assert solution.block_values[0].shape == (3, 3)


def test_max_correlation_entry():
    """Test max Q12 + Q21 over correlation matrices reaches 2."""
    problem = SdpProblem(psd_blocks=[3], free_scalars=1)
    for i in range(3):
        problem.add_equality({problem.entry_index(0, i, i): 1.0}, 1.0)
    problem.add_equality({problem.entry_index(0, 0, 1): 1.0, problem.scalar_index(0): -1.0}, 0.0)
    problem.objective = {problem.scalar_index(0): 1.0}
    solution = solve(problem)
    assert solution.status == SdpStatus.OPTIMAL
    assert solution.objective_value == pytest.approx(2.0, abs=1e-5)
    assert min_eigenvalue(solution.block_values[0]) > -1e-7


def test_min_eigenvalue():
    """Test identity, a diagonal matrix and a random symmetric matrix."""
    assert min_eigenvalue(np.eye(3)) == pytest.approx(1.0)
    assert min_eigenvalue(np.diag([2.0, -0.5])) == pytest.approx(-0.5)
    rng = np.random.default_rng(0)
    a = rng.standard_normal((20, 20))
    m = (a + a.T) / 2
    assert min_eigenvalue(m) == pytest.approx(np.linalg.eigvalsh(m)[0], abs=1e-8)


def test_min_eigenvalue_rejects_asymmetric():
    """Test asymmetric input beyond tolerance."""
    with pytest.raises(AsymmetricMatrixError):
        min_eigenvalue(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_sparse_dump(tmp_path):
    """Test the plain-text dump layout."""
    path = tmp_path / "problem.txt"
    write_sparse_dump(_forced_gamma_problem(), path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "blocks 1"
    assert lines[1] == "free 1"
    assert lines[3].startswith("eq 0 rhs 1.0")


def test_cvxpy_backend_matches_ipm():
    """Test the external backend on the forced-gamma problem."""
    pytest.importorskip("cvxpy")
    solution = solve(_forced_gamma_problem(), SolverOptions(backend="cvxpy"))
    assert solution.status == SdpStatus.OPTIMAL
    assert solution.scalar_values[0] == pytest.approx(1.0, abs=1e-5)
