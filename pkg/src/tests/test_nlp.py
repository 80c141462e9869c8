"""Tests for the NLP backend."""

import numpy as np
import pytest

from mompc_lab.constants import SolveStatus
from mompc_lab.exceptions import InvalidProblemError
from mompc_lab.nlp import NlpProblem, SolverConfig, check_kkt, fd_gradient, fd_jacobian, solve, solve_multistart


class TestFiniteDifferences:
    """Tests for the central-difference helpers."""

    def test_gradient_of_quadratic(self):
        """Test the gradient of a quadratic is exact up to rounding."""
        grad = fd_gradient(lambda x: float(x @ x), np.array([1.0, -2.0]))

        np.testing.assert_allclose(grad, [2.0, -4.0], atol=1e-6)

    def test_jacobian_of_linear_map(self):
        """Test the Jacobian of a linear map is its matrix."""
        a = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])

        np.testing.assert_allclose(fd_jacobian(lambda x: a @ x, np.zeros(2)), a, atol=1e-8)

    def test_gradient_matches_analytic(self):
        """Test central differences of a transcendental function match its analytic gradient."""

        def fun(x):
            return float(np.exp(x[0]) * np.sin(x[1]) + x[0] * x[2] ** 3)

        x = np.array([0.3, -1.2, 2.0])
        analytic = np.array(
            [np.exp(x[0]) * np.sin(x[1]) + x[2] ** 3, np.exp(x[0]) * np.cos(x[1]), 3 * x[0] * x[2] ** 2]
        )

        np.testing.assert_allclose(fd_gradient(fun, x), analytic, rtol=1e-7, atol=1e-8)


class TestNlpProblem:
    """Tests for NlpProblem construction."""

    def test_crossed_bounds_rejected(self):
        """Test a lower bound above the upper bound is rejected at construction."""
        with pytest.raises(InvalidProblemError, match="lower bound exceeds upper bound"):
            NlpProblem(dim=1, objective=lambda x: 0.0, lower=np.array([1.0]), upper=np.array([0.0]))

    def test_guess_is_clamped(self):
        """Test an initial guess outside the box is clamped."""
        problem = NlpProblem(
            dim=1, objective=lambda x: 0.0, lower=np.array([0.0]), upper=np.array([1.0]), initial_guess=np.array([5.0])
        )

        np.testing.assert_array_equal(problem.initial_guess, [1.0])

    def test_default_guess_inside_box(self):
        """Test the default guess is zero clipped into the box."""
        problem = NlpProblem(dim=2, objective=lambda x: 0.0, lower=np.array([1.0, -1.0]), upper=np.array([2.0, 1.0]))

        np.testing.assert_array_equal(problem.initial_guess, [1.0, 0.0])


class TestSolve:
    """Tests for solve."""

    def test_active_inequality(self):
        """Test min x^2 s.t. x >= 1."""
        problem = NlpProblem(
            dim=1,
            objective=lambda x: float(x[0] ** 2),
            inequalities=lambda x: np.array([x[0] - 1.0]),
            initial_guess=np.array([3.0]),
        )

        report = solve(problem, SolverConfig())

        assert report.status is SolveStatus.OPTIMAL
        assert report.x_star[0] == pytest.approx(1.0, abs=1e-6)
        assert report.f_star == pytest.approx(1.0, abs=1e-6)
        assert report.ineq_multipliers[0] == pytest.approx(2.0, abs=1e-4)

    def test_equality_projection(self):
        """Test projecting (2, 3) onto the line x + y = 1."""
        problem = NlpProblem(
            dim=2,
            objective=lambda x: float((x[0] - 2.0) ** 2 + (x[1] - 3.0) ** 2),
            equalities=lambda x: np.array([x[0] + x[1] - 1.0]),
        )

        report = solve(problem, SolverConfig())

        assert report.ok
        np.testing.assert_allclose(report.x_star, [0.0, 1.0], atol=1e-6)

    def test_analytic_derivatives_match_finite_differences(self):
        """Test supplying exact derivatives reaches the same point as the finite-difference fallback."""
        kwargs = dict(
            dim=2,
            objective=lambda x: float((x[0] - 2.0) ** 2 + 4.0 * (x[1] + 1.0) ** 2),
            inequalities=lambda x: np.array([1.0 - x[0] ** 2 - x[1] ** 2]),
            initial_guess=np.array([0.1, 0.1]),
        )
        plain = NlpProblem(**kwargs)
        exact = NlpProblem(
            **kwargs,
            objective_grad=lambda x: np.array([2.0 * (x[0] - 2.0), 8.0 * (x[1] + 1.0)]),
            ineq_jac=lambda x: np.array([[-2.0 * x[0], -2.0 * x[1]]]),
        )

        fd_report = solve(plain, SolverConfig())
        exact_report = solve(exact, SolverConfig())

        assert fd_report.ok and exact_report.ok
        np.testing.assert_allclose(exact_report.x_star, fd_report.x_star, atol=1e-6)
        assert np.linalg.norm(exact_report.x_star) == pytest.approx(1.0, abs=1e-7)

    def test_violation_never_grows_on_a_convex_problem(self):
        """Test the outer iterations shrink the equality violation monotonically."""
        problem = NlpProblem(
            dim=2,
            objective=lambda x: float((x[0] - 2.0) ** 2 + (x[1] - 3.0) ** 2),
            equalities=lambda x: np.array([x[0] + x[1] - 1.0]),
        )

        report = solve(problem, SolverConfig(penalty_init=1.0))

        history = np.array(report.violation_history)
        assert report.ok
        assert history.size >= 2
        assert np.all(np.diff(history) <= 1e-10)

    def test_contradictory_equalities(self):
        """Test x = 1 and x = -1 together are reported infeasible."""
        problem = NlpProblem(
            dim=1,
            objective=lambda x: 0.0,
            equalities=lambda x: np.array([x[0] - 1.0, x[0] + 1.0]),
        )

        report = solve(problem, SolverConfig(max_outer=30))

        assert report.status is SolveStatus.INFEASIBLE
        assert report.constraint_violation > 0.5

    def test_box_only(self):
        """Test a bound-constrained problem stops at the bound."""
        problem = NlpProblem(
            dim=1, objective=lambda x: float(-x[0]), lower=np.array([0.0]), upper=np.array([2.0])
        )

        report = solve(problem, SolverConfig())

        assert report.ok
        assert report.x_star[0] == pytest.approx(2.0)

    def test_non_finite_objective(self):
        """Test a NaN objective ends the solve with a numerical failure."""
        problem = NlpProblem(dim=1, objective=lambda x: float("nan"), initial_guess=np.array([0.5]))

        report = solve(problem, SolverConfig())

        assert report.status is SolveStatus.NUMERICAL_FAILURE
        assert report.x_star[0] == pytest.approx(0.5)

    def test_multistart_keeps_best(self):
        """Test multistart finds the global minimum of a double well."""
        problem = NlpProblem(
            dim=1,
            objective=lambda x: float((x[0] ** 2 - 1.0) ** 2 + 0.3 * x[0]),
            lower=np.array([-2.0]),
            upper=np.array([2.0]),
            initial_guess=np.array([1.5]),
        )

        report = solve_multistart(problem, SolverConfig(), n_starts=8, seed=1)

        assert report.ok
        assert report.x_star[0] < 0.0


class TestCheckKkt:
    """Tests for check_kkt."""

    def test_unconstrained_vertex(self):
        """Test the vertex of an unconstrained quadratic has zero residual."""
        problem = NlpProblem(dim=1, objective=lambda x: float((x[0] - 1.0) ** 2))

        residual, violation = check_kkt(problem, [1.0], SolverConfig())

        assert residual == pytest.approx(0.0, abs=1e-8)
        assert violation == 0.0

    def test_active_inequality_with_multiplier(self):
        """Test an active constraint with the right multiplier meets the tolerance."""
        problem = NlpProblem(
            dim=1, objective=lambda x: float(x[0] ** 2), inequalities=lambda x: np.array([x[0] - 1.0])
        )

        residual, _ = check_kkt(problem, [1.0], SolverConfig(), ineq_multipliers=np.array([2.0]), eq_multipliers=np.zeros(0))

        assert residual <= 1e-6

    def test_interior_point_residual(self):
        """Test the residual of min x^2 at an interior point equals the gradient."""
        problem = NlpProblem(dim=1, objective=lambda x: float(x[0] ** 2))

        residual, _ = check_kkt(problem, [0.5], SolverConfig())

        assert residual == pytest.approx(1.0, abs=1e-6)
