"""Smooth constrained NLP backend: augmented Lagrangian over box-constrained L-BFGS-B."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import Bounds, lsq_linear, minimize

from mompc_lab.constants import FD_STEP, SolveStatus
from mompc_lab.exceptions import InvalidProblemError, NumericalFailureError
from mompc_lab.logging import log
from mompc_lab.moo_core import FloatArray

type VectorFunction = Callable[[FloatArray], FloatArray]
type ScalarFunction = Callable[[FloatArray], float]


class SolverConfig(BaseModel):
    """Tolerances and iteration limits of the augmented-Lagrangian solver."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    tol_kkt: float = Field(default=1e-8, gt=0, description="Stationarity tolerance")
    tol_feas: float = Field(default=1e-8, gt=0, description="Constraint violation tolerance")
    max_outer: int = Field(default=50, ge=1, description="Augmented Lagrangian iterations")
    max_inner: int = Field(default=1000, ge=1, description="L-BFGS-B iterations per outer iteration")
    fd_step: float = Field(default=FD_STEP, gt=0, description="Relative central-difference step")
    penalty_init: float = Field(default=10.0, gt=0, description="Initial penalty parameter")
    penalty_growth: float = Field(default=10.0, gt=1, description="Penalty growth factor")
    penalty_max: float = Field(default=1e12, gt=0, description="Penalty at which a stalled run is declared infeasible")
    violation_decrease: float = Field(
        default=0.25, gt=0, lt=1, description="Required violation reduction per outer iteration before the penalty grows"
    )

    @classmethod
    def for_mpc(cls) -> SolverConfig:
        """Looser stationarity tolerance used inside the closed loop."""
        return cls(tol_kkt=1e-6, tol_feas=1e-8)


def fd_gradient(fun: ScalarFunction, x: FloatArray, step: float = FD_STEP) -> FloatArray:
    """Central-difference gradient with a step relative to ``max(1, |x_i|)``."""
    grad = np.empty_like(x)
    work = x.copy()
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        work[i] = x[i] + h
        f_plus = fun(work)
        work[i] = x[i] - h
        f_minus = fun(work)
        work[i] = x[i]
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def fd_jacobian(fun: VectorFunction, x: FloatArray, step: float = FD_STEP) -> FloatArray:
    """Central-difference Jacobian, one row per output component."""
    f0 = np.atleast_1d(fun(x))
    jac = np.empty((f0.size, x.size))
    work = x.copy()
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        work[i] = x[i] + h
        f_plus = np.atleast_1d(fun(work))
        work[i] = x[i] - h
        f_minus = np.atleast_1d(fun(work))
        work[i] = x[i]
        jac[:, i] = (f_plus - f_minus) / (2.0 * h)
    return jac


@dataclass
class NlpProblem:
    """Smooth NLP ``min f(x)`` s.t. ``g(x) >= 0``, ``h(x) = 0``, ``lower <= x <= upper``.

    Derivative hooks are optional; missing ones fall back to central differences.
    """

    dim: int
    objective: ScalarFunction
    lower: FloatArray | None = None
    upper: FloatArray | None = None
    initial_guess: FloatArray | None = None
    inequalities: VectorFunction | None = None
    equalities: VectorFunction | None = None
    objective_grad: VectorFunction | None = None
    ineq_jac: Callable[[FloatArray], FloatArray] | None = None
    eq_jac: Callable[[FloatArray], FloatArray] | None = None
    name: str = "nlp"

    def __post_init__(self):
        lower = np.full(self.dim, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float).copy()
        upper = np.full(self.dim, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float).copy()
        if lower.shape != (self.dim,) or upper.shape != (self.dim,):
            raise InvalidProblemError(f"{self.name}: bounds must have shape ({self.dim},)")
        if np.any(lower > upper):
            bad = np.flatnonzero(lower > upper).tolist()
            raise InvalidProblemError(f"{self.name}: lower bound exceeds upper bound at {bad}")
        self.lower = lower
        self.upper = upper

        if self.initial_guess is None:
            guess = np.clip(np.zeros(self.dim), lower, upper)
        else:
            guess = np.asarray(self.initial_guess, dtype=float).reshape(-1).copy()
            if guess.shape != (self.dim,):
                raise InvalidProblemError(f"{self.name}: initial guess must have shape ({self.dim},)")
            clipped = np.clip(guess, lower, upper)
            if not np.array_equal(clipped, guess):
                log.warning("%s: initial guess outside bounds, clamped", self.name)
            guess = clipped
        self.initial_guess = guess

    def with_initial_guess(self, guess: npt.ArrayLike) -> NlpProblem:
        """Copy of the problem with another initial guess."""
        return replace(self, initial_guess=np.asarray(guess, dtype=float))

    def eval_objective(self, x: FloatArray) -> float:
        value = float(self.objective(x))
        if not np.isfinite(value):
            raise NumericalFailureError(f"{self.name}: objective is not finite", point=x.copy())
        return value

    def eval_inequalities(self, x: FloatArray) -> FloatArray:
        if self.inequalities is None:
            return np.zeros(0)
        return _finite(np.atleast_1d(np.asarray(self.inequalities(x), dtype=float)), x, self.name, "inequalities")

    def eval_equalities(self, x: FloatArray) -> FloatArray:
        if self.equalities is None:
            return np.zeros(0)
        return _finite(np.atleast_1d(np.asarray(self.equalities(x), dtype=float)), x, self.name, "equalities")

    def gradient(self, x: FloatArray, fd_step: float = FD_STEP) -> FloatArray:
        if self.objective_grad is not None:
            return np.asarray(self.objective_grad(x), dtype=float)
        return fd_gradient(self.eval_objective, x, fd_step)

    def inequality_jacobian(self, x: FloatArray, fd_step: float = FD_STEP) -> FloatArray:
        if self.inequalities is None:
            return np.zeros((0, self.dim))
        if self.ineq_jac is not None:
            return np.atleast_2d(np.asarray(self.ineq_jac(x), dtype=float))
        return fd_jacobian(self.eval_inequalities, x, fd_step)

    def equality_jacobian(self, x: FloatArray, fd_step: float = FD_STEP) -> FloatArray:
        if self.equalities is None:
            return np.zeros((0, self.dim))
        if self.eq_jac is not None:
            return np.atleast_2d(np.asarray(self.eq_jac(x), dtype=float))
        return fd_jacobian(self.eval_equalities, x, fd_step)

    def violation(self, x: FloatArray) -> float:
        """Max-norm violation over equalities, inequalities and bounds."""
        return _violation(self.eval_inequalities(x), self.eval_equalities(x), x, self.lower, self.upper)


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one NLP solve."""

    x_star: FloatArray
    f_star: float
    status: SolveStatus
    kkt_residual: float
    constraint_violation: float
    iterations: int
    inner_iterations: int = 0
    ineq_multipliers: FloatArray = field(default_factory=lambda: np.zeros(0), repr=False)
    eq_multipliers: FloatArray = field(default_factory=lambda: np.zeros(0), repr=False)
    violation_history: tuple[float, ...] = field(default=(), repr=False)

    @property
    def ok(self) -> bool:
        """Whether the solve reached the optimality tolerances."""
        return self.status is SolveStatus.OPTIMAL


def _finite(values: FloatArray, x: FloatArray, name: str, what: str) -> FloatArray:
    if not np.all(np.isfinite(values)):
        raise NumericalFailureError(f"{name}: {what} are not finite", point=x.copy())
    return values


def _violation(g: FloatArray, h: FloatArray, x: FloatArray, lower: FloatArray, upper: FloatArray) -> float:
    parts = [0.0]
    if g.size:
        parts.append(float(np.max(np.maximum(-g, 0.0))))
    if h.size:
        parts.append(float(np.max(np.abs(h))))
    parts.append(float(np.max(np.maximum(lower - x, 0.0), initial=0.0)))
    parts.append(float(np.max(np.maximum(x - upper, 0.0), initial=0.0)))
    return max(parts)


def _projected_residual(x: FloatArray, r: FloatArray, lower: FloatArray, upper: FloatArray) -> float:
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(x - np.clip(x - r, lower, upper))))


def _kkt_residual(
    problem: NlpProblem,
    x: FloatArray,
    g: FloatArray,
    lam: FloatArray,
    mu: FloatArray,
    fd_step: float,
) -> float:
    r = problem.gradient(x, fd_step)
    if lam.size:
        r = r - problem.inequality_jacobian(x, fd_step).T @ lam
    if mu.size:
        r = r - problem.equality_jacobian(x, fd_step).T @ mu
    residual = _projected_residual(x, r, problem.lower, problem.upper)
    if g.size:
        residual = max(residual, float(np.max(np.abs(np.minimum(g, lam)))))
    return residual


def check_kkt(
    problem: NlpProblem,
    point: npt.ArrayLike,
    config: SolverConfig,
    ineq_multipliers: FloatArray | None = None,
    eq_multipliers: FloatArray | None = None,
) -> tuple[float, float]:
    """Stationarity residual and constraint violation at a point.

    Without multipliers, least-squares estimates are used: nonnegative ones for
    the (nearly) active inequalities, free ones for the equalities, fitted on the
    coordinates that are not pinned at a bound.

    Args:
        problem: The NLP
        point: Evaluation point within the bounds
        config: Supplies the finite-difference step and activity tolerance
        ineq_multipliers: Known inequality multipliers
        eq_multipliers: Known equality multipliers

    Returns:
        Tuple of (kkt_residual, constraint_violation)
    """
    x = np.asarray(point, dtype=float)
    g = problem.eval_inequalities(x)
    h = problem.eval_equalities(x)
    violation = _violation(g, h, x, problem.lower, problem.upper)

    if ineq_multipliers is None or eq_multipliers is None:
        lam, mu = _estimate_multipliers(problem, x, g, h, config)
        lam = lam if ineq_multipliers is None else np.asarray(ineq_multipliers, dtype=float)
        mu = mu if eq_multipliers is None else np.asarray(eq_multipliers, dtype=float)
    else:
        lam = np.asarray(ineq_multipliers, dtype=float)
        mu = np.asarray(eq_multipliers, dtype=float)
    return _kkt_residual(problem, x, g, lam, mu, config.fd_step), violation


def _estimate_multipliers(
    problem: NlpProblem, x: FloatArray, g: FloatArray, h: FloatArray, config: SolverConfig
) -> tuple[FloatArray, FloatArray]:
    lam = np.zeros(g.size)
    mu = np.zeros(h.size)
    active = np.flatnonzero(g <= max(1e-6, config.tol_feas)) if g.size else np.zeros(0, dtype=int)
    if active.size == 0 and h.size == 0:
        return lam, mu

    span = problem.upper - problem.lower
    margin = 1e-10 * np.where(np.isfinite(span), np.maximum(span, 1.0), 1.0)
    free = (x > problem.lower + margin) & (x < problem.upper - margin)
    columns = []
    if active.size:
        columns.append(problem.inequality_jacobian(x, config.fd_step)[active].T)
    if h.size:
        columns.append(problem.equality_jacobian(x, config.fd_step).T)
    a = np.hstack(columns)[free]
    b = problem.gradient(x, config.fd_step)[free]
    if a.shape[0] == 0:
        return lam, mu

    lb = np.concatenate([np.zeros(active.size), np.full(h.size, -np.inf)])
    ub = np.full(active.size + h.size, np.inf)
    fit = lsq_linear(a, b, bounds=(lb, ub))
    lam[active] = fit.x[: active.size]
    mu[:] = fit.x[active.size :]
    return lam, mu


def solve(problem: NlpProblem, config: SolverConfig, warm_start: SolveReport | None = None) -> SolveReport:
    """Solve an NLP with the augmented Lagrangian method.

    Inequalities use the Powell-Hestenes-Rockafellar shifted penalty; each outer
    iteration minimizes the augmented Lagrangian with L-BFGS-B over the box, then
    updates the multipliers. The penalty grows whenever the violation does not
    shrink by ``violation_decrease``.

    Args:
        problem: The NLP to solve
        config: Solver tolerances and limits
        warm_start: Previous report whose multipliers seed the run (the point is taken
            from ``problem.initial_guess``)

    Returns:
        The solve report; failures are reported through ``status``
    """
    x = problem.initial_guess.copy()
    try:
        return _solve(problem, config, x, warm_start)
    except NumericalFailureError as e:
        log.warning("%s: %s", problem.name, e)
        point = e.point if e.point is not None else x
        return SolveReport(
            x_star=point,
            f_star=float("nan"),
            status=SolveStatus.NUMERICAL_FAILURE,
            kkt_residual=float("inf"),
            constraint_violation=float("inf"),
            iterations=0,
        )


def _solve(problem: NlpProblem, config: SolverConfig, x: FloatArray, warm_start: SolveReport | None) -> SolveReport:
    g = problem.eval_inequalities(x)
    h = problem.eval_equalities(x)
    lam = np.zeros(g.size)
    mu = np.zeros(h.size)
    if warm_start is not None:
        if warm_start.ineq_multipliers.shape == lam.shape:
            lam = np.maximum(warm_start.ineq_multipliers, 0.0)
        if warm_start.eq_multipliers.shape == mu.shape:
            mu = warm_start.eq_multipliers.copy()

    bounds = Bounds(problem.lower, problem.upper)
    rho = config.penalty_init
    fd = config.fd_step
    best_violation = np.inf
    history: list[float] = []
    inner_total = 0
    status = SolveStatus.MAX_ITER
    kkt = np.inf
    violation = np.inf
    outer = 0

    for outer in range(1, config.max_outer + 1):

        def merit(z: FloatArray, lam=lam, mu=mu, rho=rho) -> tuple[float, FloatArray]:
            f = problem.eval_objective(z)
            grad = problem.gradient(z, fd)
            value = f
            if mu.size:
                hz = problem.eval_equalities(z)
                value += -mu @ hz + 0.5 * rho * (hz @ hz)
                grad = grad - problem.equality_jacobian(z, fd).T @ (mu - rho * hz)
            if lam.size:
                gz = problem.eval_inequalities(z)
                shifted = np.maximum(lam - rho * gz, 0.0)
                value += (shifted @ shifted - lam @ lam) / (2.0 * rho)
                grad = grad - problem.inequality_jacobian(z, fd).T @ shifted
            return value, grad

        result = minimize(
            merit,
            x,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": config.max_inner, "ftol": 1e-15, "gtol": 0.1 * config.tol_kkt, "maxcor": 20},
        )
        x = np.clip(result.x, problem.lower, problem.upper)
        inner_total += int(result.nit)

        g = problem.eval_inequalities(x)
        h = problem.eval_equalities(x)
        if lam.size:
            lam = np.maximum(lam - rho * g, 0.0)
        if mu.size:
            mu = mu - rho * h
        violation = _violation(g, h, x, problem.lower, problem.upper)
        kkt = _kkt_residual(problem, x, g, lam, mu, fd)
        history.append(violation)
        log.debug(
            "%s: outer %d violation=%.3e kkt=%.3e rho=%.1e inner=%d",
            problem.name,
            outer,
            violation,
            kkt,
            rho,
            result.nit,
        )

        if violation <= config.tol_feas and kkt <= config.tol_kkt:
            status = SolveStatus.OPTIMAL
            break
        if violation > config.tol_feas and violation > config.violation_decrease * best_violation:
            rho *= config.penalty_growth
            if rho > config.penalty_max:
                status = SolveStatus.INFEASIBLE
                break
        best_violation = min(best_violation, violation)
    else:
        if violation > config.tol_feas and len(history) > 1 and history[-1] >= 0.99 * history[-2]:
            status = SolveStatus.INFEASIBLE

    return SolveReport(
        x_star=x,
        f_star=problem.eval_objective(x),
        status=status,
        kkt_residual=float(kkt),
        constraint_violation=float(violation),
        iterations=outer,
        inner_iterations=inner_total,
        ineq_multipliers=lam,
        eq_multipliers=mu,
        violation_history=tuple(history),
    )


def solve_multistart(problem: NlpProblem, config: SolverConfig, n_starts: int, seed: int) -> SolveReport:
    """Solve from the initial guess plus ``n_starts - 1`` seeded random starts, keep the best.

    Random starts are uniform in the box where it is finite and normally spread
    around the initial guess otherwise.

    Args:
        problem: The NLP
        config: Solver settings
        n_starts: Total number of starts, at least 1
        seed: Seed of the start generator

    Returns:
        The optimal report with the lowest objective, or the least-violating one if none is optimal
    """
    rng = np.random.default_rng(seed)
    finite = np.isfinite(problem.lower) & np.isfinite(problem.upper)
    starts = [problem.initial_guess]
    for _ in range(max(n_starts, 1) - 1):
        z = problem.initial_guess + rng.normal(size=problem.dim)
        z[finite] = rng.uniform(problem.lower[finite], problem.upper[finite])
        starts.append(np.clip(z, problem.lower, problem.upper))

    reports = [solve(problem.with_initial_guess(z), config) for z in starts]
    optimal = [r for r in reports if r.ok]
    if optimal:
        return min(optimal, key=lambda r: r.f_star)
    return min(reports, key=lambda r: r.constraint_violation)
