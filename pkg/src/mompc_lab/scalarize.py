"""Unified weighted-sum / Pascoletti-Serafini scalarization and IM-informed decision-making."""

from __future__ import annotations

import asyncio
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
from scipy.stats import qmc

from mompc_lab.constants import DESCENT_SLACK, DmMethod, Formulation, SolveStatus
from mompc_lab.exceptions import DecisionMakingInfeasibleError, IndividualMinimumError, InvalidInputError
from mompc_lab.logging import log
from mompc_lab.moo_core import DescentBound, FloatArray, PayoffSummary, descent_admissible, payoff_summary
from mompc_lab.nlp import NlpProblem, SolverConfig, SolveReport, fd_jacobian, solve


@dataclass
class MoProblem:
    """Multi-objective problem: objective-vector function plus feasible-set description.

    Inequalities follow the ``g(x) >= 0`` convention of :class:`NlpProblem`.
    """

    n_j: int
    dim: int
    objectives: Callable[[FloatArray], FloatArray]
    lower: FloatArray | None = None
    upper: FloatArray | None = None
    initial_guess: FloatArray | None = None
    objectives_jac: Callable[[FloatArray], FloatArray] | None = None
    inequalities: Callable[[FloatArray], FloatArray] | None = None
    ineq_jac: Callable[[FloatArray], FloatArray] | None = None
    equalities: Callable[[FloatArray], FloatArray] | None = None
    eq_jac: Callable[[FloatArray], FloatArray] | None = None
    name: str = "mo"

    def __post_init__(self):
        if self.n_j < 2:
            raise InvalidInputError(f"{self.name}: need at least two objectives")
        self.lower = np.full(self.dim, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(self.dim, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if self.initial_guess is None:
            self.initial_guess = np.clip(np.zeros(self.dim), self.lower, self.upper)
        else:
            self.initial_guess = np.asarray(self.initial_guess, dtype=float)

    def eval_objectives(self, x: FloatArray) -> FloatArray:
        return np.asarray(self.objectives(x), dtype=float)

    def objective_jacobian(self, x: FloatArray, fd_step: float) -> FloatArray:
        if self.objectives_jac is not None:
            return np.asarray(self.objectives_jac(x), dtype=float)
        return fd_jacobian(self.eval_objectives, x, fd_step)


@dataclass(frozen=True, eq=False)
class ScalarizationParam:
    """Task-dependent parameter of the unified scalarization.

    Slots that the formulation ignores are zero-filled and left out of equality
    comparisons: the weight for PS with ``im_switch = 0``, origin and direction
    otherwise.
    """

    ws_weight: FloatArray
    im_switch: int
    shoot_origin: FloatArray
    shoot_dir: FloatArray
    formulation: Formulation
    weight_qualified: bool = field(default=True, compare=False)

    @property
    def n_j(self) -> int:
        return self.ws_weight.size

    @property
    def is_pascoletti_serafini(self) -> bool:
        """Whether the problem carries the shooting variable and cone constraints."""
        return self.formulation is Formulation.PS_UNIFIED and self.im_switch == 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScalarizationParam):
            return NotImplemented
        if self.formulation is not other.formulation:
            return False
        if self.is_pascoletti_serafini:
            return (
                other.im_switch == 0
                and np.array_equal(self.shoot_origin, other.shoot_origin)
                and np.array_equal(self.shoot_dir, other.shoot_dir)
            )
        return self.im_switch == other.im_switch and np.array_equal(self.ws_weight, other.ws_weight)

    __hash__ = None

    @classmethod
    def weighted_sum(cls, weight: npt.ArrayLike, formulation: Formulation = Formulation.WS_ONLY) -> ScalarizationParam:
        w = np.asarray(weight, dtype=float)
        zeros = np.zeros_like(w)
        return cls(
            ws_weight=w,
            im_switch=1,
            shoot_origin=zeros,
            shoot_dir=zeros.copy(),
            formulation=formulation,
            weight_qualified=bool(np.all(w >= 0.0)),
        )

    @classmethod
    def shooting(cls, origin: npt.ArrayLike, direction: npt.ArrayLike) -> ScalarizationParam:
        origin = np.asarray(origin, dtype=float)
        return cls(
            ws_weight=np.zeros_like(origin),
            im_switch=0,
            shoot_origin=origin,
            shoot_dir=np.asarray(direction, dtype=float),
            formulation=Formulation.PS_UNIFIED,
        )


def preference_vector(beta: npt.ArrayLike) -> FloatArray:
    """Validate a point of the unit simplex."""
    vec = np.asarray(beta, dtype=float).reshape(-1)
    if np.any(vec < 0.0) or np.any(vec > 1.0) or abs(vec.sum() - 1.0) > 1e-12:
        raise InvalidInputError(f"preference {vec} is not in the unit simplex")
    return vec


def regularized_basis(i: int, n_j: int, delta: float) -> FloatArray:
    """Regularized unit vector for the i-th (zero-based) individual minimum.

    Off-diagonal entries are ``delta``, the i-th entry is ``1 - delta (n_j - 1)``.

    Raises:
        InvalidInputError: If ``i`` is out of range or ``delta`` is not in ``[0, 1/n_j)``
    """
    if not 0 <= i < n_j:
        raise InvalidInputError(f"objective index {i} out of range for {n_j} objectives")
    if not 0.0 <= delta < 1.0 / n_j:
        raise InvalidInputError(f"regularization delta must lie in [0, 1/{n_j}), got {delta}")
    e = np.full(n_j, delta)
    e[i] = 1.0 - delta * (n_j - 1)
    return e


def im_param(i: int, n_j: int, delta: float, formulation: Formulation) -> ScalarizationParam:
    """Scalarization parameter of the i-th (zero-based) individual minimum."""
    return ScalarizationParam.weighted_sum(regularized_basis(i, n_j, delta), formulation)


def dm_param(method: DmMethod, pref: npt.ArrayLike, summary: PayoffSummary) -> ScalarizationParam:
    """Scalarization parameter of a decision-making method for a preference.

    Args:
        method: Decision-making method
        pref: Preference vector in the unit simplex
        summary: Pay-off summary of the current problem

    Returns:
        The parameter; a knee weight with negative entries is returned with
        ``weight_qualified=False`` and solved as a furthest-to-hyperplane search
    """
    beta = preference_vector(pref)
    chim_point = summary.phi @ beta
    match method:
        case DmMethod.WS1:
            return ScalarizationParam.weighted_sum(summary.scale @ beta)
        case DmMethod.WS2_KNEE:
            param = ScalarizationParam.weighted_sum(-summary.chim_normal)
            if not param.weight_qualified:
                log.warning("knee weight %s has mixed signs, solving as a furthest-to-hyperplane search", param.ws_weight)
            return param
        case DmMethod.PS1_TRUE_NORMAL:
            return ScalarizationParam.shooting(chim_point, summary.chim_normal)
        case DmMethod.PS2_QUASI_NORMAL:
            return ScalarizationParam.shooting(chim_point, summary.quasi_normal_c)
        case DmMethod.PS3_VISUAL_NORMAL:
            return ScalarizationParam.shooting(chim_point, summary.visual_normal)
        case DmMethod.PS4_NCHIM:
            return ScalarizationParam.shooting(summary.nadir, chim_point - summary.nadir)
    raise InvalidInputError(f"unknown decision-making method {method}")


def nbi_direction(summary: PayoffSummary, beta_d: npt.ArrayLike | None = None) -> FloatArray:
    """Normal-boundary-intersection direction ``-n_J (Phi beta_d - J_UP)``, ``beta_d`` defaulting to the barycenter."""
    beta = summary.bary if beta_d is None else preference_vector(beta_d)
    return -summary.n_j * (summary.phi @ beta - summary.utopia)


def nbi_direction_shifted(summary: PayoffSummary) -> FloatArray:
    """Normal-boundary-intersection direction in the shifted form ``-Phi_shifted 1``."""
    return -summary.phi_shifted @ np.ones(summary.n_j)


def chim_point(summary: PayoffSummary, beta: npt.ArrayLike, c: float = 0.0) -> FloatArray:
    """Point of the CHIM simplex scaled by ``1 + c`` about its barycenter offset.

    ``c = 0`` gives ``Phi beta``; growing ``c`` pushes the simplex outward so that
    rays shot from it reach the parts of the front beyond the CHIM.
    """
    if c < 0.0:
        raise InvalidInputError("CHIM scaling c must be nonnegative")
    return summary.phi @ ((1.0 + c) * preference_vector(beta)) + c / summary.n_j * (summary.nadir - summary.utopia)


def _negative_orthant_unit(tau: FloatArray) -> FloatArray:
    theta = 0.5 * np.pi * tau
    n = tau.size + 1
    x = np.empty(n)
    sin_prod = 1.0
    for k in range(n - 1):
        x[k] = sin_prod * np.cos(theta[k])
        sin_prod *= np.sin(theta[k])
    x[-1] = sin_prod
    return -x


def sri_direction(tau: npt.ArrayLike, summary: PayoffSummary) -> FloatArray:
    """Shooting direction of the stretched-hypersphere ray method.

    ``tau`` in the unit box maps through nested spherical angles
    ``theta_k = tau_k * 90 deg`` onto the negative-orthant part of the unit sphere
    in normalized space; the result is mapped back through the inverse scaling.
    Component ``k`` of the unit vector is ``-cos(theta_k) * prod_{i<k} sin(theta_i)``
    and the last one is ``-prod sin(theta_i)``. The box centre therefore is not the
    diagonal: for three objectives ``tau = (1/2, 1/2)`` gives
    ``(-cos 45, -sin 45 cos 45, -sin 45 sin 45) = (-0.707, -0.5, -0.5)`` before
    scaling. Equal angular spacing in ``tau`` is what the sampling grid relies on.
    """
    t = np.asarray(tau, dtype=float).reshape(-1)
    if t.size != summary.n_j - 1:
        raise InvalidInputError(f"tau must have {summary.n_j - 1} entries, got {t.size}")
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise InvalidInputError(f"tau {t} outside the unit box")
    return np.minimum(_negative_orthant_unit(t) / summary.scale_diag, 0.0)


def unit_simplex_grid(n_j: int, m: int) -> FloatArray:
    """All compositions of ``m`` into ``n_j`` nonnegative parts, divided by ``m``.

    Rows come in lexicographic order of the integer compositions.
    """
    if m < 1 or n_j < 1:
        raise InvalidInputError(f"simplex grid needs n_j >= 1 and m >= 1, got n_j={n_j}, m={m}")

    def compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
        if parts == 1:
            yield (total,)
            return
        for first in range(total + 1):
            for rest in compositions(total - first, parts - 1):
                yield (first, *rest)

    return np.array(list(compositions(m, n_j)), dtype=float) / m


def build_scalarized(
    p: ScalarizationParam, mo_problem: MoProblem, descent: DescentBound, fd_step: float = 1e-6
) -> NlpProblem:
    """Build the scalarized NLP for a parameter.

    Weighted-sum layouts minimize ``w^T J(x)``. The shooting layout appends a
    variable ``l`` (last entry), minimizes ``-l`` and adds
    ``origin + l d - J(x) >= 0``. A finite descent bound adds
    ``bound + slack - J(x) >= 0``.

    Raises:
        InvalidInputError: On a zero shooting direction or mismatching sizes
    """
    mo = mo_problem
    n_j = mo.n_j
    if p.n_j != n_j or descent.n_j != n_j:
        raise InvalidInputError(f"parameter/bound sizes do not match {n_j} objectives")
    shooting = p.is_pascoletti_serafini
    if shooting and not np.any(p.shoot_dir):
        raise InvalidInputError("shooting direction must be nonzero")

    dim = mo.dim + (1 if shooting else 0)
    n = mo.dim

    def objectives(z: FloatArray) -> FloatArray:
        return mo.eval_objectives(z[:n])

    def jac_objectives(z: FloatArray) -> FloatArray:
        return mo.objective_jacobian(z[:n], fd_step)

    def pad(block: FloatArray) -> FloatArray:
        return np.hstack([block, np.zeros((block.shape[0], 1))]) if shooting else block

    if shooting:

        def objective(z: FloatArray) -> float:
            return -float(z[-1])

        def objective_grad(z: FloatArray) -> FloatArray:
            grad = np.zeros(dim)
            grad[-1] = -1.0
            return grad

    else:
        weight = p.ws_weight

        def objective(z: FloatArray) -> float:
            return float(weight @ objectives(z))

        def objective_grad(z: FloatArray) -> FloatArray:
            return jac_objectives(z).T @ weight

    blocks: list[tuple[Callable[[FloatArray], FloatArray], Callable[[FloatArray], FloatArray]]] = []
    if mo.inequalities is not None:
        ineq = mo.inequalities

        def base_ineq_jac(z: FloatArray) -> FloatArray:
            if mo.ineq_jac is not None:
                return pad(np.atleast_2d(mo.ineq_jac(z[:n])))
            return pad(fd_jacobian(lambda y: np.atleast_1d(ineq(y)), z[:n], fd_step))

        blocks.append((lambda z: np.atleast_1d(ineq(z[:n])), base_ineq_jac))
    if shooting:
        origin, direction = p.shoot_origin, p.shoot_dir

        def cone(z: FloatArray) -> FloatArray:
            return origin + z[-1] * direction - objectives(z)

        def cone_jac(z: FloatArray) -> FloatArray:
            return np.hstack([-jac_objectives(z), direction[:, None]])

        blocks.append((cone, cone_jac))
    if not descent.is_infinite:
        upper = descent.values + DESCENT_SLACK
        blocks.append((lambda z: upper - objectives(z), lambda z: pad(-jac_objectives(z))))

    inequalities = None
    ineq_jac = None
    if blocks:

        def inequalities(z: FloatArray) -> FloatArray:
            return np.concatenate([fun(z) for fun, _ in blocks])

        def ineq_jac(z: FloatArray) -> FloatArray:
            return np.vstack([jac(z) for _, jac in blocks])

    equalities = None
    eq_jac = None
    if mo.equalities is not None:
        eq = mo.equalities

        def equalities(z: FloatArray) -> FloatArray:
            return np.atleast_1d(eq(z[:n]))

        def eq_jac(z: FloatArray) -> FloatArray:
            if mo.eq_jac is not None:
                return pad(np.atleast_2d(mo.eq_jac(z[:n])))
            return pad(fd_jacobian(lambda y: np.atleast_1d(eq(y)), z[:n], fd_step))

    lower, upper_box, guess = mo.lower, mo.upper, mo.initial_guess
    if shooting:
        lower = np.append(lower, -np.inf)
        upper_box = np.append(upper_box, np.inf)
        guess = np.append(guess, _initial_shooting_length(p, mo.eval_objectives(guess)))
    return NlpProblem(
        dim=dim,
        objective=objective,
        objective_grad=objective_grad,
        lower=lower,
        upper=upper_box,
        initial_guess=guess,
        inequalities=inequalities,
        ineq_jac=ineq_jac,
        equalities=equalities,
        eq_jac=eq_jac,
        name=f"{mo.name}/{'ps' if shooting else 'ws'}",
    )


def _initial_shooting_length(p: ScalarizationParam, j0: FloatArray) -> float:
    """Largest ``l`` meeting the cone constraints at the initial point along descending components."""
    d = p.shoot_dir
    gap = p.shoot_origin - j0
    down = d < 0.0
    if np.any(down):
        return float(np.min(gap[down] / -d[down]))
    return 0.0


def _usable(report: SolveReport, config: SolverConfig) -> bool:
    if report.ok:
        return True
    return report.status is SolveStatus.MAX_ITER and report.constraint_violation <= config.tol_feas


def _loop_running() -> bool:
    try:
        asyncio.get_running_loop()
    except RuntimeError:
        return False
    return True


def solve_individual_minima(
    mo_problem: MoProblem,
    delta: float,
    formulation: Formulation,
    config: SolverConfig,
    initial_guesses: Sequence[FloatArray] | None = None,
    threads: int = 1,
) -> list[SolveReport]:
    """Solve the n_J regularized individual-minimum problems.

    With ``threads > 1`` and no event loop running in the calling thread (the
    closed loop runs on pool workers) the solves go through
    :func:`solve_individual_minima_async`; results are identical either way.

    Raises:
        IndividualMinimumError: On the first solve that fails
    """
    if threads > 1 and not _loop_running():
        return asyncio.run(solve_individual_minima_async(mo_problem, delta, formulation, config, initial_guesses))
    return [
        _solve_individual_minimum(mo_problem, i, delta, formulation, config, initial_guesses)
        for i in range(mo_problem.n_j)
    ]


async def solve_individual_minima_async(
    mo_problem: MoProblem,
    delta: float,
    formulation: Formulation,
    config: SolverConfig,
    initial_guesses: Sequence[FloatArray] | None = None,
) -> list[SolveReport]:
    """Solve the n_J individual-minimum problems concurrently on worker threads."""
    tasks = [
        asyncio.to_thread(_solve_individual_minimum, mo_problem, i, delta, formulation, config, initial_guesses)
        for i in range(mo_problem.n_j)
    ]
    return list(await asyncio.gather(*tasks))


def _solve_individual_minimum(
    mo_problem: MoProblem,
    i: int,
    delta: float,
    formulation: Formulation,
    config: SolverConfig,
    initial_guesses: Sequence[FloatArray] | None,
) -> SolveReport:
    problem = build_scalarized(
        im_param(i, mo_problem.n_j, delta, formulation),
        mo_problem,
        DescentBound.infinite(mo_problem.n_j),
        config.fd_step,
    )
    if initial_guesses is not None:
        problem = problem.with_initial_guess(initial_guesses[i])
    report = solve(problem, config)
    if not _usable(report, config):
        raise IndividualMinimumError(i, report.status.value)
    if not report.ok:
        log.warning("individual minimum %d stopped at %s with a feasible point", i + 1, report.status)
    return report


def payoff_from_reports(mo_problem: MoProblem, reports: Sequence[SolveReport]) -> PayoffSummary:
    """Evaluate the full objective vector at each IM solution and summarize."""
    phi = np.column_stack([mo_problem.eval_objectives(r.x_star[: mo_problem.dim]) for r in reports])
    return payoff_summary(phi)


def compute_individual_minima(
    mo_problem: MoProblem,
    delta: float,
    formulation: Formulation,
    config: SolverConfig,
    initial_guesses: Sequence[FloatArray] | None = None,
) -> PayoffSummary:
    """Pay-off summary from the n_J regularized individual minima.

    Raises:
        IndividualMinimumError: If any IM solve fails
    """
    reports = solve_individual_minima(mo_problem, delta, formulation, config, initial_guesses)
    return payoff_from_reports(mo_problem, reports)


async def compute_individual_minima_async(
    mo_problem: MoProblem,
    delta: float,
    formulation: Formulation,
    config: SolverConfig,
    initial_guesses: Sequence[FloatArray] | None = None,
) -> PayoffSummary:
    """Concurrent variant of :func:`compute_individual_minima`."""
    reports = await solve_individual_minima_async(mo_problem, delta, formulation, config, initial_guesses)
    return payoff_from_reports(mo_problem, reports)


@dataclass(frozen=True)
class DmSolution:
    """Decision point, its objective vector and the solver record."""

    x_star: FloatArray
    j_star: FloatArray
    report: SolveReport
    param: ScalarizationParam


def solve_dm(
    mo_problem: MoProblem,
    method: DmMethod,
    pref: npt.ArrayLike,
    summary: PayoffSummary,
    descent: DescentBound,
    config: SolverConfig,
    initial_guess: FloatArray | None = None,
) -> DmSolution:
    """Solve the decision-making problem of a method for one preference.

    Args:
        mo_problem: The multi-objective problem
        method: Decision-making method
        pref: Preference vector
        summary: Pay-off summary of ``mo_problem``
        descent: Carried descent bound
        config: Solver settings
        initial_guess: Decision-variable guess (without the shooting variable)

    Returns:
        The decision point and its objective vector

    Raises:
        DecisionMakingInfeasibleError: If the solve fails or its point violates the bound
    """
    param = dm_param(method, pref, summary)
    problem = build_scalarized(param, mo_problem, descent, config.fd_step)
    if initial_guess is not None:
        guess = np.asarray(initial_guess, dtype=float)
        if param.is_pascoletti_serafini:
            guess = np.append(guess, _initial_shooting_length(param, mo_problem.eval_objectives(guess)))
        problem = problem.with_initial_guess(guess)
    report = solve(problem, config)
    if not _usable(report, config):
        raise DecisionMakingInfeasibleError(
            f"{method} solve ended with status {report.status} (violation {report.constraint_violation:.3e})",
            status=report.status.value,
        )
    x_star = report.x_star[: mo_problem.dim]
    j_star = mo_problem.eval_objectives(x_star)
    if not descent_admissible(j_star, descent, tolerance=DESCENT_SLACK + config.tol_feas):
        raise DecisionMakingInfeasibleError(f"{method} solution {j_star} leaves the descent cone {descent.values}")
    return DmSolution(x_star=x_star, j_star=j_star, report=report, param=param)


def sri_taus(n_j: int, count: int, seed: int) -> FloatArray:
    """Scrambled Sobol parameters for SRI rays.

    For three objectives the polar parameter is warped so that the rays are
    uniform in area on the unit-sphere octant.
    """
    if n_j < 2 or count < 1:
        raise InvalidInputError(f"need n_j >= 2 and count >= 1, got n_j={n_j}, count={count}")
    sobol = qmc.Sobol(d=n_j - 1, scramble=True, seed=seed)
    s = sobol.random_base2(max(0, math.ceil(math.log2(count))))[:count]
    if n_j == 3:
        s[:, 0] = np.arccos(1.0 - s[:, 0]) / (0.5 * np.pi)
    return np.clip(s, 0.0, 1.0)


@dataclass(frozen=True)
class FrontSample:
    """Objective vectors reached by a batch of shooting solves."""

    points: FloatArray
    failures: int


def sample_front(
    mo_problem: MoProblem,
    params: Sequence[ScalarizationParam],
    config: SolverConfig,
    initial_guess: FloatArray | None = None,
) -> FrontSample:
    """Solve one scalarized problem per parameter and collect the reached objective vectors.

    Failed solves are counted and skipped; successive solves warm-start from the
    previous solution.
    """
    points = []
    failures = 0
    guess = mo_problem.initial_guess if initial_guess is None else np.asarray(initial_guess, dtype=float)
    for param in params:
        problem = build_scalarized(param, mo_problem, DescentBound.infinite(mo_problem.n_j), config.fd_step)
        start = guess
        if param.is_pascoletti_serafini:
            start = np.append(guess, _initial_shooting_length(param, mo_problem.eval_objectives(guess)))
        report = solve(problem.with_initial_guess(start), config)
        if not _usable(report, config):
            failures += 1
            log.debug("front sample failed with status %s", report.status)
            continue
        guess = report.x_star[: mo_problem.dim]
        points.append(mo_problem.eval_objectives(guess))
    if failures:
        log.warning("%d of %d front samples failed", failures, len(params))
    cloud = np.array(points) if points else np.empty((0, mo_problem.n_j))
    return FrontSample(points=cloud, failures=failures)
