"""Multi-objective MPC: transcription, terminal ingredients and the descent-enforcing closed loop."""

from __future__ import annotations

import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg
from scipy.special import ndtri
from scipy.stats import qmc

from mompc_lab.constants import (
    ALPHA_BOUNDARY_SAMPLES,
    ALPHA_FLOOR,
    DESCENT_TOLERANCE,
    FD_STEP,
    LINEARIZATION_STEP,
    DmMethod,
    Formulation,
    StepStage,
    TraceStatus,
)
from mompc_lab.exceptions import (
    DecisionMakingInfeasibleError,
    IndividualMinimumError,
    InvalidInputError,
    MompcLabError,
    NumericalFailureError,
    StepError,
    TerminalSetError,
    UnstabilizableError,
)
from mompc_lab.logging import log
from mompc_lab.models import ClosedLoopTrace, TerminalReport, TraceStep
from mompc_lab.moo_core import DescentBound, FloatArray, PayoffSummary, descent_admissible, payoff_summary
from mompc_lab.nlp import SolverConfig, SolveReport, solve
from mompc_lab.scalarize import (
    MoProblem,
    ScalarizationParam,
    build_scalarized,
    solve_dm,
    solve_individual_minima,
)

type Rhs = Callable[[FloatArray, FloatArray, FloatArray], FloatArray]


class TerminalConfig(BaseModel):
    """Settings of the terminal-ingredient construction."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rho_x: float = Field(default=10.0, ge=0, description="State inflation of the LQR weight")
    rho_u: float = Field(default=10.0, ge=0, description="Input inflation of the LQR weight")
    alpha_floor: float = Field(default=ALPHA_FLOOR, gt=0, description="Smallest terminal level tried")
    boundary_samples: int = Field(default=ALPHA_BOUNDARY_SAMPLES, ge=4, description="Level-set samples for n_w = 2")
    bisection_steps: int = Field(default=60, ge=1)
    sampled_safety: float = Field(
        default=0.5, gt=0, le=1, description="Factor applied when the level is limited by sampled conditions"
    )
    linearization_step: float = Field(default=LINEARIZATION_STEP, gt=0)


def heun_discretize(rhs: Rhs, h_micro: float, m: int) -> Callable[[FloatArray, FloatArray, FloatArray], FloatArray]:
    """Macro step made of ``m`` Heun steps of size ``h_micro``.

    The returned map broadcasts over leading axes of ``w`` and ``v``.

    Raises:
        InvalidInputError: If ``h_micro <= 0`` or ``m < 1``
    """
    if h_micro <= 0.0 or m < 1:
        raise InvalidInputError(f"Heun discretization needs h_micro > 0 and M >= 1, got {h_micro}, {m}")

    def step(w: FloatArray, v: FloatArray, d: FloatArray) -> FloatArray:
        w = np.asarray(w, dtype=float)
        for _ in range(m):
            k1 = rhs(w, v, d)
            k2 = rhs(w + h_micro * k1, v, d)
            w = w + 0.5 * h_micro * (k1 + k2)
        if not np.all(np.isfinite(w)):
            raise NumericalFailureError("dynamics produced a non-finite state", point=w)
        return w

    return step


@dataclass(frozen=True)
class DiscreteDynamics:
    """Discrete-time model ``w+ = f(w, v)`` under a fixed disturbance, with state and input boxes."""

    n_w: int
    n_v: int
    step_map: Callable[[FloatArray, FloatArray, FloatArray], FloatArray]
    disturbance: FloatArray
    w_lb: FloatArray
    w_ub: FloatArray
    v_lb: FloatArray
    v_ub: FloatArray
    name: str = "dynamics"

    def __call__(self, w: npt.ArrayLike, v: npt.ArrayLike) -> FloatArray:
        return self.step_map(np.asarray(w, dtype=float), np.asarray(v, dtype=float), self.disturbance)

    def linearize(self, w: FloatArray, v: FloatArray, rel_step: float = LINEARIZATION_STEP) -> tuple[FloatArray, FloatArray]:
        """Central-difference Jacobians ``(A, B)`` at ``(w, v)``."""
        a = np.empty((self.n_w, self.n_w))
        b = np.empty((self.n_w, self.n_v))
        for k in range(self.n_w):
            h = rel_step * max(1.0, abs(w[k]))
            e = np.zeros(self.n_w)
            e[k] = h
            a[:, k] = (self(w + e, v) - self(w - e, v)) / (2.0 * h)
        for k in range(self.n_v):
            h = rel_step * max(1.0, abs(v[k]))
            e = np.zeros(self.n_v)
            e[k] = h
            b[:, k] = (self(w, v + e) - self(w, v - e)) / (2.0 * h)
        return a, b


def linear_dynamics(
    a: npt.ArrayLike,
    b: npt.ArrayLike,
    w_lb: npt.ArrayLike,
    w_ub: npt.ArrayLike,
    v_lb: npt.ArrayLike,
    v_ub: npt.ArrayLike,
    name: str = "linear",
) -> DiscreteDynamics:
    """Discrete dynamics ``w+ = A w + B v``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)

    def step(w: FloatArray, v: FloatArray, _d: FloatArray) -> FloatArray:
        return w @ a.T + v @ b.T

    return DiscreteDynamics(
        n_w=a.shape[0],
        n_v=b.shape[1],
        step_map=step,
        disturbance=np.zeros(0),
        w_lb=np.asarray(w_lb, dtype=float),
        w_ub=np.asarray(w_ub, dtype=float),
        v_lb=np.asarray(v_lb, dtype=float),
        v_ub=np.asarray(v_ub, dtype=float),
        name=name,
    )


def _check_pd(matrix: FloatArray, what: str) -> FloatArray:
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    if m.shape[0] != m.shape[1] or not np.allclose(m, m.T, atol=1e-12):
        raise InvalidInputError(f"{what} must be square and symmetric")
    if np.linalg.eigvalsh(m).min() <= 0.0:
        raise InvalidInputError(f"{what} must be positive definite")
    return m


@dataclass(frozen=True)
class StageCosts:
    """Quadratic stage costs ``l_i = dw^T Q_i dw + dv^T R_i dv`` around an equilibrium pair."""

    q: tuple[FloatArray, ...]
    r: tuple[FloatArray, ...]
    w_ss: FloatArray
    v_ss: FloatArray

    def __post_init__(self):
        if len(self.q) != len(self.r) or len(self.q) < 2:
            raise InvalidInputError("need matching Q_i, R_i for at least two objectives")
        object.__setattr__(self, "q", tuple(_check_pd(q, f"Q_{i + 1}") for i, q in enumerate(self.q)))
        object.__setattr__(self, "r", tuple(_check_pd(r, f"R_{i + 1}") for i, r in enumerate(self.r)))
        object.__setattr__(self, "w_ss", np.asarray(self.w_ss, dtype=float))
        object.__setattr__(self, "v_ss", np.asarray(self.v_ss, dtype=float))

    @property
    def n_j(self) -> int:
        return len(self.q)

    def stage(self, w: npt.ArrayLike, v: npt.ArrayLike) -> FloatArray:
        """Stage cost vector; leading axes of ``w`` and ``v`` broadcast, objectives on the last axis."""
        dw = np.asarray(w, dtype=float) - self.w_ss
        dv = np.asarray(v, dtype=float) - self.v_ss
        return np.stack(
            [np.einsum("...i,ij,...j->...", dw, q, dw) + np.einsum("...i,ij,...j->...", dv, r, dv)
             for q, r in zip(self.q, self.r, strict=True)],
            axis=-1,
        )


@dataclass(frozen=True)
class TerminalIngredients:
    """Terminal cost ``dw^T P dw``, set ``{dw^T P dw <= alpha}`` and local controller ``v_ss - K dw``."""

    p: FloatArray
    k: FloatArray
    alpha: float
    omega: FloatArray
    delta_q: tuple[FloatArray, ...]
    q_star: tuple[FloatArray, ...]
    a_k: FloatArray
    w_ss: FloatArray
    v_ss: FloatArray

    def cost(self, w: npt.ArrayLike) -> FloatArray:
        dw = np.asarray(w, dtype=float) - self.w_ss
        return np.einsum("...i,ij,...j->...", dw, self.p, dw)

    def controller(self, w: npt.ArrayLike) -> FloatArray:
        dw = np.asarray(w, dtype=float) - self.w_ss
        return self.v_ss - dw @ self.k.T

    def lyapunov_residual(self) -> float:
        return float(np.abs(self.a_k.T @ self.p @ self.a_k - self.p + self.omega).max())


def lyapunov_terminal_cost(a_k: npt.ArrayLike, omega: npt.ArrayLike) -> FloatArray:
    """Solve ``A_K^T P A_K - P = -Omega`` for a Schur-stable closed loop.

    Raises:
        TerminalSetError: If ``A_K`` is not Schur stable or ``P`` is not positive definite
    """
    a_k = np.atleast_2d(np.asarray(a_k, dtype=float))
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    if np.max(np.abs(np.linalg.eigvals(a_k))) >= 1.0:
        raise TerminalSetError("closed-loop matrix is not Schur stable, Lyapunov equation has no PD solution")
    p = linalg.solve_discrete_lyapunov(a_k.T, omega)
    p = 0.5 * (p + p.T)
    if np.linalg.eigvalsh(p).min() <= 0.0:
        raise TerminalSetError("terminal cost matrix is not positive definite")
    return p


def _stabilizable(a: FloatArray, b: FloatArray) -> bool:
    n = a.shape[0]
    for lam in np.linalg.eigvals(a):
        if abs(lam) >= 1.0 - 1e-12:
            pbh = np.hstack([a - lam * np.eye(n), b])
            if np.linalg.matrix_rank(pbh) < n:
                return False
    return True


def dlqr(a: npt.ArrayLike, b: npt.ArrayLike, q_lqr: npt.ArrayLike, r_lqr: npt.ArrayLike) -> FloatArray:
    """Discrete LQR gain ``K`` (control law ``u = -K x``).

    Raises:
        UnstabilizableError: If (A, B) is not stabilizable or the Riccati solve fails
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    q_lqr = np.atleast_2d(np.asarray(q_lqr, dtype=float))
    r_lqr = np.atleast_2d(np.asarray(r_lqr, dtype=float))
    if not _stabilizable(a, b):
        raise UnstabilizableError("(A, B) is not stabilizable")
    try:
        x = linalg.solve_discrete_are(a, b, q_lqr, r_lqr)
    except (linalg.LinAlgError, ValueError) as e:
        raise UnstabilizableError(f"discrete Riccati equation has no stabilizing solution: {e}") from e
    return np.linalg.solve(r_lqr + b.T @ x @ b, b.T @ x @ a)


def dlqr_and_lyapunov(
    a: npt.ArrayLike, b: npt.ArrayLike, q_lqr: npt.ArrayLike, r_lqr: npt.ArrayLike, omega: npt.ArrayLike
) -> tuple[FloatArray, FloatArray]:
    """Discrete LQR gain and the Lyapunov terminal cost of its closed loop.

    Args:
        a: State matrix
        b: Input matrix
        q_lqr: State weight, positive semidefinite
        r_lqr: Input weight, positive definite
        omega: Decrease matrix, symmetric positive definite

    Returns:
        Tuple ``(K, P)`` with ``u = -K x`` and ``A_K^T P A_K - P = -Omega``

    Raises:
        UnstabilizableError: If (A, B) is not stabilizable or the Riccati solve fails
        TerminalSetError: If the Lyapunov solve fails
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    k = dlqr(a, b, q_lqr, r_lqr)
    return k, lyapunov_terminal_cost(a - b @ k, omega)


def _free_inputs(v_ss: FloatArray, v_lb: FloatArray, v_ub: FloatArray) -> npt.NDArray[np.bool_]:
    """Inputs with slack on both sides at the equilibrium."""
    tol = 1e-9 * np.maximum(1.0, v_ub - v_lb)
    return (v_ss - v_lb > tol) & (v_ub - v_ss > tol)


def _unit_sphere_samples(n: int, count: int, seed: int | None = None) -> FloatArray:
    """Deterministic directions on the unit sphere in R^n."""
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        angles = 2.0 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(angles), np.sin(angles)])
    halton = qmc.Halton(d=n, scramble=seed is not None, seed=seed)
    u = halton.random(count + 1)[1:]
    z = ndtri(np.clip(u, 1e-12, 1.0 - 1e-12))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _level_set_points(p: FloatArray, alpha: float, directions: FloatArray) -> FloatArray:
    """Map unit directions onto ``{dw^T P dw = alpha}``."""
    chol = np.linalg.cholesky(p)
    return np.sqrt(alpha) * linalg.solve_triangular(chol.T, directions.T, lower=False).T


def _alpha_state_box(p: FloatArray, w_ss: FloatArray, w_lb: FloatArray, w_ub: FloatArray) -> float:
    margin = np.minimum(w_ub - w_ss, w_ss - w_lb)
    p_inv = np.linalg.inv(p)
    return float(np.min(margin**2 / np.diag(p_inv)))


def _alpha_input_box(p: FloatArray, k: FloatArray, v_ss: FloatArray, v_lb: FloatArray, v_ub: FloatArray) -> float:
    margin = np.minimum(v_ub - v_ss, v_ss - v_lb)
    spread = np.einsum("ij,jk,ik->i", k, np.linalg.inv(p), k)
    with np.errstate(divide="ignore", invalid="ignore"):
        limits = np.where(spread > 1e-300, np.maximum(margin, 0.0) ** 2 / spread, np.inf)
    return float(limits.min())


def _sampled_violations(
    term: TerminalIngredients, dyn: DiscreteDynamics, costs: StageCosts, dw: FloatArray
) -> tuple[float, FloatArray, float, float]:
    """Invariance, per-objective decrease, input and state violations over sampled deviations."""
    w = term.w_ss + dw
    v = term.controller(w)
    w_next = dyn(w, v)
    f_now = term.cost(w)
    f_next = term.cost(w_next)
    invariance = float(np.max(np.maximum(f_next - term.alpha, 0.0), initial=0.0))
    stage = costs.stage(w, v)
    decrease = np.max(np.maximum(f_next[:, None] + stage - f_now[:, None], 0.0), axis=0, initial=0.0)
    inputs = float(np.max(np.maximum(np.maximum(v - dyn.v_ub, dyn.v_lb - v), 0.0), initial=0.0))
    states = float(np.max(np.maximum(np.maximum(w - dyn.w_ub, dyn.w_lb - w), 0.0), initial=0.0))
    return invariance, decrease, inputs, states


def build_terminal_ingredients(
    dyn: DiscreteDynamics, costs: StageCosts, config: TerminalConfig | None = None
) -> TerminalIngredients:
    """Construct ``P``, ``K`` and ``alpha`` around the equilibrium pair.

    The LQR weights are the first objective's weights inflated by ``rho_x I`` and
    ``rho_u I``; ``Omega = Q*_1 + dQ_1`` with ``dQ_1 = rho_x I + rho_u K^T K``.
    Inputs pinned to a bound at the equilibrium get a zero row in ``K``.
    The level ``alpha`` is capped analytically by the state and input boxes and
    then bisected (log-spaced) on sampled invariance and decrease conditions.

    Raises:
        TerminalSetError: If no nontrivial terminal set is found
    """
    config = config or TerminalConfig()
    w_ss, v_ss = costs.w_ss, costs.v_ss
    a, b = dyn.linearize(w_ss, v_ss, config.linearization_step)
    q_lqr = costs.q[0] + config.rho_x * np.eye(dyn.n_w)
    r_lqr = costs.r[0] + config.rho_u * np.eye(dyn.n_v)

    free = _free_inputs(v_ss, dyn.v_lb, dyn.v_ub)
    if not np.any(free):
        raise TerminalSetError("every input of the equilibrium sits on a bound")
    if not np.all(free):
        log.warning("inputs %s sit on a bound at the equilibrium and are held fixed by the terminal controller",
                    np.flatnonzero(~free).tolist())
    k = np.zeros((dyn.n_v, dyn.n_w))
    k[free] = dlqr(a, b[:, free], q_lqr, r_lqr[np.ix_(free, free)])
    q_star = tuple(q + k.T @ r @ k for q, r in zip(costs.q, costs.r, strict=True))
    omega = q_star[0] + config.rho_x * np.eye(dyn.n_w) + config.rho_u * (k.T @ k)
    omega = 0.5 * (omega + omega.T)
    delta_q = tuple(omega - qs for qs in q_star)
    a_k = a - b @ k
    p = lyapunov_terminal_cost(a_k, omega)

    ingredients = TerminalIngredients(
        p=p, k=k, alpha=0.0, omega=omega, delta_q=delta_q, q_star=q_star, a_k=a_k, w_ss=w_ss, v_ss=v_ss
    )
    alpha = _search_alpha(ingredients, dyn, costs, config)
    log.info("terminal ingredients: alpha=%.4e, lambda_min(P)=%.4e", alpha, np.linalg.eigvalsh(p).min())
    return replace(ingredients, alpha=alpha)


def _search_alpha(
    term: TerminalIngredients, dyn: DiscreteDynamics, costs: StageCosts, config: TerminalConfig
) -> float:
    n_dirs = config.boundary_samples * max(1, dyn.n_w - 1)
    directions = _unit_sphere_samples(dyn.n_w, n_dirs)
    cap = min(
        _alpha_state_box(term.p, term.w_ss, dyn.w_lb, dyn.w_ub),
        _alpha_input_box(term.p, term.k, term.v_ss, dyn.v_lb, dyn.v_ub),
    )

    def admissible(alpha: float) -> bool:
        trial = replace(term, alpha=alpha)
        dw = _level_set_points(term.p, alpha, directions)
        invariance, decrease, _, _ = _sampled_violations(trial, dyn, costs, dw)
        return invariance <= 1e-12 * alpha and bool(np.all(decrease <= 1e-12 * alpha))

    if cap < config.alpha_floor or not admissible(config.alpha_floor):
        raise TerminalSetError("no nontrivial terminal set found")
    if admissible(cap):
        return cap
    lo, hi = config.alpha_floor, cap
    for _ in range(config.bisection_steps):
        mid = float(np.sqrt(lo * hi))
        if admissible(mid):
            lo = mid
        else:
            hi = mid
    return max(config.sampled_safety * lo, config.alpha_floor)


def verify_terminal(
    term: TerminalIngredients, dyn: DiscreteDynamics, costs: StageCosts, n_samples: int, seed: int = 0
) -> TerminalReport:
    """Check invariance, decrease and admissibility on interior and boundary samples of the terminal set.

    Half the samples lie on the boundary, half inside (radius drawn for uniform volume).
    """
    report = TerminalReport(alpha=term.alpha, n_samples=n_samples, max_decrease_violation=[0.0] * costs.n_j)
    if term.alpha <= 0.0 or n_samples <= 0:
        return report
    n_boundary = max(n_samples // 2, 1)
    boundary = _unit_sphere_samples(dyn.n_w, n_boundary)
    rng = np.random.default_rng(seed)
    interior_dirs = _unit_sphere_samples(dyn.n_w, max(n_samples - n_boundary, 1), seed=seed)
    radii = rng.uniform(size=interior_dirs.shape[0]) ** (1.0 / dyn.n_w)
    directions = np.vstack([boundary, interior_dirs * radii[:, None]])
    dw = _level_set_points(term.p, term.alpha, directions)
    invariance, decrease, inputs, states = _sampled_violations(term, dyn, costs, dw)
    return report.model_copy(
        update={
            "n_samples": dw.shape[0],
            "max_invariance_violation": invariance,
            "max_decrease_violation": [float(x) for x in decrease],
            "max_input_violation": inputs,
            "max_state_violation": states,
        }
    )


def _stage_jacobians(
    dyn: DiscreteDynamics, w: FloatArray, v: FloatArray, rel_step: float
) -> tuple[FloatArray, FloatArray]:
    """Per-stage ``(A_j, B_j)`` by central differences, all stages at once."""
    n, n_w = w.shape
    a = np.empty((n, n_w, n_w))
    b = np.empty((n, n_w, dyn.n_v))
    for k in range(n_w):
        h = rel_step * np.maximum(1.0, np.abs(w[:, k]))
        wp, wm = w.copy(), w.copy()
        wp[:, k] += h
        wm[:, k] -= h
        a[:, :, k] = (dyn(wp, v) - dyn(wm, v)) / (2.0 * h[:, None])
    for k in range(dyn.n_v):
        h = rel_step * np.maximum(1.0, np.abs(v[:, k]))
        vp, vm = v.copy(), v.copy()
        vp[:, k] += h
        vm[:, k] -= h
        b[:, :, k] = (dyn(w, vp) - dyn(w, vm)) / (2.0 * h[:, None])
    return a, b


@dataclass(frozen=True)
class Transcription:
    """Multiple-shooting transcription ``x = [w_0 .. w_N, v_0 .. v_{N-1}]`` of the MOMPC problem."""

    dyn: DiscreteDynamics
    costs: StageCosts
    term: TerminalIngredients
    x0: FloatArray
    horizon: int
    problem: MoProblem = field(repr=False)

    @property
    def n_states(self) -> int:
        return (self.horizon + 1) * self.dyn.n_w

    def split(self, x: FloatArray) -> tuple[FloatArray, FloatArray]:
        w = x[: self.n_states].reshape(self.horizon + 1, self.dyn.n_w)
        v = x[self.n_states :].reshape(self.horizon, self.dyn.n_v)
        return w, v

    @staticmethod
    def stack(w: FloatArray, v: FloatArray) -> FloatArray:
        return np.concatenate([w.reshape(-1), v.reshape(-1)])

    def objectives(self, x: FloatArray) -> FloatArray:
        w, v = self.split(x)
        return self.costs.stage(w[:-1], v).sum(axis=0) + self.term.cost(w[-1])

    def feasible(self, x: FloatArray, tol: float) -> bool:
        """Whether ``x`` starts at ``x0``, closes every shooting defect and ends in the terminal set.

        Boxes, defects and the terminal level are all checked up to ``tol``.
        """
        mo = self.problem
        in_box = bool(np.all(x >= mo.lower - tol) and np.all(x <= mo.upper + tol))
        defects = float(np.abs(mo.equalities(x)).max())
        terminal = float(mo.inequalities(x).min())
        return in_box and defects <= tol and terminal >= -tol

    def shift(self, x: FloatArray) -> FloatArray:
        """Shifted candidate ``(v_1 .. v_{N-1}, kappa(w_N))`` with its state sequence."""
        w, v = self.split(x)
        v_tail = self.term.controller(w[-1])
        w_next = self.dyn(w[-1], v_tail)
        return self.stack(np.vstack([w[1:], w_next]), np.vstack([v[1:], v_tail]))

    def rollout_guess(self) -> FloatArray:
        """States rolled out under the clipped terminal controller, clipped into the state box."""
        dyn = self.dyn
        w = np.empty((self.horizon + 1, dyn.n_w))
        v = np.empty((self.horizon, dyn.n_v))
        w[0] = self.x0
        for j in range(self.horizon):
            v[j] = np.clip(self.term.controller(w[j]), dyn.v_lb, dyn.v_ub)
            w[j + 1] = np.clip(dyn(w[j], v[j]), dyn.w_lb, dyn.w_ub)
        return self.stack(w, v)


def transcribe(
    dyn: DiscreteDynamics,
    costs: StageCosts,
    term: TerminalIngredients,
    x0: npt.ArrayLike,
    horizon: int,
    fd_step: float = FD_STEP,
) -> Transcription:
    """Build the multi-objective NLP of one MPC step.

    Equalities fix ``w_0`` and close the shooting defects; the only inequality is
    terminal-set membership; state and input boxes are variable bounds. Defect
    Jacobians come from stage-wise central differences of the step map.

    Raises:
        InvalidInputError: If ``horizon < 2`` or ``x0`` is not finite
    """
    if horizon < 2:
        raise InvalidInputError(f"horizon must be at least 2, got {horizon}")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (dyn.n_w,) or not np.all(np.isfinite(x0)):
        raise InvalidInputError(f"initial state must be a finite vector of length {dyn.n_w}")

    n_w, n_v, n = dyn.n_w, dyn.n_v, horizon
    n_states = (n + 1) * n_w
    dim = n_states + n * n_v
    n_j = costs.n_j

    def split(x: FloatArray) -> tuple[FloatArray, FloatArray]:
        return x[:n_states].reshape(n + 1, n_w), x[n_states:].reshape(n, n_v)

    def objectives(x: FloatArray) -> FloatArray:
        w, v = split(x)
        return costs.stage(w[:-1], v).sum(axis=0) + term.cost(w[-1])

    def objectives_jac(x: FloatArray) -> FloatArray:
        w, v = split(x)
        dw = w - costs.w_ss
        dv = v - costs.v_ss
        jac = np.zeros((n_j, dim))
        for i in range(n_j):
            grad_w = 2.0 * dw @ costs.q[i]
            grad_w[-1] = 2.0 * term.p @ dw[-1]
            jac[i, :n_states] = grad_w.reshape(-1)
            jac[i, n_states:] = (2.0 * dv @ costs.r[i]).reshape(-1)
        return jac

    def equalities(x: FloatArray) -> FloatArray:
        w, v = split(x)
        defects = w[1:] - dyn(w[:-1], v)
        return np.concatenate([w[0] - x0, defects.reshape(-1)])

    def eq_jac(x: FloatArray) -> FloatArray:
        w, v = split(x)
        a, b = _stage_jacobians(dyn, w[:-1], v, fd_step)
        jac = np.zeros((n_states, dim))
        jac[:n_w, :n_w] = np.eye(n_w)
        for j in range(n):
            rows = slice((j + 1) * n_w, (j + 2) * n_w)
            jac[rows, (j + 1) * n_w : (j + 2) * n_w] = np.eye(n_w)
            jac[rows, j * n_w : (j + 1) * n_w] = -a[j]
            jac[rows, n_states + j * n_v : n_states + (j + 1) * n_v] = -b[j]
        return jac

    def inequalities(x: FloatArray) -> FloatArray:
        w, _ = split(x)
        return np.array([term.alpha - term.cost(w[-1])])

    def ineq_jac(x: FloatArray) -> FloatArray:
        w, _ = split(x)
        jac = np.zeros((1, dim))
        jac[0, n * n_w : n_states] = -2.0 * term.p @ (w[-1] - term.w_ss)
        return jac

    lower = np.concatenate([np.tile(dyn.w_lb, n + 1), np.tile(dyn.v_lb, n)])
    upper = np.concatenate([np.tile(dyn.w_ub, n + 1), np.tile(dyn.v_ub, n)])
    problem = MoProblem(
        n_j=n_j,
        dim=dim,
        objectives=objectives,
        objectives_jac=objectives_jac,
        lower=lower,
        upper=upper,
        inequalities=inequalities,
        ineq_jac=ineq_jac,
        equalities=equalities,
        eq_jac=eq_jac,
        name=f"{dyn.name}/mpc",
    )
    transcription = Transcription(dyn=dyn, costs=costs, term=term, x0=x0, horizon=horizon, problem=problem)
    problem.initial_guess = transcription.rollout_guess()
    return transcription


@dataclass(frozen=True)
class StepResult:
    """Outcome of one MOMPC step."""

    applied_input: FloatArray
    next_state: FloatArray
    next_bound: DescentBound
    phi: FloatArray
    x_star: FloatArray
    j_star: FloatArray
    summary: PayoffSummary | None
    im_reports: list[SolveReport]
    dm_report: SolveReport | None
    candidate: FloatArray
    candidate_cost: FloatArray
    candidate_admissible: bool
    used_candidate: bool = False


def _candidate_admissible(tr: Transcription, candidate: FloatArray, cost: FloatArray, bound: FloatArray) -> bool:
    w, v = tr.split(candidate)
    dyn = tr.dyn
    in_inputs = bool(np.all(v[-1] >= dyn.v_lb - 1e-9) and np.all(v[-1] <= dyn.v_ub + 1e-9))
    in_terminal = bool(tr.term.cost(w[-1]) <= tr.term.alpha * (1.0 + 1e-9) + 1e-12)
    return in_inputs and in_terminal and bool(np.all(cost <= bound + DESCENT_TOLERANCE))


def _shifted_candidate_usable(
    tr: Transcription, guess: FloatArray, descent: DescentBound, config: SolverConfig
) -> bool:
    # shooting defects of the shifted candidate carry over from the previous DM solution
    tol = 10.0 * config.tol_feas
    return tr.feasible(guess, tol) and descent_admissible(tr.objectives(guess), descent, DESCENT_TOLERANCE)


def mompc_step(
    dyn: DiscreteDynamics,
    costs: StageCosts,
    term: TerminalIngredients,
    state: npt.ArrayLike,
    method: DmMethod,
    pref: npt.ArrayLike,
    descent: DescentBound,
    delta: float,
    config: SolverConfig,
    horizon: int,
    warm_start: FloatArray | None = None,
    k: int = 0,
    formulation: Formulation = Formulation.PS_UNIFIED,
    im_threads: int = 1,
) -> StepResult:
    """One iteration of the descent-enforcing MOMPC loop.

    The individual minima are solved without a descent bound, the DM problem with
    the carried bound. When the DM point leaves the bound, the warm start (the
    previous shifted candidate) replaces it if it is a feasible trajectory into the
    terminal set that meets the bound. A failed DM solve is never replaced.

    Raises:
        StepError: Tagged ``IM-i`` or ``DM`` when a stage fails
    """
    tr = transcribe(dyn, costs, term, state, horizon, config.fd_step)
    mo = tr.problem
    guess = mo.initial_guess if warm_start is None else np.clip(warm_start, mo.lower, mo.upper)

    try:
        im_reports = solve_individual_minima(mo, delta, formulation, config, [guess] * mo.n_j, threads=im_threads)
    except IndividualMinimumError as e:
        raise StepError(StepStage.im(e.index), k, e) from e
    phi = np.column_stack([mo.eval_objectives(r.x_star[: mo.dim]) for r in im_reports])

    spread = phi.max(axis=1) - phi.min(axis=1)
    summary: PayoffSummary | None = None
    dm_report: SolveReport | None = None
    used_candidate = False
    if np.all(spread <= 1e-10 * max(1.0, float(np.abs(phi).max()))):
        # every individual minimum attains the same point: the front has collapsed
        x_star = im_reports[0].x_star[: mo.dim]
        j_star = mo.eval_objectives(x_star)
    else:
        try:
            summary = payoff_summary(phi)
            solution = solve_dm(mo, method, pref, summary, descent, config, initial_guess=guess)
            x_star, j_star, dm_report = solution.x_star, solution.j_star, solution.report
        except MompcLabError as e:
            raise StepError(StepStage.DM, k, e) from e
        if not descent_admissible(j_star, descent, DESCENT_TOLERANCE):
            if warm_start is None or not _shifted_candidate_usable(tr, guess, descent, config):
                raise StepError(
                    StepStage.DM, k, DecisionMakingInfeasibleError(f"DM cost {j_star} exceeds bound {descent.values}")
                )
            log.warning("step %d: DM point leaves the descent cone, applying the shifted candidate", k)
            x_star, j_star, used_candidate = guess, mo.eval_objectives(guess), True

    w_star, v_star = tr.split(x_star)
    candidate = tr.shift(x_star)
    candidate_cost = tr.objectives(candidate)
    return StepResult(
        applied_input=v_star[0].copy(),
        next_state=w_star[1].copy(),
        next_bound=DescentBound.at(j_star),
        phi=phi,
        x_star=x_star,
        j_star=j_star,
        summary=summary,
        im_reports=im_reports,
        dm_report=dm_report,
        candidate=candidate,
        candidate_cost=candidate_cost,
        candidate_admissible=_candidate_admissible(tr, candidate, candidate_cost, j_star),
        used_candidate=used_candidate,
    )


def run_closed_loop(
    dyn: DiscreteDynamics,
    costs: StageCosts,
    term: TerminalIngredients,
    w0: npt.ArrayLike,
    method: DmMethod,
    pref: npt.ArrayLike,
    delta: float,
    stop: float,
    k_max: int,
    horizon: int,
    config: SolverConfig,
    descent_enabled: bool = True,
    record_timing: bool = False,
    im_threads: int = 1,
) -> ClosedLoopTrace:
    """Iterate :func:`mompc_step` with nominal propagation ``w(t_{k+1}) = w_1*``.

    Stops once every component of the DM cost is below ``stop`` or after ``k_max``
    steps. A failing step ends the run with a partial trace. With
    ``descent_enabled=False`` every step runs unbounded (fixed-weight sweeps).
    Wall times are recorded only with ``record_timing`` so that traces stay reproducible.
    ``im_threads`` workers share the individual-minimum solves of each step.
    """
    w = np.asarray(w0, dtype=float)
    beta = np.asarray(pref, dtype=float)
    trace = ClosedLoopTrace(
        method=str(method),
        preference=beta.tolist(),
        initial_state=w.tolist(),
        stop_threshold=stop,
        running_cost=[0.0] * costs.n_j,
    )
    bound = DescentBound.infinite(costs.n_j)
    warm: FloatArray | None = None
    running = np.zeros(costs.n_j)

    for k in range(k_max):
        started = time.perf_counter()
        try:
            result = mompc_step(
                dyn, costs, term, w, method, beta, bound, delta, config, horizon, warm, k, im_threads=im_threads
            )
        except StepError as e:
            log.error("closed loop aborted: %s", e)
            trace.status = TraceStatus.FAILED
            trace.failure = str(e.cause)
            trace.failure_stage = e.stage
            return trace

        running += costs.stage(w, result.applied_input)
        normals = (None, None)
        if result.summary is not None:
            normals = (
                result.summary.chim_normal.tolist(),
                result.summary.normalized_normal(result.summary.chim_normal).tolist(),
            )
            if k == 0:
                log.info("first-step CHIM normal %s (normalized %s)", normals[0], normals[1])
        trace.append(
            TraceStep(
                k=k,
                state=w.tolist(),
                applied_input=result.applied_input.tolist(),
                phi=result.phi.tolist(),
                j_star=result.j_star.tolist(),
                descent_bound=None if bound.is_infinite else bound.values.tolist(),
                im_statuses=[r.status.value for r in result.im_reports],
                dm_status="" if result.dm_report is None else result.dm_report.status.value,
                im_iterations=[r.iterations for r in result.im_reports],
                dm_iterations=0 if result.dm_report is None else result.dm_report.iterations,
                chim_normal=normals[0],
                chim_normal_normalized=normals[1],
                candidate_cost=result.candidate_cost.tolist(),
                candidate_admissible=result.candidate_admissible,
                used_candidate=result.used_candidate,
                wall_time=time.perf_counter() - started if record_timing else 0.0,
            )
        )
        trace.running_cost = running.tolist()
        if trace.initial_cost is None:
            trace.initial_cost = result.j_star.tolist()
        log.info("step %d: J*=%s", k, np.array2string(result.j_star, precision=4))

        if np.all(result.j_star < stop):
            trace.status = TraceStatus.CONVERGED
            return trace
        bound = result.next_bound if descent_enabled else DescentBound.infinite(costs.n_j)
        w = result.next_state
        warm = result.candidate

    trace.status = TraceStatus.MAX_STEPS
    return trace


def run_weighted_closed_loop(
    dyn: DiscreteDynamics,
    costs: StageCosts,
    term: TerminalIngredients,
    w0: npt.ArrayLike,
    weight: npt.ArrayLike,
    stop: float,
    k_max: int,
    horizon: int,
    config: SolverConfig,
) -> ClosedLoopTrace:
    """Single-objective MPC on the fixed weighted sum ``weight^T J`` without a descent bound.

    Serves as the comparison baseline for the multi-objective loop; the trace's
    running cost is the closed-loop cost vector of the weight.
    """
    weight = np.asarray(weight, dtype=float)
    w = np.asarray(w0, dtype=float)
    param = ScalarizationParam.weighted_sum(weight)
    trace = ClosedLoopTrace(
        method="WS_fixed",
        preference=weight.tolist(),
        initial_state=w.tolist(),
        stop_threshold=stop,
        running_cost=[0.0] * costs.n_j,
    )
    unbounded = DescentBound.infinite(costs.n_j)
    warm: FloatArray | None = None
    running = np.zeros(costs.n_j)

    for k in range(k_max):
        tr = transcribe(dyn, costs, term, w, horizon, config.fd_step)
        problem = build_scalarized(param, tr.problem, unbounded, config.fd_step)
        if warm is not None:
            problem = problem.with_initial_guess(np.clip(warm, tr.problem.lower, tr.problem.upper))
        report = solve(problem, config)
        if not (report.ok or report.constraint_violation <= config.tol_feas):
            trace.status = TraceStatus.FAILED
            trace.failure = f"weighted-sum solve ended with status {report.status}"
            trace.failure_stage = StepStage.DM
            return trace
        x_star = report.x_star
        j_star = tr.objectives(x_star)
        w_star, v_star = tr.split(x_star)
        running += costs.stage(w, v_star[0])
        trace.append(
            TraceStep(
                k=k,
                state=w.tolist(),
                applied_input=v_star[0].tolist(),
                phi=[],
                j_star=j_star.tolist(),
                dm_status=report.status.value,
                dm_iterations=report.iterations,
            )
        )
        trace.running_cost = running.tolist()
        if trace.initial_cost is None:
            trace.initial_cost = j_star.tolist()
        if np.all(j_star < stop):
            trace.status = TraceStatus.CONVERGED
            return trace
        w = w_star[1].copy()
        warm = tr.shift(x_star)

    trace.status = TraceStatus.MAX_STEPS
    return trace
