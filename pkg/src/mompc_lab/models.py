"""Data Transfer Objects for traces, reports and result tables."""

from pydantic import BaseModel, Field

from mompc_lab.constants import DESCENT_TOLERANCE, TraceStatus


class TraceStep(BaseModel):
    """One closed-loop step."""

    k: int
    state: list[float]
    applied_input: list[float]
    phi: list[list[float]]
    j_star: list[float]
    descent_bound: list[float] | None = Field(default=None, description="None for the unbounded first step")
    im_statuses: list[str] = Field(default_factory=list)
    dm_status: str = ""
    im_iterations: list[int] = Field(default_factory=list)
    dm_iterations: int = 0
    chim_normal: list[float] | None = None
    chim_normal_normalized: list[float] | None = None
    candidate_cost: list[float] | None = None
    candidate_admissible: bool | None = None
    used_candidate: bool = False
    wall_time: float = 0.0

    def descent_violation(self) -> float:
        """Largest amount by which the DM cost exceeds the carried bound."""
        if self.descent_bound is None:
            return 0.0
        return max(0.0, *(j - b for j, b in zip(self.j_star, self.descent_bound, strict=True)))


class ClosedLoopTrace(BaseModel):
    """Append-only record of a closed-loop run."""

    method: str
    preference: list[float]
    initial_state: list[float]
    stop_threshold: float
    status: TraceStatus = TraceStatus.MAX_STEPS
    failure: str | None = None
    failure_stage: str | None = None
    steps: list[TraceStep] = Field(default_factory=list)
    running_cost: list[float] = Field(default_factory=list, description="Accumulated stage cost per objective")
    initial_cost: list[float] | None = Field(default=None, description="DM cost vector of the first step")

    def append(self, step: TraceStep) -> None:
        self.steps.append(step)

    def descent_violations(self, tolerance: float = DESCENT_TOLERANCE) -> int:
        """Number of steps whose DM cost leaves the carried bound by more than the tolerance."""
        return sum(1 for step in self.steps if step.descent_violation() > tolerance)

    @property
    def steps_to_convergence(self) -> int | None:
        """Index of the step that met the stop threshold, None if never met."""
        if self.status is not TraceStatus.CONVERGED or not self.steps:
            return None
        return self.steps[-1].k

    @property
    def final_cost(self) -> list[float] | None:
        return self.steps[-1].j_star if self.steps else None

    def surrogate_bound_holds(self) -> bool:
        """Whether the accumulated stage cost stays within twice the first DM cost for every objective."""
        if self.initial_cost is None:
            return True
        return all(r <= 2.0 * c + DESCENT_TOLERANCE for r, c in zip(self.running_cost, self.initial_cost, strict=True))


class TerminalReport(BaseModel):
    """Sampled check of the terminal ingredients."""

    alpha: float
    n_samples: int
    max_invariance_violation: float = 0.0
    max_decrease_violation: list[float] = Field(default_factory=list)
    max_input_violation: float = 0.0
    max_state_violation: float = 0.0
    tolerance: float = 1e-10

    @property
    def passed(self) -> bool:
        worst = max(
            self.max_invariance_violation,
            self.max_input_violation,
            self.max_state_violation,
            *self.max_decrease_violation,
            0.0,
        )
        return worst <= self.tolerance


class DmEvalRow(BaseModel):
    """One row of the decision-making evaluation table."""

    example: str
    method: str
    coverage_pct: float | None = None
    translation_pct: float | None = None
    n_preferences: int = 0
    flagged: bool = False
    note: str = ""


class MompcSummaryRow(BaseModel):
    """Summary of one (case, method) closed-loop run."""

    case: str
    method: str
    status: TraceStatus
    steps: int
    steps_to_convergence: int | None = None
    final_cost: list[float] | None = None
    descent_violations: int = 0
    candidate_failures: int = 0
    surrogate_ok: bool = True
    failure: str | None = None
