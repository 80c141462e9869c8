"""Constants for the mompc-lab toolkit."""

from enum import StrEnum

DEFAULT_DELTA = 1e-3
DESCENT_SLACK = 1e-9
DESCENT_TOLERANCE = 1e-8
STOP_THRESHOLD = 1e-2
RANK_TOLERANCE = 1e-10
DEDUP_TOLERANCE = 1e-12

# Finite differences
FD_STEP = 1e-6
LINEARIZATION_STEP = 1e-5

# Ball pivoting radius selection
BALL_RADIUS_FACTOR = 2.5
BALL_RADIUS_ESCALATION = (1.0, 1.5, 2.0)

# Terminal-set search
ALPHA_FLOOR = 1e-8
ALPHA_BOUNDARY_SAMPLES = 200

# Comparison-cloud post processing
CUBE_EDGE = 5e-3


class DmMethod(StrEnum):
    """Decision-making methods turning a preference into one Pareto point."""

    WS1 = "WS1"
    WS2_KNEE = "WS2_knee"
    PS1_TRUE_NORMAL = "PS1_true_normal"
    PS2_QUASI_NORMAL = "PS2_quasi_normal"
    PS3_VISUAL_NORMAL = "PS3_visual_normal"
    PS4_NCHIM = "PS4_nchim"


class Formulation(StrEnum):
    """Scalarized problem layouts."""

    WS_ONLY = "ws-only"
    PS_UNIFIED = "ps-unified"


class SolveStatus(StrEnum):
    """Terminal states of the NLP solver."""

    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


class AreaMode(StrEnum):
    """Surface area evaluation modes."""

    PLANAR = "planar"
    SPHERICAL = "spherical"


class ExperimentKind(StrEnum):
    """Experiments the CLI can run."""

    DM_EVAL = "dm-eval"
    MOMPC_RUN = "mompc-run"
    WS_SWEEP = "ws-sweep"
    TERMINAL_CHECK = "terminal-check"
    PARETO_SAMPLE = "pareto-sample"


class ExampleName(StrEnum):
    """Benchmark problems."""

    ELLIPSOID_1 = "ellipsoid-1"
    NONCONVEX_SUB = "nonconvex-sub"
    ROOM_CLIMATE = "room-climate"


class StepStage(StrEnum):
    """Stage tags of one closed-loop step."""

    DM = "DM"

    @staticmethod
    def im(index: int) -> str:
        """Stage tag of the individual-minimum solve with zero-based index."""
        return f"IM-{index + 1}"


class TraceStatus(StrEnum):
    """Outcome of a closed-loop run."""

    CONVERGED = "converged"
    MAX_STEPS = "max_steps"
    FAILED = "failed"


class ExitCode:
    """Process exit codes."""

    SUCCESS = 0
    TOTAL_FAILURE = 1
    PARTIAL_FAILURE = 2
