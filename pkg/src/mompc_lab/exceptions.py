"""Custom exceptions for the mompc-lab toolkit."""


class MompcLabError(Exception):
    """Base exception for all mompc-lab errors."""

    pass


class InvalidInputError(MompcLabError):
    """Argument outside the domain of an operation (zero vector, bad index, bad shape)."""

    pass


class RankDeficiencyError(MompcLabError):
    """Points or matrices lack the rank an operation needs."""

    pass


class PreconditionError(MompcLabError):
    """A geometric precondition does not hold."""

    pass


class InvalidProblemError(MompcLabError):
    """Nonlinear program rejected at construction."""

    pass


class NumericalFailureError(MompcLabError):
    """A model or objective evaluated to a non-finite value."""

    def __init__(self, message: str, point=None):
        """Initialize the error.

        Args:
            message: Human readable description
            point: The evaluation point that produced the non-finite value
        """
        super().__init__(message)
        self.point = point


class IndividualMinimumError(MompcLabError):
    """An individual-minimum solve did not reach optimality."""

    def __init__(self, index: int, status: str):
        """Initialize the error.

        Args:
            index: Zero-based objective index of the failed solve
            status: Solver status reported for the solve
        """
        super().__init__(f"individual minimum {index + 1} failed with status {status}")
        self.index = index
        self.status = status


class DecisionMakingInfeasibleError(MompcLabError):
    """The decision-making problem has no feasible point (empty descent cone)."""

    def __init__(self, message: str, status: str | None = None):
        """Initialize the error.

        Args:
            message: Human readable description
            status: Solver status reported for the solve
        """
        super().__init__(message)
        self.status = status


class StepError(MompcLabError):
    """A closed-loop step failed in one of its stages."""

    def __init__(self, stage: str, k: int, cause: Exception):
        """Initialize the error.

        Args:
            stage: Stage tag, "IM-<i>" or "DM"
            k: Closed-loop time index
            cause: The underlying error
        """
        super().__init__(f"step {k} failed in stage {stage}: {cause}")
        self.stage = stage
        self.k = k
        self.cause = cause


class EmptyMeshError(MompcLabError):
    """Surface reconstruction produced no triangles."""

    pass


class OffSphereError(MompcLabError):
    """Mesh vertices do not lie on the sphere given for spherical areas."""

    pass


class GeodesicError(MompcLabError):
    """Geodesic query cannot be answered (bad source, disconnected pair)."""

    pass


class UnstabilizableError(MompcLabError):
    """The linearized pair (A, B) cannot be stabilized by state feedback."""

    pass


class TerminalSetError(MompcLabError):
    """Terminal ingredients could not be constructed."""

    pass


class UnsupportedError(MompcLabError):
    """Requested variant is not supported."""

    pass


class ExperimentConfigError(MompcLabError):
    """Experiment configuration is missing kind-specific information."""

    pass
