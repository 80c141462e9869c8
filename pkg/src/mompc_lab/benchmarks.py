"""Static multi-objective benchmark problems with an ellipsoidal image set."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
import numpy.typing as npt

from mompc_lab.constants import ExampleName
from mompc_lab.exceptions import InvalidInputError, UnsupportedError
from mompc_lab.moo_core import FloatArray
from mompc_lab.scalarize import MoProblem

EXAMPLE_1_SEMI_AXES = (1.0, 10.0, 100.0)

# (normal, offset) pairs in coordinates normalized by the semi-axes: normal . u >= offset
NONCONVEX_SUB_CUTS: tuple[tuple[tuple[float, float, float], float], ...] = (
    ((1.0, 0.4, 0.0), -0.85),
    ((0.0, 1.0, 0.4), -0.8),
    ((0.4, 0.0, 1.0), -0.9),
)


def ellipsoid_problem(
    semi_axes: Sequence[float],
    center: Sequence[float] | None = None,
    half_spaces: Sequence[tuple[Sequence[float], float]] = (),
    name: str = "ellipsoid",
) -> MoProblem:
    """Identity objectives ``J(x) = x`` over an axis-aligned ellipsoid.

    Args:
        semi_axes: Positive semi-axis lengths, one per objective
        center: Ellipsoid center, the origin by default
        half_spaces: Extra cuts ``n . u >= b`` in normalized coordinates ``u = (x - center) / semi_axes``
        name: Problem name used in logs

    Raises:
        InvalidInputError: On non-positive semi-axes or mismatching sizes
    """
    a = np.asarray(semi_axes, dtype=float)
    if a.ndim != 1 or a.size < 2 or np.any(a <= 0.0):
        raise InvalidInputError(f"semi-axes must be positive with at least two entries, got {a}")
    c = np.zeros_like(a) if center is None else np.asarray(center, dtype=float)
    if c.shape != a.shape:
        raise InvalidInputError("center and semi-axes differ in length")
    n = a.size
    normals = np.array([np.asarray(h[0], dtype=float) for h in half_spaces]).reshape(-1, n)
    offsets = np.array([float(h[1]) for h in half_spaces])

    def objectives(x: FloatArray) -> FloatArray:
        return np.array(x, dtype=float)

    def objectives_jac(_x: FloatArray) -> FloatArray:
        return np.eye(n)

    def inequalities(x: FloatArray) -> FloatArray:
        u = (x - c) / a
        return np.concatenate([[1.0 - u @ u], normals @ u - offsets])

    def ineq_jac(x: FloatArray) -> FloatArray:
        u = (x - c) / a
        return np.vstack([-2.0 * u / a, normals / a])

    return MoProblem(
        n_j=n,
        dim=n,
        objectives=objectives,
        objectives_jac=objectives_jac,
        lower=c - a,
        upper=c + a,
        initial_guess=c.copy(),
        inequalities=inequalities,
        ineq_jac=ineq_jac,
        name=name,
    )


def example_1_problem() -> MoProblem:
    """Ellipsoid with semi-axes (1, 10, 100) centered at the origin."""
    return ellipsoid_problem(EXAMPLE_1_SEMI_AXES, name=str(ExampleName.ELLIPSOID_1))


def nonconvex_sub_problem() -> MoProblem:
    """Example-1 ellipsoid clipped by three tilted half-spaces.

    The cuts flatten the front unevenly near each individual minimum, giving an
    asymmetric front whose CHIM normal is far from the symmetric ideal.
    """
    return ellipsoid_problem(EXAMPLE_1_SEMI_AXES, half_spaces=NONCONVEX_SUB_CUTS, name=str(ExampleName.NONCONVEX_SUB))


def static_example(name: ExampleName) -> MoProblem:
    """Benchmark problem by name.

    Raises:
        UnsupportedError: For examples that are not static problems
    """
    match name:
        case ExampleName.ELLIPSOID_1:
            return example_1_problem()
        case ExampleName.NONCONVEX_SUB:
            return nonconvex_sub_problem()
    raise UnsupportedError(f"{name} is not a static benchmark problem")


def ellipsoid_ray_hit(semi_axes: npt.ArrayLike, origin: npt.ArrayLike, direction: npt.ArrayLike) -> FloatArray:
    """Far intersection of the ray ``origin + l d`` (l >= 0) with the origin-centered ellipsoid surface."""
    a = np.asarray(semi_axes, dtype=float)
    o = np.asarray(origin, dtype=float) / a
    d = np.asarray(direction, dtype=float) / a
    qa, qb, qc = d @ d, 2.0 * o @ d, o @ o - 1.0
    disc = qb * qb - 4.0 * qa * qc
    if qa == 0.0 or disc < 0.0:
        raise InvalidInputError("ray misses the ellipsoid")
    step = (-qb + np.sqrt(disc)) / (2.0 * qa)
    return np.asarray(origin, dtype=float) + step * np.asarray(direction, dtype=float)
