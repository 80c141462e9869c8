"""Core multi-objective types, dominance and pay-off-matrix geometry."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
from scipy import linalg

from mompc_lab.constants import RANK_TOLERANCE
from mompc_lab.exceptions import InvalidInputError, PreconditionError, RankDeficiencyError

type FloatArray = npt.NDArray[np.float64]
type ObjectiveVector = FloatArray


def objective_vector(values: npt.ArrayLike) -> ObjectiveVector:
    """Validate and convert values into an objective vector.

    Args:
        values: One entry per objective

    Returns:
        A float copy of the values

    Raises:
        InvalidInputError: If fewer than two objectives or non-finite entries are given
    """
    vec = np.array(values, dtype=float).reshape(-1)
    if vec.size < 2:
        raise InvalidInputError(f"objective vector needs at least 2 entries, got {vec.size}")
    if not np.all(np.isfinite(vec)):
        raise InvalidInputError(f"objective vector has non-finite entries: {vec}")
    return vec


@dataclass(frozen=True)
class Hyperplane:
    """Hyperplane ``normal^T chi + bias = 0``."""

    normal: FloatArray
    bias: float = 0.0

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float).reshape(-1)
        if not np.any(normal):
            raise InvalidInputError("hyperplane normal must be nonzero")
        object.__setattr__(self, "normal", normal)

    @classmethod
    def through(cls, normal: npt.ArrayLike, point: npt.ArrayLike) -> Hyperplane:
        """Hyperplane with the given normal passing through a point."""
        normal = np.asarray(normal, dtype=float)
        return cls(normal=normal, bias=-float(normal @ np.asarray(point, dtype=float)))


@dataclass(frozen=True)
class DescentBound:
    """Component-wise upper bound on the objective vector.

    The unbounded state is a flag rather than an infinite float so that descent
    checks never run into inf/NaN arithmetic.
    """

    n_j: int
    values: FloatArray | None = None

    def __post_init__(self):
        if self.values is not None:
            values = np.array(self.values, dtype=float).reshape(-1)
            if values.size != self.n_j:
                raise InvalidInputError(f"descent bound has {values.size} entries, expected {self.n_j}")
            object.__setattr__(self, "values", values)

    @classmethod
    def infinite(cls, n_j: int) -> DescentBound:
        """The unbounded sentinel used before the first closed-loop step."""
        return cls(n_j=n_j)

    @classmethod
    def at(cls, values: npt.ArrayLike) -> DescentBound:
        """Bound at a finite objective vector."""
        vec = np.array(values, dtype=float).reshape(-1)
        return cls(n_j=vec.size, values=vec)

    @property
    def is_infinite(self) -> bool:
        """Whether this is the unbounded sentinel."""
        return self.values is None


@dataclass(frozen=True)
class PayoffSummary:
    """Pay-off matrix and everything derived from it.

    Column ``i`` of ``phi`` is the objective vector at the i-th individual minimum.
    """

    phi: FloatArray
    nadir: ObjectiveVector
    utopia: ObjectiveVector
    chim_normal: FloatArray
    quasi_normal_c: FloatArray
    visual_normal: FloatArray
    scale: FloatArray
    bary: FloatArray = field(repr=False)

    @property
    def n_j(self) -> int:
        """Number of objectives."""
        return self.phi.shape[0]

    @property
    def scale_diag(self) -> FloatArray:
        """Diagonal of the scaling matrix."""
        return np.diag(self.scale).copy()

    @property
    def phi_shifted(self) -> FloatArray:
        """Pay-off matrix shifted so that the utopia point sits at the origin."""
        return self.phi - self.utopia[:, None]

    def normalize(self, j: npt.ArrayLike) -> FloatArray:
        """Map objective vectors (last axis) into the unit normalization cube."""
        return (np.asarray(j, dtype=float) - self.utopia) * self.scale_diag

    def denormalize(self, u: npt.ArrayLike) -> FloatArray:
        """Inverse of :meth:`normalize`."""
        return np.asarray(u, dtype=float) / self.scale_diag + self.utopia

    def normalized_normal(self, w: npt.ArrayLike) -> FloatArray:
        """Hyperplane normal expressed in normalized space, rescaled by :func:`scal`.

        Normals transform with the inverse scaling, unlike points and directions.
        """
        return scal(np.asarray(w, dtype=float) / self.scale_diag)


def scal(v: npt.ArrayLike) -> FloatArray:
    """Rescale a vector to unit L1 norm with its largest-magnitude entry negative.

    Ties for the largest magnitude resolve to the smallest index.

    Args:
        v: Nonzero vector

    Returns:
        The rescaled vector

    Raises:
        InvalidInputError: If v is the zero vector
    """
    vec = np.asarray(v, dtype=float).reshape(-1)
    l1 = np.abs(vec).sum()
    if l1 == 0.0 or not np.isfinite(l1):
        raise InvalidInputError(f"scal needs a nonzero finite vector, got {vec}")
    i_max = int(np.argmax(np.abs(vec)))
    c = -np.sign(vec[i_max]) / l1
    return c * vec


def hyperplane_normal(points: npt.ArrayLike) -> FloatArray:
    """Normal of the hyperplane through n affinely independent points in R^n.

    Args:
        points: Matrix whose columns are the points

    Returns:
        Unit normal vector (sign unspecified)

    Raises:
        RankDeficiencyError: If the columns are affinely dependent or their count differs from n
    """
    cols = np.asarray(points, dtype=float)
    n, k = cols.shape
    diff = (cols[:, 1:] - cols[:, :1]).T
    if k != n:
        raise RankDeficiencyError(f"need {n} points in R^{n} to span a hyperplane, got {k}")
    _, s, vt = linalg.svd(diff, full_matrices=True)
    if s.size == 0 or s[0] == 0.0:
        raise RankDeficiencyError("points coincide")
    rank = int(np.sum(s > RANK_TOLERANCE * s[0]))
    if rank != k - 1:
        raise RankDeficiencyError(f"points are affinely dependent (difference rank {rank} < {k - 1})")
    return vt[-1]


def payoff_summary(phi: npt.ArrayLike) -> PayoffSummary:
    """Derive nadir, utopia, normals and scaling from a pay-off matrix.

    Args:
        phi: Square pay-off matrix, column i evaluated at the i-th individual minimum

    Returns:
        The pay-off summary

    Raises:
        InvalidInputError: If phi is not square and finite, or an objective is degenerate
        RankDeficiencyError: If phi is rank deficient
    """
    phi = np.array(phi, dtype=float)
    if phi.ndim != 2 or phi.shape[0] != phi.shape[1] or phi.shape[0] < 2:
        raise InvalidInputError(f"pay-off matrix must be square with n_J >= 2, got shape {phi.shape}")
    if not np.all(np.isfinite(phi)):
        raise InvalidInputError("pay-off matrix has non-finite entries")
    n_j = phi.shape[0]
    if np.linalg.matrix_rank(phi) < n_j:
        raise RankDeficiencyError("pay-off matrix is rank deficient")

    nadir = phi.max(axis=1)
    utopia = phi.min(axis=1)
    spread = nadir - utopia
    if np.any(spread <= 0.0):
        degenerate = np.flatnonzero(spread <= 0.0).tolist()
        raise InvalidInputError(f"degenerate objectives {degenerate}: nadir equals utopia")
    scale = np.diag(1.0 / spread)
    bary = np.full(n_j, 1.0 / n_j)

    chim_normal = scal(hyperplane_normal(phi))
    quasi_normal_c = scal(-(phi @ bary - utopia))
    visual_normal = scal(np.linalg.solve(scale, hyperplane_normal(scale @ phi)))
    return PayoffSummary(
        phi=phi,
        nadir=nadir,
        utopia=utopia,
        chim_normal=chim_normal,
        quasi_normal_c=quasi_normal_c,
        visual_normal=visual_normal,
        scale=scale,
        bary=bary,
    )


def cloud_payoff_summary(points: npt.ArrayLike) -> PayoffSummary:
    """Pay-off summary of a finite cloud: column i is the cloud point minimizing objective i.

    Raises:
        InvalidInputError: If the cloud is empty or an objective is constant over it
        RankDeficiencyError: If the minimizers are affinely dependent
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 0:
        raise InvalidInputError("empty point cloud")
    return payoff_summary(pts[np.argmin(pts, axis=0)].T)


def signed_distance(point: npt.ArrayLike, plane: Hyperplane, direction: npt.ArrayLike) -> float:
    """Signed distance from a hyperplane to a point, measured along a direction.

    Args:
        point: Image-space point
        plane: Reference hyperplane
        direction: Measuring direction, strictly less than 90 degrees from the normal

    Returns:
        ``(w^T chi + b) / ||w|| / cos(theta)``

    Raises:
        PreconditionError: If the direction is not strictly within 90 degrees of the normal
    """
    w = plane.normal
    d = np.asarray(direction, dtype=float)
    wd = float(w @ d)
    if wd <= 0.0:
        raise PreconditionError("direction must make an angle below 90 degrees with the plane normal")
    w_norm = float(np.linalg.norm(w))
    cos_theta = wd / (w_norm * float(np.linalg.norm(d)))
    return (float(w @ np.asarray(point, dtype=float)) + plane.bias) / w_norm / cos_theta


def fhp_objective(point: npt.ArrayLike, normal: npt.ArrayLike) -> float:
    """Furthest-to-hyperplane objective ``-w^T chi`` (to be minimized)."""
    return -float(np.asarray(normal, dtype=float) @ np.asarray(point, dtype=float))


def pareto_filter(points: npt.ArrayLike, chunk: int = 512) -> FloatArray:
    """Return the nondominated subset of a finite point set.

    Equal points collapse to their first occurrence; input order is kept.

    Args:
        points: Array of shape (M, n_J)
        chunk: Rows compared per block

    Returns:
        Nondominated points, shape (K, n_J)
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[0] == 0:
        return pts.copy()
    _, first = np.unique(pts, axis=0, return_index=True)
    pts = pts[np.sort(first)]

    keep = np.ones(pts.shape[0], dtype=bool)
    for start in range(0, pts.shape[0], chunk):
        block = pts[start : start + chunk]
        le = np.all(pts[None, :, :] <= block[:, None, :], axis=2)
        lt = np.any(pts[None, :, :] < block[:, None, :], axis=2)
        keep[start : start + chunk] = ~np.any(le & lt, axis=1)
    return pts[keep]


def descent_admissible(j: npt.ArrayLike, bound: DescentBound, tolerance: float = 0.0) -> bool:
    """Check ``j <= bound`` component-wise; the unbounded sentinel admits everything."""
    if bound.is_infinite:
        return True
    vec = np.asarray(j, dtype=float)
    if vec.size != bound.n_j:
        raise InvalidInputError(f"objective vector has {vec.size} entries, bound has {bound.n_j}")
    return bool(np.all(vec <= bound.values + tolerance))


def cube_average(points: npt.ArrayLike, edge: float, summary: PayoffSummary | None = None) -> FloatArray:
    """Average points sharing a cube of the given edge length in normalized space.

    With a pay-off ``summary`` the cubes tile its utopia-nadir normalization;
    without one the cloud's own bounding box is used. Cubes are emitted in
    lexicographic order of their integer coordinates.
    """
    if edge <= 0.0:
        raise InvalidInputError(f"cube edge must be positive, got {edge}")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 0:
        return pts.copy()
    if summary is not None:
        scaled = summary.normalize(pts)
    else:
        low = pts.min(axis=0)
        span = np.where(pts.max(axis=0) > low, pts.max(axis=0) - low, 1.0)
        scaled = (pts - low) / span
    keys = np.floor(scaled / edge).astype(np.int64)
    unique_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((unique_keys.shape[0], pts.shape[1]))
    np.add.at(sums, inverse.reshape(-1), pts)
    counts = np.bincount(inverse.reshape(-1), minlength=unique_keys.shape[0])
    return sums / counts[:, None]
