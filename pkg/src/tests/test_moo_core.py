"""Tests for objective vectors, dominance and pay-off geometry."""

import numpy as np
import pytest

from mompc_lab.exceptions import InvalidInputError, PreconditionError, RankDeficiencyError
from mompc_lab.moo_core import (
    DescentBound,
    Hyperplane,
    cloud_payoff_summary,
    cube_average,
    descent_admissible,
    fhp_objective,
    hyperplane_normal,
    objective_vector,
    pareto_filter,
    payoff_summary,
    scal,
    signed_distance,
)


class TestObjectiveVector:
    """Tests for objective_vector."""

    def test_accepts_finite_values(self):
        """Test a finite list becomes a float vector."""
        vec = objective_vector([1, 2, 3])

        assert vec.dtype == np.float64
        np.testing.assert_array_equal(vec, [1.0, 2.0, 3.0])

    def test_rejects_single_objective(self):
        """Test fewer than two objectives are rejected."""
        with pytest.raises(InvalidInputError):
            objective_vector([1.0])

    def test_rejects_non_finite(self):
        """Test NaN entries are rejected."""
        with pytest.raises(InvalidInputError, match="non-finite"):
            objective_vector([1.0, np.nan])


class TestScal:
    """Tests for scal."""

    def test_single_nonzero_entry(self):
        """Test a single positive entry is forced negative with unit L1 norm."""
        np.testing.assert_allclose(scal([3.0, 0.0, 0.0]), [-1.0, 0.0, 0.0])

    def test_already_normalized(self):
        """Test a normalized vector with negative dominant entry is unchanged."""
        v = np.array([0.024, -0.967, 0.009])

        np.testing.assert_allclose(scal(v), v)

    def test_symmetric(self):
        """Test the two-dimensional symmetric case."""
        np.testing.assert_allclose(scal([1.0, 1.0]), [-0.5, -0.5])

    def test_tie_resolves_to_first_index(self):
        """Test ties for the largest magnitude use the smallest index."""
        np.testing.assert_allclose(scal([-1.0, 1.0]), [-0.5, 0.5])

    def test_zero_vector(self):
        """Test the zero vector is rejected."""
        with pytest.raises(InvalidInputError):
            scal([0.0, 0.0])

    def test_idempotent(self):
        """Test rescaling a rescaled vector changes nothing."""
        for v in np.random.default_rng(5).normal(size=(200, 4)):
            once = scal(v)

            np.testing.assert_allclose(scal(once), once, rtol=1e-15, atol=1e-15)

    def test_scale_invariant(self):
        """Test any nonzero multiple rescales to the same vector."""
        rng = np.random.default_rng(6)
        for v in rng.normal(size=(200, 3)):
            factor = rng.uniform(1e-3, 1e3) * rng.choice([-1.0, 1.0])

            np.testing.assert_allclose(scal(factor * v), scal(v), rtol=1e-12, atol=1e-15)


class TestHyperplaneNormal:
    """Tests for hyperplane_normal."""

    def test_unit_simplex(self):
        """Test the hyperplane through the unit vectors has normal along the ones vector."""
        np.testing.assert_allclose(scal(hyperplane_normal(np.eye(3))), [-1 / 3, -1 / 3, -1 / 3])

    def test_two_dimensional(self):
        """Test the line through (1,0) and (0,2) has normal along (2,1)."""
        normal = hyperplane_normal(np.array([[1.0, 0.0], [0.0, 2.0]]))

        assert normal[0] == pytest.approx(2.0 * normal[1])

    def test_collinear_points(self):
        """Test affinely dependent points raise rank deficiency."""
        with pytest.raises(RankDeficiencyError):
            hyperplane_normal(np.array([[0.0, 1.0, 2.0], [0.0, 1.0, 2.0]]))

    def test_point_count_must_match_dimension(self):
        """Test three points in the plane are rejected."""
        with pytest.raises(RankDeficiencyError):
            hyperplane_normal(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))


class TestPayoffSummary:
    """Tests for payoff_summary."""

    def test_shifted_payoff_matrix(self):
        """Test nadir and utopia of a shifted pay-off matrix."""
        phi = np.array([[0.0, 0.716, 1.0], [0.641, 0.0, 0.293], [1.0, 1.0, 0.0]])

        summary = payoff_summary(phi)

        np.testing.assert_allclose(summary.nadir, [1.0, 0.641, 1.0])
        np.testing.assert_allclose(summary.utopia, [0.0, 0.0, 0.0])

    def test_ideal_normalized_payoff(self):
        """Test the symmetric pay-off matrix has the symmetric CHIM normal."""
        summary = payoff_summary(np.ones((3, 3)) - np.eye(3))

        np.testing.assert_allclose(summary.chim_normal, [-1 / 3, -1 / 3, -1 / 3])
        np.testing.assert_allclose(summary.visual_normal, [-1 / 3, -1 / 3, -1 / 3])

    def test_unit_scale(self):
        """Test nadir 0 and utopia -1 give the identity scaling."""
        summary = payoff_summary(-np.eye(3))

        np.testing.assert_allclose(summary.scale, np.eye(3))
        np.testing.assert_allclose(summary.nadir, np.zeros(3))
        np.testing.assert_allclose(summary.utopia, -np.ones(3))

    def test_normalize_round_trip(self):
        """Test normalization maps utopia to 0 and nadir to 1."""
        summary = payoff_summary(np.diag([-1.0, -10.0, -100.0]))

        np.testing.assert_allclose(summary.normalize(summary.utopia), np.zeros(3))
        np.testing.assert_allclose(summary.normalize(summary.nadir), np.ones(3))
        np.testing.assert_allclose(summary.denormalize(summary.normalize([-0.5, -2.0, -30.0])), [-0.5, -2.0, -30.0])

    def test_normalized_normal_uses_inverse_scaling(self):
        """Test the CHIM normal of an anisotropic front becomes symmetric in normalized space."""
        summary = payoff_summary(np.diag([-1.0, -10.0, -100.0]))

        np.testing.assert_allclose(summary.normalized_normal(summary.chim_normal), [-1 / 3, -1 / 3, -1 / 3])

    def test_quasi_normal_points_back_to_utopia(self):
        """Test the quasi-normal points from the CHIM barycenter towards the utopia point."""
        summary = payoff_summary(-np.eye(3))

        np.testing.assert_allclose(summary.quasi_normal_c, [-1 / 3, -1 / 3, -1 / 3])

    def test_rank_deficient(self):
        """Test a singular pay-off matrix is rejected."""
        with pytest.raises(RankDeficiencyError):
            payoff_summary(np.ones((3, 3)))

    def test_not_square(self):
        """Test a non-square pay-off matrix is rejected."""
        with pytest.raises(InvalidInputError):
            payoff_summary(np.ones((2, 3)))


class TestSignedDistance:
    """Tests for signed_distance and fhp_objective."""

    def test_perpendicular(self):
        """Test distance along the normal."""
        plane = Hyperplane(normal=np.array([0.0, -1.0]))

        assert signed_distance([0.0, -2.0], plane, [0.0, -1.0]) == pytest.approx(2.0)

    def test_oblique_direction(self):
        """Test a direction at 60 degrees doubles the distance."""
        plane = Hyperplane(normal=np.array([0.0, -1.0]))
        direction = [np.sin(np.pi / 3), -np.cos(np.pi / 3)]

        assert signed_distance([0.0, -2.0], plane, direction) == pytest.approx(4.0)

    def test_orthogonal_direction(self):
        """Test a direction perpendicular to the normal is rejected."""
        plane = Hyperplane(normal=np.array([0.0, -1.0]))

        with pytest.raises(PreconditionError):
            signed_distance([0.0, -2.0], plane, [1.0, 0.0])

    def test_zero_normal(self):
        """Test a zero normal is rejected."""
        with pytest.raises(InvalidInputError):
            Hyperplane(normal=np.zeros(2))

    def test_fhp_objective(self):
        """Test the furthest-to-hyperplane objective."""
        assert fhp_objective([2.0, 5.0], [-1.0, 0.0]) == pytest.approx(2.0)
        assert fhp_objective([0.0, 0.0], [-1.0, 0.0]) == 0.0

    def test_farthest_point_matches_fhp_minimizer(self):
        """Test the points farthest from a plane along d are exactly the minimizers of -w^T chi."""
        rng = np.random.default_rng(11)
        for _ in range(1000):
            normal = rng.normal(size=3)
            direction = rng.normal(size=3)
            if normal @ direction <= 1e-3:
                direction = -direction if normal @ direction < -1e-3 else normal
            plane = Hyperplane(normal=normal, bias=float(rng.normal()))
            points = rng.normal(size=(12, 3))
            points = np.vstack([points, points[rng.integers(12, size=3)]])

            distances = np.array([signed_distance(p, plane, direction) for p in points])
            fhp = np.array([fhp_objective(p, normal) for p in points])

            farthest = set(np.flatnonzero(distances == distances.max()))
            cheapest = set(np.flatnonzero(fhp == fhp.min()))
            assert farthest == cheapest


class TestParetoFilter:
    """Tests for pareto_filter."""

    def test_drops_dominated(self):
        """Test a dominated point is removed."""
        result = pareto_filter([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])

        np.testing.assert_array_equal(result, [[0.0, 1.0], [1.0, 0.0]])

    def test_weakly_dominated(self):
        """Test a weakly dominated point is removed."""
        np.testing.assert_array_equal(pareto_filter([[0.0, 1.0], [0.0, 2.0]]), [[0.0, 1.0]])

    def test_singleton(self):
        """Test a single point is kept."""
        np.testing.assert_array_equal(pareto_filter([[3.0, 4.0]]), [[3.0, 4.0]])

    def test_duplicates_collapse(self):
        """Test repeated points collapse to one."""
        assert pareto_filter([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).shape == (2, 2)

    def test_chunking_matches_single_block(self):
        """Test the block size does not change the result."""
        rng = np.random.default_rng(3)
        points = rng.normal(size=(300, 3))

        np.testing.assert_array_equal(pareto_filter(points, chunk=7), pareto_filter(points))

    def test_matches_brute_force(self):
        """Test the vectorized filter agrees with pairwise dominance checks."""
        rng = np.random.default_rng(8)
        points = np.round(rng.uniform(size=(150, 3)), 1)

        expected = []
        for i, p in enumerate(points):
            if any(np.array_equal(p, points[j]) for j in range(i)):
                continue
            if not any(np.all(q <= p) and np.any(q < p) for q in points):
                expected.append(p)

        np.testing.assert_array_equal(pareto_filter(points, chunk=16), np.array(expected))


class TestDescentAdmissible:
    """Tests for DescentBound and descent_admissible."""

    def test_equal_is_admissible(self):
        """Test the comparison is non-strict."""
        assert descent_admissible([1.0, 2.0], DescentBound.at([1.0, 2.0]))

    def test_exceeding(self):
        """Test one component above the bound fails."""
        assert not descent_admissible([1.1, 2.0], DescentBound.at([1.0, 2.0]))

    def test_infinite_sentinel(self):
        """Test the sentinel admits every vector."""
        bound = DescentBound.infinite(2)

        assert bound.is_infinite
        assert descent_admissible([1e300, 1e300], bound)

    def test_size_mismatch(self):
        """Test a bound with the wrong size is rejected."""
        with pytest.raises(InvalidInputError):
            DescentBound(n_j=3, values=np.zeros(2))


class TestCubeAverage:
    """Tests for cube_average."""

    def test_merges_points_in_one_cube(self):
        """Test nearby points are averaged and distant ones kept."""
        points = np.array([[0.0, 0.0], [0.001, 0.001], [1.0, 1.0]])

        result = cube_average(points, edge=0.01)

        np.testing.assert_allclose(result, [[0.0005, 0.0005], [1.0, 1.0]])

    def test_normalizes_by_cloud_extent(self):
        """Test the cube edge is relative to each axis' spread."""
        points = np.array([[0.0, 0.0], [0.5, 500.0], [1.0, 1000.0]])

        assert cube_average(points, edge=0.1).shape == (3, 2)

    def test_rejects_bad_edge(self):
        """Test a non-positive edge is rejected."""
        with pytest.raises(InvalidInputError):
            cube_average([[0.0, 0.0]], edge=0.0)

    def test_summary_sets_the_tiling(self):
        """Test cubes tile the utopia-nadir box of the summary, not the cloud's own extent."""
        summary = payoff_summary(np.array([[0.0, 10.0], [10.0, 0.0]]))
        points = np.array([[1.0, 1.0], [1.4, 1.4], [1.6, 1.6]])

        merged = cube_average(points, edge=0.1, summary=summary)
        split = cube_average(points, edge=0.1)

        np.testing.assert_allclose(merged, [[4.0 / 3.0, 4.0 / 3.0]])
        assert split.shape == (3, 2)

    def test_summary_keeps_points_outside_the_box(self):
        """Test points beyond the utopia corner still land in their own cubes."""
        summary = payoff_summary(np.array([[0.0, 1.0], [1.0, 0.0]]))

        result = cube_average([[-0.5, 0.5], [0.5, -0.5]], edge=0.1, summary=summary)

        np.testing.assert_allclose(result, [[-0.5, 0.5], [0.5, -0.5]])


class TestCloudPayoffSummary:
    """Tests for cloud_payoff_summary."""

    def test_minimizers_form_the_payoff_matrix(self):
        """Test column i holds the cloud point with the smallest i-th objective."""
        cloud = np.array([[0.0, 4.0, 3.0], [2.0, 0.0, 5.0], [4.0, 2.0, 0.0], [1.0, 1.0, 1.0]])

        summary = cloud_payoff_summary(cloud)

        np.testing.assert_array_equal(summary.phi, cloud[:3].T)
        np.testing.assert_array_equal(summary.utopia, [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(summary.nadir, [4.0, 4.0, 5.0])

    def test_empty_cloud(self):
        """Test an empty cloud is rejected."""
        with pytest.raises(InvalidInputError):
            cloud_payoff_summary(np.zeros((0, 3)))

    def test_single_point(self):
        """Test a one-point cloud has no utopia-nadir box."""
        with pytest.raises(RankDeficiencyError):
            cloud_payoff_summary([[1.0, 2.0, 3.0]])
