"""Shared test fixtures and utilities."""

import tomllib
from pathlib import Path

import numpy as np
import pytest

from mompc_lab.mompc import StageCosts, linear_dynamics
from mompc_lab.nlp import SolverConfig
from mompc_lab.pf_geom import ParetoMesh


@pytest.fixture
def fixtures_dir():
    """Get the fixtures directory path."""
    return Path(__file__).parent / "fixtures"


def load_fixture(fixtures_dir: Path, filename: str) -> dict:
    """Load a TOML fixture file."""
    with open(fixtures_dir / filename, "rb") as f:
        return tomllib.load(f)


def octant_mesh(level: int) -> ParetoMesh:
    """Unit-sphere octant in the negative orthant, subdivided ``level`` times and projected onto the sphere."""
    corners = -np.eye(3)
    faces = [(corners[0], corners[1], corners[2])]
    for _ in range(level):
        refined = []
        for a, b, c in faces:
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            ab, bc, ca = (p / np.linalg.norm(p) for p in (ab, bc, ca))
            refined += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        faces = refined
    points = np.array([p for face in faces for p in face])
    vertices, inverse = np.unique(np.round(points, 12), axis=0, return_inverse=True)
    vertices = vertices / np.linalg.norm(vertices, axis=1, keepdims=True)
    return ParetoMesh.from_arrays(vertices, inverse.reshape(-1, 3))


def grid_mesh(nx: int, ny: int, width: float = 1.0, height: float = 1.0) -> ParetoMesh:
    """Flat triangulated rectangle ``[0, width] x [0, height]`` in the plane z = 0."""
    xs, ys = np.meshgrid(np.linspace(0.0, width, nx + 1), np.linspace(0.0, height, ny + 1), indexing="ij")
    vertices = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)])
    triangles = []
    for i in range(nx):
        for j in range(ny):
            v00 = i * (ny + 1) + j
            v10, v01, v11 = v00 + ny + 1, v00 + 1, v00 + ny + 2
            triangles += [(v00, v10, v11), (v00, v11, v01)]
    return ParetoMesh.from_arrays(vertices, triangles)


@pytest.fixture
def solver_config():
    """Default solver settings."""
    return SolverConfig()


@pytest.fixture
def double_integrator():
    """Discretized double integrator with boxes, stage costs at the origin and three objectives."""
    dyn = linear_dynamics(
        a=[[1.0, 0.1], [0.0, 1.0]],
        b=[[0.005], [0.1]],
        w_lb=[-5.0, -5.0],
        w_ub=[5.0, 5.0],
        v_lb=[-1.0],
        v_ub=[1.0],
        name="double-integrator",
    )
    costs = StageCosts(
        q=(np.diag([1.0, 0.01]), np.diag([0.01, 1.0]), 0.01 * np.eye(2)),
        r=(np.array([[0.01]]), np.array([[0.01]]), np.array([[1.0]])),
        w_ss=np.zeros(2),
        v_ss=np.zeros(1),
    )
    return dyn, costs
