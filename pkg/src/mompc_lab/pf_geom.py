"""Pareto-front geometry: reconstruction, areas, geodesics, Karcher references and DM metrics.

All metric helpers expect points in normalized image space.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import numpy.typing as npt
import open3d as o3d
from pydantic import BaseModel, ConfigDict, Field
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from mompc_lab.constants import BALL_RADIUS_ESCALATION, BALL_RADIUS_FACTOR, DEDUP_TOLERANCE, AreaMode
from mompc_lab.exceptions import (
    EmptyMeshError,
    GeodesicError,
    InvalidInputError,
    OffSphereError,
    UnsupportedError,
)
from mompc_lab.logging import log
from mompc_lab.moo_core import FloatArray

type IndexArray = npt.NDArray[np.int64]


class ReconstructionConfig(BaseModel):
    """Ball-pivoting settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    radius_factor: float = Field(default=BALL_RADIUS_FACTOR, gt=0, description="Base radius over median NN distance")
    escalation: tuple[float, ...] = Field(default=BALL_RADIUS_ESCALATION, description="Radius multipliers per pass")
    normal_neighbors: int = Field(default=20, ge=3, description="Neighbors used for normal estimation")
    dm_dedup_tol: float = Field(default=1e-6, gt=0, description="Merge distance for decision-making outputs")


@dataclass(frozen=True)
class PointCloud:
    """Finite, deduplicated point samples (one row per point)."""

    points: FloatArray

    @classmethod
    def from_points(cls, points: npt.ArrayLike, tol: float = DEDUP_TOLERANCE) -> PointCloud:
        """Build a cloud, merging points closer than ``tol`` into their first occurrence.

        Raises:
            InvalidInputError: On non-finite entries or a non-2-D array
        """
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2:
            raise InvalidInputError(f"point cloud must be 2-D, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point cloud has non-finite entries")
        if pts.shape[0] < 2:
            return cls(points=pts.copy())
        keep = np.ones(pts.shape[0], dtype=bool)
        for i, j in sorted(cKDTree(pts).query_pairs(tol)):
            if keep[i]:
                keep[j] = False
        return cls(points=pts[keep])

    def __len__(self) -> int:
        return self.points.shape[0]

    def nearest_neighbor_distances(self) -> FloatArray:
        dist, _ = cKDTree(self.points).query(self.points, k=2)
        return dist[:, 1]


@dataclass(frozen=True)
class ParetoMesh:
    """Triangle mesh over a sampled front with edge and vertex adjacency."""

    vertices: FloatArray
    triangles: IndexArray
    edges: IndexArray = field(repr=False)
    neighbors: tuple[IndexArray, ...] = field(repr=False)
    vertex_triangles: tuple[IndexArray, ...] = field(repr=False)

    @classmethod
    def from_arrays(cls, vertices: npt.ArrayLike, triangles: npt.ArrayLike) -> ParetoMesh:
        """Build a mesh, dropping invalid, repeated and zero-area triangles and orienting them consistently.

        Raises:
            InvalidInputError: On out-of-range indices
        """
        verts = np.asarray(vertices, dtype=float)
        tris = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if tris.size and (tris.min() < 0 or tris.max() >= verts.shape[0]):
            raise InvalidInputError("triangle index out of range")

        if tris.size:
            distinct = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
            tris = tris[distinct]
            area = _triangle_areas(verts, tris)
            scale = max(float(np.ptp(verts, axis=0).max(initial=0.0)), 1e-300)
            tris = tris[area > 1e-14 * scale**2]
            _, first = np.unique(np.sort(tris, axis=1), axis=0, return_index=True)
            tris = _orient(tris[np.sort(first)])

        edges = np.unique(np.sort(np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1), axis=0)
        n = verts.shape[0]
        neighbors: list[list[int]] = [[] for _ in range(n)]
        for a, b in edges:
            neighbors[a].append(int(b))
            neighbors[b].append(int(a))
        vertex_triangles: list[list[int]] = [[] for _ in range(n)]
        for t, tri in enumerate(tris):
            for v in tri:
                vertex_triangles[v].append(t)
        return cls(
            vertices=verts,
            triangles=tris,
            edges=edges.reshape(-1, 2),
            neighbors=tuple(np.array(nb, dtype=np.int64) for nb in neighbors),
            vertex_triangles=tuple(np.array(vt, dtype=np.int64) for vt in vertex_triangles),
        )

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @cached_property
    def edge_lengths(self) -> FloatArray:
        return np.linalg.norm(self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]], axis=1)

    @cached_property
    def edge_graph(self) -> csr_matrix:
        """Symmetric sparse graph weighted by edge length."""
        n = self.n_vertices
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        weights = np.concatenate([self.edge_lengths, self.edge_lengths])
        return coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()

    def component_labels(self) -> IndexArray:
        _, labels = connected_components(self.edge_graph, directed=False)
        return labels

    def snap(self, points: npt.ArrayLike) -> IndexArray:
        """Index of the nearest referenced vertex for each point."""
        used = np.unique(self.triangles)
        _, idx = cKDTree(self.vertices[used]).query(np.atleast_2d(np.asarray(points, dtype=float)))
        return used[idx]


def _triangle_areas(vertices: FloatArray, triangles: IndexArray) -> FloatArray:
    if triangles.size == 0:
        return np.zeros(0)
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _orient(triangles: IndexArray) -> IndexArray:
    """Flip triangles so that neighbors across manifold edges traverse the shared edge oppositely."""
    tris = triangles.copy()
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for t, (a, b, c) in enumerate(tris):
        for u, v in ((a, b), (b, c), (c, a)):
            edge_faces.setdefault((min(u, v), max(u, v)), []).append(t)

    def directed(t: int) -> set[tuple[int, int]]:
        a, b, c = tris[t]
        return {(int(a), int(b)), (int(b), int(c)), (int(c), int(a))}

    seen = np.zeros(len(tris), dtype=bool)
    for start in range(len(tris)):
        if seen[start]:
            continue
        seen[start] = True
        queue = deque([start])
        while queue:
            t = queue.popleft()
            own = directed(t)
            a, b, c = tris[t]
            for u, v in ((a, b), (b, c), (c, a)):
                faces = edge_faces[(min(u, v), max(u, v))]
                if len(faces) != 2:
                    continue
                other = faces[0] if faces[1] == t else faces[1]
                if seen[other]:
                    continue
                if own & directed(other):
                    tris[other] = tris[other][::-1]
                seen[other] = True
                queue.append(other)
    return tris


def default_radii(cloud: PointCloud, config: ReconstructionConfig) -> list[float]:
    """Ascending pivot radii from the median nearest-neighbor distance."""
    base = config.radius_factor * float(np.median(cloud.nearest_neighbor_distances()))
    return [base * m for m in sorted(config.escalation)]


def ball_pivot(cloud: PointCloud, radii: list[float], normal_neighbors: int = 20) -> ParetoMesh:
    """Ball-pivoting reconstruction of a 3-D point cloud.

    Normals are estimated from nearest neighbors and oriented towards a viewpoint
    beyond the low corner of the bounding box, the side a minimization front faces.

    Args:
        cloud: Points to interpolate; they become the mesh vertices in input order
        radii: Ascending positive pivot radii
        normal_neighbors: Neighbor count for normal estimation

    Returns:
        The mesh

    Raises:
        InvalidInputError: On fewer than three points, non-3-D points or bad radii
        EmptyMeshError: If no triangle could be seeded
    """
    pts = cloud.points
    if len(cloud) < 3:
        raise InvalidInputError(f"ball pivoting needs at least 3 points, got {len(cloud)}")
    if pts.shape[1] != 3:
        raise UnsupportedError(f"ball pivoting works on 3-D points, got dimension {pts.shape[1]}")
    if not radii or min(radii) <= 0.0 or list(radii) != sorted(radii):
        raise InvalidInputError(f"radii must be positive and ascending, got {radii}")

    pcd = o3d.geometry.PointCloud(o3d.utility.Vector3dVector(pts))
    pcd.estimate_normals(o3d.geometry.KDTreeSearchParamKNN(knn=min(normal_neighbors, len(cloud))))
    extent = max(float(np.ptp(pts, axis=0).max()), 1e-12)
    pcd.orient_normals_towards_camera_location(pts.mean(axis=0) - 2.0 * extent * np.ones(3))
    mesh = o3d.geometry.TriangleMesh.create_from_point_cloud_ball_pivoting(pcd, o3d.utility.DoubleVector(list(radii)))

    triangles = np.asarray(mesh.triangles, dtype=np.int64)
    if triangles.size == 0:
        raise EmptyMeshError(f"no triangle seeded with radii {radii}")
    # map reconstruction vertices back onto the input ordering
    _, to_input = cKDTree(pts).query(np.asarray(mesh.vertices))
    result = ParetoMesh.from_arrays(pts, to_input[triangles])
    if result.triangles.size == 0:
        raise EmptyMeshError("reconstruction produced only degenerate triangles")
    log.debug("ball pivoting: %d points -> %d triangles", len(cloud), len(result.triangles))
    return result


def reconstruct(cloud: PointCloud, config: ReconstructionConfig) -> ParetoMesh:
    """Ball pivoting with radii chosen by :func:`default_radii`."""
    return ball_pivot(cloud, default_radii(cloud, config), config.normal_neighbors)


def mesh_area(
    mesh: ParetoMesh,
    mode: AreaMode = AreaMode.PLANAR,
    center: npt.ArrayLike | None = None,
    radius: float = 1.0,
) -> float:
    """Surface area of a mesh.

    Planar mode sums flat triangle areas. Spherical mode treats every triangle as
    a geodesic triangle on the sphere ``|v - center| = radius`` and sums spherical
    excesses from L'Huilier's formula.

    Raises:
        OffSphereError: In spherical mode, if a vertex is off the sphere by more than 1e-6
    """
    tris = mesh.triangles
    if mode is AreaMode.PLANAR:
        return float(_triangle_areas(mesh.vertices, tris).sum())

    c = np.zeros(mesh.vertices.shape[1]) if center is None else np.asarray(center, dtype=float)
    unit = (mesh.vertices - c) / radius
    norms = np.linalg.norm(unit, axis=1)
    used = np.unique(tris)
    off = np.abs(norms[used] - 1.0)
    if off.size and off.max() > 1e-6:
        raise OffSphereError(f"vertex off the sphere by {off.max():.3e}")
    unit = unit / np.where(norms > 0.0, norms, 1.0)[:, None]

    p, q, r = (unit[tris[:, k]] for k in range(3))

    def arc(u: FloatArray, v: FloatArray) -> FloatArray:
        return 2.0 * np.arcsin(np.clip(0.5 * np.linalg.norm(u - v, axis=1), 0.0, 1.0))

    a, b, cc = arc(q, r), arc(p, r), arc(p, q)
    s = 0.5 * (a + b + cc)
    prod = np.tan(0.5 * s) * np.tan(0.5 * (s - a)) * np.tan(0.5 * (s - b)) * np.tan(0.5 * (s - cc))
    excess = 4.0 * np.arctan(np.sqrt(np.maximum(prod, 0.0)))
    return float(excess.sum() * radius**2)


@dataclass(frozen=True)
class GeodesicField:
    """Geodesic distance from one source vertex to every vertex (inf if unreachable)."""

    source: int
    distances: FloatArray


def _unfold_update(xa: FloatArray, xb: FloatArray, xc: FloatArray, ta: float, tb: float) -> float:
    """Distance at C from a virtual point source consistent with the values at A and B.

    The triangle is unfolded into the plane with A at the origin and B on the
    positive x axis; the source sits on the far side of AB. The value is valid only
    when the straight ray from the source to C crosses the segment AB.
    """
    e = xb - xa
    c = float(np.linalg.norm(e))
    if c == 0.0:
        return np.inf
    ac = xc - xa
    cx = float(ac @ e) / c
    cy = np.sqrt(max(float(ac @ ac) - cx * cx, 0.0))
    sx = (ta * ta - tb * tb + c * c) / (2.0 * c)
    sy2 = ta * ta - sx * sx
    if sy2 < 0.0:
        return np.inf
    sy = -np.sqrt(sy2)
    denom = cy - sy
    if denom <= 0.0:
        return np.inf
    x0 = sx + (-sy / denom) * (cx - sx)
    if -1e-12 * c <= x0 <= c * (1.0 + 1e-12):
        return float(np.hypot(cx - sx, cy - sy))
    return np.inf


def geodesic_distances(mesh: ParetoMesh, source: int) -> GeodesicField:
    """Fast-marching geodesic distances across mesh triangles.

    Every accepted vertex relaxes its edge neighbors and, through each incident
    triangle with a second accepted vertex, the remaining vertex by the unfolded
    point-source update.

    Raises:
        GeodesicError: On an invalid source index
    """
    n = mesh.n_vertices
    if not 0 <= source < n:
        raise GeodesicError(f"source {source} is not a vertex index (mesh has {n} vertices)")
    verts = mesh.vertices
    dist = np.full(n, np.inf)
    accepted = np.zeros(n, dtype=bool)
    dist[source] = 0.0
    heap: list[tuple[float, int]] = [(0.0, source)]

    def relax(v: int, value: float) -> None:
        if value < dist[v]:
            dist[v] = value
            heapq.heappush(heap, (value, v))

    while heap:
        d, v = heapq.heappop(heap)
        if accepted[v] or d > dist[v]:
            continue
        accepted[v] = True
        for nb in mesh.neighbors[v]:
            if not accepted[nb]:
                relax(int(nb), d + float(np.linalg.norm(verts[nb] - verts[v])))
        for t in mesh.vertex_triangles[v]:
            p, q = (int(u) for u in mesh.triangles[t] if u != v)
            if accepted[p] and not accepted[q]:
                relax(q, _unfold_update(verts[v], verts[p], verts[q], d, dist[p]))
            elif accepted[q] and not accepted[p]:
                relax(p, _unfold_update(verts[v], verts[q], verts[p], d, dist[q]))
    return GeodesicField(source=source, distances=dist)


def graph_distances(mesh: ParetoMesh, source: int) -> GeodesicField:
    """Shortest paths along mesh edges; an upper bound on :func:`geodesic_distances`."""
    if not 0 <= source < mesh.n_vertices:
        raise GeodesicError(f"source {source} is not a vertex index")
    return GeodesicField(source=source, distances=dijkstra(mesh.edge_graph, directed=False, indices=source))


@dataclass(frozen=True)
class KarcherMap:
    """Geodesic distances from every vertex to each anchor (the IM images)."""

    mesh: ParetoMesh
    anchors: FloatArray
    anchor_vertices: IndexArray
    distances: FloatArray

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]


def build_karcher_map(mesh: ParetoMesh, anchors: npt.ArrayLike) -> KarcherMap:
    """Snap anchors (one per row) onto the mesh and compute their geodesic fields.

    Raises:
        GeodesicError: If some vertex cannot reach an anchor
    """
    anchor_pts = np.atleast_2d(np.asarray(anchors, dtype=float))
    anchor_vertices = mesh.snap(anchor_pts)
    columns = [geodesic_distances(mesh, int(a)).distances for a in anchor_vertices]
    distances = np.column_stack(columns)
    used = np.unique(mesh.triangles)
    if not np.all(np.isfinite(distances[used])):
        raise GeodesicError("mesh is disconnected between some vertex and an anchor")
    return KarcherMap(mesh=mesh, anchors=anchor_pts, anchor_vertices=anchor_vertices, distances=distances)


def karcher_select(kmap: KarcherMap, weights: npt.ArrayLike) -> IndexArray:
    """Vertex minimizing the weighted sum of squared geodesic distances, per weight column.

    Ties resolve to the smallest vertex index; vertices unreachable from an anchor
    never win.

    Raises:
        InvalidInputError: If the weight rows do not match the anchor count
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    if w.shape[0] != kmap.n_anchors:
        raise InvalidInputError(f"weights have {w.shape[0]} rows, map has {kmap.n_anchors} anchors")
    squared = np.where(np.isfinite(kmap.distances), kmap.distances**2, np.inf)
    cost = squared @ w
    return np.argmin(np.nan_to_num(cost, nan=np.inf), axis=0)


def translation_errors(dm_outputs: npt.ArrayLike, references: npt.ArrayLike, mesh: ParetoMesh) -> FloatArray:
    """Geodesic distance between each snapped DM output and its reference vertex.

    Raises:
        GeodesicError: If an output and its reference are disconnected
    """
    dm_vertices = mesh.snap(dm_outputs)
    refs = np.asarray(references, dtype=np.int64)
    if dm_vertices.size != refs.size:
        raise InvalidInputError(f"{dm_vertices.size} outputs but {refs.size} references")
    fields: dict[int, FloatArray] = {}
    errors = np.empty(refs.size)
    for k, (ref, out) in enumerate(zip(refs, dm_vertices, strict=True)):
        if ref not in fields:
            fields[ref] = geodesic_distances(mesh, int(ref)).distances
        errors[k] = fields[ref][out]
    if not np.all(np.isfinite(errors)):
        raise GeodesicError("decision-making output disconnected from its reference")
    return errors


def translation_normalizer(kmap: KarcherMap) -> float:
    """Mean geodesic distance from the barycentric reference to the anchors."""
    center = int(karcher_select(kmap, np.full(kmap.n_anchors, 1.0 / kmap.n_anchors))[0])
    return float(kmap.distances[center].mean())


def translation_metric(dm_outputs: npt.ArrayLike, references: npt.ArrayLike, kmap: KarcherMap) -> float:
    """One minus the mean translation error relative to the barycentric normalizer (may be negative)."""
    errors = translation_errors(dm_outputs, references, kmap.mesh)
    return 1.0 - float(errors.mean()) / translation_normalizer(kmap)


def coverage(
    dm_points: npt.ArrayLike,
    front_mesh: ParetoMesh,
    config: ReconstructionConfig,
    front_area: float | None = None,
) -> float:
    """Share of the front area spanned by the reconstructed DM outputs, clipped to [0, 1]."""
    cloud = PointCloud.from_points(dm_points, tol=config.dm_dedup_tol)
    if len(cloud) < 3:
        log.warning("decision-making outputs collapse to %d distinct points, coverage is 0", len(cloud))
        return 0.0
    total = mesh_area(front_mesh) if front_area is None else front_area
    try:
        dm_mesh = reconstruct(cloud, config)
    except EmptyMeshError:
        log.warning("decision-making outputs span no surface, coverage is 0")
        return 0.0
    return float(np.clip(mesh_area(dm_mesh) / total, 0.0, 1.0))


def simplex_color(pref: npt.ArrayLike) -> tuple[float, float, float]:
    """RGB color of a 3-objective preference: vertices are red, green, blue; the barycenter is white."""
    beta = np.asarray(pref, dtype=float).reshape(-1)
    if beta.size != 3:
        raise UnsupportedError(f"simplex colors need 3 objectives, got {beta.size}")
    rgb = beta / beta.max()
    return float(rgb[0]), float(rgb[1]), float(rgb[2])
