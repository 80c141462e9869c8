"""Result files: CSV tables with a metadata header, JSON documents, point clouds and meshes."""

import hashlib
import json
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
import pandas as pd
from pydantic import BaseModel

from mompc_lab.models import ClosedLoopTrace
from mompc_lab.pf_geom import ParetoMesh

FLOAT_FORMAT = "%.10g"


def config_hash(config: BaseModel) -> str:
    """Short stable digest of a configuration; the output directory does not enter it."""
    payload = config.model_dump_json(exclude={"output_dir"})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def write_csv_table(path: Path, frame: pd.DataFrame, metadata: Mapping[str, Any] | None = None) -> Path:
    """Write a table preceded by ``# key: value`` metadata lines.

    Args:
        path: Destination file, parent directories are created
        frame: Table to write, header row included
        metadata: Header block entries

    Returns:
        The written path
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key, value in (metadata or {}).items():
            f.write(f"# {key}: {value}\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_csv_table(path: Path) -> tuple[dict[str, str], pd.DataFrame]:
    """Read a table written by :func:`write_csv_table`."""
    metadata: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition(": ")
            metadata[key] = value
    return metadata, pd.read_csv(path, skiprows=len(metadata))


def rows_frame(rows: Sequence[BaseModel], columns: Sequence[str]) -> pd.DataFrame:
    """Table from pydantic rows; no rows gives a header-only table."""
    if not rows:
        return pd.DataFrame(columns=list(columns))
    return pd.DataFrame([row.model_dump(mode="json") for row in rows], columns=list(columns))


def write_json(path: Path, data: BaseModel | Any) -> Path:
    """Write a pydantic model or plain data as indented JSON with a trailing newline."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        if isinstance(data, BaseModel):
            f.write(data.model_dump_json(indent=2))
        else:
            json.dump(data, f, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


def point_frame(points: npt.ArrayLike, prefix: str = "J") -> pd.DataFrame:
    """Objective-vector cloud as a table with columns ``J1 .. Jn``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return pd.DataFrame(pts, columns=[f"{prefix}{i + 1}" for i in range(pts.shape[1])])


def write_mesh(path: Path, mesh: ParetoMesh) -> Path:
    """ASCII mesh: a ``vertices N`` block of coordinates, then a ``triangles M`` block of indices."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"vertices {mesh.vertices.shape[0]}\n")
        np.savetxt(f, mesh.vertices, fmt="%.17g")
        f.write(f"triangles {mesh.triangles.shape[0]}\n")
        np.savetxt(f, mesh.triangles, fmt="%d")
    return path


def read_mesh(path: Path) -> ParetoMesh:
    """Inverse of :func:`write_mesh`."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    n_vertices = int(lines[0].split()[1])
    vertices = np.array([line.split() for line in lines[1 : 1 + n_vertices]], dtype=float)
    n_triangles = int(lines[1 + n_vertices].split()[1])
    start = 2 + n_vertices
    triangles = np.array([line.split() for line in lines[start : start + n_triangles]], dtype=int)
    return ParetoMesh.from_arrays(vertices.reshape(-1, 3), triangles.reshape(-1, 3))


def trace_frame(trace: ClosedLoopTrace, record_timing: bool = False) -> pd.DataFrame:
    """One row per closed-loop step: state, applied input, DM cost, bound and safeguard flags."""
    records = []
    for step in trace.steps:
        row: dict[str, Any] = {"k": step.k}
        row.update({f"w{i + 1}": x for i, x in enumerate(step.state)})
        row.update({f"v{i + 1}": x for i, x in enumerate(step.applied_input)})
        row.update({f"J{i + 1}": x for i, x in enumerate(step.j_star)})
        bound = step.descent_bound or [np.nan] * len(step.j_star)
        row.update({f"bound{i + 1}": x for i, x in enumerate(bound)})
        row["candidate_admissible"] = step.candidate_admissible
        row["used_candidate"] = step.used_candidate
        if record_timing:
            row["wall_time"] = step.wall_time
        records.append(row)
    return pd.DataFrame.from_records(records, columns=None if records else ["k"])
