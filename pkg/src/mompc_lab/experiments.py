"""Experiment drivers behind the ``mompc-lab`` command."""

from __future__ import annotations

import asyncio
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from mompc_lab.benchmarks import static_example
from mompc_lab.constants import DmMethod, ExitCode, ExperimentKind, TraceStatus
from mompc_lab.exceptions import MompcLabError
from mompc_lab.logging import log
from mompc_lab.models import ClosedLoopTrace, DmEvalRow, MompcSummaryRow
from mompc_lab.mompc import (
    TerminalIngredients,
    build_terminal_ingredients,
    run_closed_loop,
    run_weighted_closed_loop,
    verify_terminal,
)
from mompc_lab.moo_core import (
    DescentBound,
    FloatArray,
    PayoffSummary,
    cloud_payoff_summary,
    cube_average,
    pareto_filter,
)
from mompc_lab.pf_geom import (
    IndexArray,
    KarcherMap,
    ParetoMesh,
    PointCloud,
    build_karcher_map,
    coverage,
    karcher_select,
    mesh_area,
    reconstruct,
    translation_errors,
    translation_normalizer,
)
from mompc_lab.room_climate import RoomSetup, room_setup
from mompc_lab.scalarize import (
    MoProblem,
    ScalarizationParam,
    chim_point,
    compute_individual_minima,
    compute_individual_minima_async,
    nbi_direction,
    sample_front,
    solve_dm,
    sri_direction,
    sri_taus,
    unit_simplex_grid,
)
from mompc_lab.settings import ExperimentConfig
from mompc_lab.utils import (
    config_hash,
    point_frame,
    rows_frame,
    trace_frame,
    write_csv_table,
    write_json,
    write_mesh,
)

DM_EVAL_COLUMNS = ["example", "method", "coverage_pct", "translation_pct", "n_preferences", "flagged", "note"]
MOMPC_SUMMARY_COLUMNS = [
    "case",
    "method",
    "status",
    "steps",
    "steps_to_convergence",
    "final_cost",
    "descent_violations",
    "candidate_failures",
    "surrogate_ok",
    "failure",
]


@dataclass
class ExperimentOutcome:
    """Job accounting and written files of one experiment."""

    kind: ExperimentKind
    n_jobs: int = 0
    n_failed: int = 0
    outputs: list[Path] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        if self.n_failed == 0:
            return ExitCode.SUCCESS
        if self.n_failed >= self.n_jobs:
            return ExitCode.TOTAL_FAILURE
        return ExitCode.PARTIAL_FAILURE


class JobPool:
    """Runs blocking jobs on worker threads, at most ``threads`` at a time."""

    def __init__(self, threads: int = 1):
        """Initialize the pool.

        Args:
            threads: Maximum number of concurrently running jobs
        """
        self.threads = threads
        self._semaphore: asyncio.Semaphore | None = None
        self._tasks: set[asyncio.Task] = set()

    async def _run(self, fn: Callable[..., Any], item: Any) -> Any:
        if self._semaphore is None:
            self._semaphore = asyncio.Semaphore(self.threads)
        async with self._semaphore:
            return await asyncio.to_thread(fn, item)

    async def map(self, fn: Callable[[Any], Any], items: Iterable[Any]) -> list[Any]:
        """Apply ``fn`` to every item; results keep item order, failures come back as exceptions."""
        tasks = [asyncio.create_task(self._run(fn, item)) for item in items]
        for task in tasks:
            self._tasks.add(task)
            task.add_done_callback(self._tasks.discard)
        return list(await asyncio.gather(*tasks, return_exceptions=True))

    async def cancel(self) -> None:
        """Cancel jobs that have not finished."""
        for task in self._tasks:
            if not task.done():
                task.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)


def _metadata(config: ExperimentConfig, **extra: Any) -> dict[str, Any]:
    return {
        "config_hash": config_hash(config),
        "kind": config.kind,
        "seed": config.seed,
        "reduced": str(config.reduced).lower(),
        "tol_kkt": config.solver.tol_kkt,
        "tol_feas": config.solver.tol_feas,
        **extra,
    }


def _check_job(result: Any, what: str) -> bool:
    """Whether a pool result is a success; domain failures are logged, anything else re-raised."""
    if isinstance(result, MompcLabError):
        log.error("%s failed: %s", what, result)
        return False
    if isinstance(result, BaseException):
        raise result
    return True


async def _individual_minima(mo: MoProblem, config: ExperimentConfig, pool: JobPool) -> PayoffSummary:
    """Pay-off summary of a static example, with the IM solves spread over the pool's threads."""
    if pool.threads > 1:
        return await compute_individual_minima_async(mo, config.effective_delta, config.formulation, config.solver)
    return compute_individual_minima(mo, config.effective_delta, config.formulation, config.solver)


def _preferences(config: ExperimentConfig, n_j: int) -> FloatArray:
    if config.preferences is not None:
        return np.asarray(config.preferences, dtype=float)
    return unit_simplex_grid(n_j, config.grid)


def _front_params(config: ExperimentConfig, summary: PayoffSummary) -> list[ScalarizationParam]:
    if config.ray_family == "nbi":
        direction = nbi_direction(summary)
        return [
            ScalarizationParam.shooting(chim_point(summary, beta, config.chim_scale), direction)
            for beta in unit_simplex_grid(summary.n_j, config.grid)
        ]
    taus = sri_taus(summary.n_j, config.n_front_samples, config.seed)
    return [ScalarizationParam.shooting(summary.nadir, sri_direction(tau, summary)) for tau in taus]


def _sample_front(mo: MoProblem, summary: PayoffSummary, config: ExperimentConfig) -> FloatArray:
    """Nondominated front samples including the individual minima."""
    sample = sample_front(mo, _front_params(config, summary), config.solver)
    points = np.vstack([summary.phi.T, sample.points])
    front = pareto_filter(points)
    log.info("front sampled with %d nondominated points (%d failed solves)", len(front), sample.failures)
    return front


def _front_mesh(front: FloatArray, summary: PayoffSummary, config: ExperimentConfig) -> ParetoMesh:
    """Ball-pivoting mesh of the front in normalized objective space."""
    cloud = PointCloud.from_points(summary.normalize(front))
    return reconstruct(cloud, config.reconstruction)


def _dm_outputs(
    mo: MoProblem, method: DmMethod, prefs: FloatArray, summary: PayoffSummary, config: ExperimentConfig
) -> tuple[FloatArray, FloatArray]:
    """DM objective vectors for each preference and a mask of the preferences that succeeded."""
    outputs = np.full((prefs.shape[0], summary.n_j), np.nan)
    ok = np.zeros(prefs.shape[0], dtype=bool)
    unbounded = DescentBound.infinite(summary.n_j)
    for i, beta in enumerate(prefs):
        try:
            outputs[i] = solve_dm(mo, method, beta, summary, unbounded, config.solver).j_star
            ok[i] = True
        except MompcLabError as e:
            log.warning("%s failed for preference %s: %s", method, beta.tolist(), e)
    return outputs, ok


@dataclass(frozen=True)
class _DmEvalContext:
    mo: MoProblem
    summary: PayoffSummary
    mesh: ParetoMesh
    kmap: KarcherMap
    prefs: FloatArray
    references: IndexArray
    front_area: float
    config: ExperimentConfig


def _evaluate_method(ctx: _DmEvalContext, method: DmMethod) -> tuple[DmEvalRow, pd.DataFrame]:
    config = ctx.config
    outputs, ok = _dm_outputs(ctx.mo, method, ctx.prefs, ctx.summary, config)
    n_failed = int((~ok).sum())
    note = f"{n_failed} preferences failed" if n_failed else ""
    if not ok.any():
        row = DmEvalRow(
            example=str(config.example), method=str(method), n_preferences=0, flagged=True, note="all preferences failed"
        )
        return row, pd.DataFrame()

    normalized = ctx.summary.normalize(outputs[ok])
    refs = ctx.references[ok]
    errors = translation_errors(normalized, refs, ctx.mesh)
    translation = 1.0 - float(errors.mean()) / translation_normalizer(ctx.kmap)
    if method is DmMethod.WS2_KNEE:
        # a single point regardless of the preference
        cover = 0.0
    else:
        cover = coverage(normalized, ctx.mesh, config.reconstruction, ctx.front_area)
    row = DmEvalRow(
        example=str(config.example),
        method=str(method),
        coverage_pct=100.0 * cover,
        translation_pct=100.0 * translation,
        n_preferences=int(ok.sum()),
        flagged=n_failed > 0,
        note=note,
    )
    ref_points = ctx.summary.denormalize(ctx.mesh.vertices[refs])
    raw = pd.concat(
        [
            pd.DataFrame({"method": [str(method)] * len(refs)}),
            point_frame(ctx.prefs[ok], "beta"),
            point_frame(outputs[ok], "J"),
            point_frame(ref_points, "ref"),
            pd.DataFrame({"error": errors}),
        ],
        axis=1,
    )
    log.info(
        "%s on %s: coverage %.2f%%, translation %.2f%% over %d preferences",
        method, config.example, row.coverage_pct, row.translation_pct, row.n_preferences,
    )
    return row, raw


async def run_dm_eval(config: ExperimentConfig, pool: JobPool) -> ExperimentOutcome:
    """Coverage and translation of each DM method over a preference grid on a static example.

    Writes ``dm_eval.csv`` (one row per method), ``dm_eval_errors.csv`` (per-preference
    errors), the sampled front and its mesh. A failed front reconstruction yields
    flagged rows without metrics.
    """
    outcome = ExperimentOutcome(kind=ExperimentKind.DM_EVAL, n_jobs=len(config.methods))
    out = config.output_dir
    mo = static_example(config.example)
    summary = await _individual_minima(mo, config, pool)
    prefs = _preferences(config, summary.n_j)
    metadata = _metadata(
        config, example=config.example, grid_resolution=config.grid, n_preferences=len(prefs),
        front_samples=config.n_front_samples,
    )

    rows: list[DmEvalRow] = []
    raw_tables: list[pd.DataFrame] = []
    try:
        front = _sample_front(mo, summary, config)
        mesh = _front_mesh(front, summary, config)
        kmap = build_karcher_map(mesh, summary.normalize(summary.phi.T))
        ctx = _DmEvalContext(
            mo=mo,
            summary=summary,
            mesh=mesh,
            kmap=kmap,
            prefs=prefs,
            references=karcher_select(kmap, prefs.T),
            front_area=mesh_area(mesh),
            config=config,
        )
        outcome.outputs.append(write_csv_table(out / "front.csv", point_frame(front), metadata))
        outcome.outputs.append(write_mesh(out / "front_mesh.txt", mesh))
    except MompcLabError as e:
        log.error("front reconstruction failed: %s", e)
        rows = [
            DmEvalRow(example=str(config.example), method=str(m), flagged=True, note=f"front reconstruction failed: {e}")
            for m in config.methods
        ]
        outcome.n_failed = len(config.methods)
        outcome.outputs.append(write_csv_table(out / "dm_eval.csv", rows_frame(rows, DM_EVAL_COLUMNS), metadata))
        return outcome

    results = await pool.map(lambda method: _evaluate_method(ctx, method), config.methods)
    for method, result in zip(config.methods, results, strict=True):
        if not _check_job(result, f"{method} evaluation"):
            outcome.n_failed += 1
            rows.append(DmEvalRow(example=str(config.example), method=str(method), flagged=True, note=str(result)))
            continue
        row, raw = result
        rows.append(row)
        if row.n_preferences == 0:
            outcome.n_failed += 1
        if not raw.empty:
            raw_tables.append(raw)

    outcome.outputs.append(write_csv_table(out / "dm_eval.csv", rows_frame(rows, DM_EVAL_COLUMNS), metadata))
    if raw_tables:
        errors = pd.concat(raw_tables, ignore_index=True)
        outcome.outputs.append(write_csv_table(out / "dm_eval_errors.csv", errors, metadata))
    return outcome


async def _room_setups(config: ExperimentConfig, pool: JobPool, cases: list[str]) -> dict[str, Any]:
    """Steady state and terminal ingredients per case; failed cases map to their exception."""

    def prepare(case_id: str) -> tuple[RoomSetup, TerminalIngredients]:
        setup = room_setup(case_id, config.room, config.horizon, config.solver, seed=config.seed)
        return setup, build_terminal_ingredients(setup.dynamics, setup.costs, config.terminal)

    results = await pool.map(prepare, cases)
    return dict(zip(cases, results, strict=True))


def _summary_row(case_id: str, method: str, trace: ClosedLoopTrace) -> MompcSummaryRow:
    candidates = [s.candidate_admissible for s in trace.steps if s.candidate_admissible is not None]
    return MompcSummaryRow(
        case=case_id,
        method=str(method),
        status=trace.status,
        steps=len(trace.steps),
        steps_to_convergence=trace.steps_to_convergence,
        final_cost=trace.final_cost,
        descent_violations=trace.descent_violations(),
        candidate_failures=sum(1 for ok in candidates if not ok),
        surrogate_ok=trace.surrogate_bound_holds(),
        failure=trace.failure,
    )


async def run_mompc(config: ExperimentConfig, pool: JobPool) -> ExperimentOutcome:
    """Closed-loop runs for every (case, method) pair with the barycentric preference.

    Writes ``traces/<case>_<method>.json`` and ``.csv`` per run and ``mompc_summary.csv``.
    Runs with descent violations count as failed jobs.
    """
    cases = config.run_cases
    jobs = [(c, m) for c in cases for m in config.methods]
    outcome = ExperimentOutcome(kind=ExperimentKind.MOMPC_RUN, n_jobs=len(jobs))
    out = config.output_dir
    setups = await _room_setups(config, pool, cases)
    metadata = _metadata(config, cases=" ".join(cases), horizon=config.horizon.n, k_max=config.k_max)

    def run(job: tuple[str, DmMethod]) -> ClosedLoopTrace:
        case_id, method = job
        setup, term = setups[case_id]
        n_j = setup.costs.n_j
        return run_closed_loop(
            setup.dynamics,
            setup.costs,
            term,
            setup.x0,
            method,
            np.full(n_j, 1.0 / n_j),
            config.effective_delta,
            config.stop_threshold,
            config.k_max,
            config.horizon.n,
            config.mpc_solver,
            record_timing=config.record_timing,
            im_threads=pool.threads,
        )

    ready = [job for job in jobs if _check_job(setups[job[0]], f"setup of case {job[0]}")]
    results = dict(zip(ready, await pool.map(run, ready), strict=True))

    rows: list[MompcSummaryRow] = []
    for case_id, method in jobs:
        if (case_id, method) not in results:
            outcome.n_failed += 1
            rows.append(
                MompcSummaryRow(case=case_id, method=method, status=TraceStatus.FAILED, steps=0,
                                failure=str(setups[case_id]))
            )
            continue
        trace = results[(case_id, method)]
        if not _check_job(trace, f"run {case_id}/{method}"):
            outcome.n_failed += 1
            rows.append(MompcSummaryRow(case=case_id, method=method, status=TraceStatus.FAILED, steps=0,
                                        failure=str(trace)))
            continue
        stem = out / "traces" / f"{case_id}_{method}"
        outcome.outputs.append(write_json(stem.with_suffix(".json"), trace))
        outcome.outputs.append(
            write_csv_table(stem.with_suffix(".csv"), trace_frame(trace, config.record_timing), metadata)
        )
        row = _summary_row(case_id, str(method), trace)
        if trace.status is TraceStatus.FAILED:
            outcome.n_failed += 1
        elif row.descent_violations:
            log.error("%s/%s violated the descent condition in %d steps", case_id, method, row.descent_violations)
            outcome.n_failed += 1
        rows.append(row)

    outcome.outputs.append(
        write_csv_table(out / "mompc_summary.csv", rows_frame(rows, MOMPC_SUMMARY_COLUMNS), metadata)
    )
    return outcome


async def run_ws_sweep(config: ExperimentConfig, pool: JobPool) -> ExperimentOutcome:
    """Fixed-weight single-objective MPC per simplex weight, post-processed into a comparison cloud.

    Dominated closed-loop cost vectors are discarded, the rest averaged per cube in
    normalized space and filtered again. Writes ``ws_sweep_raw.csv`` and ``ws_sweep.csv``.
    """
    weights = unit_simplex_grid(3, config.weight_resolution)
    outcome = ExperimentOutcome(kind=ExperimentKind.WS_SWEEP, n_jobs=len(weights))
    out = config.output_dir
    setups = await _room_setups(config, pool, [config.ws_case])
    setup_result = setups[config.ws_case]
    if not _check_job(setup_result, f"setup of case {config.ws_case}"):
        outcome.n_failed = outcome.n_jobs
        return outcome
    setup, term = setup_result

    def run(weight: FloatArray) -> ClosedLoopTrace:
        return run_weighted_closed_loop(
            setup.dynamics,
            setup.costs,
            term,
            setup.x0,
            weight,
            config.stop_threshold,
            config.k_max,
            config.horizon.n,
            config.mpc_solver,
        )

    costs = []
    kept_weights = []
    for weight, trace in zip(weights, await pool.map(run, list(weights)), strict=True):
        if not _check_job(trace, f"weight {weight.tolist()}") or trace.status is TraceStatus.FAILED:
            outcome.n_failed += 1
            continue
        kept_weights.append(weight)
        costs.append(trace.running_cost)

    metadata = _metadata(
        config, case=config.ws_case, n_weights=len(weights), weight_resolution=config.weight_resolution,
        cube_edge=config.cube_edge,
    )
    raw = np.asarray(costs, dtype=float).reshape(-1, 3)
    raw_table = pd.concat([point_frame(np.asarray(kept_weights).reshape(-1, 3), "w"), point_frame(raw)], axis=1)
    outcome.outputs.append(write_csv_table(out / "ws_sweep_raw.csv", raw_table, metadata))
    cloud = raw
    if len(raw):
        front = pareto_filter(raw)
        try:
            scaling = cloud_payoff_summary(front)
        except MompcLabError as e:
            log.warning("sweep cloud has no usable utopia-nadir box (%s), cubing its bounding box", e)
            scaling = None
        cloud = pareto_filter(cube_average(front, config.cube_edge, scaling))
    outcome.outputs.append(write_csv_table(out / "ws_sweep.csv", point_frame(cloud), metadata))
    log.info("weight sweep: %d runs, %d cloud points after post-processing", len(raw), len(cloud))
    return outcome


async def run_terminal_check(config: ExperimentConfig, pool: JobPool) -> ExperimentOutcome:
    """Terminal ingredients per case with a sampled verification report.

    Writes ``terminal/<case>.json`` and ``terminal_check.csv``.
    """
    cases = config.run_cases
    outcome = ExperimentOutcome(kind=ExperimentKind.TERMINAL_CHECK, n_jobs=len(cases))
    out = config.output_dir
    setups = await _room_setups(config, pool, cases)

    records = []
    for case_id in cases:
        result = setups[case_id]
        if not _check_job(result, f"terminal ingredients of case {case_id}"):
            outcome.n_failed += 1
            records.append({"case": case_id, "alpha": np.nan, "passed": False, "failure": str(result)})
            continue
        setup, term = result
        report = verify_terminal(term, setup.dynamics, setup.costs, config.terminal_samples, seed=config.seed)
        outcome.outputs.append(write_json(out / "terminal" / f"{case_id}.json", report))
        if not report.passed:
            outcome.n_failed += 1
        records.append(
            {
                "case": case_id,
                "alpha": term.alpha,
                "lambda_min_p": float(np.linalg.eigvalsh(term.p).min()),
                "lyapunov_residual": term.lyapunov_residual(),
                "passed": report.passed,
                "failure": "",
            }
        )
    frame = pd.DataFrame.from_records(records)
    outcome.outputs.append(write_csv_table(out / "terminal_check.csv", frame, _metadata(config)))
    return outcome


async def run_pareto_sample(config: ExperimentConfig, pool: JobPool) -> ExperimentOutcome:
    """Dense front sample of a static example by SRI or NBI rays, as a CSV cloud and an ASCII mesh."""
    outcome = ExperimentOutcome(kind=ExperimentKind.PARETO_SAMPLE, n_jobs=1)
    out = config.output_dir
    mo = static_example(config.example)
    summary = await _individual_minima(mo, config, pool)
    (front,) = await pool.map(lambda _: _sample_front(mo, summary, config), [None])
    if not _check_job(front, "front sampling"):
        outcome.n_failed = 1
        return outcome
    metadata = _metadata(config, example=config.example, rays=config.ray_family, samples=config.n_front_samples)
    outcome.outputs.append(write_csv_table(out / "pareto_sample.csv", point_frame(front), metadata))
    try:
        mesh = _front_mesh(front, summary, config)
        outcome.outputs.append(write_mesh(out / "pareto_sample_mesh.txt", mesh))
    except MompcLabError as e:
        log.error("front mesh failed: %s", e)
        outcome.n_failed = 1
    return outcome


EXPERIMENTS = {
    ExperimentKind.DM_EVAL: run_dm_eval,
    ExperimentKind.MOMPC_RUN: run_mompc,
    ExperimentKind.WS_SWEEP: run_ws_sweep,
    ExperimentKind.TERMINAL_CHECK: run_terminal_check,
    ExperimentKind.PARETO_SAMPLE: run_pareto_sample,
}
