"""Tests for the experiment drivers."""

import threading
import time

import numpy as np
import pytest

from mompc_lab.constants import DmMethod, ExampleName, ExitCode, ExperimentKind, TraceStatus
from mompc_lab.exceptions import EmptyMeshError, InvalidInputError, InvalidProblemError
from mompc_lab.experiments import (
    ExperimentOutcome,
    JobPool,
    _check_job,
    run_dm_eval,
    run_mompc,
    run_pareto_sample,
    run_terminal_check,
    run_ws_sweep,
)
from mompc_lab.models import ClosedLoopTrace, TraceStep
from mompc_lab.moo_core import cube_average
from mompc_lab.room_climate import HorizonConfig, RoomSetup
from mompc_lab.settings import ExperimentConfig
from mompc_lab.utils import read_csv_table


@pytest.fixture
def fake_room(monkeypatch, double_integrator):
    """Replace the room model by the double integrator for every case."""
    dyn, costs = double_integrator

    def fake_setup(case_id, params, horizon, config, seed=0):
        return RoomSetup(
            case_id=case_id,
            disturbance=np.zeros(0),
            x0=np.array([0.05, 0.0]),
            x_ss=costs.w_ss,
            u_ss=costs.v_ss,
            dynamics=dyn,
            costs=costs,
        )

    monkeypatch.setattr("mompc_lab.experiments.room_setup", fake_setup)


@pytest.fixture
def failing_room(monkeypatch):
    """Every steady-state problem is infeasible."""

    def fail(case_id, params, horizon, config, seed=0):
        raise InvalidProblemError(f"steady-state problem infeasible for {case_id}")

    monkeypatch.setattr("mompc_lab.experiments.room_setup", fail)


def room_config(kind: ExperimentKind, tmp_path, cases: tuple[str, ...] = ("a1",), **kwargs) -> ExperimentConfig:
    """Small closed-loop configuration writing into ``tmp_path``."""
    return ExperimentConfig(
        kind=kind,
        example=ExampleName.ROOM_CLIMATE,
        methods=[DmMethod.PS4_NCHIM],
        cases=list(cases),
        k_max=3,
        horizon=HorizonConfig(t_horizon=480.0),
        output_dir=tmp_path,
        **kwargs,
    )


class TestExperimentOutcome:
    """Tests for ExperimentOutcome."""

    @pytest.mark.parametrize(
        ("n_jobs", "n_failed", "code"),
        [(3, 0, ExitCode.SUCCESS), (3, 1, ExitCode.PARTIAL_FAILURE), (3, 3, ExitCode.TOTAL_FAILURE)],
    )
    def test_exit_code(self, n_jobs, n_failed, code):
        """Test exit codes follow the failed-job count."""
        assert ExperimentOutcome(kind=ExperimentKind.DM_EVAL, n_jobs=n_jobs, n_failed=n_failed).exit_code == code


class TestJobPool:
    """Tests for JobPool."""

    async def test_keeps_order(self):
        """Test results come back in item order."""
        pool = JobPool(threads=3)

        results = await pool.map(lambda x: x * x, [3, 1, 2])

        assert results == [9, 1, 4]

    async def test_failures_are_returned(self):
        """Test a failing job does not cancel the others."""
        pool = JobPool(threads=2)

        def job(x):
            if x == 1:
                raise InvalidInputError("bad item")
            return x

        results = await pool.map(job, [0, 1, 2])

        assert results[0] == 0
        assert isinstance(results[1], InvalidInputError)
        assert results[2] == 2

    async def test_thread_limit(self):
        """Test no more than ``threads`` jobs run at once."""
        pool = JobPool(threads=2)
        lock = threading.Lock()
        running = [0]
        peak = [0]

        def job(_):
            with lock:
                running[0] += 1
                peak[0] = max(peak[0], running[0])
            time.sleep(0.02)
            with lock:
                running[0] -= 1

        await pool.map(job, range(6))

        assert peak[0] <= 2

    async def test_cancel_without_jobs(self):
        """Test cancelling an idle pool is a no-op."""
        await JobPool().cancel()


class TestCheckJob:
    """Tests for _check_job."""

    def test_success(self):
        """Test plain results pass."""
        assert _check_job((1, 2), "job")

    def test_domain_failure(self):
        """Test domain errors are counted as failures."""
        assert not _check_job(EmptyMeshError("no triangles"), "job")

    def test_programming_error_propagates(self):
        """Test unexpected errors are re-raised."""
        with pytest.raises(ZeroDivisionError):
            _check_job(ZeroDivisionError("boom"), "job")


class TestDmEval:
    """Tests for run_dm_eval."""

    async def test_front_failure_flags_every_method(self, monkeypatch, tmp_path):
        """Test a failed front reconstruction flags all rows and fails the run."""

        def no_front(mo, summary, config):
            raise EmptyMeshError("ball pivoting produced no triangles")

        monkeypatch.setattr("mompc_lab.experiments._sample_front", no_front)
        config = ExperimentConfig(
            kind=ExperimentKind.DM_EVAL, methods=[DmMethod.WS1, DmMethod.PS4_NCHIM], output_dir=tmp_path
        )

        outcome = await run_dm_eval(config, JobPool())

        assert outcome.exit_code == ExitCode.TOTAL_FAILURE
        metadata, table = read_csv_table(tmp_path / "dm_eval.csv")
        assert metadata["kind"] == "dm-eval"
        assert table["flagged"].tolist() == [True, True]
        assert table["coverage_pct"].isna().all()

    @pytest.mark.slow
    async def test_reduced_ellipsoid(self, tmp_path):
        """Test the reduced ellipsoid evaluation yields bounded metrics for every method."""
        config = ExperimentConfig(kind=ExperimentKind.DM_EVAL, reduced=True, output_dir=tmp_path)

        outcome = await run_dm_eval(config, JobPool(threads=2))

        assert outcome.exit_code != ExitCode.TOTAL_FAILURE
        _, table = read_csv_table(tmp_path / "dm_eval.csv")
        assert table["method"].tolist() == [str(m) for m in DmMethod]
        assert (table["coverage_pct"].dropna() <= 100.0 + 1e-9).all()
        assert table.loc[table["method"] == "WS2_knee", "coverage_pct"].item() == 0.0
        assert (tmp_path / "front_mesh.txt").exists()

    @pytest.mark.slow
    async def test_reduced_ellipsoid_metrics(self, tmp_path):
        """Test the reduced Example-1 evaluation lands within six points of the reference metrics."""
        reference = {
            "WS1": (100.00, 94.03),
            "PS1_true_normal": (41.80, 54.01),
            "PS2_quasi_normal": (61.08, 85.86),
            "PS3_visual_normal": (61.08, 85.85),
            "PS4_nchim": (100.00, 94.02),
        }
        methods = [DmMethod(m) for m in reference]
        config = ExperimentConfig(kind=ExperimentKind.DM_EVAL, methods=methods, reduced=True, output_dir=tmp_path)

        await run_dm_eval(config, JobPool(threads=2))

        _, table = read_csv_table(tmp_path / "dm_eval.csv")
        rows = table.set_index("method")
        for method, (cover, translation) in reference.items():
            assert rows.loc[method, "coverage_pct"] == pytest.approx(cover, abs=6.0), method
            assert rows.loc[method, "translation_pct"] == pytest.approx(translation, abs=6.0), method

    @pytest.mark.slow
    async def test_nonconvex_ordering(self, tmp_path):
        """Test on the cut ellipsoid every output is nondominated and the shooting methods outrank WS1 and PS1."""
        methods = [m for m in DmMethod if m is not DmMethod.WS2_KNEE]
        config = ExperimentConfig(
            kind=ExperimentKind.DM_EVAL,
            example=ExampleName.NONCONVEX_SUB,
            methods=methods,
            reduced=True,
            output_dir=tmp_path,
        )

        await run_dm_eval(config, JobPool(threads=2))

        _, front = read_csv_table(tmp_path / "front.csv")
        _, errors = read_csv_table(tmp_path / "dm_eval_errors.csv")
        front_pts = front[["J1", "J2", "J3"]].to_numpy()
        outputs = errors[["J1", "J2", "J3"]].to_numpy()
        tol = 1e-5 * (front_pts.max(axis=0) - front_pts.min(axis=0))
        dominated = [np.any(np.all(front_pts <= o - tol, axis=1)) for o in outputs]
        assert not any(dominated)

        _, table = read_csv_table(tmp_path / "dm_eval.csv")
        rows = table.set_index("method")
        assert rows.loc["PS3_visual_normal", "coverage_pct"] > rows.loc["WS1", "coverage_pct"]
        assert rows.loc["PS4_nchim", "coverage_pct"] > rows.loc["WS1", "coverage_pct"]
        for method in ("PS2_quasi_normal", "PS3_visual_normal", "PS4_nchim"):
            assert rows.loc[method, "translation_pct"] > rows.loc["PS1_true_normal", "translation_pct"], method


class TestParetoSample:
    """Tests for run_pareto_sample."""

    async def test_points_on_ellipsoid(self, tmp_path):
        """Test the sampled cloud lies on the ellipsoid surface."""
        config = ExperimentConfig(kind=ExperimentKind.PARETO_SAMPLE, front_samples=200, output_dir=tmp_path)

        await run_pareto_sample(config, JobPool())

        metadata, table = read_csv_table(tmp_path / "pareto_sample.csv")
        points = table[["J1", "J2", "J3"]].to_numpy()
        radii = np.linalg.norm(points / [1.0, 10.0, 100.0], axis=1)
        assert metadata["rays"] == "sri"
        assert len(points) > 100
        np.testing.assert_allclose(radii, 1.0, atol=1e-5)


class TestClosedLoopExperiments:
    """Tests for run_mompc, run_ws_sweep and run_terminal_check."""

    async def test_mompc_writes_traces(self, fake_room, tmp_path):
        """Test one run writes its trace files and a summary row."""
        config = room_config(ExperimentKind.MOMPC_RUN, tmp_path)

        outcome = await run_mompc(config, JobPool())

        assert outcome.exit_code == ExitCode.SUCCESS
        assert (tmp_path / "traces" / "a1_PS4_nchim.json").exists()
        assert (tmp_path / "traces" / "a1_PS4_nchim.csv").exists()
        _, summary = read_csv_table(tmp_path / "mompc_summary.csv")
        assert summary["descent_violations"].tolist() == [0]
        assert summary["status"].iloc[0] != TraceStatus.FAILED
        assert "steps_to_convergence" in summary.columns

    async def test_descent_violation_fails_the_run(self, fake_room, monkeypatch, tmp_path):
        """Test a trace that leaves its descent bound counts as a failed job."""

        def violating_run(*args, **kwargs):
            trace = ClosedLoopTrace(
                method="PS4_nchim", preference=[1 / 3] * 3, initial_state=[0.05, 0.0], stop_threshold=1e-2
            )
            trace.append(TraceStep(k=0, state=[0.05, 0.0], applied_input=[0.0], phi=[], j_star=[1.0, 1.0, 1.0]))
            trace.append(
                TraceStep(
                    k=1, state=[0.04, 0.0], applied_input=[0.0], phi=[], j_star=[0.5, 1.5, 0.5],
                    descent_bound=[1.0, 1.0, 1.0],
                )
            )
            return trace

        monkeypatch.setattr("mompc_lab.experiments.run_closed_loop", violating_run)
        config = room_config(ExperimentKind.MOMPC_RUN, tmp_path)

        outcome = await run_mompc(config, JobPool())

        assert outcome.n_failed == 1
        assert outcome.exit_code == ExitCode.TOTAL_FAILURE
        _, summary = read_csv_table(tmp_path / "mompc_summary.csv")
        assert summary["descent_violations"].tolist() == [1]

    async def test_mompc_setup_failure(self, failing_room, tmp_path):
        """Test an infeasible steady state fails every run of the case."""
        config = room_config(ExperimentKind.MOMPC_RUN, tmp_path, cases=("a1", "b4"))

        outcome = await run_mompc(config, JobPool())

        assert outcome.exit_code == ExitCode.TOTAL_FAILURE
        _, summary = read_csv_table(tmp_path / "mompc_summary.csv")
        assert summary["status"].tolist() == ["failed", "failed"]
        assert summary["case"].tolist() == ["a1", "b4"]

    async def test_ws_sweep(self, fake_room, tmp_path):
        """Test the sweep writes the raw table and a nondominated cloud."""
        config = room_config(ExperimentKind.WS_SWEEP, tmp_path, reduced=True, reduced_ws_resolution=2)

        outcome = await run_ws_sweep(config, JobPool(threads=2))

        assert outcome.n_jobs == 6
        _, raw = read_csv_table(tmp_path / "ws_sweep_raw.csv")
        _, cloud = read_csv_table(tmp_path / "ws_sweep.csv")
        assert len(raw) == 6 - outcome.n_failed
        assert len(cloud) <= len(raw)

    @staticmethod
    def _fixed_costs(monkeypatch, cost_of):
        """Replace the fixed-weight loop by a trace whose running cost is ``cost_of(weight)``."""

        def fake_run(dyn, costs, term, w0, weight, *args):
            return ClosedLoopTrace(
                method="WS_fixed", preference=list(weight), initial_state=list(w0), stop_threshold=1e-2,
                status=TraceStatus.CONVERGED, running_cost=list(cost_of(np.asarray(weight))),
            )

        monkeypatch.setattr("mompc_lab.experiments.run_weighted_closed_loop", fake_run)

    async def test_ws_sweep_cubes_in_utopia_nadir_box(self, fake_room, monkeypatch, tmp_path):
        """Test the sweep cloud is cube-averaged in the box spanned by its per-objective minimizers."""
        self._fixed_costs(monkeypatch, lambda w: (1.0 - w) * np.array([1.0, 100.0, 1e4]))
        seen = []

        def recording_cube_average(points, edge, summary=None):
            seen.append(summary)
            return cube_average(points, edge, summary)

        monkeypatch.setattr("mompc_lab.experiments.cube_average", recording_cube_average)
        config = room_config(ExperimentKind.WS_SWEEP, tmp_path, reduced=True, reduced_ws_resolution=2)

        outcome = await run_ws_sweep(config, JobPool())

        assert outcome.exit_code == ExitCode.SUCCESS
        np.testing.assert_allclose(seen[0].utopia, [0.0, 0.0, 0.0])
        np.testing.assert_allclose(seen[0].nadir, [1.0, 100.0, 1e4])
        _, cloud = read_csv_table(tmp_path / "ws_sweep.csv")
        assert len(cloud) == 6

    async def test_ws_sweep_degenerate_cloud(self, fake_room, monkeypatch, tmp_path):
        """Test a sweep whose runs all cost the same falls back to the cloud's own extent."""
        self._fixed_costs(monkeypatch, lambda w: np.ones(3))
        config = room_config(ExperimentKind.WS_SWEEP, tmp_path, reduced=True, reduced_ws_resolution=2)

        outcome = await run_ws_sweep(config, JobPool())

        assert outcome.exit_code == ExitCode.SUCCESS
        _, cloud = read_csv_table(tmp_path / "ws_sweep.csv")
        assert cloud[["J1", "J2", "J3"]].to_numpy().tolist() == [[1.0, 1.0, 1.0]]

    async def test_ws_sweep_setup_failure(self, failing_room, tmp_path):
        """Test a failed sweep case fails every weight."""
        config = room_config(ExperimentKind.WS_SWEEP, tmp_path, reduced=True, reduced_ws_resolution=2)

        outcome = await run_ws_sweep(config, JobPool())

        assert outcome.n_failed == outcome.n_jobs == 6

    async def test_terminal_check(self, fake_room, tmp_path):
        """Test the terminal report is written and passes for linear dynamics."""
        config = room_config(ExperimentKind.TERMINAL_CHECK, tmp_path, terminal_samples=200)

        outcome = await run_terminal_check(config, JobPool())

        assert outcome.exit_code == ExitCode.SUCCESS
        assert (tmp_path / "terminal" / "a1.json").exists()
        _, table = read_csv_table(tmp_path / "terminal_check.csv")
        assert table["passed"].tolist() == [True]
