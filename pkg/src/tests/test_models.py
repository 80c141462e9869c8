"""Tests for data models."""

from mompc_lab.constants import TraceStatus
from mompc_lab.models import ClosedLoopTrace, DmEvalRow, MompcSummaryRow, TerminalReport, TraceStep


def make_step(k: int, j_star: list[float], bound: list[float] | None) -> TraceStep:
    """Trace step with only the cost fields filled."""
    return TraceStep(k=k, state=[0.0, 0.0], applied_input=[0.0], phi=[], j_star=j_star, descent_bound=bound)


def make_trace(**kwargs) -> ClosedLoopTrace:
    """Empty trace of a PS4 run."""
    return ClosedLoopTrace(
        method="PS4_nchim", preference=[0.5, 0.5], initial_state=[1.0, 0.0], stop_threshold=1e-2, **kwargs
    )


class TestTraceStep:
    """Tests for TraceStep."""

    def test_first_step_has_no_violation(self):
        """Test the unbounded first step never violates descent."""
        assert make_step(0, [5.0, 5.0], None).descent_violation() == 0.0

    def test_violation_is_largest_excess(self):
        """Test the violation is the worst component above the bound."""
        assert make_step(1, [1.5, 2.2], [1.0, 2.0]).descent_violation() == 0.5

    def test_below_bound(self):
        """Test a cost below the bound has zero violation."""
        assert make_step(1, [0.5, 1.0], [1.0, 2.0]).descent_violation() == 0.0


class TestClosedLoopTrace:
    """Tests for ClosedLoopTrace."""

    def test_empty_trace(self):
        """Test an empty trace has no final cost and vacuous bounds."""
        trace = make_trace()

        assert trace.final_cost is None
        assert trace.steps_to_convergence is None
        assert trace.descent_violations() == 0
        assert trace.surrogate_bound_holds()

    def test_counts_violations(self):
        """Test violations above the tolerance are counted."""
        trace = make_trace()
        trace.append(make_step(0, [2.0, 2.0], None))
        trace.append(make_step(1, [2.0 + 1e-12, 1.0], [2.0, 2.0]))
        trace.append(make_step(2, [2.5, 1.0], [2.0, 1.0]))

        assert trace.descent_violations() == 1
        assert trace.final_cost == [2.5, 1.0]

    def test_steps_to_convergence(self):
        """Test the converged step index is the last step's."""
        trace = make_trace(status=TraceStatus.CONVERGED)
        trace.append(make_step(0, [1.0, 1.0], None))
        trace.append(make_step(1, [1e-3, 1e-3], [1.0, 1.0]))

        assert trace.steps_to_convergence == 1

    def test_not_converged(self):
        """Test runs that hit k_max report no convergence step."""
        trace = make_trace(status=TraceStatus.MAX_STEPS)
        trace.append(make_step(0, [1.0, 1.0], None))

        assert trace.steps_to_convergence is None

    def test_surrogate_bound(self):
        """Test the accumulated cost is compared against twice the first DM cost."""
        assert make_trace(initial_cost=[1.0, 2.0], running_cost=[2.0, 3.0]).surrogate_bound_holds()
        assert not make_trace(initial_cost=[1.0, 2.0], running_cost=[2.1, 3.0]).surrogate_bound_holds()

    def test_json_status(self):
        """Test the status serializes as its string value."""
        assert '"status":"failed"' in make_trace(status=TraceStatus.FAILED).model_dump_json()


class TestTerminalReport:
    """Tests for TerminalReport."""

    def test_passed(self):
        """Test a report without violations passes."""
        assert TerminalReport(alpha=1.0, n_samples=10, max_decrease_violation=[0.0, 0.0]).passed

    def test_decrease_violation_fails(self):
        """Test a decrease violation above the tolerance fails the report."""
        report = TerminalReport(alpha=1.0, n_samples=10, max_decrease_violation=[0.0, 1e-6])

        assert not report.passed

    def test_input_violation_fails(self):
        """Test an input box violation fails the report."""
        assert not TerminalReport(alpha=1.0, n_samples=10, max_input_violation=0.1).passed


class TestRows:
    """Tests for result table rows."""

    def test_dm_eval_defaults(self):
        """Test a flagged row keeps its metrics empty."""
        row = DmEvalRow(example="ellipsoid-1", method="WS1", flagged=True, note="front failed")

        assert row.coverage_pct is None
        assert row.model_dump(mode="json")["flagged"] is True

    def test_summary_row_status(self):
        """Test the summary row dumps the status as a string."""
        row = MompcSummaryRow(case="a1", method="PS4_nchim", status=TraceStatus.CONVERGED, steps=12)

        assert row.model_dump(mode="json")["status"] == "converged"
