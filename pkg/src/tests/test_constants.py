"""Tests for constants."""

from mompc_lab.constants import DmMethod, ExitCode, ExperimentKind, StepStage, TraceStatus


class TestConstants:
    """Tests for constants."""

    def test_method_labels(self):
        """Test the method labels used in result tables."""
        assert [str(m) for m in DmMethod] == [
            "WS1",
            "WS2_knee",
            "PS1_true_normal",
            "PS2_quasi_normal",
            "PS3_visual_normal",
            "PS4_nchim",
        ]

    def test_experiment_kinds(self):
        """Test the CLI experiment names."""
        assert {str(k) for k in ExperimentKind} == {
            "dm-eval",
            "mompc-run",
            "ws-sweep",
            "terminal-check",
            "pareto-sample",
        }

    def test_stage_tags(self):
        """Test stage tags number the individual minima from one."""
        assert StepStage.im(0) == "IM-1"
        assert StepStage.im(2) == "IM-3"
        assert StepStage.DM == "DM"

    def test_trace_status_values(self):
        """Test trace status serializes to lowercase strings."""
        assert TraceStatus.CONVERGED == "converged"
        assert TraceStatus.MAX_STEPS == "max_steps"
        assert TraceStatus.FAILED == "failed"

    def test_exit_codes(self):
        """Test success, total failure and partial failure codes."""
        assert ExitCode.SUCCESS == 0
        assert ExitCode.TOTAL_FAILURE == 1
        assert ExitCode.PARTIAL_FAILURE == 2
