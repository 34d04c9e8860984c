"""Tests for MLflow metrics tracking."""

from unittest.mock import MagicMock, patch

from networks.remdet.src.config import metrics_tracker, settings
from shared.monitoring import MetricsTracker


class TestMetricsTracker:
    """Tests that tracking never affects results."""

    @patch("shared.monitoring.metrics.mlflow")
    def test_disabled_is_noop(self, mock_mlflow: MagicMock) -> None:
        """Test that a disabled tracker never touches MLflow."""
        tracker = MetricsTracker(experiment_name="remdet-test", enabled=False)
        with tracker.start_run(run_name="noop"):
            tracker.log_metrics({"loss": 1.0})
            tracker.log_curve("loss", [1.0, 0.5])
            tracker.log_params({"seed": 0})
        assert mock_mlflow.method_calls == []

    @patch("shared.monitoring.metrics.mlflow")
    def test_logs_curve_per_step(self, mock_mlflow: MagicMock) -> None:
        """Test a curve is logged as one metric point per step."""
        tracker = MetricsTracker(experiment_name="remdet-test", tracking_uri="./mlruns")
        tracker.log_curve("loss", [1.5, 1.0])
        mock_mlflow.set_experiment.assert_called_once_with("remdet-test")
        mock_mlflow.log_metric.assert_any_call("loss", 1.5, step=0)
        mock_mlflow.log_metric.assert_any_call("loss", 1.0, step=1)

    @patch("shared.monitoring.metrics.mlflow")
    def test_failures_become_warnings(self, mock_mlflow: MagicMock) -> None:
        """Test MLflow errors are logged and swallowed."""
        mock_mlflow.log_metrics.side_effect = RuntimeError("tracking server down")
        mock_mlflow.start_run.side_effect = RuntimeError("tracking server down")
        tracker = MetricsTracker(experiment_name="remdet-test")
        ran = False
        with tracker.start_run(run_name="offline"):
            tracker.log_metrics({"loss": 1.0})
            ran = True
        assert ran

    @patch("shared.monitoring.metrics.mlflow")
    def test_setup_failure_disables(self, mock_mlflow: MagicMock) -> None:
        """Test a failed experiment setup turns the tracker off."""
        mock_mlflow.set_experiment.side_effect = RuntimeError("bad uri")
        tracker = MetricsTracker(experiment_name="remdet-test")
        assert tracker.enabled is False
        tracker.log_metric("loss", 1.0)
        mock_mlflow.log_metric.assert_not_called()

    def test_factory_follows_settings(self) -> None:
        """Test the factory uses the configured experiment and the enable override."""
        tracker = metrics_tracker("bench", enabled=False)
        assert tracker.experiment_name == settings.mlflow_experiment_name
        assert tracker.run_name == "bench"
        assert tracker.enabled is False
