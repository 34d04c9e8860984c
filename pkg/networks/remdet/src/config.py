"""Runtime settings for the RemDet toolkit."""

from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from shared.models import DType
from shared.monitoring import MetricsTracker

# Get the project root (4 levels up from this file)
PROJECT_ROOT = Path(__file__).parent.parent.parent.parent
ENV_FILE = PROJECT_ROOT / ".env"
CONFIGS_DIRECTORY = Path(__file__).parent.parent / "configs"


class RemdetSettings(BaseSettings):
    """Settings loaded from REMDET_* environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="REMDET_",
        env_file=str(ENV_FILE),
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Execution
    threads: int = Field(default=1, ge=1)  # 1 keeps every run bit-reproducible
    default_dtype: DType = DType.F32
    strict_tensors: bool = False

    # Monitoring
    log_level: str = "INFO"
    enable_metrics: bool = False
    mlflow_tracking_uri: str | None = None
    mlflow_experiment_name: str = "remdet-desk"

    # Bundled architecture documents
    configs_directory: str = str(CONFIGS_DIRECTORY)

    # Toy training defaults
    toy_classes: int = Field(default=4, ge=2, le=8)
    toy_batch_size: int = Field(default=32, gt=0)
    toy_learning_rate: float = Field(default=0.05, gt=0)
    toy_samples: int = Field(default=512, gt=0)

    def get_mlflow_tracking_uri(self) -> str:
        """Get MLFlow tracking URI, fallback to local if not configured."""
        return self.mlflow_tracking_uri or "./mlruns"


# Global settings instance
settings = RemdetSettings()


def metrics_tracker(run_name: str | None = None, *, enabled: bool | None = None) -> MetricsTracker:
    """MLflow tracker for the configured experiment; `enabled` overrides the settings flag."""
    return MetricsTracker(
        experiment_name=settings.mlflow_experiment_name,
        run_name=run_name,
        tracking_uri=settings.get_mlflow_tracking_uri(),
        enabled=settings.enable_metrics if enabled is None else enabled,
    )
