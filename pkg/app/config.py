"""Process settings loaded from environment variables."""

from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Harness settings with environment variable loading and sensible defaults."""

    model_config = SettingsConfigDict(
        env_prefix="CLOUD_KSVD_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
    )

    app_name: str = "cloud-ksvd"
    log_level: str = "INFO"
    json_logs: bool = False
    output_dir: Path = Path("runs")
    # Threads used for per-site sparse coding; 1 keeps everything serial.
    workers: int = 1
    # Directory holding train-images-idx3-ubyte / train-labels-idx1-ubyte.
    mnist_dir: Path | None = None


settings = Settings()
