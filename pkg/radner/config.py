from typing import List

from pydantic_settings import BaseSettings, SettingsConfigDict

class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="RADNER_",
        case_sensitive=False,
        extra="ignore"
    )
    log_level: str = "INFO"
    output_dir: str = "out"
    show_progress: bool = False

    # Reproducibility
    seed: int = 20240101

    # Planner
    negishi_tol: float = 1e-6
    negishi_max_iter: int = 50
    sharing_tol: float = 1e-12
    sharing_max_iter: int = 400

    # Validation
    validation_samples: int = 1024

    # Grid and Monte Carlo
    grid_nodes: List[int] = [201, 81, 31]  # per dimension, indexed by K - 1
    grid_time_steps: int = 200
    mc_paths: int = 10_000
    mc_steps: int = 100
    path_chunk: int = 4096

    # PDE scheme
    theta: float = 0.5
    rannacher_steps: int = 2

    # Diagnostics
    det_threshold: float = 1e-8
    drift_bias_allowance: float = 1e-4
    max_exit_fraction: float = 0.01
    max_singular_fraction: float = 0.001

settings = Settings()
