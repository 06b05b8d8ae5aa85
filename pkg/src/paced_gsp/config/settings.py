from typing import Literal, Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="PACED_GSP_", case_sensitive=False)

    # Logging
    log_level: str = "INFO"
    log_dir: str = "logs"
    log_file: Optional[str] = None

    # Pacing
    pacing_tol: float = 1e-8
    pacing_max_iter: int = 500
    pacing_damping: float = 0.5
    pacing_method: Literal["fixed-point", "gauss-newton"] = "fixed-point"
    pacing_retries: int = 2  # damping halves on each retry

    # Engine
    oracle_cap: int = 20

    # Recommendation grid
    grid_epsilon_abs: float = 1e-6
    grid_epsilon_rel: float = 1e-6
    recommend_coupling: Literal["full", "frozen"] = "full"
    simultaneous_max_sweeps: int = 50

    # Regret inference
    regret_uniform_points: int = 64
    regret_grid_span: float = 1.5
    value_grid_multiple: float = 10.0
    classification_delta: float = 1e-6

    # Clustering / adherence
    cluster_k: int = 3
    min_active_days: int = 7
    adherence_month_days: int = 30

    # Output
    float_sig_digits: int = 12


settings = Settings()
