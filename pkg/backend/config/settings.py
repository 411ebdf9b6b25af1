# backend/config/settings.py
from pydantic_settings import BaseSettings, SettingsConfigDict

class Settings(BaseSettings):
    # Data & Results
    data_root: str = "data"
    results_dir: str = "results"
    results_file: str = "results.tsv"

    # Logging
    log_level: str = "INFO"
    log_file: str = "zfs.log"

    # Execution
    grid_concurrency: int = 2  # grid cells in flight
    device: str = "cpu"
    num_threads: int = 1  # >1 breaks bit-identical reruns
    deterministic: bool = True

    # Zero-shot-from-scratch rule: refuse checkpoints not produced by this toolkit
    zfs_strict: bool = True

    model_config = SettingsConfigDict(env_prefix="ZFS_", env_file=".env", extra="ignore")

settings = Settings()
