import os

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Settings(BaseSettings):
    # Logging: level name and optional file (stderr when unset)
    SHAPEREG_LOG: str = Field(default="INFO")
    SHAPEREG_LOG_FILE: str | None = None

    # Parallel scans: worker threads (None -> CPU count) and block count for n^2 sweeps
    SHAPEREG_THREADS: int | None = Field(default=None, ge=1)
    SHAPEREG_BLOCKS: int = Field(default=10, ge=1)

    # Default seed for generators and constraint sampling
    SHAPEREG_SEED: int = Field(default=0, ge=0)

    # Pydantic v2 settings config
    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    @field_validator("SHAPEREG_LOG", mode="before")
    @classmethod
    def check_log_level(cls, value):
        level = str(value).upper()
        if level not in LOG_LEVELS:
            raise ValueError(f"SHAPEREG_LOG must be one of {', '.join(LOG_LEVELS)}")
        return level

    @property
    def threads(self) -> int:
        return self.SHAPEREG_THREADS or os.cpu_count() or 1

