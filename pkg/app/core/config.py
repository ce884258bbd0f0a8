from __future__ import annotations

from pathlib import Path

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )

    # Where `run` writes when neither --out nor [output].directory is given
    output_dir: Path = Field(default=Path("runs"), validation_alias="SNLS_OUTPUT_DIR")

    log_level: str = Field(default="INFO", validation_alias="SNLS_LOG_LEVEL")
    log_json: bool = Field(default=False, validation_alias="SNLS_LOG_JSON")

    # Overrides [ensemble].workers when set (0 = use the config value)
    workers: int = Field(default=0, ge=0, validation_alias="SNLS_WORKERS")

    @field_validator("log_level")
    @classmethod
    def normalize_level(cls, v: str) -> str:
        return (v or "INFO").strip().upper()

    def effective_workers(self, configured: int) -> int:
        return self.workers or configured


settings = Settings()
