"""Application configuration."""

from functools import lru_cache
from typing import Literal

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env", env_file_encoding="utf-8", env_prefix="CROSSFACT_", case_sensitive=False, extra="ignore"
    )

    log_level: str = Field(default="INFO")
    log_format: Literal["text", "json"] = Field(default="text")

    eval_batch_size: int = Field(default=256, ge=1)
    ece_bins: int = Field(default=20, ge=1)

    show_progress: bool = Field(default=False, description="Show tqdm bars over training epochs.")
    compare_workers: int = Field(default=1, ge=1, description="Matrix cells trained concurrently by `compare`.")


@lru_cache()
def get_settings() -> Settings:
    return Settings()
