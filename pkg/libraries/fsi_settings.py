"""Process-level settings read from the environment or a dotenv file."""

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class FsiSettings(BaseSettings):
    """Read simulator process settings from dotenv file."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",    # ["allow", "ignore", "forbid"]
    )

    FSI_THREADS: int = Field(default=1, ge=1)
    FSI_LOG_DIR: str = "logs"
    FSI_LOG_LEVEL: str = "INFO"
    FSI_SEED: int = Field(default=0, ge=0)
