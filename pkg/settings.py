from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()


class Settings(BaseSettings):
    """
    Process-level settings read from the environment (and a local .env file)
    """
    model_config = SettingsConfigDict(env_prefix="OFDIFF_", extra="ignore", env_ignore_empty=True)

    log: Literal["error", "info", "debug"] = "info"
    num_threads: Optional[int] = None
    deterministic: bool = False


def get_settings() -> Settings:
    return Settings()
