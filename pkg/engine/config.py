"""
Engine configuration
Settings come from CFCSED_* environment variables (optionally a .env file)
"""
import logging
from functools import lru_cache
from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class EngineSettings(BaseSettings):
    """Process-wide defaults, overridable per run from the CLI"""

    model_config = SettingsConfigDict(env_prefix="CFCSED_", env_file=".env", extra="ignore")

    log: str = "INFO"

    # Solver backend selection
    solver_backend: Literal["auto", "builtin", "highs"] = "auto"
    builtin_max_vars: int = Field(150, ge=1)
    builtin_max_binaries: int = Field(12, ge=0)

    # Scenario sampling
    scenarios: int = Field(100, ge=1)
    full_scenarios: int = Field(500, ge=1)
    seed: int = 42

    # Outer layer (ADMM) and tractable iteration
    admm_rho: float = Field(5.0, gt=0)
    admm_epsilon: float = Field(1e-4, gt=0)
    admm_max_iters: int = Field(200, ge=1)
    admm_accumulate: bool = False
    outer_max_iters: int = Field(20, ge=1)

    # Model construction
    pwl_segments: int = Field(3, ge=1)
    pwl_grid: int = Field(15, ge=2)
    circle_segments: int = Field(8, ge=2)
    fuel_segments: int = Field(4, ge=1)

    # Frequency simulation
    sfr_step: float = Field(1e-3, gt=0, le=1e-3)
    sfr_horizon: float = Field(30.0, gt=0)

    # Agent transport
    round_timeout: float = Field(120.0, gt=0)
    frame_limit: int = Field(16 * 1024 * 1024, ge=1024)

    debug_dump: Optional[str] = None


@lru_cache()
def get_settings() -> EngineSettings:
    """Cached settings instance"""
    return EngineSettings()


def configure_logging(level: Optional[str] = None):
    """Set up root logging once, level from CFCSED_LOG unless given"""
    level_name = (level or get_settings().log).upper()
    logging.basicConfig(
        format=LOG_FORMAT,
        level=getattr(logging, level_name, logging.INFO),
    )
    logging.getLogger().setLevel(getattr(logging, level_name, logging.INFO))
