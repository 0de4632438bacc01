"""
Numerical tolerances for reprocs.
Defaults can be overridden from the environment or a .env file at the repository root,
and at runtime from the [tolerances] section of an experiment config.
"""

import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from .errors import ConfigError

# Load .env file from project root
env_path = Path(__file__).resolve().parent.parent.parent / ".env"
load_dotenv(env_path)


class Tolerances(BaseModel):
    """Tolerances shared by the numerical modules"""

    model_config = {"extra": "forbid", "frozen": True}

    orthonormality: float = Field(
        1e-8, gt=0, description="Max-entry tolerance on P^T P - I for basis matrices"
    )
    rank_cutoff: float = Field(
        1e-10, gt=0, description="Smallest singular value accepted by restricted solves"
    )
    enumeration_budget: int = Field(
        1_000_000, ge=1, description="Largest number of subsets enumerated by exact kappa/delta"
    )
    exact_kappa_max_n: int = Field(
        64, ge=1, description="Largest n for which kappa_s auto mode enumerates subsets"
    )


ENV_KEYS = {
    "orthonormality": "REPROCS_ORTHONORMALITY_TOL",
    "rank_cutoff": "REPROCS_RANK_CUTOFF",
    "enumeration_budget": "REPROCS_ENUMERATION_BUDGET",
    "exact_kappa_max_n": "REPROCS_EXACT_KAPPA_MAX_N",
}

LOG_LEVEL = os.getenv("REPROCS_LOG_LEVEL", "INFO").upper()


def load_tolerances() -> Tolerances:
    """Build tolerances from REPROCS_* environment variables"""
    values = {field: os.getenv(key) for field, key in ENV_KEYS.items()}
    values = {field: value for field, value in values.items() if value not in (None, "")}
    try:
        return Tolerances(**values)
    except ValidationError as e:
        raise ConfigError(f"invalid tolerance in environment: {e}") from e


_tolerances: Optional[Tolerances] = None


def get_tolerances() -> Tolerances:
    """Return the active tolerances, loading them from the environment on first use"""
    global _tolerances
    if _tolerances is None:
        _tolerances = load_tolerances()
    return _tolerances


def override_tolerances(**values) -> Tolerances:
    """
    Replace some tolerances for the rest of the process.

    Args:
        **values: Tolerances field names and their new values

    Returns:
        The new active Tolerances
    """
    global _tolerances
    try:
        _tolerances = Tolerances.model_validate({**get_tolerances().model_dump(), **values})
    except ValidationError as e:
        raise ConfigError(f"invalid tolerance override: {e}") from e
    return _tolerances


def reset_tolerances() -> None:
    """Forget overrides; the next get_tolerances() re-reads the environment"""
    global _tolerances
    _tolerances = None
