"""
Configuration models with documented defaults.
Every model can be overridden from SUBLEVELPACK_* environment variables.
"""

import os
from typing import Optional

from pydantic import BaseModel, Field, field_validator


VALID_BACKENDS = {"ipm", "cvxpy"}


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name, "").strip()
    return float(raw) if raw else default


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name, "").strip()
    return int(raw) if raw else default


class SolverOptions(BaseModel):
    max_iters: int = Field(default=200, gt=0)
    feas_tol: float = Field(default=1e-8, gt=0)
    duality_gap_tol: float = Field(default=1e-8, gt=0)
    backend: str = "ipm"
    cvxpy_solver: Optional[str] = None

    @field_validator("backend")
    @classmethod
    def validate_backend(cls, v: str) -> str:
        if v.lower() not in VALID_BACKENDS:
            raise ValueError(f"Backend must be one of {sorted(VALID_BACKENDS)}")
        return v.lower()

    @classmethod
    def from_env(cls) -> "SolverOptions":
        return cls(
            max_iters=_env_int("SUBLEVELPACK_MAX_ITERS", 200),
            feas_tol=_env_float("SUBLEVELPACK_FEAS_TOL", 1e-8),
            duality_gap_tol=_env_float("SUBLEVELPACK_GAP_TOL", 1e-8),
            backend=os.getenv("SUBLEVELPACK_SOLVER_BACKEND", "ipm").strip() or "ipm",
            cvxpy_solver=os.getenv("SUBLEVELPACK_CVXPY_SOLVER") or None,
        )


class VerificationTolerances(BaseModel):
    tol_res: float = Field(default=1e-6, gt=0)
    tol_psd: float = Field(default=1e-7, ge=0)
    margin_safety: float = Field(default=1e-6, ge=0)

    @classmethod
    def from_env(cls) -> "VerificationTolerances":
        return cls(
            tol_res=_env_float("SUBLEVELPACK_TOL_RES", 1e-6),
            tol_psd=_env_float("SUBLEVELPACK_TOL_PSD", 1e-7),
            margin_safety=_env_float("SUBLEVELPACK_MARGIN_SAFETY", 1e-6),
        )


class OracleBudget(BaseModel):
    # None means: 200 per axis in 2D, 40 per axis in 3D and above
    grid_resolution: Optional[int] = Field(default=None, gt=1)
    random_samples: int = Field(default=20000, ge=0)
    seed: int = 0
    margin: float = Field(default=1e-9, ge=0)

    def resolution_for(self, dimension: int) -> int:
        if self.grid_resolution is not None:
            return self.grid_resolution
        return 200 if dimension <= 2 else 40

    @classmethod
    def from_env(cls) -> "OracleBudget":
        raw_grid = os.getenv("SUBLEVELPACK_ORACLE_GRID", "").strip()
        return cls(
            grid_resolution=int(raw_grid) if raw_grid else None,
            random_samples=_env_int("SUBLEVELPACK_ORACLE_SAMPLES", 20000),
            seed=_env_int("SUBLEVELPACK_SEED", 0),
        )
