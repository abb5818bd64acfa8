"""Request and response bodies of the HTTP service."""
from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class InhomogeneityIn(BaseModel):
    T_in: float = Field(ge=0)
    breakpoints: list[float]
    g: Optional[list[list[list[float]]]] = None
    h: Optional[list[list[list[float]]]] = None


class InitialIn(BaseModel):
    s: float = Field(0.0, ge=0)
    regime: int = Field(0, ge=0)
    xi2: Optional[list[float]] = None
    xi1_coef: Optional[list[float]] = None


class FeedbackIn(BaseModel):
    Theta1: list
    Theta2: list


class ProblemConfig(BaseModel):
    """Same layout as a config file; per-regime matrices live in ``regimes``."""

    model_config = ConfigDict(extra="forbid")

    n: int = Field(ge=1)
    m: int = Field(ge=1)
    generator: list[list[float]]
    regimes: list[dict[str, Any]]
    inhomogeneities: dict[str, InhomogeneityIn] = {}
    initial: Optional[InitialIn] = None
    feedback: Optional[FeedbackIn] = None

    def to_config(self) -> dict:
        return self.model_dump(exclude_unset=True, exclude_none=True)


class RunOptionsIn(BaseModel):
    tol: float = Field(1e-9, gt=0)
    seed: int = 0
    paths: int = Field(10_000, ge=2)
    horizon: Optional[float] = Field(None, gt=0)
    dt: float = Field(1e-3, gt=0)
    threads: int = Field(1, ge=1)
    method: Literal["horizon", "newton"] = "horizon"
    step: float = Field(1e-2, gt=0)
    n_dump: int = Field(10, ge=0)


class CommandRequest(BaseModel):
    config: ProblemConfig
    options: RunOptionsIn = RunOptionsIn()


class CommandResponse(BaseModel):
    command: str
    report: dict[str, Any]
    tables: dict[str, Any] = {}
    passed: Optional[bool] = None
    exit_code: int = 0


class ErrorResponse(BaseModel):
    error: str
    message: str
    exit_code: int


class Health(BaseModel):
    status: str
    version: str
