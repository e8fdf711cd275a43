"""Request and response models of the simulation service."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field


class RunRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict[str, Any] = Field(default_factory=dict, description="ScenarioConfig fields")
    out_dir: str
    seeds: int = Field(1, ge=1, description="number of consecutive seeds starting at config.seed")
    mode: Optional[str] = None
    fusion: Optional[str] = None


class SummaryRow(BaseModel):
    seed: str
    mechanism: str
    rmse_m: float
    raw_rmse_m: float
    sqrt_variance_m: float
    sqrt_mse_m: float
    loss_rate: float


class RunResponse(BaseModel):
    files: dict[str, str]
    summary: list[SummaryRow]
    elapsed_s: float


class ValidateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict[str, Any] = Field(default_factory=dict)


class ValidateResponse(BaseModel):
    valid: bool
    problems: list[str] = Field(default_factory=list)
    config: Optional[dict[str, Any]] = None


class SynthMapRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    out: str
    extent_m: float = Field(3000.0, gt=0)
    spacing_m: float = Field(250.0, gt=0)
    half_width_m: float = Field(1.75, gt=0)
    kernel_sigma_m: float = Field(1.0, gt=0)


class SynthMapResponse(BaseModel):
    path: str
    n_segments: int


class ErrorResponse(BaseModel):
    detail: str
    problems: list[str] = Field(default_factory=list)
