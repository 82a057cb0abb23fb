from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import FIELD_RESOLUTION, MAX_DEGREE, REFERENCE_LEVELS


class MaterialParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mu_r: float = Field(1.0, gt=0)
    br_x: float = 0.0  # remanent flux density [T]
    br_y: float = 0.0
    jz: float = 0.0    # source current density [A/m^2]

    @property
    def remanence(self) -> tuple[float, float]:
        return self.br_x, self.br_y


class AdaptiveConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    theta: float = Field(0.5, gt=0, lt=1)
    max_iterations: int = Field(5, ge=0)
    max_levels: int = Field(4, ge=1, le=12)
    marking: Literal["estimator", "true_error", "uniform"] = "estimator"
    tolerance: float = Field(1e-8, gt=0)


class ExportOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    output_dir: Path | None = None
    field_resolution: int = Field(FIELD_RESOLUTION, ge=2)
    mesh_every_iteration: bool = True
    record_timings: bool = False


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    problem: Literal["poisson_peak", "magnetostatic_horseshoe", "custom"]
    geometry: Path | None = None
    degree: int = Field(2, ge=1, le=MAX_DEGREE)
    elements: int = Field(4, ge=1)
    alpha: float = Field(100.0, gt=0)
    seed: int = 0  # stored with the run metadata; nothing in the pipeline is random
    reference_levels: int = Field(REFERENCE_LEVELS, ge=1)
    truncated: bool = True
    adaptivity: AdaptiveConfig = Field(default_factory=AdaptiveConfig)
    materials: dict[str, MaterialParams] = Field(default_factory=dict)
    export: ExportOptions = Field(default_factory=ExportOptions)

    @field_validator("geometry")
    @classmethod
    def geometry_exists(cls, value: Path | None) -> Path | None:
        if value is not None and not value.is_file():
            raise ValueError(f"geometry file {value} does not exist")
        return value

    @model_validator(mode="after")
    def custom_needs_geometry(self) -> "RunConfig":
        if self.problem == "custom" and self.geometry is None:
            raise ValueError("problem 'custom' requires a geometry file")
        return self


class ConvergenceRecord(BaseModel):
    iteration: int
    dofs: int
    elements: int
    elements_per_level: list[int]
    l2_error: float | None = None
    relative_l2_error: float | None = None
    estimator_total: float | None = None
    seconds: float = 0.0


class FieldSample(BaseModel):
    model_config = ConfigDict(frozen=True)

    point: tuple[float, float]
    patch: int
    parameter: tuple[float, float]
    az: float
    b: tuple[float, float]

    @property
    def b_magnitude(self) -> float:
        return (self.b[0] ** 2 + self.b[1] ** 2) ** 0.5


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str


class CommandResult(BaseModel):
    success: bool
    message: str
    exit_code: int = 0
