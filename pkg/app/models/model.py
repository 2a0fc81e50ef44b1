from dataclasses import dataclass
from typing import Any, Literal

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, field_validator, model_validator

logger = structlog.get_logger(__name__)

DEFAULT_GAMMA_GRID = tuple(round(0.5 + 0.1 * i, 1) for i in range(10))
DEFAULT_COST_GRID = tuple(10.0**e for e in range(-3, 5))

ChemicalProperty = Literal["TBARS", "TOTOX"]
FilterMode = Literal["mean", "median"]
Algorithm = Literal["LGV", "LBW"]
EigensolverName = Literal["auto", "lapack", "jacobi"]


# =============================================================================
# PYDANTIC MODELS
# =============================================================================

class ChemicalEntry(BaseModel):
    """One (trial, reheat class) row of the chemical ground-truth table."""
    model_config = ConfigDict(frozen=True)

    trial: int = Field(ge=0)
    reheat_class: int = Field(ge=1)
    tbars_pct: float = Field(ge=0)
    tbars_sig: bool
    totox_pct: float = Field(ge=0)
    totox_sig: bool


class ChemicalRecord(BaseModel):
    """TBARS / TOTOX increases and significance flags for every heated class of one trial."""
    model_config = ConfigDict(frozen=True)

    trial: int = Field(ge=0)
    entries: tuple[ChemicalEntry, ...]

    @model_validator(mode="after")
    def _one_trial(self) -> "ChemicalRecord":
        if any(e.trial != self.trial for e in self.entries):
            raise ValueError(f"chemical record for trial {self.trial} holds rows of another trial")
        classes = [e.reheat_class for e in self.entries]
        if len(set(classes)) != len(classes):
            raise ValueError(f"duplicate reheat class rows for trial {self.trial}")
        return self

    def flagged(self, prop: ChemicalProperty) -> set[int]:
        if prop == "TBARS":
            return {e.reheat_class for e in self.entries if e.tbars_sig}
        return {e.reheat_class for e in self.entries if e.totox_sig}


class RunManifest(BaseModel):
    """Record of one CLI run, written next to its outputs."""
    schema_version: int = 1
    command: str
    run_id: str
    status: Literal["success", "failed"] = "success"
    seed: int | None = None
    tool_version: str
    config: dict[str, Any] = Field(default_factory=dict)
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    started_at: str
    duration_s: float = 0.0
    events: list[dict[str, Any]] = Field(default_factory=list)


# =============================================================================
# CONFIGURATION
# =============================================================================

class SynthConfig(BaseModel):
    """Planted monotone-drift dataset: trials x classes x signatures of B-band Gaussians."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    trials: PositiveInt = 9
    classes: int = Field(default=6, ge=2)
    signatures_per_class: PositiveInt = 900
    bands: PositiveInt = 9
    base_level_range: tuple[float, float] = (350.0, 750.0)
    drift_step: float = Field(default=1.0, ge=0)
    drift_direction: tuple[float, ...] | None = None
    noise_std: PositiveFloat = 0.3
    covariance: tuple[tuple[float, ...], ...] | None = None
    covariance_inflation: float = Field(default=0.05, ge=0)
    trial_offset_scale: float = Field(default=2.0, ge=0)
    trial_drift_jitter: float = Field(default=0.1, ge=0)
    critical_classes: tuple[int, ...] = (1, 4)
    boost: PositiveFloat = 2.0
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_shapes(self) -> "SynthConfig":
        bad = [c for c in self.critical_classes if not 1 <= c < self.classes]
        if bad:
            raise ValueError(f"critical classes {bad} outside 1..{self.classes - 1}")
        if self.drift_direction is not None:
            if len(self.drift_direction) != self.bands:
                raise ValueError(f"drift_direction needs {self.bands} entries")
            if not np.any(np.asarray(self.drift_direction)):
                raise ValueError("drift_direction must be nonzero")
        if self.covariance is not None and (
            len(self.covariance) != self.bands or any(len(row) != self.bands for row in self.covariance)
        ):
            raise ValueError(f"covariance must be {self.bands}x{self.bands}")
        return self

    @property
    def total_signatures(self) -> int:
        return self.trials * self.classes * self.signatures_per_class


class PreprocessConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    half_width: int = Field(default=15, ge=0)
    filter_mode: FilterMode = "mean"
    window_row: int = Field(default=0, ge=0)
    window_col: int = Field(default=0, ge=0)
    window_side: PositiveInt = 30


class ClassifierConfig(BaseModel):
    """Set reformation, optional FDA and the SVM grid."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    sets_per_class: PositiveInt = 60
    set_size: PositiveInt = 135
    test_fraction: float = Field(default=0.2, gt=0, lt=1)
    fda_dim: PositiveInt | None = None
    gamma_grid: tuple[PositiveFloat, ...] = DEFAULT_GAMMA_GRID
    cost_grid: tuple[PositiveFloat, ...] = DEFAULT_COST_GRID
    folds: int = Field(default=5, ge=2)

    @field_validator("gamma_grid", "cost_grid")
    @classmethod
    def _non_empty(cls, grid: tuple[float, ...]) -> tuple[float, ...]:
        if not grid:
            raise ValueError("grid must be non-empty")
        return tuple(sorted(set(grid)))


class ClusterConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    sigma_grid: tuple[PositiveFloat, ...] | None = None
    sigma_min: float = Field(default=1.0, ge=1.0)
    sigma_max: PositiveFloat = 100.0
    sigma_points: int = Field(default=60, ge=2)
    mode_range: tuple[int, int] = (3, 6)
    subsample: PositiveInt | None = 64
    algorithm: Algorithm = "LBW"
    amalgamate: bool = False
    eigensolver: EigensolverName = "auto"
    lbw_peak_floor: float = Field(default=0.0, ge=0, le=1)

    @model_validator(mode="after")
    def _check_ranges(self) -> "ClusterConfig":
        lo, hi = self.mode_range
        if lo < 1 or hi < lo:
            raise ValueError(f"mode range {self.mode_range} is not an ascending range of positive modes")
        if self.sigma_max <= self.sigma_min:
            raise ValueError("sigma_max must exceed sigma_min")
        if self.sigma_grid is not None:
            if not self.sigma_grid:
                raise ValueError("sigma grid must be non-empty")
            grid = np.asarray(self.sigma_grid)
            if grid[0] < 1.0 or np.any(np.diff(grid) <= 0):
                raise ValueError("sigma grid must be strictly ascending and start at or above 1.0")
        return self

    def sigmas(self) -> np.ndarray:
        if self.sigma_grid is not None:
            if not self.sigma_grid:
                raise ValueError("sigma grid must be non-empty")
            return np.asarray(self.sigma_grid, dtype=float)
        return np.geomspace(self.sigma_min, self.sigma_max, self.sigma_points)

    def modes(self) -> tuple[int, ...]:
        return tuple(range(self.mode_range[0], self.mode_range[1] + 1))


class PipelineConfig(BaseModel):
    """Root of the declarative config file."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(default=0, ge=0)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    classifier: ClassifierConfig = Field(default_factory=ClassifierConfig)
    cluster: ClusterConfig = Field(default_factory=ClusterConfig)


# =============================================================================
# SOLVER SETTINGS
# =============================================================================

@dataclass(frozen=True)
class SmoSettings:
    """Stopping rule for the pairwise dual solver."""
    tol: float = 1e-3
    max_iter: int = 100_000
    tau: float = 1e-12


@dataclass(frozen=True)
class KMeansSettings:
    n_init: int = 50
    retries: int = 5
