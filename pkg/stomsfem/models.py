from datetime import datetime, timezone
from typing import Any, Dict, Generic, List, Literal, Optional, Tuple, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class Domain2D(BaseModel):
    model_config = ConfigDict(frozen=True)

    x_range: Tuple[float, float] = (0.0, 1.0)
    y_range: Tuple[float, float] = (0.0, 1.0)

    @model_validator(mode="after")
    def _positive_lengths(self):
        if not self.x_range[1] > self.x_range[0] or not self.y_range[1] > self.y_range[0]:
            raise ValueError("domain intervals must have strictly positive length")
        return self

    @property
    def width(self) -> float:
        return self.x_range[1] - self.x_range[0]

    @property
    def height(self) -> float:
        return self.y_range[1] - self.y_range[0]


class GridSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    coarse_nx: int = Field(16, ge=1)
    coarse_ny: int = Field(16, ge=1)
    refine: int = Field(8, ge=1)
    oversample_ratio: float = Field(1.0, ge=1.0)

    @property
    def oversampled(self) -> bool:
        return self.halo_cells > 0

    @property
    def halo_cells(self) -> int:
        """Fine cells added on each side of an element by oversampling."""
        return int(round((self.oversample_ratio - 1.0) * self.refine / 2.0))


class FieldSpec(BaseModel):
    preset: Literal["patch_study", "high_contrast", "gaussian_short_corr", "custom"] = "patch_study"
    geometry_file: Optional[str] = None
    n_channels: int = Field(13, ge=0, le=13)
    correlation_lengths: Tuple[float, float] = (1.0, 1.0 / 64.0)
    kappa_min: float = Field(0.1, gt=0.0)
    keep_fraction: float = Field(0.99, gt=0.0, le=1.0)
    sampler_fraction: float = Field(0.999, gt=0.0, le=1.0)
    gaussian_box: float = Field(3.0, gt=0.0)


class MsFEMSpec(BaseModel):
    boundary_kind: Literal["bilinear", "oscillatory"] = "bilinear"
    formulation: Optional[Literal["galerkin", "petrov_galerkin"]] = None

    def resolved_formulation(self, grid: GridSpec) -> str:
        if self.formulation is not None:
            return self.formulation
        return "petrov_galerkin" if grid.oversampled else "galerkin"


GridKind = Literal[
    "tensor_chebyshev",
    "sparse_clenshaw_curtis",
    "sparse_trapezoidal",
    "adaptive_clenshaw_curtis",
]


class SurrogateSpec(BaseModel):
    grid_kind: GridKind = "tensor_chebyshev"
    nodes_per_dim: int = Field(9, ge=1)
    level: int = Field(3, ge=0)
    max_nodes: int = Field(200, ge=1)
    adaptive_degree: float = Field(0.6, ge=0.0, le=1.0)
    rb_threshold: Optional[float] = Field(default=None, gt=0.0)
    rb_modes: Optional[int] = Field(default=None, ge=0)


class EstimatorSpec(BaseModel):
    kind: Literal["mc", "two_level_mc", "sc"] = "mc"
    n_samples: int = Field(100, ge=1)
    n_fine_samples: int = Field(0, ge=0)
    seed: int = 0
    level: int = Field(2, ge=0)
    rule: Literal["clenshaw_curtis", "trapezoidal"] = "clenshaw_curtis"
    quantity: Literal["mean_field", "variance_field", "functional"] = "mean_field"


class ProblemSpec(BaseModel):
    source: Literal["one", "two_plus_xy", "zero", "manufactured"] = "one"
    boundary: Literal["zero_dirichlet", "x_lines", "y_lines"] = "zero_dirichlet"


Method = Literal["fine_fem", "msfem_direct", "stomsfem_interp", "stomsfem_rb"]


class StudySpec(BaseModel):
    """Sample counts and levels of the estimator-rate sweep, and the refine levels of the cost sweep."""

    rate_method: Literal["fine_fem", "msfem_direct"] = "msfem_direct"
    mc_samples: Tuple[int, ...] = (16, 64, 256)
    replicates: int = Field(10, ge=1)
    levels: Tuple[int, ...] = (0, 1, 2, 3)
    reference_level: int = Field(5, ge=1)
    refines: Tuple[int, ...] = (4, 8, 16)
    timing_samples: int = Field(5, ge=1)

    @model_validator(mode="after")
    def _consistent_sweeps(self):
        if len(self.mc_samples) < 2 or len(self.levels) < 2 or any(n < 1 for n in self.mc_samples) \
                or any(level < 0 for level in self.levels):
            raise ValueError("rate fits need at least two positive sample counts and two nonnegative levels")
        if max(self.levels) >= self.reference_level:
            raise ValueError("the reference level must exceed every studied level")
        if any(r < 1 for r in self.refines):
            raise ValueError("refine levels must be positive")
        return self


class ExperimentConfig(BaseModel):
    name: str = "custom"
    domain: Domain2D = Field(default_factory=Domain2D)
    grid: GridSpec = Field(default_factory=GridSpec)
    field: FieldSpec = Field(default_factory=FieldSpec)
    msfem: MsFEMSpec = Field(default_factory=MsFEMSpec)
    surrogate: SurrogateSpec = Field(default_factory=SurrogateSpec)
    estimator: EstimatorSpec = Field(default_factory=EstimatorSpec)
    study: StudySpec = Field(default_factory=StudySpec)
    problem: ProblemSpec = Field(default_factory=ProblemSpec)
    method: Method = "stomsfem_interp"
    output_dir: str = "results"
    artifact_dir: str = "artifacts"
    workers: int = Field(1, ge=1)

    @property
    def formulation(self) -> str:
        return self.msfem.resolved_formulation(self.grid)


class EstimatorReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: str
    method: str
    mean: np.ndarray
    variance: np.ndarray
    n_samples: int
    n_fine_samples: int = 0
    n_fallback: int = 0
    failed_samples: List[int] = Field(default_factory=list)
    timings: Dict[str, float] = Field(default_factory=dict)
    mse_terms: Dict[str, Optional[float]] = Field(default_factory=dict)
    level_variances: Dict[str, float] = Field(default_factory=dict)
    functional: Optional[float] = None

    def summary(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "method": self.method,
            "n_samples": self.n_samples,
            "n_fine_samples": self.n_fine_samples,
            "n_fallback": self.n_fallback,
            "failed_samples": list(self.failed_samples),
            "timings": dict(self.timings),
            "mse_terms": dict(self.mse_terms),
            "level_variances": dict(self.level_variances),
            "functional": self.functional,
            "mean_max": float(np.max(np.abs(self.mean))) if self.mean.size else 0.0,
        }


class CostLedger(BaseModel):
    stages: Dict[str, float] = Field(default_factory=dict)
    counts: Dict[str, int] = Field(default_factory=dict)
    gamma: Optional[float] = None
    mu: Optional[float] = None
    n_off: Optional[float] = None
    R: Optional[float] = None
    online_per_sample: Optional[float] = None

    def add_time(self, stage: str, seconds: float):
        self.stages[stage] = self.stages.get(stage, 0.0) + float(seconds)

    def count(self, name: str, amount: int = 1):
        self.counts[name] = self.counts.get(name, 0) + int(amount)


class BudgetRequest(BaseModel):
    H: float = Field(..., gt=0.0, lt=1.0)
    h: Optional[float] = Field(default=None, gt=0.0)
    beta: float = Field(..., gt=0.0)
    zeta: Optional[float] = Field(default=None, gt=0.0)
    target_error: Optional[float] = Field(default=None, gt=0.0)
    method: Literal["mc", "sc"] = "mc"


class BudgetData(BaseModel):
    method: str
    n_on: int


class EstimateRequest(BaseModel):
    preset: Literal["patch_study", "high_contrast", "gaussian_short_corr"] = "patch_study"
    method: Method = "stomsfem_interp"
    estimator: Literal["mc", "mc2", "sc"] = "mc"
    overrides: Dict[str, str] = Field(default_factory=dict)


class EstimateData(BaseModel):
    report: Dict[str, Any]
    cost: Dict[str, Any]
    outputs: Dict[str, str] = Field(default_factory=dict)


class PresetInfo(BaseModel):
    name: str
    coarse: Tuple[int, int]
    refine: int
    oversample_ratio: float
    n_params: Optional[int] = None
    formulation: str


class HealthData(BaseModel):
    status: str = "healthy"
    presets: List[str] = Field(default_factory=list)


T = TypeVar("T")


class StandardResponse(BaseModel, Generic[T]):
    service: str = "stomsfem"
    version: str = "1.0.0"
    status: Literal["success", "error"]
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    data: Optional[T] = None
    error: Optional[Dict[str, Any]] = None
    metadata: Dict[str, Any] = Field(default_factory=dict)
