"""
Named experiment presets and the builders that turn a config into a field
model, a source term and boundary data.

The channel and inclusion layouts live in JSON geometry files under data/.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .exceptions import ConfigError
from .fem_core import BoundaryCondition, Source, zero_dirichlet
from .mesh import StructuredMesh
from .models import (
    EstimatorSpec,
    ExperimentConfig,
    FieldSpec,
    GridSpec,
    MsFEMSpec,
    ProblemSpec,
    SurrogateSpec,
)
from .random_field import (
    CovarianceKernel,
    FieldMode,
    FieldModel,
    IDENTITY,
    StandardNormal,
    Uniform,
    exp_shift,
    indicator,
    kl_field_model,
)

logger = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"

DIRICHLET_LINES = (0.1, 0.9)


def preset_patch_study() -> ExperimentConfig:
    """20 channel/inclusion modes with U[0, 1] parameters on a 16x16 coarse grid."""
    return ExperimentConfig(
        name="patch_study",
        grid=GridSpec(coarse_nx=16, coarse_ny=16, refine=8, oversample_ratio=2.0),
        field=FieldSpec(preset="patch_study"),
        msfem=MsFEMSpec(boundary_kind="bilinear"),
        surrogate=SurrogateSpec(grid_kind="tensor_chebyshev", nodes_per_dim=9, rb_threshold=1e-6),
        estimator=EstimatorSpec(kind="mc", n_samples=100),
        problem=ProblemSpec(source="one", boundary="zero_dirichlet"),
        method="stomsfem_interp",
    )


def preset_high_contrast(n_channels: int = 13) -> ExperimentConfig:
    """Background parameter plus x-direction channels with U[1e4, 2e4] contrast, H = 0.05, h = 0.0025."""
    return ExperimentConfig(
        name="high_contrast",
        grid=GridSpec(coarse_nx=20, coarse_ny=20, refine=20, oversample_ratio=3.0),
        field=FieldSpec(preset="high_contrast", n_channels=n_channels),
        msfem=MsFEMSpec(boundary_kind="bilinear", formulation="petrov_galerkin"),
        surrogate=SurrogateSpec(grid_kind="sparse_clenshaw_curtis", level=3),
        estimator=EstimatorSpec(kind="sc", level=3, rule="clenshaw_curtis", quantity="functional"),
        problem=ProblemSpec(source="one", boundary="zero_dirichlet"),
        method="stomsfem_interp",
    )


def preset_gaussian_short_corr() -> ExperimentConfig:
    """
    kappa = 0.1 + exp(beta) with an anisotropic Gaussian covariance (l1 = 1, l2 = 1/64)
    on a 64x64 coarse grid. The fine mesh is refine=4 at desk scale.
    """
    return ExperimentConfig(
        name="gaussian_short_corr",
        grid=GridSpec(coarse_nx=64, coarse_ny=64, refine=4, oversample_ratio=2.0),
        field=FieldSpec(
            preset="gaussian_short_corr",
            correlation_lengths=(1.0, 1.0 / 64.0),
            kappa_min=0.1,
            keep_fraction=0.99,
            sampler_fraction=0.999,
            gaussian_box=3.0,
        ),
        msfem=MsFEMSpec(boundary_kind="oscillatory", formulation="petrov_galerkin"),
        surrogate=SurrogateSpec(grid_kind="sparse_clenshaw_curtis", level=3),
        estimator=EstimatorSpec(kind="mc", n_samples=100),
        problem=ProblemSpec(source="two_plus_xy", boundary="zero_dirichlet"),
        method="stomsfem_interp",
    )


PRESETS: Dict[str, Callable[[], ExperimentConfig]] = {
    "patch_study": preset_patch_study,
    "high_contrast": preset_high_contrast,
    "gaussian_short_corr": preset_gaussian_short_corr,
}


def get_preset(name: str) -> ExperimentConfig:
    if name == "custom":
        return ExperimentConfig()
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset '{name}'; choose one of {sorted(PRESETS)}") from None


def load_geometry(name_or_path: str) -> dict:
    path = Path(name_or_path)
    if not path.suffix:
        path = DATA_DIR / f"{name_or_path}.json"
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"geometry file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"geometry file {path} is not valid JSON: {e}") from e


def _mean_function(spec: dict, inclusions) -> Callable:
    base = float(spec.get("base", 0.0))
    amplitude = float(spec.get("amplitude", 0.0))
    frequency = float(spec.get("frequency", 1.0))
    parts = [indicator(tuple(inc["box"]), float(inc["value"])) for inc in inclusions]

    def mean(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        value = base + amplitude * np.sin(frequency * np.pi * x) * np.sin(frequency * np.pi * y)
        for part in parts:
            value = value + part(x, y)
        return value

    return mean


def _distribution(spec: dict):
    if spec.get("kind", "uniform") == "normal":
        return StandardNormal()
    return Uniform(float(spec.get("low", 0.0)), float(spec.get("high", 1.0)))


def _select_channels(modes, n_channels: int):
    channels = [k for k, m in enumerate(modes) if m.get("kind") == "channel"]
    if n_channels >= len(channels):
        return modes
    keep = set(channels[int(i)] for i in np.round(np.linspace(0, len(channels) - 1, n_channels))) if n_channels else set()
    return [m for k, m in enumerate(modes) if m.get("kind") != "channel" or k in keep]


def geometry_field_model(geometry: dict, n_channels: Optional[int] = None) -> FieldModel:
    modes = geometry["modes"]
    if n_channels is not None:
        modes = _select_channels(modes, n_channels)
    field_modes = tuple(
        FieldMode(indicator(tuple(m["box"]), float(m.get("value", 1.0))), tuple(m["box"]),
                  _distribution(m.get("distribution", {})))
        for m in modes
    )
    return FieldModel(
        mean_field=_mean_function(geometry.get("mean", {}), geometry.get("inclusions", [])),
        modes=field_modes,
        transform=IDENTITY,
        name=geometry.get("name", "geometry"),
    )


def gaussian_kernel(config: ExperimentConfig) -> CovarianceKernel:
    return CovarianceKernel("gaussian_anisotropic", lengths=tuple(config.field.correlation_lengths))


def build_field_model(config: ExperimentConfig, fine: StructuredMesh) -> Tuple[FieldModel, Optional[CovarianceKernel]]:
    """(field model on the fine mesh, covariance kernel for locally KL-parametrized presets)."""
    spec = config.field
    if spec.preset == "gaussian_short_corr":
        kernel = gaussian_kernel(config)
        model, _ = kl_field_model(kernel, fine, spec.sampler_fraction, exp_shift(spec.kappa_min),
                                  name="gaussian_short_corr")
        return model, kernel
    if spec.preset == "custom" and not spec.geometry_file:
        raise ConfigError("custom field needs field.geometry_file")
    geometry = load_geometry(spec.geometry_file or spec.preset)
    n_channels = spec.n_channels if spec.preset == "high_contrast" else None
    model = geometry_field_model(geometry, n_channels)
    logger.info("field '%s': %d random modes", model.name, model.n_params)
    return model, None


def oscillatory_boundary(s):
    """g(s) = 0.5 + 0.5 sign(sin(8 pi s))."""
    return 0.5 + 0.5 * np.sign(np.sin(8.0 * np.pi * np.asarray(s, dtype=float)))


def build_source(problem: ProblemSpec) -> Source:
    if problem.source == "one":
        return 1.0
    if problem.source == "zero":
        return 0.0
    if problem.source == "two_plus_xy":
        return lambda x, y: 2.0 + x * y
    return lambda x, y: 2.0 * np.pi ** 2 * np.sin(np.pi * x) * np.sin(np.pi * y)


def build_boundary(problem: ProblemSpec) -> BoundaryCondition:
    if problem.boundary == "x_lines":
        return BoundaryCondition(kind="lines", axis="x", positions=DIRICHLET_LINES,
                                 value=lambda x, y: oscillatory_boundary(y))
    if problem.boundary == "y_lines":
        return BoundaryCondition(kind="lines", axis="y", positions=DIRICHLET_LINES,
                                 value=lambda x, y: oscillatory_boundary(x))
    return zero_dirichlet()


def describe(name: str) -> dict:
    config = get_preset(name)
    n_params = None
    if config.field.preset in ("patch_study", "high_contrast"):
        geometry = load_geometry(config.field.preset)
        modes = geometry["modes"]
        if config.field.preset == "high_contrast":
            modes = _select_channels(modes, config.field.n_channels)
        n_params = len(modes)
    return {
        "name": config.name,
        "coarse": (config.grid.coarse_nx, config.grid.coarse_ny),
        "refine": config.grid.refine,
        "oversample_ratio": config.grid.oversample_ratio,
        "n_params": n_params,
        "formulation": config.formulation,
    }
