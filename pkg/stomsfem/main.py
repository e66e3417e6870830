from typing import Dict, List

from fastapi import FastAPI, Request

from .config import build_config
from .exceptions import (
    ConfigError,
    EllipticityError,
    GridMismatchError,
    InvalidGridError,
    MissingArtifactError,
    NotSPDError,
    SolverNotConverged,
    UnsupportedModelError,
)
from .harness import run
from .models import (
    BudgetData,
    BudgetRequest,
    EstimateData,
    EstimateRequest,
    HealthData,
    PresetInfo,
    StandardResponse,
)
from .presets import PRESETS, describe
from .stochastic import balance_budget

app = FastAPI(title="stomsfem")

ESTIMATE_KINDS = {"mc": "mc", "mc2": "two_level_mc", "sc": "sc"}


def _error_code(exc: Exception) -> str:
    if isinstance(exc, (ConfigError, InvalidGridError, UnsupportedModelError, EllipticityError)):
        return "CONFIG_INVALID"
    if isinstance(exc, MissingArtifactError):
        return "MISSING_ARTIFACT"
    if isinstance(exc, GridMismatchError):
        return "GRID_MISMATCH"
    if isinstance(exc, (SolverNotConverged, NotSPDError)):
        return "SOLVER_FAILED"
    return "RUN_FAILED"


@app.get("/", response_model=StandardResponse[Dict[str, str]])
def read_root():
    return StandardResponse(status="success", data={"message": "stomsfem solver service"})


@app.get("/health", response_model=StandardResponse[HealthData])
def health():
    return StandardResponse(status="success", data=HealthData(status="healthy", presets=sorted(PRESETS)))


@app.get("/presets", response_model=StandardResponse[List[PresetInfo]])
def presets():
    return StandardResponse(status="success", data=[PresetInfo(**describe(name)) for name in sorted(PRESETS)])


@app.post("/budget", response_model=StandardResponse[BudgetData])
def budget(request: BudgetRequest):
    if request.method == "sc" and request.zeta is None:
        return StandardResponse(
            status="error",
            error={"code": "CONFIG_INVALID", "message": "collocation needs zeta", "retryable": False},
        )
    n_on = balance_budget(request.H, request.h, request.beta, request.zeta, request.target_error, request.method)
    return StandardResponse(status="success", data=BudgetData(method=request.method, n_on=n_on))


@app.post("/estimate", response_model=StandardResponse[EstimateData])
def estimate(request: EstimateRequest, req: Request):
    correlation_id = req.headers.get("X-Correlation-ID")
    entries = {"PRESET": request.preset, "METHOD": request.method,
               "ESTIMATOR__KIND": ESTIMATE_KINDS[request.estimator]}
    entries.update({k.upper(): v for k, v in request.overrides.items()})
    try:
        config = build_config(entries)
        report, ledger, outputs = run(config, correlation_id, write=False)
    except Exception as e:
        return StandardResponse(
            status="error",
            error={"code": _error_code(e), "message": str(e), "retryable": False},
            metadata={"preset": request.preset, "method": request.method},
        )
    return StandardResponse(
        status="success",
        data=EstimateData(report=report.summary(), cost=ledger.model_dump(), outputs=outputs),
        metadata={"preset": request.preset, "method": request.method, "estimator": request.estimator,
                  "correlation_id": correlation_id},
    )
