"""FastAPI service exposing the compression pipeline.

Endpoints run synchronously: a compress call returns when the run finishes
and its artifacts are on disk. Domain and file errors map to 400, missing
paths to 404.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..binio import CorruptFileError
from ..config import ConfigError
from ..data import synthesize_dataset
from ..pipeline import read_report, run_compress, run_evaluate, run_sweep, \
    run_train_baseline
from ..policy import load_policy
from . import schemas as S

app = FastAPI(title="actcomp", description="Activation compression co-design service",
              version=__version__)


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(status_code=400, detail=str(exc))


@app.get("/health", response_model=S.HealthResponse)
def health() -> S.HealthResponse:
    return S.HealthResponse(status="ok", name="actcomp", version=__version__)


@app.post("/dataset", response_model=S.MakeDatasetResponse)
def make_dataset(req: S.MakeDatasetRequest) -> S.MakeDatasetResponse:
    if req.format not in ("idx", "raw"):
        raise _bad_request(ValueError(f"unknown dataset format {req.format!r}"))
    info = synthesize_dataset(req.out_dir, req.num_train, req.num_eval, req.seed,
                              fmt=req.format, num_classes=req.num_classes,
                              size=req.image_size)
    return S.MakeDatasetResponse(**info)


@app.post("/baseline", response_model=S.TrainBaselineResponse)
def train_baseline(req: S.TrainBaselineRequest) -> S.TrainBaselineResponse:
    try:
        result = run_train_baseline(req.config.to_run_config(), req.out_dir)
    except (ConfigError, CorruptFileError, ValueError, FileNotFoundError) as exc:
        raise _bad_request(exc)
    return S.TrainBaselineResponse(**result)


@app.post("/compress", response_model=S.CompressResponse)
def compress(req: S.CompressRequest) -> S.CompressResponse:
    try:
        result = run_compress(req.config.to_run_config(), req.checkpoint, req.out_dir)
    except (ConfigError, CorruptFileError, ValueError, FileNotFoundError) as exc:
        raise _bad_request(exc)
    return S.CompressResponse(**result)


@app.post("/evaluate", response_model=S.EvaluateResponse)
def evaluate(req: S.EvaluateRequest) -> S.EvaluateResponse:
    try:
        result = run_evaluate(req.policy, req.checkpoint, req.config.to_run_config())
    except (ConfigError, CorruptFileError, ValueError, FileNotFoundError) as exc:
        raise _bad_request(exc)
    return S.EvaluateResponse(**result)


@app.post("/sweep", response_model=S.SweepResponse)
def sweep(req: S.SweepRequest) -> S.SweepResponse:
    if not req.p_values or not req.group_values:
        raise _bad_request(ValueError("sweep needs at least one p and one group value"))
    try:
        result = run_sweep(req.config.to_run_config(), req.p_values, req.group_values,
                           req.checkpoint, req.out_dir)
    except (ConfigError, CorruptFileError, ValueError, FileNotFoundError) as exc:
        raise _bad_request(exc)
    return S.SweepResponse(**result)


@app.get("/policy", response_model=S.PolicySummaryResponse)
def policy_summary(path: str) -> S.PolicySummaryResponse:
    try:
        policy = load_policy(path)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    except (CorruptFileError, ValueError) as exc:
        raise _bad_request(exc)
    return S.PolicySummaryResponse(**policy.summary())


@app.get("/report", response_model=S.ReportResponse)
def report(run_dir: str) -> S.ReportResponse:
    try:
        result = read_report(run_dir)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc))
    except ValueError as exc:
        raise _bad_request(exc)
    return S.ReportResponse(**result)
