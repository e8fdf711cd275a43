"""HTTP front end: run scenarios, validate configs, emit demo maps."""

from __future__ import annotations

import time

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..config import ConfigError, config_from_dict
from ..geomap import grid_map, save_map
from ..metrics import emit_reports
from ..scenario import run_seeds
from ..trajectories import TrajectoryFormatError
from .schemas import (ErrorResponse, RunRequest, RunResponse, SummaryRow, SynthMapRequest, SynthMapResponse,
                      ValidateRequest, ValidateResponse)

app = FastAPI(title="cmmsim", version="0.1.0")


@app.exception_handler(ConfigError)
async def _config_error(request: Request, exc: ConfigError):
    body = ErrorResponse(detail="invalid config", problems=exc.problems)
    return JSONResponse(status_code=422, content=body.model_dump())


@app.exception_handler(TrajectoryFormatError)
async def _trajectory_error(request: Request, exc: TrajectoryFormatError):
    return JSONResponse(status_code=422, content=ErrorResponse(detail=f"bad trajectory file: {exc}").model_dump())


@app.exception_handler(OSError)
async def _os_error(request: Request, exc: OSError):
    return JSONResponse(status_code=400, content=ErrorResponse(detail=str(exc)).model_dump())


@app.exception_handler(ValueError)
async def _value_error(request: Request, exc: ValueError):
    return JSONResponse(status_code=400, content=ErrorResponse(detail=str(exc)).model_dump())


@app.get("/health")
def health():
    return {"status": "ok"}


def _with_overrides(doc: dict, mode=None, fusion=None) -> dict:
    doc = dict(doc)
    if mode is not None:
        doc["mode"] = mode
    if fusion is not None:
        doc["fusion"] = fusion
        if not fusion.startswith("constant_alpha"):
            doc.pop("alpha", None)
    return doc


@app.post("/validate", response_model=ValidateResponse)
def validate(req: ValidateRequest) -> ValidateResponse:
    try:
        cfg = config_from_dict(req.config)
    except ConfigError as exc:
        return ValidateResponse(valid=False, problems=exc.problems)
    return ValidateResponse(valid=True, config=cfg.to_dict())


@app.post("/run", response_model=RunResponse)
def run(req: RunRequest) -> RunResponse:
    cfg = config_from_dict(_with_overrides(req.config, req.mode, req.fusion))
    t0 = time.perf_counter()
    report = run_seeds(cfg, req.seeds)
    paths = emit_reports(report, req.out_dir)
    rows = [r.summary() for r in report.results] + report.aggregate()
    summary = [SummaryRow(**{k: (str(row[k]) if k == "seed" else row[k]) for k in SummaryRow.model_fields})
               for row in rows]
    return RunResponse(files={k: str(v) for k, v in paths.items()}, summary=summary,
                       elapsed_s=time.perf_counter() - t0)


@app.post("/synth-map", response_model=SynthMapResponse)
def synth_map(req: SynthMapRequest) -> SynthMapResponse:
    road_map = grid_map(req.extent_m, req.spacing_m, req.half_width_m, req.kernel_sigma_m)
    path = save_map(road_map, req.out)
    return SynthMapResponse(path=str(path), n_segments=len(road_map.segments))
