"""HTTP service wrapping the experiment pipelines.

Run with ``uvicorn ymhstab.service:app``.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import __version__
from .cli_io import EXPERIMENTS, ExperimentConfig, RunManifest, convergence_study, execute
from .errors import InsufficientLadder, PipelineFailure


class RunResponse(BaseModel):
    manifest: RunManifest
    artifacts: dict[str, str]


class ConvergenceRow(BaseModel):
    check: str
    h: list[float]
    errors: list[float]
    pairwise: list[float]
    order: float
    flagged: bool


app = FastAPI(title="ymhstab", version=__version__)


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.get("/experiments")
def experiments() -> list[str]:
    return list(EXPERIMENTS)


@app.post("/run", response_model=RunResponse)
def run(config: ExperimentConfig) -> RunResponse:
    try:
        manifest, arts = execute(config)
    except PipelineFailure as exc:
        raise HTTPException(status_code=500, detail=str(exc)) from exc
    return RunResponse(manifest=manifest, artifacts=arts)


@app.post("/convergence", response_model=list[ConvergenceRow])
def convergence(config: ExperimentConfig) -> list[ConvergenceRow]:
    try:
        return [ConvergenceRow(**row) for row in convergence_study(config)]
    except InsufficientLadder as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
