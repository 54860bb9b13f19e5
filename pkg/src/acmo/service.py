"""HTTP facade over the experiment harness.

Endpoints accept the same pydantic config model the CLI reads from disk.
Computation outcomes (including divergence) are reported in the response
body's ``status``; config-resolution failures map to 400 and schema
violations to FastAPI's standard 422.
"""

from __future__ import annotations

from typing import Dict, List, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from acmo import __version__
from acmo.config import ConfigError, ExperimentConfig
from acmo.diagnostics import BoundReport, DiagnosticsError
from acmo.harness import (
    RunResult,
    TrialDivergenceError,
    check_names,
    run_experiment,
    run_sweep,
)
from acmo.optimizers import OptimizerError, optimizer_names
from acmo.problems import ProblemError, problem_names
from acmo.schedules import ALPHA_KINDS, MODES, ScheduleError

app = FastAPI(title="acmo experiment service", version=__version__)

_CONFIG_ERRORS = (ConfigError, ProblemError, OptimizerError, ScheduleError,
                  DiagnosticsError, KeyError, ValueError)


class BoundReportOut(BaseModel):
    name: str
    worst_slack: float
    violated: bool
    n_steps: int


class TrialOut(BaseModel):
    trial: int
    output_index: int
    loss_at_output: float
    grad_norm_at_output: float
    final_loss: float
    csv_path: Optional[str] = None
    reports: List[BoundReportOut]


class RunResponse(BaseModel):
    status: str  # ok | violated | divergence
    config_hash: str = ""
    detail: str = ""
    aggregate: Dict[str, float] = {}
    trials: List[TrialOut] = []
    reports: List[BoundReportOut] = []
    summary_path: Optional[str] = None


class SweepRowOut(BaseModel):
    overrides: Dict[str, object]
    config_hash: str
    status: str
    final_loss_mean: float
    csv_paths: List[str]


class SweepResponse(BaseModel):
    status: str
    detail: str = ""
    rows: List[SweepRowOut] = []
    summary_path: Optional[str] = None


class RegistriesResponse(BaseModel):
    optimizers: List[str]
    problems: List[str]
    checks: List[str]
    alpha_kinds: List[str]
    schedule_modes: List[str]


def _report_out(report: BoundReport) -> BoundReportOut:
    return BoundReportOut(**report.to_json_dict())


def _run_response(result: RunResult) -> RunResponse:
    return RunResponse(
        status="violated" if result.any_violated else "ok",
        config_hash=result.config_hash,
        aggregate=result.aggregate(),
        trials=[
            TrialOut(
                trial=tr.trial,
                output_index=tr.output_index,
                loss_at_output=tr.loss_at_output,
                grad_norm_at_output=tr.grad_norm_at_output,
                final_loss=tr.final_loss,
                csv_path=tr.csv_path,
                reports=[_report_out(r) for r in tr.reports],
            )
            for tr in result.trials
        ],
        reports=[_report_out(r) for r in result.all_reports],
        summary_path=result.summary_path,
    )


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.get("/registries", response_model=RegistriesResponse)
def registries() -> RegistriesResponse:
    return RegistriesResponse(
        optimizers=list(optimizer_names()),
        problems=list(problem_names()),
        checks=list(check_names()),
        alpha_kinds=list(ALPHA_KINDS),
        schedule_modes=list(MODES),
    )


def _execute(cfg: ExperimentConfig, emit_artifacts: bool) -> RunResponse:
    try:
        result = run_experiment(cfg, emit_artifacts=emit_artifacts)
    except TrialDivergenceError as exc:
        return RunResponse(status="divergence", detail=str(exc))
    except _CONFIG_ERRORS as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    return _run_response(result)


@app.post("/run", response_model=RunResponse)
def run(cfg: ExperimentConfig) -> RunResponse:
    return _execute(cfg, emit_artifacts=True)


@app.post("/verify", response_model=RunResponse)
def verify(cfg: ExperimentConfig) -> RunResponse:
    """Diagnostics only: same execution, no CSV/JSON artifacts."""
    return _execute(cfg, emit_artifacts=False)


@app.post("/sweep", response_model=SweepResponse)
def sweep(cfg: ExperimentConfig) -> SweepResponse:
    try:
        result = run_sweep(cfg)
    except TrialDivergenceError as exc:
        return SweepResponse(status="divergence", detail=str(exc))
    except _CONFIG_ERRORS as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    return SweepResponse(
        status="violated" if result.any_violated else "ok",
        rows=[SweepRowOut(**row.__dict__) for row in result.rows],
        summary_path=result.summary_path,
    )
