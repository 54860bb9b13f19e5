"""Experiment runner: seeded trajectories, checks, and CSV/JSON artifacts.

``run_experiment`` resolves a config against the registries, runs ``trials``
independent trajectories (derived random streams, optionally in a thread
pool), applies the randomized output rule, executes the requested
diagnostics, and emits one CSV per trial plus a JSON summary.  Everything
except the wall-clock column is a deterministic function of the config and
master seed.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from acmo import diagnostics
from acmo.config import (
    ConfigError,
    ExperimentConfig,
    build_problem,
    build_schedule,
    config_hash,
)
from acmo.diagnostics import BoundReport
from acmo.linalg import Rng, Vector
from acmo.optimizers import (
    DivergenceError,
    Optimizer,
    StepInput,
    make_optimizer,
    optimizer_names,
)
from acmo.problems import Problem
from acmo.schedules import ScheduleSet
from acmo.trajectory import TrajectoryRecord

CSV_HEADER = "iter,loss,minibatch_loss,grad_norm,g_norm,beta_hat,mhat_norm,alpha,wall_ns"


class TrialDivergenceError(RuntimeError):
    """Divergence wrapped with the trial index it occurred in."""

    def __init__(self, trial: int, cause: DivergenceError):
        super().__init__(f"trial {trial}: {cause}")
        self.trial = trial
        self.t = cause.t


# ---------------------------------------------------------------------------
# randomized output rule
# ---------------------------------------------------------------------------


def sample_output_index(alphas: Sequence[float], rng: Rng) -> int:
    """Draw the returned iterate's index ``o`` in ``{2..T}``.

    ``alphas`` are the step sizes ``alpha_1 .. alpha_{T-1}``; index ``i`` is
    chosen with probability ``alpha_{i-1} / sum(alphas)``.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.size == 0:
        raise ValueError("output sampling needs at least one step size")
    if np.any(alphas <= 0):
        raise ValueError("output sampling needs strictly positive step sizes")
    cdf = np.cumsum(alphas)
    cdf /= cdf[-1]
    u = float(rng.uniform())
    return int(np.searchsorted(cdf, u, side="right")) + 2


# ---------------------------------------------------------------------------
# single trajectory
# ---------------------------------------------------------------------------


def run_trajectory(problem: Problem, optimizer: Optimizer, sched: ScheduleSet,
                   cfg: ExperimentConfig, trial: int) -> Tuple[TrajectoryRecord, float, float]:
    """Run one seeded trajectory; returns (record, loss_at_o, grad_norm_at_o).

    A config with ``iterations = T`` visits iterates ``theta_1 .. theta_T``
    through ``T - 1`` update steps (one log row each), and the randomized
    return draws ``o`` in ``{2..T}`` with weights ``alpha_1 .. alpha_{T-1}``,
    so every post-step iterate is reachable.
    """
    T = cfg.iterations - 1  # number of update steps / log rows
    batch_rng = Rng(cfg.seed, 2 * trial)
    output_rng = Rng(cfg.seed, 2 * trial + 1)
    sampler = problem.sampler(cfg.batch_size, batch_rng, cfg.drop_remainder)

    alphas_all = np.array([sched.alpha_at(t) for t in range(1, T + 1)])
    out_index = sample_output_index(alphas_all, output_rng)

    projected = 0

    def projector(x: Vector) -> Vector:
        nonlocal projected
        y = problem.project(x)
        if y is not x and not np.array_equal(x, y):
            projected += 1
        return y

    theta = problem.project(problem.start_point())
    loss = np.empty(T)
    minibatch_loss = np.empty(T)
    grad_norm = np.empty(T)
    g_norm = np.empty(T)
    bhat = np.empty(T)
    mnorm = np.empty(T)
    wall = np.empty(T, dtype=np.int64)
    store = cfg.store_vectors
    thetas = np.empty((T + 1, problem.dim)) if store else None
    grads = np.empty((T, problem.dim)) if store else None
    mhats = np.empty((T, problem.dim)) if store else None
    psi_coefs = np.empty(T) if store else None
    batches: Optional[List[np.ndarray]] = [] if cfg.store_batches else None
    theta_out: Optional[Vector] = None

    for t in range(1, T + 1):
        tic = time.perf_counter_ns()
        batch = sampler.next_batch()
        g = problem.minibatch_gradient(theta, batch)
        k = t - 1
        minibatch_loss[k] = problem.batch_loss(theta, batch)
        g_norm[k] = np.linalg.norm(g)
        if cfg.log_full_metrics:
            loss[k] = problem.loss(theta)
            grad_norm[k] = np.linalg.norm(problem.full_gradient(theta))
        else:
            loss[k] = math.nan
            grad_norm[k] = math.nan
        if store:
            thetas[k] = theta
            grads[k] = g
        if batches is not None:
            batches.append(batch.indices.copy())

        step = StepInput(theta, g, t, cfg.weight_decay, cfg.decay_mode)
        theta, record = optimizer.step(step, sched, projector)

        bhat[k] = record.beta_hat
        mnorm[k] = record.mhat_norm
        if store:
            mhats[k] = getattr(optimizer, "mhat_prev", np.full(problem.dim, math.nan))
            psi_coefs[k] = record.psi_coef
        wall[k] = time.perf_counter_ns() - tic
        if t + 1 == out_index:
            theta_out = theta.copy()

    if store:
        thetas[T] = theta
    traj = TrajectoryRecord(
        optimizer=optimizer.name,
        mode=sched.mode,
        iterations=T,
        t=np.arange(1, T + 1),
        loss=loss,
        minibatch_loss=minibatch_loss,
        grad_norm=grad_norm,
        g_norm=g_norm,
        beta_hat=bhat,
        mhat_norm=mnorm,
        alpha=alphas_all,
        wall_ns=wall,
        final_theta=theta,
        output_index=out_index,
        projected_steps=projected,
        thetas=thetas,
        grads=grads,
        mhats=mhats,
        psi_coefs=psi_coefs,
        batches=batches,
    )
    assert theta_out is not None
    loss_at_out = problem.loss(theta_out)
    grad_at_out = float(np.linalg.norm(problem.full_gradient(theta_out)))
    return traj, loss_at_out, grad_at_out


# ---------------------------------------------------------------------------
# diagnostics registry
# ---------------------------------------------------------------------------


@dataclass
class CheckSpec:
    run: Callable[[Problem, ScheduleSet, ExperimentConfig, TrajectoryRecord], BoundReport]
    needs_vectors: bool = False
    needs_batches: bool = False
    per_trial: bool = True


CHECKS: Dict[str, CheckSpec] = {
    "moment_sandwich": CheckSpec(lambda p, s, c, tr: diagnostics.check_moment_norm_sandwich(tr, s)),
    "calibration_ceiling": CheckSpec(lambda p, s, c, tr: diagnostics.check_calibration_ceiling(tr, s)),
    "gradient_moment_ratio": CheckSpec(lambda p, s, c, tr: diagnostics.check_gradient_moment_ratio(tr, s, p.meta)),
    "sufficient_descent": CheckSpec(
        lambda p, s, c, tr: diagnostics.check_sufficient_descent(p, tr, s),
        needs_vectors=True, needs_batches=True,
    ),
    "surrogate_optimality": CheckSpec(
        lambda p, s, c, tr: diagnostics.check_surrogate_optimality(tr, s),
        needs_vectors=True,
    ),
    "shifted_iterate_identity": CheckSpec(
        lambda p, s, c, tr: diagnostics.check_shifted_iterate_identity(tr, s),
        needs_vectors=True,
    ),
    "convergence_bound": CheckSpec(
        lambda p, s, c, tr: diagnostics.check_convergence_bound(tr, p.meta, s.alpha.alpha0)
    ),
    "scalar_inequalities": CheckSpec(
        lambda p, s, c, tr: diagnostics.sweep_scalar_inequalities(),
        per_trial=False,
    ),
}


def check_names() -> Tuple[str, ...]:
    return tuple(sorted(CHECKS))


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------


@dataclass
class TrialResult:
    trial: int
    trajectory: TrajectoryRecord
    output_index: int
    loss_at_output: float
    grad_norm_at_output: float
    final_loss: float
    reports: List[BoundReport] = field(default_factory=list)
    csv_path: Optional[str] = None


@dataclass
class RunResult:
    config_hash: str
    trials: List[TrialResult]
    experiment_reports: List[BoundReport] = field(default_factory=list)
    summary_path: Optional[str] = None

    @property
    def all_reports(self) -> List[BoundReport]:
        reports = list(self.experiment_reports)
        for trial in self.trials:
            reports.extend(trial.reports)
        return reports

    @property
    def any_violated(self) -> bool:
        return any(r.violated for r in self.all_reports)

    def aggregate(self) -> Dict[str, float]:
        finals = np.array([t.final_loss for t in self.trials])
        return {
            "final_loss_mean": float(finals.mean()),
            "final_loss_std": float(finals.std()),
        }


def _resolve_checks(cfg: ExperimentConfig) -> ExperimentConfig:
    unknown = [name for name in cfg.checks if name not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown checks {unknown}; expected names from {check_names()}")
    needs_vec = any(CHECKS[n].needs_vectors for n in cfg.checks)
    needs_bat = any(CHECKS[n].needs_batches for n in cfg.checks)
    if needs_vec and not cfg.store_vectors:
        cfg = cfg.model_copy(update={"store_vectors": True})
    if needs_bat and not cfg.store_batches:
        cfg = cfg.model_copy(update={"store_batches": True})
    return cfg


def _run_trial(problem: Problem, sched: ScheduleSet, cfg: ExperimentConfig,
               trial: int) -> TrialResult:
    optimizer = make_optimizer(cfg.optimizer.name, problem.dim, cfg.optimizer.params)
    try:
        traj, loss_out, grad_out = run_trajectory(problem, optimizer, sched, cfg, trial)
    except DivergenceError as exc:
        raise TrialDivergenceError(trial, exc) from exc
    reports = [
        CHECKS[name].run(problem, sched, cfg, traj)
        for name in cfg.checks
        if CHECKS[name].per_trial
    ]
    return TrialResult(
        trial=trial,
        trajectory=traj,
        output_index=traj.output_index,
        loss_at_output=loss_out,
        grad_norm_at_output=grad_out,
        final_loss=problem.loss(traj.final_theta),
        reports=reports,
    )


def run_experiment(cfg: ExperimentConfig, emit_artifacts: bool = True) -> RunResult:
    """Execute all trials of a config and (optionally) write artifacts."""
    cfg = _resolve_checks(cfg)
    problem = build_problem(cfg)
    if cfg.optimizer.name not in optimizer_names():
        raise ConfigError(
            f"unknown optimizer {cfg.optimizer.name!r}; expected one of {optimizer_names()}"
        )
    sched = build_schedule(cfg.schedule, problem)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            trials = list(pool.map(
                lambda k: _run_trial(problem, sched, cfg, k), range(cfg.trials)
            ))
    else:
        trials = [_run_trial(problem, sched, cfg, k) for k in range(cfg.trials)]
    trials.sort(key=lambda tr: tr.trial)

    experiment_reports = [
        CHECKS[name].run(problem, sched, cfg, trials[0].trajectory)
        for name in cfg.checks
        if not CHECKS[name].per_trial
    ]
    result = RunResult(
        config_hash=config_hash(cfg),
        trials=trials,
        experiment_reports=experiment_reports,
    )
    if emit_artifacts and cfg.output_dir is not None:
        _write_artifacts(cfg, result)
    return result


def _write_artifacts(cfg: ExperimentConfig, result: RunResult) -> None:
    os.makedirs(cfg.output_dir, exist_ok=True)
    for tr in result.trials:
        path = os.path.join(cfg.output_dir, f"trial_{tr.trial:03d}.csv")
        emit_csv(tr.trajectory, path)
        tr.csv_path = path
    summary = {
        "config_hash": result.config_hash,
        "trials": [
            {
                "trial": tr.trial,
                "output_index": tr.output_index,
                "loss_at_output": tr.loss_at_output,
                "grad_norm_at_output": tr.grad_norm_at_output,
                "final_loss": tr.final_loss,
                "csv_path": tr.csv_path,
            }
            for tr in result.trials
        ],
        "aggregate": result.aggregate(),
        "bound_reports": [r.to_json_dict() for r in result.all_reports],
    }
    path = os.path.join(cfg.output_dir, "summary.json")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    result.summary_path = path


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    overrides: Dict[str, object]
    config_hash: str
    status: str
    final_loss_mean: float
    csv_paths: List[str] = field(default_factory=list)


@dataclass
class SweepResult:
    rows: List[SweepRow]
    summary_path: Optional[str] = None

    @property
    def any_violated(self) -> bool:
        return any(row.status == "violated" for row in self.rows)


def _set_by_path(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"sweep path {dotted!r} does not resolve in the config")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"sweep path {dotted!r} does not resolve in the config")
    node[parts[-1]] = value


def run_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Run the grid of configs produced by the ``sweep`` override lists."""
    if not cfg.sweep:
        raise ConfigError("sweep command needs a non-empty 'sweep' mapping")
    keys = sorted(cfg.sweep)
    grids = [cfg.sweep[k] for k in keys]
    if any(len(g) == 0 for g in grids):
        raise ConfigError("sweep lists must be non-empty")
    base = cfg.model_dump()
    base.pop("sweep")
    rows: List[SweepRow] = []
    for j, values in enumerate(itertools.product(*grids)):
        data = json.loads(json.dumps(base))
        overrides = dict(zip(keys, values))
        for key, value in overrides.items():
            _set_by_path(data, key, value)
        if cfg.output_dir is not None:
            data["output_dir"] = os.path.join(cfg.output_dir, f"combo_{j:03d}")
        sub_cfg = ExperimentConfig(**data)
        result = run_experiment(sub_cfg)
        rows.append(SweepRow(
            overrides=overrides,
            config_hash=result.config_hash,
            status="violated" if result.any_violated else "ok",
            final_loss_mean=result.aggregate()["final_loss_mean"],
            csv_paths=[tr.csv_path for tr in result.trials if tr.csv_path],
        ))
    summary_path = None
    if cfg.output_dir is not None:
        os.makedirs(cfg.output_dir, exist_ok=True)
        summary_path = os.path.join(cfg.output_dir, "sweep_summary.json")
        with open(summary_path, "w", encoding="utf-8", newline="") as fh:
            json.dump(
                {"rows": [row.__dict__ for row in rows]},
                fh, indent=2,
            )
            fh.write("\n")
    return SweepResult(rows=rows, summary_path=summary_path)


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------


def emit_csv(traj: TrajectoryRecord, path: str) -> str:
    """Write the per-iteration log; floats carry 17 significant digits."""
    lines = [CSV_HEADER]
    for k in range(traj.n_steps):
        lines.append(
            f"{traj.t[k]:d},"
            f"{traj.loss[k]:.17g},{traj.minibatch_loss[k]:.17g},"
            f"{traj.grad_norm[k]:.17g},{traj.g_norm[k]:.17g},"
            f"{traj.beta_hat[k]:.17g},{traj.mhat_norm[k]:.17g},"
            f"{traj.alpha[k]:.17g},{traj.wall_ns[k]:d}"
        )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
    return path


def read_csv(path: str) -> Dict[str, np.ndarray]:
    """Parse a trajectory CSV back into column arrays (exact round trip)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header: {header!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    names = CSV_HEADER.split(",")
    cols: Dict[str, np.ndarray] = {}
    for j, name in enumerate(names):
        vals = [row[j] for row in rows]
        if name in ("iter", "wall_ns"):
            cols[name] = np.array([int(v) for v in vals], dtype=np.int64)
        else:
            cols[name] = np.array([float(v) for v in vals], dtype=np.float64)
    return cols
