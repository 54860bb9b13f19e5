"""Stepping contract, the angle-calibrated moment optimizer, and baselines.

All optimizers share one interface: ``step(StepInput, ScheduleSet, projector)``
returns the next iterate plus a :class:`StepRecord`.  Weight decay is handled
uniformly (``coupled_l2`` folds ``lam * theta`` into the gradient before any
moment computation; ``decoupled`` subtracts ``alpha * lam * theta`` after the
moment step), every produced vector is checked for NaN/Inf, and an optional
projector (Euclidean projection onto the feasible set) is applied last.

The angle-calibrated optimizer keeps exactly one auxiliary vector buffer:

    bh_t   = beta_t * ||g_t|| / (||m_{t-1}|| + delta_t)
    m_t    = g_t + psi(bh_t, bh_{t-1}) * m_{t-1}
    x_{t+1} = project(x_t - alpha_t * m_t)

In the practical regime the product ``psi(bh_t) * m_{t-1}`` is evaluated in
fused form ``beta_t * ||g_t|| * m_{t-1} / (||m_{t-1}|| + delta_t)`` so a tiny
denominator cannot overflow an intermediate scalar; the theory regime keeps
the explicit bh sequence it must log and cap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from acmo.linalg import DimensionMismatchError, Rng, Vector
from acmo.schedules import ScheduleSet, beta_hat
from acmo.problems import Problem

Projector = Optional[Callable[[Vector], Vector]]

DECAY_MODES = ("coupled_l2", "decoupled")


class OptimizerError(ValueError):
    """Raised for invalid optimizer construction or step inputs."""


class DivergenceError(RuntimeError):
    """A step produced NaN/Inf; carries the iteration index."""

    def __init__(self, optimizer: str, t: int):
        super().__init__(f"{optimizer} diverged at iteration {t} (NaN/Inf produced)")
        self.optimizer = optimizer
        self.t = t


@dataclass(frozen=True)
class StepInput:
    theta: Vector
    grad: Vector
    t: int
    weight_decay: float = 0.0
    decay_mode: str = "coupled_l2"

    def __post_init__(self):
        if self.theta.shape != self.grad.shape:
            raise DimensionMismatchError(
                f"theta/grad dimension mismatch: {self.theta.shape} vs {self.grad.shape}"
            )
        if self.t < 1:
            raise OptimizerError(f"iteration index must be >= 1, got {self.t}")
        if self.weight_decay < 0:
            raise OptimizerError("weight decay must be >= 0")
        if self.decay_mode not in DECAY_MODES:
            raise OptimizerError(f"decay_mode must be one of {DECAY_MODES}")


@dataclass(frozen=True)
class StepRecord:
    """Per-step scalars kept for trajectory logs and invariant checks."""

    beta_hat: float
    mhat_norm: float
    alpha: float
    psi_coef: float = 0.0


@dataclass(frozen=True)
class MemoryReport:
    """Persistent state size: vector buffers and bookkeeping scalars."""

    optimizer: str
    n_vector_buffers: int
    buffer_scalars: int
    aux_scalars: int


class Optimizer:
    """Base stepping template; subclasses implement ``_update``."""

    name = "base"
    force_decoupled = False

    def __init__(self, dim: int):
        if dim < 1:
            raise OptimizerError(f"dimension must be >= 1, got {dim}")
        self.dim = dim
        self.t = 1

    def vector_buffers(self) -> List[np.ndarray]:
        return []

    def n_aux_scalars(self) -> int:
        return 1  # the step counter

    def step(self, inp: StepInput, sched: ScheduleSet,
             projector: Projector = None) -> Tuple[Vector, StepRecord]:
        if inp.theta.shape != (self.dim,):
            raise DimensionMismatchError(
                f"{self.name}: expected dimension {self.dim}, got {inp.theta.shape}"
            )
        if inp.t != self.t:
            raise OptimizerError(
                f"{self.name}: step called with t={inp.t}, state expects t={self.t}"
            )
        alpha = sched.alpha_at(inp.t)
        grad = inp.grad
        decoupled = self.force_decoupled or inp.decay_mode == "decoupled"
        if inp.weight_decay > 0 and not decoupled:
            grad = grad + inp.weight_decay * inp.theta

        theta_new, record = self._update(inp.theta, grad, inp.t, alpha, sched)

        if inp.weight_decay > 0 and decoupled:
            theta_new = theta_new - alpha * inp.weight_decay * inp.theta
        if projector is not None:
            theta_new = projector(theta_new)
        if not np.all(np.isfinite(theta_new)):
            raise DivergenceError(self.name, inp.t)
        self.t += 1
        return theta_new, record

    def _update(self, theta: Vector, grad: Vector, t: int, alpha: float,
                sched: ScheduleSet) -> Tuple[Vector, StepRecord]:
        raise NotImplementedError


class AcmoOptimizer(Optimizer):
    """First-moment-only optimizer with angle-calibrated moment weighting."""

    name = "acmo"

    def __init__(self, dim: int):
        super().__init__(dim)
        self.mhat_prev = np.zeros(dim)
        self.beta_hat_prev = 0.0

    def vector_buffers(self) -> List[np.ndarray]:
        return [self.mhat_prev]

    def n_aux_scalars(self) -> int:
        return 2  # step counter and previous calibration coefficient

    def _update(self, theta, grad, t, alpha, sched):
        beta_t = sched.beta_at(t)
        delta_t = sched.delta_at(t)
        g_norm = float(np.linalg.norm(grad))
        m_norm = float(np.linalg.norm(self.mhat_prev))
        bh = beta_hat(beta_t, g_norm, m_norm, delta_t)
        if m_norm == 0.0:
            # zero moment annihilates the history term; avoids inf * 0
            mhat = grad.copy()
            coef = bh
        elif sched.mode == "practical":
            # fused order: normalize the moment first so the only magnitude
            # in play is beta * ||g||, even when the logged bh overflows
            coef = bh
            mhat = grad + (beta_t * g_norm) * (self.mhat_prev / (m_norm + delta_t))
        else:
            coef = sched.psi(bh, self.beta_hat_prev, t)
            mhat = grad + coef * self.mhat_prev
        if not np.all(np.isfinite(mhat)):
            raise DivergenceError(self.name, t)
        theta_new = theta - alpha * mhat
        self.mhat_prev = mhat
        self.beta_hat_prev = bh
        record = StepRecord(
            beta_hat=bh,
            mhat_norm=float(np.linalg.norm(mhat)),
            alpha=alpha,
            psi_coef=coef,
        )
        return theta_new, record


class SgdMomentumOptimizer(Optimizer):
    """Heavy-ball momentum: m_t = mu * m_{t-1} + g_t."""

    name = "sgd_momentum"

    def __init__(self, dim: int, momentum: float = 0.9):
        super().__init__(dim)
        if not (0.0 <= momentum < 1.0):
            raise OptimizerError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum
        self.buf = np.zeros(dim)

    def vector_buffers(self):
        return [self.buf]

    def _update(self, theta, grad, t, alpha, sched):
        self.buf = self.momentum * self.buf + grad
        theta_new = theta - alpha * self.buf
        return theta_new, StepRecord(0.0, float(np.linalg.norm(self.buf)), alpha)


class AdagradOptimizer(Optimizer):
    """Cumulative squared-gradient scaling (diagonal form)."""

    name = "adagrad"

    def __init__(self, dim: int, eps: float = 1e-8):
        super().__init__(dim)
        self.eps = eps
        self.accum = np.zeros(dim)

    def vector_buffers(self):
        return [self.accum]

    def _update(self, theta, grad, t, alpha, sched):
        self.accum = self.accum + grad * grad
        direction = grad / (np.sqrt(self.accum) + self.eps)
        theta_new = theta - alpha * direction
        return theta_new, StepRecord(0.0, float(np.linalg.norm(direction)), alpha)


class AdamOptimizer(Optimizer):
    """Bias-corrected exponential moments."""

    name = "adam"

    def __init__(self, dim: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(dim)
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise OptimizerError("beta1/beta2 must lie in [0, 1)")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)

    def vector_buffers(self):
        return [self.m, self.v]

    def _moments(self, grad, t):
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**t)
        v_hat = self.v / (1.0 - self.beta2**t)
        return m_hat, v_hat

    def _update(self, theta, grad, t, alpha, sched):
        m_hat, v_hat = self._moments(grad, t)
        direction = m_hat / (np.sqrt(v_hat) + self.eps)
        theta_new = theta - alpha * direction
        return theta_new, StepRecord(0.0, float(np.linalg.norm(direction)), alpha)


class AmsGradOptimizer(AdamOptimizer):
    """Adam with a running elementwise max of the second moment."""

    name = "amsgrad"

    def __init__(self, dim: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(dim, beta1, beta2, eps)
        self.vmax = np.zeros(dim)

    def vector_buffers(self):
        return [self.m, self.v, self.vmax]

    def _update(self, theta, grad, t, alpha, sched):
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        self.vmax = np.maximum(self.vmax, self.v)
        m_hat = self.m / (1.0 - self.beta1**t)
        v_hat = self.vmax / (1.0 - self.beta2**t)
        direction = m_hat / (np.sqrt(v_hat) + self.eps)
        theta_new = theta - alpha * direction
        return theta_new, StepRecord(0.0, float(np.linalg.norm(direction)), alpha)


class AdamWOptimizer(AdamOptimizer):
    """Adam whose weight decay is always applied decoupled."""

    name = "adamw"
    force_decoupled = True


class PadamOptimizer(AmsGradOptimizer):
    """Partially adaptive variant: denominator is the max moment to power p.

    ``power = 1/2`` recovers the max-moment optimizer exactly.
    """

    name = "padam"

    def __init__(self, dim: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, power: float = 0.25):
        super().__init__(dim, beta1, beta2, eps)
        if not (0.0 < power <= 0.5):
            raise OptimizerError(f"padam power must lie in (0, 1/2], got {power}")
        self.power = power

    def _update(self, theta, grad, t, alpha, sched):
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        self.vmax = np.maximum(self.vmax, self.v)
        m_hat = self.m / (1.0 - self.beta1**t)
        v_hat = self.vmax / (1.0 - self.beta2**t)
        direction = m_hat / (v_hat**self.power + self.eps)
        theta_new = theta - alpha * direction
        return theta_new, StepRecord(0.0, float(np.linalg.norm(direction)), alpha)


class AdaboundOptimizer(AdamOptimizer):
    """Adam with per-coordinate step sizes clipped toward a final rate."""

    name = "adabound"

    def __init__(self, dim: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, final_lr: float = 0.1, gamma: float = 1e-3):
        super().__init__(dim, beta1, beta2, eps)
        if final_lr <= 0 or gamma <= 0:
            raise OptimizerError("final_lr and gamma must be positive")
        self.final_lr = final_lr
        self.gamma = gamma

    def _update(self, theta, grad, t, alpha, sched):
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        correction = np.sqrt(1.0 - self.beta2**t) / (1.0 - self.beta1**t)
        step_size = alpha * correction / (np.sqrt(self.v) + self.eps)
        lower = self.final_lr * (1.0 - 1.0 / (self.gamma * t + 1.0))
        upper = self.final_lr * (1.0 + 1.0 / (self.gamma * t))
        step_size = np.clip(step_size, lower, upper)
        theta_new = theta - step_size * self.m
        return theta_new, StepRecord(
            0.0, float(np.linalg.norm(step_size * self.m) / alpha), alpha
        )


OPTIMIZERS: Dict[str, type] = {
    cls.name: cls
    for cls in (
        AcmoOptimizer,
        SgdMomentumOptimizer,
        AdagradOptimizer,
        AdamOptimizer,
        AmsGradOptimizer,
        AdamWOptimizer,
        PadamOptimizer,
        AdaboundOptimizer,
    )
}


def optimizer_names() -> Tuple[str, ...]:
    return tuple(sorted(OPTIMIZERS))


def make_optimizer(name: str, dim: int, params: Optional[dict] = None) -> Optimizer:
    if name not in OPTIMIZERS:
        raise OptimizerError(
            f"unknown optimizer {name!r}; expected one of {optimizer_names()}"
        )
    try:
        return OPTIMIZERS[name](dim, **(params or {}))
    except TypeError as exc:
        raise OptimizerError(f"bad parameters for optimizer {name!r}: {exc}") from exc


def state_memory_report(opt: Optimizer) -> MemoryReport:
    """Count persistent vector buffers and bookkeeping scalars."""
    buffers = opt.vector_buffers()
    return MemoryReport(
        optimizer=opt.name,
        n_vector_buffers=len(buffers),
        buffer_scalars=int(sum(b.size for b in buffers)),
        aux_scalars=opt.n_aux_scalars(),
    )


def acmo_reduces_to_sgd(problem: Problem, alpha0: float, iterations: int,
                        seed: int, batch_size: int, beta0: float = 0.0,
                        tol: float = 1e-15) -> bool:
    """Check that the calibrated optimizer with ``beta = 0`` tracks plain SGD.

    Both runs consume identical batch streams; returns True when the maximum
    coordinate deviation over the whole trajectory stays within ``tol``.
    """
    from acmo.schedules import AlphaSchedule

    sched = ScheduleSet.practical(
        AlphaSchedule(kind="constant", alpha0=alpha0), beta0=beta0
    )
    opt = AcmoOptimizer(problem.dim)
    theta_a = problem.start_point()
    theta_s = problem.start_point()
    sampler_a = problem.sampler(batch_size, Rng(seed, 0))
    sampler_s = problem.sampler(batch_size, Rng(seed, 0))
    worst = 0.0
    for t in range(1, iterations + 1):
        batch_a = sampler_a.next_batch()
        batch_s = sampler_s.next_batch()
        g_a = problem.minibatch_gradient(theta_a, batch_a)
        theta_a, _ = opt.step(StepInput(theta_a, g_a, t), sched, problem.project)
        g_s = problem.minibatch_gradient(theta_s, batch_s)
        theta_s = problem.project(theta_s - alpha0 * g_s)
        worst = max(worst, float(np.max(np.abs(theta_a - theta_s))))
    return worst <= tol
