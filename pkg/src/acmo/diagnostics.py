"""Numerical verification of the optimizer's descent and convergence claims.

Each check consumes a trajectory (plus problem metadata where needed) and
produces a :class:`BoundReport` with the worst slack seen; a report is
``violated`` when any slack falls below minus its tolerance.  The module
also houses the small-matrix machinery used by the second-moment
decomposition demonstration (cyclic-Jacobi eigendecomposition, PSD square
root), an independent central-difference gradient oracle, log-log rate
fitting, and a grid sweep of the scalar inequalities that underpin the
convergence analysis's telescoping sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from acmo.problems import MiniBatch, Problem, SmoothnessMeta
from acmo.schedules import ScheduleSet
from acmo.trajectory import TrajectoryRecord


class DiagnosticsError(ValueError):
    """Raised when a check's preconditions are not met."""


@dataclass
class BoundReport:
    """Outcome of one inequality monitor."""

    name: str
    worst_slack: float
    violated: bool
    n_steps: int
    tolerance: float = 0.0
    notes: str = ""
    per_step_slack: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "worst_slack": self.worst_slack,
            "violated": self.violated,
            "n_steps": self.n_steps,
        }


def _report(name: str, slack: np.ndarray, tol, n_steps: int, notes: str = "") -> BoundReport:
    slack = np.asarray(slack, dtype=np.float64)
    tol_arr = np.broadcast_to(np.asarray(tol, dtype=np.float64), slack.shape)
    if slack.size == 0:
        return BoundReport(name, 0.0, False, n_steps, 0.0, notes or "no steps to check")
    worst_idx = int(np.argmin(slack))
    violated = bool(np.any(slack < -tol_arr))
    return BoundReport(
        name=name,
        worst_slack=float(slack[worst_idx]),
        violated=violated,
        n_steps=n_steps,
        tolerance=float(tol_arr.flat[worst_idx]),
        notes=notes,
        per_step_slack=slack,
    )


# ---------------------------------------------------------------------------
# independent gradient oracle
# ---------------------------------------------------------------------------


def central_difference_gradient(f: Callable[[np.ndarray], float],
                                theta: np.ndarray,
                                h_scale: float = 1e-6) -> np.ndarray:
    """Central differences with per-coordinate step ``h = h_scale * (1 + |x_i|)``."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        h = h_scale * (1.0 + abs(theta[i]))
        up = theta.copy()
        dn = theta.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (f(up) - f(dn)) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# trajectory monitors
# ---------------------------------------------------------------------------


def _require_acmo(traj: TrajectoryRecord, check: str) -> None:
    if traj.optimizer != "acmo":
        raise DiagnosticsError(
            f"{check} applies to angle-calibrated trajectories, got {traj.optimizer!r}"
        )


def _require_theory(traj: TrajectoryRecord, check: str) -> None:
    if traj.mode != "theory":
        raise DiagnosticsError(f"{check} requires a theory-mode trajectory")


def check_moment_norm_sandwich(traj: TrajectoryRecord, sched: ScheduleSet) -> BoundReport:
    """Moment-norm sandwich: (1-beta)||g|| <= ||m|| <= (1+beta)||g|| each step."""
    _require_acmo(traj, "moment-norm sandwich")
    betas = np.array([sched.beta_at(int(t)) for t in traj.t])
    g, m = traj.g_norm, traj.mhat_norm
    slack = np.minimum(m - (1.0 - betas) * g, (1.0 + betas) * g - m)
    tol = 1e-10 * (1.0 + g)
    return _report("moment_sandwich", slack, tol, traj.n_steps)


def check_calibration_ceiling(traj: TrajectoryRecord, sched: ScheduleSet) -> BoundReport:
    """Calibration coefficient stays below 1/12 under the theory regime."""
    _require_acmo(traj, "calibration bound")
    _require_theory(traj, "calibration bound")
    slack = 1.0 / 12.0 - traj.beta_hat
    return _report("calibration_ceiling", slack, 0.0, traj.n_steps)


def check_gradient_moment_ratio(traj: TrajectoryRecord, sched: ScheduleSet,
                                meta: SmoothnessMeta) -> BoundReport:
    """Gradient-to-moment ratio bound 2 + L*alpha_{t-1} + 1/(1-beta_{t-1}), t >= 2."""
    _require_acmo(traj, "gradient-to-moment ratio")
    _require_theory(traj, "gradient-to-moment ratio")
    if traj.n_steps < 2:
        return _report("gradient_moment_ratio", np.array([]), 0.0, traj.n_steps)
    ts = traj.t[1:]
    g = traj.g_norm[1:]
    m_prev = traj.mhat_norm[:-1]
    deltas = np.array([sched.delta_at(int(t)) for t in ts])
    alphas_prev = traj.alpha[:-1]
    betas_prev = np.array([sched.beta_at(int(t) - 1) for t in ts])
    ratio = g / (m_prev + deltas)
    bound = 2.0 + meta.L * alphas_prev + 1.0 / (1.0 - betas_prev)
    slack = bound - ratio
    return _report("gradient_moment_ratio", slack, 1e-10, traj.n_steps)


def check_sufficient_descent(problem: Problem, traj: TrajectoryRecord,
                             sched: ScheduleSet) -> BoundReport:
    """Re-evaluates the sampled batch loss before/after each step.

    Requires a constant step size no larger than ``1 / L`` and ``beta <= 1``,
    plus stored iterates and batch index sets.
    """
    _require_acmo(traj, "sufficient descent")
    if traj.thetas is None or traj.batches is None:
        raise DiagnosticsError("sufficient descent needs stored iterates and batches")
    max_alpha = float(np.max(traj.alpha))
    if max_alpha > (1.0 + 1e-12) / problem.meta.L:
        raise DiagnosticsError(
            f"sufficient descent requires alpha <= 1/L = {1.0 / problem.meta.L!r}, "
            f"got max alpha {max_alpha!r}"
        )
    slack = np.empty(traj.n_steps)
    for k in range(traj.n_steps):
        batch = MiniBatch(indices=traj.batches[k])
        before = problem.batch_loss(traj.thetas[k], batch)
        after = problem.batch_loss(traj.thetas[k + 1], batch)
        tol = 1e-10 * (1.0 + abs(before))
        slack[k] = tol - (after - before)
    return _report("sufficient_descent", slack, 0.0, traj.n_steps)


def check_surrogate_optimality(traj: TrajectoryRecord,
                               sched: ScheduleSet) -> BoundReport:
    """The step zeroes the gradient of its quadratic surrogate.

    With curvature weight ``1 / alpha_t`` the unconstrained minimizer of the
    surrogate satisfies ``(theta_{t+1} - theta_t) / alpha_t + g_t +
    c_t * m_{t-1} = 0`` where ``c_t`` is the coefficient actually applied to
    the previous moment.  Only meaningful when no projection ever bound.
    """
    _require_acmo(traj, "auxiliary optimality")
    if not traj.has_stored_vectors() or traj.psi_coefs is None:
        raise DiagnosticsError("auxiliary optimality needs stored vectors")
    if traj.projected_steps > 0:
        raise DiagnosticsError(
            "auxiliary optimality compares against the pre-projection step; "
            f"projection bound on {traj.projected_steps} steps"
        )
    residual = np.empty(traj.n_steps)
    for k in range(traj.n_steps):
        m_prev = traj.mhats[k - 1] if k > 0 else np.zeros_like(traj.grads[0])
        step_grad = (traj.thetas[k + 1] - traj.thetas[k]) / traj.alpha[k]
        residual[k] = np.linalg.norm(step_grad + traj.grads[k] + traj.psi_coefs[k] * m_prev)
    slack = 1e-10 - residual
    return _report("surrogate_optimality", slack, 0.0, traj.n_steps)


def check_shifted_iterate_identity(traj: TrajectoryRecord,
                                   sched: ScheduleSet) -> BoundReport:
    """Consistency identity of the shifted iterate sequence.

    Builds ``theta'_i = theta_i + A_i (theta_i - theta_{i-1})`` with
    ``A_i = (6 / sqrt(i+1) + 1) * c_i / (sqrt(i / (i-1)) - c_i)`` and checks
    that the recurrence expressing ``theta'_{i+1}`` from ``theta'_i``, the
    sampled gradient, and the stored moment holds to 1e-9 relative per
    coordinate (pure algebra on the iterates, no error accumulation).
    """
    _require_acmo(traj, "shifted-iterate identity")
    _require_theory(traj, "shifted-iterate identity")
    if sched.alpha.kind != "inv_sqrt":
        raise DiagnosticsError("shifted-iterate identity requires alpha_t = alpha0/sqrt(t)")
    if not traj.has_stored_vectors() or traj.psi_coefs is None:
        raise DiagnosticsError("shifted-iterate identity needs stored vectors")
    if traj.projected_steps > 0:
        raise DiagnosticsError(
            "shifted-iterate identity requires unclamped steps; projection "
            f"bound on {traj.projected_steps} steps"
        )
    T = traj.n_steps
    if T < 2:
        return _report("shifted_iterate_identity", np.array([]), 0.0, T)
    thetas, grads, mhats = traj.thetas, traj.grads, traj.mhats
    coefs, alphas = traj.psi_coefs, traj.alpha

    def shift_coef(i: int) -> float:
        c = coefs[i - 1]
        return (6.0 / math.sqrt(i + 1) + 1.0) * c / (math.sqrt(i / (i - 1.0)) - c)

    def theta_prime(i: int) -> np.ndarray:
        if i == 1:
            return thetas[0]
        return thetas[i - 1] + shift_coef(i) * (thetas[i - 1] - thetas[i - 2])

    slack = np.empty(T - 1)
    for i in range(1, T):
        c_i = coefs[i - 1]
        lhs = theta_prime(i + 1)
        if i == 1:
            # base case carries its own leading coefficient
            b_1 = (math.sqrt(2.0) + 1.0) / (1.0 - c_i)
            rhs = (
                theta_prime(1)
                - alphas[0] * b_1 * grads[0]
                + (shift_coef(2) - b_1 + 1.0) * (thetas[1] - thetas[0])
            )
        else:
            b_i = (math.sqrt(1.0 / i) + 1.0) / (1.0 - c_i)
            m_prev = mhats[i - 2]
            rhs = (
                theta_prime(i)
                - alphas[i - 1] * b_i * grads[i - 1]
                - (alphas[i - 1] * b_i * c_i - alphas[i - 2] * shift_coef(i)) * m_prev
                + (shift_coef(i + 1) - (b_i - 1.0)) * (thetas[i] - thetas[i - 1])
            )
        residual = float(np.max(np.abs(lhs - rhs)))
        scale = 1.0 + float(np.max(np.abs(lhs)))
        slack[i - 1] = 1e-9 - residual / scale
    return _report("shifted_iterate_identity", slack, 0.0, T)


def check_convergence_bound(traj: TrajectoryRecord, meta: SmoothnessMeta,
                            alpha0: float) -> BoundReport:
    """Step-size-weighted average of squared gradient norms vs the rate bound.

    Checks ``S_t = sum_i alpha_i ||grad f(theta_i)||^2 / sum_i alpha_i <=
    (C0 + C1 ln t) / sqrt(t)`` for every ``t >= 2`` with
    ``C0 = (L/2 + 235) alpha0 sigma^2 + 70 G^2 + 1`` and
    ``C1 = (L/2 + 3) alpha0 sigma^2 + 60 G^2 + 1``.
    """
    _require_acmo(traj, "convergence bound")
    _require_theory(traj, "convergence bound")
    if np.any(~np.isfinite(traj.grad_norm)):
        raise DiagnosticsError("convergence bound needs full-gradient logging")
    c0 = (meta.L / 2.0 + 235.0) * alpha0 * meta.sigma**2 + 70.0 * meta.G**2 + 1.0
    c1 = (meta.L / 2.0 + 3.0) * alpha0 * meta.sigma**2 + 60.0 * meta.G**2 + 1.0
    weighted = np.cumsum(traj.alpha * traj.grad_norm**2)
    total = np.cumsum(traj.alpha)
    ts = traj.t.astype(np.float64)
    s = weighted / total
    bound = (c0 + c1 * np.log(ts)) / np.sqrt(ts)
    slack = (bound - s)[1:]
    tol = 1e-12 * (1.0 + bound[1:])
    return _report(
        "convergence_bound", slack, tol, traj.n_steps,
        notes=f"C0={c0:.6g} C1={c1:.6g}",
    )


def min_so_far(values: np.ndarray) -> np.ndarray:
    return np.minimum.accumulate(values)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float


def fit_rate(ts: Sequence[float], ys: Sequence[float]) -> RateFit:
    """Ordinary least squares of ``ln y`` on ``ln t``."""
    ts = np.asarray(ts, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if ts.size < 10:
        raise DiagnosticsError(f"rate fit needs >= 10 points, got {ts.size}")
    if np.any(ts <= 0) or np.any(ys <= 0):
        raise DiagnosticsError("rate fit needs strictly positive t and y")
    x = np.log(ts)
    y = np.log(ys)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateFit(float(slope), float(intercept), r2)


# ---------------------------------------------------------------------------
# small symmetric eigendecomposition (for the decomposition demo)
# ---------------------------------------------------------------------------


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-12,
                max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations for a small symmetric matrix.

    Returns ``(w, V)`` with ``matrix ~= V @ diag(w) @ V.T``.
    """
    a = np.asarray(matrix, dtype=np.float64)
    n, m = a.shape
    if n != m:
        raise DiagnosticsError("eigendecomposition needs a square matrix")
    if not np.allclose(a, a.T, atol=1e-10 * (1.0 + np.abs(a).max())):
        raise DiagnosticsError("eigendecomposition needs a symmetric matrix")
    a = 0.5 * (a + a.T)
    scale = max(1.0, float(np.abs(a).max()))
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(np.tril(a, -1) ** 2)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) <= 1e-300:
                    continue
                phi = 0.5 * math.atan2(2.0 * a[p, q], a[q, q] - a[p, p])
                c, s = math.cos(phi), math.sin(phi)
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    return np.diag(a).copy(), v


def psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues below noise level clamp to zero."""
    w, v = jacobi_eigh(matrix)
    floor = 1e-12 * max(float(np.max(w, initial=0.0)), 0.0)
    w = np.where(w < floor, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


@dataclass(frozen=True)
class DecompositionResult:
    t1: float
    t2: float
    t3: float
    t4: float
    bound_holds: bool


def adagrad_projection_decomposition(g_history: Sequence[np.ndarray],
                                     theta: np.ndarray, theta_t: np.ndarray,
                                     alpha_t: float) -> DecompositionResult:
    """Terms of the full-matrix surrogate and its separable upper bound.

    ``t1 + t2`` is the matrix-preconditioned surrogate at ``theta``;
    ``t1 + t3 + t4`` replaces the matrix term by an isotropic quadratic plus
    a penalty on projections of the step onto historical gradients.  The
    pointwise relation ``t2 <= t3 + t4`` is reported (not asserted): no
    domain condition guarantees it everywhere.
    """
    g_history = [np.asarray(g, dtype=np.float64) for g in g_history]
    if not g_history:
        raise DiagnosticsError("decomposition needs at least one gradient")
    d = g_history[0].size
    if d > 8:
        raise DiagnosticsError("decomposition is restricted to dimension <= 8")
    if len(g_history) > 32:
        raise DiagnosticsError("decomposition is restricted to <= 32 gradients")
    if alpha_t <= 0:
        raise DiagnosticsError("alpha_t must be positive")
    x = np.asarray(theta, dtype=np.float64) - np.asarray(theta_t, dtype=np.float64)
    g_t = g_history[-1]
    gram = np.zeros((d, d))
    for g in g_history:
        gram += np.outer(g, g)
    root = psd_sqrt(gram)
    t1 = float(x @ g_t)
    t2 = float(x @ root @ x) / (2.0 * alpha_t)
    t3 = float(x @ x) / (2.0 * alpha_t)
    t4 = float(sum((x @ g) ** 2 for g in g_history)) / (8.0 * alpha_t)
    return DecompositionResult(t1, t2, t3, t4, bound_holds=t2 <= t3 + t4 + 1e-12)


# ---------------------------------------------------------------------------
# scalar-inequality sweep
# ---------------------------------------------------------------------------


def default_coefficient_grid(n_points: int = 200) -> np.ndarray:
    """0 followed by a geometric ladder from 1e-4 up to 1/12."""
    return np.concatenate([[0.0], np.geomspace(1e-4, 1.0 / 12.0, n_points - 1)])


def default_index_values() -> np.ndarray:
    return np.concatenate([np.arange(2, 1001), [10**4, 10**5, 10**6]])


def sweep_scalar_inequalities(beta_grid: Optional[np.ndarray] = None,
                              i_values: Optional[np.ndarray] = None,
                              tol: float = 1e-12) -> BoundReport:
    """Grid check of the four scalar inequalities behind the telescoping sums.

    Two are single-variable in the calibration coefficient; the other two
    couple consecutive coefficients and only hold on the admissible region
    ``b_next <= sqrt((i+1)/i) * b``, which the moment combiner enforces.
    Coefficients range over ``[0, 1/12]``.
    """
    if beta_grid is None:
        beta_grid = default_coefficient_grid()
    if i_values is None:
        i_values = default_index_values()
    beta_grid = np.asarray(beta_grid, dtype=np.float64)
    if np.any(beta_grid < 0) or np.any(beta_grid > 1.0 / 12.0 + 1e-15):
        raise DiagnosticsError("coefficient grid must lie within [0, 1/12]")
    b1, b2 = np.meshgrid(beta_grid, beta_grid, indexing="ij")
    worst = math.inf
    count = 0
    for i in np.asarray(i_values, dtype=np.int64):
        i = float(i)
        ratio = math.sqrt(i / (i - 1.0))
        ratio_next = math.sqrt((i + 1.0) / i)
        b = beta_grid
        # single-coefficient inequalities
        lhs5 = (6.0 / math.sqrt(i + 1.0) + 1.0) * b / (ratio - b) + 6.0 / math.sqrt(i + 1.0) + 1.0
        rhs5 = (1.0 / math.sqrt(i) + 1.0) / (1.0 - b)
        s5 = float(np.min(lhs5 - rhs5))
        lhs6 = (6.0 / math.sqrt(i + 1.0) + 1.0) * b / (ratio - b) / math.sqrt(i - 1.0)
        rhs6 = (1.0 / math.sqrt(i) + 1.0) * b / (1.0 - b) / math.sqrt(i)
        s6 = float(np.min(lhs6 - rhs6))
        # coupled inequalities on the admissible region
        admissible = b2 <= ratio_next * b1 + 1e-18
        lead = (6.0 / math.sqrt(i + 2.0) + 1.0) * b2 / (ratio_next - b2)
        expr7 = 1.0 / math.sqrt(i) - (lead - (1.0 / math.sqrt(i) + 1.0) * b1 / (1.0 - b1))
        expr8 = -(lead - (1.0 / math.sqrt(i) + 1.0) / (1.0 - b1) + 1.0)
        s7 = float(np.min(np.where(admissible, expr7, np.inf)))
        s8 = float(np.min(np.where(admissible, expr8, np.inf)))
        worst = min(worst, s5, s6, s7, s8)
        count += 1
    return BoundReport(
        name="scalar_inequalities",
        worst_slack=worst,
        violated=worst < -tol,
        n_steps=count,
        tolerance=tol,
        notes=f"grid={beta_grid.size} coefficients x {count} indices",
    )
