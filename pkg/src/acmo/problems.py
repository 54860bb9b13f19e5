"""Finite-sum objectives with analytic gradients and certified metadata.

Every problem is a mean of per-sample losses ``f(x) = (1/n) sum_i f_i(x)``
and carries a :class:`SmoothnessMeta` with a gradient-Lipschitz bound ``L``
(valid for the full loss and every mini-batch loss), a gradient-norm bound
``G`` over the feasible region, and a per-sample deviation bound ``sigma``
with ``max_i ||grad f_i - grad f|| <= sigma``.  Where closed forms exist the
constants are exact; otherwise they are certified by dense sampling with a
10% safety margin.

Shipped instances: a stochastic convex quadratic (shared Hessian, per-sample
shifts), a synthetic two-class logistic regression, the deterministic
Rosenbrock function, and a one-hidden-layer tanh MLP on synthetic regression
data with hand-derived backprop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional, Tuple, Type

import numpy as np
from scipy.special import expit

from acmo.linalg import DimensionMismatchError, Rng, Vector, as_vector


class ProblemError(ValueError):
    """Raised for invalid problem parameters or misuse."""


class BatchError(ProblemError):
    """Raised for empty, oversized, or out-of-range mini-batches."""


@dataclass(frozen=True)
class SmoothnessMeta:
    """Smoothness / noise constants entering the convergence guarantee."""

    L: float
    G: float
    sigma: float
    f_star: Optional[float] = None

    def __post_init__(self):
        for name in ("L", "G", "sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ProblemError(f"{name} must be finite and >= 0, got {v!r}")
        if self.sigma > 2.0 * self.G + 1e-12:
            raise ProblemError(
                f"sigma={self.sigma!r} exceeds 2*G={2 * self.G!r}; "
                "per-sample deviations cannot exceed twice the gradient bound"
            )


@dataclass(frozen=True)
class MiniBatch:
    """Index set drawn from one epoch of a shuffled partition."""

    indices: np.ndarray
    epoch_position: int = 0

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise BatchError("mini-batch must contain at least one index")
        if len(np.unique(idx)) != idx.size:
            raise BatchError("mini-batch indices must be distinct")
        object.__setattr__(self, "indices", idx)

    @property
    def size(self) -> int:
        return int(self.indices.size)


class EpochSampler:
    """Fixed-order traversal of a fresh shuffle per epoch.

    When ``batch_size`` does not divide ``n_samples`` the remainder is
    dropped by default, keeping each epoch an exact partition; with
    ``drop_remainder=False`` the final batch instead wraps around to the
    start of the current permutation.
    """

    def __init__(self, n_samples: int, batch_size: int, rng: Rng,
                 drop_remainder: bool = True):
        if batch_size < 1:
            raise BatchError(f"batch size must be >= 1, got {batch_size}")
        if batch_size > n_samples:
            raise BatchError(
                f"batch size {batch_size} exceeds sample count {n_samples}"
            )
        self.n_samples = n_samples
        self.batch_size = batch_size
        self.drop_remainder = drop_remainder
        self._rng = rng
        self._perm = rng.permutation(n_samples)
        self._cursor = 0
        self._epoch_position = 0

    def next_batch(self) -> MiniBatch:
        b = self.batch_size
        remaining = self.n_samples - self._cursor
        if remaining < b and (self.drop_remainder or remaining == 0):
            self._perm = self._rng.permutation(self.n_samples)
            self._cursor = 0
            self._epoch_position = 0
            remaining = self.n_samples
        if remaining >= b:
            idx = self._perm[self._cursor:self._cursor + b]
            self._cursor += b
        else:
            # pad mode: wrap the short tail with the head of this permutation
            tail = self._perm[self._cursor:]
            head = self._perm[: b - remaining]
            idx = np.concatenate([tail, head])
            self._cursor = self.n_samples
        batch = MiniBatch(indices=np.array(idx), epoch_position=self._epoch_position)
        self._epoch_position += 1
        return batch


class Problem:
    """Base class: immutable after construction, shareable across threads."""

    name: str = "problem"

    def __init__(self, dim: int, n_samples: int, meta: SmoothnessMeta,
                 feasible_box: Optional[Tuple[Vector, Vector]] = None):
        if dim < 1 or n_samples < 1:
            raise ProblemError("dim and n_samples must be >= 1")
        if feasible_box is not None:
            lo, hi = feasible_box
            lo, hi = as_vector(lo), as_vector(hi)
            if lo.shape != (dim,) or hi.shape != (dim,):
                raise ProblemError("feasible box bounds must match the dimension")
            if not np.all(lo < hi):
                raise ProblemError("feasible box requires lo < hi per coordinate")
            feasible_box = (lo, hi)
        self.dim = dim
        self.n_samples = n_samples
        self.meta = meta
        self.feasible_box = feasible_box

    # -- gradient / loss surface ------------------------------------------

    def loss(self, theta: Vector) -> float:
        raise NotImplementedError

    def batch_loss(self, theta: Vector, batch: MiniBatch) -> float:
        raise NotImplementedError

    def full_gradient(self, theta: Vector) -> Vector:
        raise NotImplementedError

    def per_sample_gradients(self, theta: Vector) -> np.ndarray:
        """(n, d) array of per-sample gradients at ``theta``."""
        raise NotImplementedError

    def minibatch_gradient(self, theta: Vector, batch: MiniBatch) -> Vector:
        self._check_theta(theta)
        self._check_batch(batch)
        return self.per_sample_gradients(theta)[batch.indices].mean(axis=0)

    def start_point(self) -> Vector:
        """Deterministic default initial point (inside the box when present)."""
        raise NotImplementedError

    # -- helpers -----------------------------------------------------------

    def _check_theta(self, theta: Vector) -> None:
        if theta.shape != (self.dim,):
            raise DimensionMismatchError(
                f"{self.name}: expected theta of dimension {self.dim}, "
                f"got shape {theta.shape}"
            )

    def _check_batch(self, batch: MiniBatch) -> None:
        idx = batch.indices
        if idx.min() < 0 or idx.max() >= self.n_samples:
            raise BatchError(
                f"batch indices out of range [0, {self.n_samples}): "
                f"min={idx.min()}, max={idx.max()}"
            )

    def project(self, theta: Vector) -> Vector:
        """Euclidean projection onto the feasible box; identity without one."""
        self._check_theta(theta)
        if self.feasible_box is None:
            return theta
        lo, hi = self.feasible_box
        return np.clip(theta, lo, hi)

    def sampler(self, batch_size: int, rng: Rng, drop_remainder: bool = True) -> EpochSampler:
        return EpochSampler(self.n_samples, batch_size, rng, drop_remainder)


def full_gradient(problem: Problem, theta: Vector) -> Vector:
    return problem.full_gradient(theta)


def minibatch_gradient(problem: Problem, theta: Vector, batch: MiniBatch) -> Vector:
    return problem.minibatch_gradient(theta, batch)


def project(problem: Problem, theta: Vector) -> Vector:
    return problem.project(theta)


# ---------------------------------------------------------------------------
# stochastic convex quadratic
# ---------------------------------------------------------------------------


class QuadraticProblem(Problem):
    """f_i(x) = 0.5 (x - c_i)^T A (x - c_i) with a shared SPD Hessian.

    The Hessian has a prescribed spectrum, so ``L`` is its largest eigenvalue
    (identical for every mini-batch loss), ``sigma`` is the exact maximum of
    ``||A c_i - mean_j A c_j||``, and ``G`` is certified by enumerating the
    feasible box's vertices (the max of a convex norm over a box sits at a
    vertex) plus the batch-shift bound ``sigma``.
    """

    name = "quadratic"

    def __init__(self, seed: int, dim: int = 10, n_samples: int = 32,
                 eig_min: float = 31.0, eig_max: float = 310.0,
                 noise: float = 0.1, box_radius: Optional[float] = 3.0,
                 start_scale: float = 2.5):
        if not (0 < eig_min <= eig_max):
            raise ProblemError("eigenvalues must satisfy 0 < eig_min <= eig_max")
        rng = Rng(seed, 0)
        q, _ = np.linalg.qr(rng.normal((dim, dim)))
        lam = np.linspace(eig_min, eig_max, dim)
        a = (q * lam) @ q.T
        self.hessian = 0.5 * (a + a.T)
        centers = noise * rng.normal((n_samples, dim))
        centers -= centers.mean(axis=0)
        self.centers = centers
        self._ac = centers @ self.hessian.T
        self._ac_bar = self._ac.mean(axis=0)
        self._q = 0.5 * np.einsum("ij,ij->i", centers, self._ac)
        self._q_bar = float(self._q.mean())

        # tiny relative headroom: deviations recomputed elsewhere differ by ulps
        sigma = float(np.max(np.linalg.norm(self._ac - self._ac_bar, axis=1))) * (1 + 1e-12)
        theta_star = np.linalg.solve(self.hessian, self._ac_bar)
        box = None
        if box_radius is not None:
            lo = np.full(dim, -box_radius)
            box = (lo, -lo)
            g_cert = self._box_gradient_bound(box_radius, dim) + sigma
        else:
            g_cert = max(2.0 * sigma, 1.0)  # box absent: G only has to satisfy meta checks
        l_cert = eig_max * (1.0 + 1e-9)
        f_star = self._loss_at(theta_star)
        meta = SmoothnessMeta(L=l_cert, G=g_cert, sigma=sigma, f_star=f_star)
        super().__init__(dim, n_samples, meta, box)
        self.theta_star = theta_star

        direction = rng.normal(dim)
        direction /= np.linalg.norm(direction)
        scale = start_scale * sigma / np.linalg.norm(self.hessian @ direction)
        self._start = theta_star + scale * direction

    def _box_gradient_bound(self, radius: float, dim: int) -> float:
        if dim <= 16:
            signs = np.array(np.meshgrid(*[[-radius, radius]] * dim)).reshape(dim, -1).T
            return float(np.max(np.linalg.norm(signs @ self.hessian.T - self._ac_bar, axis=1)))
        norm_bound = float(np.linalg.norm(self.hessian, 2)) * radius * math.sqrt(dim)
        return norm_bound + float(np.linalg.norm(self._ac_bar))

    def _loss_at(self, theta: Vector) -> float:
        return float(0.5 * theta @ self.hessian @ theta - theta @ self._ac_bar + self._q_bar)

    def loss(self, theta: Vector) -> float:
        self._check_theta(theta)
        return self._loss_at(theta)

    def batch_loss(self, theta: Vector, batch: MiniBatch) -> float:
        self._check_theta(theta)
        self._check_batch(batch)
        idx = batch.indices
        return float(
            0.5 * theta @ self.hessian @ theta
            - theta @ self._ac[idx].mean(axis=0)
            + self._q[idx].mean()
        )

    def full_gradient(self, theta: Vector) -> Vector:
        self._check_theta(theta)
        return self.hessian @ theta - self._ac_bar

    def per_sample_gradients(self, theta: Vector) -> np.ndarray:
        self._check_theta(theta)
        return (self.hessian @ theta)[None, :] - self._ac

    def minibatch_gradient(self, theta: Vector, batch: MiniBatch) -> Vector:
        self._check_theta(theta)
        self._check_batch(batch)
        return self.hessian @ theta - self._ac[batch.indices].mean(axis=0)

    def start_point(self) -> Vector:
        return self._start.copy()


# ---------------------------------------------------------------------------
# synthetic two-class logistic regression
# ---------------------------------------------------------------------------


class LogisticProblem(Problem):
    """Unregularized logistic loss on rotated anisotropic Gaussian features.

    Labels come from a random separator with a fraction flipped, so the data
    are not separable and the optimum is finite.  All constants are global
    (no box needed): per-sample Hessians satisfy ``H_i <= ||x_i||^2 / 4``,
    gradients satisfy ``||grad f_i|| <= ||x_i||``, and the deviation bound
    follows from the triangle inequality.
    """

    name = "logistic"

    def __init__(self, seed: int, n_samples: int = 256, dim: int = 24,
                 cond: float = 100.0, feature_scale: float = 4.0,
                 flip_fraction: float = 0.1,
                 box_radius: Optional[float] = None):
        rng = Rng(seed, 0)
        q, _ = np.linalg.qr(rng.normal((dim, dim)))
        scales = np.sqrt(np.geomspace(1.0, cond, dim)) * feature_scale
        x = rng.normal((n_samples, dim)) * scales
        self.features = x @ q.T
        w = rng.normal(dim)
        w /= np.linalg.norm(w)
        labels = np.sign(self.features @ w + 1e-12)
        n_flip = int(flip_fraction * n_samples)
        if n_flip:
            flip_idx = rng.permutation(n_samples)[:n_flip]
            labels[flip_idx] = -labels[flip_idx]
        self.labels = labels

        row_norms = np.linalg.norm(self.features, axis=1)
        l_cert = float(np.max(row_norms) ** 2 / 4.0)
        g_cert = float(np.max(row_norms))
        sigma = float(np.max(row_norms) + np.mean(row_norms))
        box = None
        if box_radius is not None:
            lo = np.full(dim, -box_radius)
            box = (lo, -lo)
        meta = SmoothnessMeta(L=l_cert, G=g_cert, sigma=sigma, f_star=None)
        super().__init__(dim, n_samples, meta, box)

    def _margins(self, theta: Vector) -> np.ndarray:
        return self.labels * (self.features @ theta)

    def loss(self, theta: Vector) -> float:
        self._check_theta(theta)
        return float(np.mean(np.logaddexp(0.0, -self._margins(theta))))

    def batch_loss(self, theta: Vector, batch: MiniBatch) -> float:
        self._check_theta(theta)
        self._check_batch(batch)
        idx = batch.indices
        m = self.labels[idx] * (self.features[idx] @ theta)
        return float(np.mean(np.logaddexp(0.0, -m)))

    def full_gradient(self, theta: Vector) -> Vector:
        self._check_theta(theta)
        s = expit(-self._margins(theta))
        return -(self.labels * s) @ self.features / self.n_samples

    def per_sample_gradients(self, theta: Vector) -> np.ndarray:
        self._check_theta(theta)
        s = expit(-self._margins(theta))
        return -(self.labels * s)[:, None] * self.features

    def minibatch_gradient(self, theta: Vector, batch: MiniBatch) -> Vector:
        self._check_theta(theta)
        self._check_batch(batch)
        idx = batch.indices
        m = self.labels[idx] * (self.features[idx] @ theta)
        s = expit(-m)
        return -(self.labels[idx] * s) @ self.features[idx] / idx.size

    def start_point(self) -> Vector:
        return np.zeros(self.dim)


# ---------------------------------------------------------------------------
# deterministic Rosenbrock (n = 1)
# ---------------------------------------------------------------------------


class RosenbrockProblem(Problem):
    """Classic 2-D valley ``(a - x)^2 + b (y - x^2)^2`` on a box.

    Deterministic (one sample, ``sigma = 0``).  ``L`` and ``G`` are certified
    by maximizing the closed-form 2x2 Hessian spectral norm and the gradient
    norm over a dense grid on the box, with a 10% safety margin.
    """

    name = "rosenbrock"

    def __init__(self, seed: int = 0, a: float = 1.0, b: float = 100.0,
                 box_radius: Optional[float] = 2.0, grid: int = 401):
        self.a = a
        self.b = b
        radius = 2.0 if box_radius is None else box_radius
        xs = np.linspace(-radius, radius, grid)
        gx, gy = np.meshgrid(xs, xs)
        hxx = 2.0 + 12.0 * b * gx**2 - 4.0 * b * gy
        hxy = -4.0 * b * gx
        hyy = np.full_like(gx, 2.0 * b)
        lam_max = 0.5 * (hxx + hyy) + np.sqrt(0.25 * (hxx - hyy) ** 2 + hxy**2)
        l_cert = float(np.max(np.abs(lam_max)) * 1.1)
        g1 = -2.0 * (a - gx) - 4.0 * b * gx * (gy - gx**2)
        g2 = 2.0 * b * (gy - gx**2)
        g_cert = float(np.max(np.hypot(g1, g2)) * 1.1)
        meta = SmoothnessMeta(L=l_cert, G=g_cert, sigma=0.0, f_star=0.0)
        box = None
        if box_radius is not None:
            lo = np.full(2, -box_radius)
            box = (lo, -lo)
        super().__init__(2, 1, meta, box)

    def loss(self, theta: Vector) -> float:
        self._check_theta(theta)
        x, y = theta
        return float((self.a - x) ** 2 + self.b * (y - x**2) ** 2)

    def batch_loss(self, theta: Vector, batch: MiniBatch) -> float:
        self._check_batch(batch)
        return self.loss(theta)

    def full_gradient(self, theta: Vector) -> Vector:
        self._check_theta(theta)
        x, y = theta
        r = y - x**2
        return np.array([-2.0 * (self.a - x) - 4.0 * self.b * x * r, 2.0 * self.b * r])

    def per_sample_gradients(self, theta: Vector) -> np.ndarray:
        return self.full_gradient(theta)[None, :]

    def minibatch_gradient(self, theta: Vector, batch: MiniBatch) -> Vector:
        self._check_batch(batch)
        return self.full_gradient(theta)

    def start_point(self) -> Vector:
        return np.array([-1.2, 1.0])


# ---------------------------------------------------------------------------
# one-hidden-layer tanh MLP on synthetic regression data
# ---------------------------------------------------------------------------


class MlpRegressionProblem(Problem):
    """Squared loss of a tanh MLP against a noisy random teacher network.

    Parameters are the flattened ``(W1, b1, w2, b2)``.  Backpropagation is
    written out by hand and vectorized over samples so per-sample gradients
    come out of one pass.  Constants are certified by sampling the feasible
    box (1000 points for ``G``/``sigma``, 1000 pairs for ``L``) with a 10%
    margin.
    """

    name = "mlp"

    def __init__(self, seed: int, n_samples: int = 128, in_dim: int = 4,
                 hidden: int = 8, noise: float = 0.1,
                 box_radius: Optional[float] = 2.0, init_scale: float = 0.2,
                 cert_samples: int = 1000):
        self.in_dim = in_dim
        self.hidden = hidden
        dim = hidden * in_dim + hidden + hidden + 1
        # set early: certification calls the gradient path before super().__init__
        self.dim = dim
        self.n_samples = n_samples
        rng = Rng(seed, 0)
        self.inputs = rng.normal((n_samples, in_dim))
        w1_t = rng.normal((hidden, in_dim))
        b1_t = rng.normal(hidden)
        w2_t = rng.normal(hidden)
        self.targets = (
            np.tanh(self.inputs @ w1_t.T + b1_t) @ w2_t
            + noise * rng.normal(n_samples)
        )
        self._start = init_scale * rng.normal(dim)

        radius = 2.0 if box_radius is None else box_radius
        l_cert, g_cert, sigma = self._certify(radius, cert_samples, Rng(seed, 1))
        box = None
        if box_radius is not None:
            lo = np.full(dim, -box_radius)
            box = (lo, -lo)
        meta = SmoothnessMeta(L=l_cert, G=g_cert, sigma=sigma, f_star=None)
        super().__init__(dim, n_samples, meta, box)

    def _unpack(self, theta: Vector):
        h, p = self.hidden, self.in_dim
        w1 = theta[: h * p].reshape(h, p)
        b1 = theta[h * p: h * p + h]
        w2 = theta[h * p + h: h * p + 2 * h]
        b2 = theta[-1]
        return w1, b1, w2, b2

    def _forward(self, theta: Vector):
        w1, b1, w2, b2 = self._unpack(theta)
        hidden_act = np.tanh(self.inputs @ w1.T + b1)
        out = hidden_act @ w2 + b2
        return hidden_act, out, w2

    def loss(self, theta: Vector) -> float:
        self._check_theta(theta)
        _, out, _ = self._forward(theta)
        return float(0.5 * np.mean((out - self.targets) ** 2))

    def batch_loss(self, theta: Vector, batch: MiniBatch) -> float:
        self._check_theta(theta)
        self._check_batch(batch)
        _, out, _ = self._forward(theta)
        idx = batch.indices
        return float(0.5 * np.mean((out[idx] - self.targets[idx]) ** 2))

    def per_sample_gradients(self, theta: Vector) -> np.ndarray:
        self._check_theta(theta)
        hidden_act, out, w2 = self._forward(theta)
        err = out - self.targets
        g_w2 = hidden_act * err[:, None]
        g_b2 = err[:, None]
        delta = (err[:, None] * w2) * (1.0 - hidden_act**2)
        g_w1 = delta[:, :, None] * self.inputs[:, None, :]
        g_b1 = delta
        n = self.n_samples
        return np.concatenate([g_w1.reshape(n, -1), g_b1, g_w2, g_b2], axis=1)

    def full_gradient(self, theta: Vector) -> Vector:
        return self.per_sample_gradients(theta).mean(axis=0)

    def minibatch_gradient(self, theta: Vector, batch: MiniBatch) -> Vector:
        self._check_theta(theta)
        self._check_batch(batch)
        idx = batch.indices
        hidden_act, out, w2 = self._forward(theta)
        err = np.zeros_like(out)
        err[idx] = (out[idx] - self.targets[idx]) / idx.size
        g_w2 = hidden_act.T @ err
        g_b2 = err.sum()
        delta = (err[:, None] * w2) * (1.0 - hidden_act**2)
        g_w1 = delta.T @ self.inputs
        g_b1 = delta.sum(axis=0)
        return np.concatenate([g_w1.ravel(), g_b1, g_w2, [g_b2]])

    def start_point(self) -> Vector:
        return self._start.copy()

    def _certify(self, radius: float, n_points: int, rng: Rng):
        dim = self.hidden * self.in_dim + 2 * self.hidden + 1
        g_max = 0.0
        dev_max = 0.0
        for _ in range(n_points):
            theta = rng.uniform(-radius, radius, dim)
            grads = self.per_sample_gradients(theta)
            mean = grads.mean(axis=0)
            g_max = max(g_max, float(np.linalg.norm(grads, axis=1).max()))
            dev_max = max(dev_max, float(np.linalg.norm(grads - mean, axis=1).max()))
        l_max = 0.0
        for _ in range(n_points):
            a = rng.uniform(-radius, radius, dim)
            b = rng.uniform(-radius, radius, dim)
            ga = self.per_sample_gradients(a)
            gb = self.per_sample_gradients(b)
            ratio = float(np.linalg.norm(ga - gb, axis=1).max() / np.linalg.norm(a - b))
            l_max = max(l_max, ratio)
        return 1.1 * l_max, 1.1 * g_max, 1.1 * dev_max


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

PROBLEMS: Dict[str, Type[Problem]] = {
    QuadraticProblem.name: QuadraticProblem,
    LogisticProblem.name: LogisticProblem,
    RosenbrockProblem.name: RosenbrockProblem,
    MlpRegressionProblem.name: MlpRegressionProblem,
}


def problem_names() -> Tuple[str, ...]:
    return tuple(sorted(PROBLEMS))


@lru_cache(maxsize=64)
def _cached_problem(name: str, seed: int, param_items: Tuple) -> Problem:
    cls = PROBLEMS[name]
    return cls(seed=seed, **dict(param_items))


def make_problem(name: str, seed: int, params: Optional[dict] = None) -> Problem:
    """Instantiate (and cache) a registered problem by name."""
    if name not in PROBLEMS:
        raise ProblemError(
            f"unknown problem {name!r}; expected one of {problem_names()}"
        )
    items = tuple(sorted((params or {}).items()))
    try:
        return _cached_problem(name, seed, items)
    except TypeError:
        # unhashable override values: construct without caching
        return PROBLEMS[name](seed=seed, **dict(items))
