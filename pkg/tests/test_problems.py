import numpy as np
import pytest

from acmo.diagnostics import central_difference_gradient
from acmo.linalg import DimensionMismatchError, Rng
from acmo.problems import (
    BatchError,
    EpochSampler,
    LogisticProblem,
    MiniBatch,
    Problem,
    ProblemError,
    QuadraticProblem,
    SmoothnessMeta,
    make_problem,
    problem_names,
)

SEED = 20260811
ALL_PROBLEMS = ("quadratic", "logistic", "rosenbrock", "mlp")


@pytest.fixture(scope="module", params=ALL_PROBLEMS)
def problem(request):
    return make_problem(request.param, SEED)


class DiagQuadratic(Problem):
    """Tiny finite sum with per-sample diagonal Hessians (test oracle only)."""

    name = "diag_quadratic"

    def __init__(self, diags):
        self.diags = np.asarray(diags, dtype=np.float64)
        n, d = self.diags.shape
        meta = SmoothnessMeta(L=float(self.diags.max()), G=10.0, sigma=20.0)
        super().__init__(d, n, meta)

    def loss(self, theta):
        return float(0.5 * np.mean(self.diags @ (theta**2)))

    def batch_loss(self, theta, batch):
        return float(0.5 * np.mean(self.diags[batch.indices] @ (theta**2)))

    def per_sample_gradients(self, theta):
        return self.diags * theta[None, :]

    def full_gradient(self, theta):
        return self.per_sample_gradients(theta).mean(axis=0)

    def start_point(self):
        return np.ones(self.dim)


class TestFullGradient:
    def test_identity_hessian(self):
        # eig_min == eig_max == 1 makes the shared Hessian the identity
        p = QuadraticProblem(seed=1, dim=2, n_samples=4, eig_min=1.0, eig_max=1.0,
                             noise=0.0, box_radius=None)
        theta = np.array([2.0, -1.0])
        assert np.allclose(p.full_gradient(theta), theta, atol=1e-12)

    def test_zero_at_stationary_point(self):
        p = make_problem("quadratic", SEED)
        g = p.full_gradient(p.theta_star)
        assert np.linalg.norm(g) <= 1e-10

    def test_rosenbrock_zero_at_optimum(self):
        p = make_problem("rosenbrock", SEED)
        assert np.linalg.norm(p.full_gradient(np.array([1.0, 1.0]))) <= 1e-10

    def test_small_logistic_matches_finite_differences(self):
        p = LogisticProblem(seed=3, n_samples=4, dim=3, cond=4.0, feature_scale=1.0)
        theta = np.zeros(3)
        fd = central_difference_gradient(p.loss, theta)
        assert np.linalg.norm(p.full_gradient(theta) - fd) <= 1e-8

    def test_dimension_mismatch(self, problem):
        with pytest.raises(DimensionMismatchError):
            problem.full_gradient(np.zeros(problem.dim + 1))


class TestMinibatchGradient:
    def test_full_batch_equals_full_gradient(self, problem):
        theta = problem.start_point()
        batch = MiniBatch(indices=np.arange(problem.n_samples))
        full = problem.full_gradient(theta)
        assert np.allclose(problem.minibatch_gradient(theta, batch), full, atol=1e-12)

    def test_singleton_batch_is_one_sample(self, problem):
        theta = problem.start_point()
        k = problem.n_samples - 1
        got = problem.minibatch_gradient(theta, MiniBatch(indices=np.array([k])))
        want = problem.per_sample_gradients(theta)[k]
        assert np.allclose(got, want, atol=1e-12)

    def test_hand_computed_two_sample_instance(self):
        # per-sample Hessians diag(1,2) and diag(3,1); batch {0} at (1,1) -> (1,2)
        p = DiagQuadratic([[1.0, 2.0], [3.0, 1.0]])
        got = p.minibatch_gradient(np.array([1.0, 1.0]), MiniBatch(indices=np.array([0])))
        assert np.array_equal(got, [1.0, 2.0])

    def test_out_of_range_index(self, problem):
        with pytest.raises(BatchError):
            problem.minibatch_gradient(
                problem.start_point(), MiniBatch(indices=np.array([problem.n_samples]))
            )

    def test_empty_batch_rejected(self):
        with pytest.raises(BatchError):
            MiniBatch(indices=np.array([], dtype=np.int64))


class TestEpochSampler:
    def test_single_full_batch(self):
        sampler = EpochSampler(4, 4, Rng(0, 0))
        assert sorted(sampler.next_batch().indices) == [0, 1, 2, 3]

    def test_epoch_partitions(self):
        sampler = EpochSampler(4, 2, Rng(0, 0))
        a, b = sampler.next_batch(), sampler.next_batch()
        assert sorted(np.concatenate([a.indices, b.indices])) == [0, 1, 2, 3]
        assert a.epoch_position == 0 and b.epoch_position == 1

    def test_fixed_seed_replays(self):
        seq1 = [EpochSampler(10, 3, Rng(5, 1)).next_batch().indices for _ in range(1)]
        s1 = EpochSampler(10, 3, Rng(5, 1))
        s2 = EpochSampler(10, 3, Rng(5, 1))
        for _ in range(12):
            assert np.array_equal(s1.next_batch().indices, s2.next_batch().indices)

    def test_drop_remainder_keeps_partition(self):
        sampler = EpochSampler(10, 3, Rng(5, 1), drop_remainder=True)
        seen = [sampler.next_batch().indices for _ in range(3)]
        flat = np.concatenate(seen)
        assert len(np.unique(flat)) == 9  # remainder dropped within the epoch

    def test_pad_wraps(self):
        sampler = EpochSampler(5, 3, Rng(5, 1), drop_remainder=False)
        first = sampler.next_batch().indices
        second = sampler.next_batch().indices
        assert second.size == 3
        assert len(np.unique(second)) == 3

    def test_batch_larger_than_n_rejected(self):
        with pytest.raises(BatchError):
            EpochSampler(4, 5, Rng(0, 0))


class TestProjection:
    def test_identity_without_box(self):
        p = make_problem("logistic", SEED)
        theta = np.full(p.dim, 5.0)
        theta[1] = -5.0
        assert p.project(theta) is theta

    def test_clamps_to_box(self):
        p = QuadraticProblem(seed=1, dim=2, n_samples=4, box_radius=1.0)
        assert np.array_equal(p.project(np.array([5.0, -5.0])), [1.0, -1.0])

    def test_interior_point_unchanged(self):
        p = QuadraticProblem(seed=1, dim=2, n_samples=4, box_radius=1.0)
        assert np.array_equal(p.project(np.array([0.5, 0.2])), [0.5, 0.2])

    def test_box_requires_lo_below_hi(self):
        with pytest.raises(ProblemError):
            Problem(2, 1, SmoothnessMeta(1, 1, 0),
                    feasible_box=(np.array([1.0, 0.0]), np.array([0.0, 1.0])))


def _box_samples(problem, rng, count):
    if problem.feasible_box is not None:
        lo, hi = problem.feasible_box
        return rng.uniform(size=(count, problem.dim)) * (hi - lo) + lo
    scale = np.linalg.norm(problem.start_point()) + 1.0
    return scale * rng.normal((count, problem.dim))


class TestMetadataInvariants:
    def test_per_sample_average_matches_full(self, problem):
        rng = Rng(99, 0)
        for theta in _box_samples(problem, rng, 20):
            mean = problem.per_sample_gradients(theta).mean(axis=0)
            full = problem.full_gradient(theta)
            assert np.linalg.norm(mean - full) <= 1e-12 * (1 + np.linalg.norm(full))

    def test_partition_unbiasedness(self, problem):
        b = max(1, problem.n_samples // 4)
        n_used = (problem.n_samples // b) * b
        theta = problem.start_point()
        sampler = problem.sampler(b, Rng(3, 0))
        acc = np.zeros(problem.dim)
        batches = []
        for _ in range(n_used // b):
            batch = sampler.next_batch()
            batches.append(batch.indices)
            acc += problem.minibatch_gradient(theta, batch) * (b / n_used)
        used = np.sort(np.concatenate(batches))
        full = problem.per_sample_gradients(theta)[used].mean(axis=0)
        assert np.linalg.norm(acc - full) <= 1e-12 * (1 + np.linalg.norm(full))

    def test_variance_bound(self, problem):
        rng = Rng(41, 0)
        worst = 0.0
        for theta in _box_samples(problem, rng, 1000):
            grads = problem.per_sample_gradients(theta)
            dev = np.linalg.norm(grads - grads.mean(axis=0), axis=1).max()
            worst = max(worst, float(dev))
        assert worst <= problem.meta.sigma

    def test_smoothness_witness(self, problem):
        rng = Rng(43, 0)
        a = _box_samples(problem, rng, 1000)
        b = _box_samples(problem, rng, 1000)
        for x, y in zip(a, b):
            lhs = np.linalg.norm(problem.full_gradient(x) - problem.full_gradient(y))
            assert lhs <= problem.meta.L * np.linalg.norm(x - y) * (1 + 1e-9)

    def test_gradient_matches_finite_differences(self, problem):
        rng = Rng(47, 0)
        for theta in _box_samples(problem, rng, 10):
            fd = central_difference_gradient(problem.loss, theta)
            g = problem.full_gradient(theta)
            assert np.linalg.norm(g - fd) <= 1e-5 * (1 + np.linalg.norm(g))

    def test_sigma_within_twice_g(self, problem):
        assert problem.meta.sigma <= 2 * problem.meta.G + 1e-12

    def test_fast_minibatch_path_matches_default(self, problem):
        theta = problem.start_point()
        idx = np.arange(0, problem.n_samples, 2)
        batch = MiniBatch(indices=idx)
        fast = problem.minibatch_gradient(theta, batch)
        slow = problem.per_sample_gradients(theta)[idx].mean(axis=0)
        assert np.allclose(fast, slow, atol=1e-12 * (1 + np.abs(slow).max()))


class TestRegistry:
    def test_names(self):
        assert problem_names() == ("logistic", "mlp", "quadratic", "rosenbrock")

    def test_unknown_rejected(self):
        with pytest.raises(ProblemError):
            make_problem("cifar", 0)

    def test_instances_cached(self):
        assert make_problem("quadratic", SEED) is make_problem("quadratic", SEED)

    def test_params_thread_through(self):
        p = make_problem("quadratic", 5, {"dim": 3, "n_samples": 6})
        assert p.dim == 3 and p.n_samples == 6

    def test_batch_losses_average_to_loss(self, problem):
        theta = problem.start_point()
        full = MiniBatch(indices=np.arange(problem.n_samples))
        assert problem.batch_loss(theta, full) == pytest.approx(
            problem.loss(theta), rel=1e-12, abs=1e-12
        )
