import math

import numpy as np
import pytest

from acmo.diagnostics import (
    DiagnosticsError,
    adagrad_projection_decomposition,
    central_difference_gradient,
    check_surrogate_optimality,
    check_shifted_iterate_identity,
    check_moment_norm_sandwich,
    check_sufficient_descent,
    check_convergence_bound,
    default_coefficient_grid,
    default_index_values,
    fit_rate,
    jacobi_eigh,
    min_so_far,
    psd_sqrt,
    sweep_scalar_inequalities,
)
from acmo.harness import run_trajectory
from acmo.linalg import Rng
from acmo.optimizers import AcmoOptimizer, make_optimizer
from acmo.schedules import AlphaSchedule, ScheduleSet
from conftest import ScalarQuadratic, ZeroProblem, make_config

SEED = 20260811


def run_raw(problem, sched, **overrides):
    cfg = make_config(**overrides)
    opt = make_optimizer(cfg.optimizer.name, problem.dim, cfg.optimizer.params)
    return run_trajectory(problem, opt, sched, cfg, trial=0)[0]


class TestMomentSandwichCheck:
    def test_passes_on_theory_run(self, experiment):
        result = experiment(checks=["moment_sandwich"], iterations=500)
        (report,) = result.trials[0].reports
        assert not report.violated
        assert report.n_steps == 499  # iterations=500 -> 499 steps

    def test_zero_gradient_rows_have_zero_slack(self):
        problem = ZeroProblem()
        sched = ScheduleSet.theory(l_hat=1.0, sigma=0.0)
        traj = run_raw(problem, sched, iterations=5, batch_size=2)
        report = check_moment_norm_sandwich(traj, sched)
        assert not report.violated
        assert np.allclose(report.per_step_slack, 0.0, atol=1e-15)

    def test_hand_oracle_second_step(self):
        # two practical steps with g1=(1,0), g2=(0,1): ||m_2|| = 1.3454
        sched = ScheduleSet.practical(AlphaSchedule("constant", 0.1))
        opt = AcmoOptimizer(2)
        from acmo.optimizers import StepInput

        theta = np.zeros(2)
        theta, _ = opt.step(StepInput(theta, np.array([1.0, 0.0]), 1), sched)
        theta, rec = opt.step(StepInput(theta, np.array([0.0, 1.0]), 2), sched)
        assert 0.1 - 1e-9 <= rec.mhat_norm <= 1.9 + 1e-9
        assert rec.mhat_norm == pytest.approx(1.3453623986, abs=1e-7)

    def test_rejects_non_acmo_trajectory(self, experiment):
        result = experiment(optimizer={"name": "adam"},
                            schedule={"mode": "practical",
                                      "alpha": {"kind": "constant", "alpha0": 1e-3}},
                            iterations=10)
        traj = result.trials[0].trajectory
        sched = ScheduleSet.practical(AlphaSchedule("constant", 1e-3))
        with pytest.raises(DiagnosticsError):
            check_moment_norm_sandwich(traj, sched)


class TestSufficientDescent:
    def test_one_step_closed_form(self):
        problem = ScalarQuadratic()
        sched = ScheduleSet.practical(AlphaSchedule("constant", 1.0), beta0=0.0)
        cfg = make_config(iterations=2, batch_size=1, store_vectors=True,
                          store_batches=True,
                          schedule={"mode": "practical",
                                    "alpha": {"kind": "constant", "alpha0": 1.0}})
        opt = make_optimizer("acmo", 1)
        traj, _, _ = run_trajectory(problem, opt, sched, cfg, trial=0)
        assert traj.thetas[1][0] == pytest.approx(0.0, abs=1e-15)
        report = check_sufficient_descent(problem, traj, sched)
        assert not report.violated
        # first step descends by exactly 0.5
        assert report.per_step_slack[0] == pytest.approx(0.5, abs=1e-9)

    def test_full_batch_quadratic_descends_every_step(self, experiment):
        from acmo.problems import make_problem

        problem = make_problem("quadratic", SEED)
        alpha0 = 1.0 / problem.meta.L
        result = experiment(
            schedule={"mode": "practical", "alpha": {"kind": "constant", "alpha0": alpha0}},
            iterations=200, batch_size=problem.n_samples,
            checks=["sufficient_descent"],
        )
        (report,) = result.trials[0].reports
        assert not report.violated

    def test_large_alpha_rejected(self):
        problem = ScalarQuadratic()
        sched = ScheduleSet.practical(AlphaSchedule("constant", 1.5), beta0=0.0)
        cfg = make_config(iterations=2, batch_size=1, store_vectors=True,
                          store_batches=True)
        opt = make_optimizer("acmo", 1)
        traj, _, _ = run_trajectory(problem, opt, sched, cfg, trial=0)
        with pytest.raises(DiagnosticsError, match="1/L"):
            check_sufficient_descent(problem, traj, sched)


class TestAuxiliaryOptimality:
    def test_residual_tiny_on_unconstrained_run(self, experiment):
        result = experiment(
            problem={"name": "quadratic", "seed": SEED, "params": {"box_radius": None}},
            schedule={"mode": "practical", "alpha": {"kind": "constant", "alpha0": 1e-3}},
            iterations=300, checks=["surrogate_optimality"],
        )
        (report,) = result.trials[0].reports
        assert not report.violated

    def test_rejects_clamped_trajectories(self):
        from acmo.problems import QuadraticProblem

        # singleton batches chase per-sample minimizers far outside the box
        problem = QuadraticProblem(seed=3, dim=2, n_samples=4, eig_min=1.0,
                                   eig_max=2.0, noise=1.0, box_radius=0.05,
                                   start_scale=10.0)
        sched = ScheduleSet.practical(AlphaSchedule("constant", 0.4))
        cfg = make_config(iterations=20, batch_size=1, store_vectors=True)
        opt = make_optimizer("acmo", 2)
        traj, _, _ = run_trajectory(problem, opt, sched, cfg, trial=0)
        assert traj.projected_steps > 0
        with pytest.raises(DiagnosticsError, match="projection"):
            check_surrogate_optimality(traj, sched)


class TestConstructedSequence:
    def test_zero_gradient_run_has_zero_residual(self):
        problem = ZeroProblem()
        sched = ScheduleSet.theory(l_hat=1.0, sigma=0.0)
        traj = run_raw(problem, sched, iterations=10, batch_size=2, store_vectors=True)
        report = check_shifted_iterate_identity(traj, sched)
        assert not report.violated
        assert np.allclose(report.per_step_slack, 1e-9, atol=1e-15)

    def test_theory_run_identity_holds(self, experiment):
        result = experiment(iterations=100, store_vectors=True,
                            checks=["shifted_iterate_identity"])
        (report,) = result.trials[0].reports
        assert not report.violated

    def test_residual_does_not_accumulate(self, experiment):
        worsts = []
        for T in (100, 200):
            result = experiment(iterations=T, store_vectors=True,
                                checks=["shifted_iterate_identity"])
            (report,) = result.trials[0].reports
            worsts.append(1e-9 - report.worst_slack)  # max relative residual
        assert worsts[1] <= 10 * max(worsts[0], 1e-15)

    def test_requires_stored_vectors(self, experiment):
        result = experiment(iterations=10)
        sched = ScheduleSet.theory(l_hat=310.0000004, sigma=89.4)
        with pytest.raises(DiagnosticsError, match="stored"):
            check_shifted_iterate_identity(result.trials[0].trajectory, sched)


class TestConvergenceBound:
    def test_zero_gradients_are_below_bound(self):
        problem = ZeroProblem()
        sched = ScheduleSet.theory(l_hat=1.0, sigma=0.0)
        traj = run_raw(problem, sched, iterations=50, batch_size=2)
        report = check_convergence_bound(traj, problem.meta, sched.alpha.alpha0)
        assert not report.violated

    def test_quadratic_theory_run(self, experiment):
        result = experiment(iterations=2000, checks=["convergence_bound"])
        (report,) = result.trials[0].reports
        assert not report.violated

    def test_practical_mode_rejected(self, experiment):
        result = experiment(
            schedule={"mode": "practical", "alpha": {"kind": "constant", "alpha0": 1e-3}},
            iterations=10,
        )
        from acmo.problems import make_problem

        with pytest.raises(DiagnosticsError):
            check_convergence_bound(result.trials[0].trajectory,
                                make_problem("quadratic", SEED).meta, 1e-3)


class TestDecomposition:
    def test_zero_displacement_all_terms_vanish(self):
        out = adagrad_projection_decomposition(
            [np.array([1.0, 0.0])], np.zeros(2), np.zeros(2), 0.5
        )
        assert (out.t1, out.t2, out.t3, out.t4) == (0.0, 0.0, 0.0, 0.0)
        assert out.bound_holds

    def test_scalar_equality_case(self):
        out = adagrad_projection_decomposition(
            [np.array([2.0])], np.array([1.0]), np.array([0.0]), 1.0
        )
        assert out.t2 == pytest.approx(1.0, abs=1e-12)
        assert out.t3 + out.t4 == pytest.approx(1.0, abs=1e-12)
        assert out.bound_holds

    def test_orthogonal_pair_matches_eigen_oracle(self):
        gs = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        x = np.array([1.0, 1.0])
        out = adagrad_projection_decomposition(gs, x, np.zeros(2), 1.0)
        gram = sum(np.outer(g, g) for g in gs)
        w, v = np.linalg.eigh(gram)
        root = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
        assert out.t2 == pytest.approx(float(x @ root @ x) / 2.0, abs=1e-12)
        assert out.t3 == pytest.approx(1.0, abs=1e-12)
        assert out.t4 == pytest.approx(0.25, abs=1e-12)

    def test_random_instances_match_numpy_root(self):
        rng = Rng(5, 0)
        for _ in range(20):
            t = int(rng.integers(1, 9))
            gs = [rng.normal(4) for _ in range(t)]
            x = rng.normal(4)
            theta_t = rng.normal(4)
            out = adagrad_projection_decomposition(gs, theta_t + x, theta_t, 0.7)
            gram = sum(np.outer(g, g) for g in gs)
            w, v = np.linalg.eigh(gram)
            root = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
            want = float(x @ root @ x) / (2 * 0.7)
            # sqrt amplifies eigenvalue noise to ~sqrt(eps) at rank deficiency
            assert out.t2 == pytest.approx(want, rel=1e-6, abs=1e-7)

    def test_minimizer_comparison_on_grid(self):
        # surrogate-with-penalty minimum <= matrix-surrogate minimum plus the
        # penalty evaluated at the matrix-surrogate's own minimizer
        rng = Rng(9, 0)
        grid = np.linspace(-3, 3, 121)
        xs, ys = np.meshgrid(grid, grid)
        points = np.stack([xs.ravel(), ys.ravel()], axis=1)
        for _ in range(5):
            gs = [rng.normal(2) for _ in range(3)]
            alpha = 0.9
            gram = sum(np.outer(g, g) for g in gs)
            root = psd_sqrt(gram)
            g_t = gs[-1]
            f_bar = points @ g_t + np.einsum("ij,jk,ik->i", points, root, points) / (2 * alpha)
            t4 = sum((points @ g) ** 2 for g in gs) / (8 * alpha)
            f_hat = points @ g_t + np.einsum("ij,ij->i", points, points) / (2 * alpha) + t4
            k_bar = int(np.argmin(f_bar))
            assert float(np.min(f_hat)) <= float(f_bar[k_bar] + t4[k_bar]) + 1e-9

    def test_dimension_cap(self):
        with pytest.raises(DiagnosticsError):
            adagrad_projection_decomposition([np.ones(9)], np.ones(9), np.zeros(9), 1.0)


class TestRateFit:
    def test_exact_power_law(self):
        ts = np.arange(1, 200)
        fit = fit_rate(ts, 1.0 / np.sqrt(ts))
        assert fit.slope == pytest.approx(-0.5, abs=1e-12)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)

    def test_constant_series(self):
        fit = fit_rate(np.arange(1, 50), np.full(49, 3.0))
        assert fit.slope == pytest.approx(0.0, abs=1e-12)

    def test_log_corrected_rate_lands_in_window(self):
        ts = np.unique(np.geomspace(10, 10**5, 200).astype(int)).astype(float)
        ys = (1.0 + np.log(ts)) / np.sqrt(ts)
        fit = fit_rate(ts, ys)
        assert -0.5 < fit.slope < -0.3

    def test_rejects_nonpositive(self):
        with pytest.raises(DiagnosticsError):
            fit_rate(np.arange(1, 20), np.linspace(-1, 1, 19))

    def test_rejects_short_series(self):
        with pytest.raises(DiagnosticsError):
            fit_rate([1, 2, 3], [1, 2, 3])

    def test_min_so_far_is_monotone(self):
        values = np.abs(np.sin(np.arange(50))) + 0.1
        msf = min_so_far(values)
        assert np.all(np.diff(msf) <= 0)
        assert np.all(msf <= values)


class TestJacobi:
    def test_matches_numpy_eigenvalues(self):
        rng = Rng(2, 0)
        for d in (1, 2, 3, 5, 8):
            m = rng.normal((d, d))
            a = 0.5 * (m + m.T)
            w, v = jacobi_eigh(a)
            assert np.allclose(np.sort(w), np.linalg.eigvalsh(a), atol=1e-9)
            assert np.allclose(v @ v.T, np.eye(d), atol=1e-9)
            assert np.allclose((v * w) @ v.T, a, atol=1e-9)

    def test_psd_sqrt_squares_back(self):
        rng = Rng(3, 0)
        m = rng.normal((4, 4))
        gram = m @ m.T
        root = psd_sqrt(gram)
        assert np.allclose(root @ root, gram, atol=1e-8)
        assert np.all(np.linalg.eigvalsh(root) >= -1e-10)

    def test_rejects_asymmetric(self):
        with pytest.raises(DiagnosticsError):
            jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestScalarInequalitySweep:
    def test_default_grid_passes(self):
        report = sweep_scalar_inequalities(
            i_values=np.concatenate([np.arange(2, 101), [10**4, 10**6]])
        )
        assert not report.violated
        assert report.worst_slack >= -1e-12

    def test_grid_shape(self):
        grid = default_coefficient_grid()
        assert grid.size == 200
        assert grid[0] == 0.0
        assert grid[1] == pytest.approx(1e-4)
        assert grid[-1] == pytest.approx(1.0 / 12.0)
        idx = default_index_values()
        assert idx[0] == 2 and idx[-1] == 10**6 and idx.size == 999 + 3

    def test_admissibility_restriction_is_load_bearing(self):
        # outside the admissible region the coupled inequalities genuinely fail
        i = 400.0
        b1, b2 = 0.0, 1.0 / 12.0
        ratio_next = math.sqrt((i + 1.0) / i)
        lead = (6.0 / math.sqrt(i + 2.0) + 1.0) * b2 / (ratio_next - b2)
        expr8 = -(lead - (1.0 / math.sqrt(i) + 1.0) / (1.0 - b1) + 1.0)
        assert expr8 < 0.0
        assert b2 > ratio_next * b1  # and indeed the pair is inadmissible

    def test_rejects_out_of_range_grid(self):
        with pytest.raises(DiagnosticsError):
            sweep_scalar_inequalities(beta_grid=np.array([0.0, 0.2]))


class TestCentralDifferences:
    def test_polynomial_gradient(self):
        f = lambda x: float(x[0] ** 3 + 2 * x[0] * x[1])
        got = central_difference_gradient(f, np.array([1.5, -2.0]))
        assert np.allclose(got, [3 * 1.5**2 - 4.0, 3.0], atol=1e-7)
