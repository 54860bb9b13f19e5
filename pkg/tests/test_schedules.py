import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acmo.schedules import (
    AlphaSchedule,
    ScheduleError,
    ScheduleSet,
    beta_hat,
    theory_alpha0_max,
)


class TestAlphaSchedules:
    def test_inv_sqrt(self):
        sched = AlphaSchedule(kind="inv_sqrt", alpha0=0.5)
        assert sched.value(4) == pytest.approx(0.25, abs=0)

    def test_step_decay_epoch_boundary(self):
        # 50-epoch period at 10 iterations per epoch: epoch 51 sees one decay
        sched = AlphaSchedule(kind="step_decay", alpha0=0.1, factor=0.1, period=500)
        t_in_epoch_51 = 505
        assert sched.value(t_in_epoch_51) == pytest.approx(0.01, rel=1e-15)
        assert sched.value(500) == pytest.approx(0.1, rel=1e-15)

    def test_theory_maximal_alpha0(self):
        assert theory_alpha0_max(10.0) == pytest.approx(3.0 / 1280.0, abs=0)
        assert theory_alpha0_max(10.0) == pytest.approx(0.00234375, abs=0)

    def test_constant(self):
        assert AlphaSchedule(kind="constant", alpha0=0.3).value(77) == 0.3

    def test_rejects_bad_kind(self):
        with pytest.raises(ScheduleError):
            AlphaSchedule(kind="cosine", alpha0=0.1)

    def test_rejects_nonpositive_alpha0(self):
        with pytest.raises(ScheduleError):
            AlphaSchedule(kind="constant", alpha0=0.0)

    @pytest.mark.parametrize("kind", ["inv_sqrt", "step_decay"])
    def test_non_increasing(self, kind):
        sched = AlphaSchedule(kind=kind, alpha0=0.2, factor=0.5, period=3)
        values = [sched.value(t) for t in range(1, 200)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert all(v > 0 for v in values)


class TestBetaHat:
    def test_zero_gradient(self):
        assert beta_hat(0.9, 0.0, 1.0, 1e-8) == 0.0

    def test_scalar_oracle(self):
        value = beta_hat(0.9, 1.0, 1.0, 1e-8)
        assert value == pytest.approx(0.9 / (1.0 + 1e-8), rel=1e-15)
        assert value == pytest.approx(0.899999991, abs=1e-9)

    def test_zero_denominator_rejected(self):
        with pytest.raises(ScheduleError):
            beta_hat(0.9, 1.0, 0.0, 0.0)

    def test_negative_inputs_rejected(self):
        with pytest.raises(ScheduleError):
            beta_hat(0.9, -1.0, 1.0, 1e-8)


def practical(beta0=0.9):
    return ScheduleSet.practical(AlphaSchedule(kind="constant", alpha0=0.1), beta0=beta0)


def theory(l_hat=10.0, sigma=1.0, **kw):
    return ScheduleSet.theory(l_hat=l_hat, sigma=sigma, **kw)


class TestPsi:
    def test_practical_passes_current_through(self):
        assert practical().psi(0.7, 0.1, 5) == 0.7

    def test_theory_cap_binds(self):
        value = theory().psi(0.02, 0.01, 2)
        assert value == pytest.approx(math.sqrt(2.0) * 0.01, rel=1e-15)
        assert value == pytest.approx(0.014142135623730951, rel=1e-12)

    def test_theory_min_picks_current(self):
        assert theory().psi(0.005, 0.01, 2) == 0.005

    def test_theory_first_step(self):
        assert theory().psi(0.33, 0.0, 1) == 0.33

    @given(
        st.floats(min_value=0, max_value=1 / 12, allow_nan=False),
        st.floats(min_value=0, max_value=1 / 12, allow_nan=False),
        st.integers(min_value=2, max_value=10**6),
    )
    @settings(max_examples=300)
    def test_theory_admissibility(self, bh_t, bh_prev, t):
        value = theory().psi(bh_t, bh_prev, t)
        assert value <= bh_t + 1e-15
        assert value <= math.sqrt(t / (t - 1.0)) * bh_prev + 1e-15


class TestTheoryValidation:
    def test_defaults_admit(self):
        sched = theory(l_hat=310.0, sigma=89.0)
        assert sched.alpha.alpha0 == pytest.approx(3.0 / (4 * 310.0 + 1240.0))
        assert sched.delta0 == pytest.approx(1.01 * 89.0)
        assert sched.beta0 == pytest.approx(1.0 / 50.0)

    def test_rejects_large_beta(self):
        with pytest.raises(ScheduleError, match="beta0"):
            theory(beta0=0.5)

    def test_rejects_small_delta(self):
        with pytest.raises(ScheduleError, match="delta0"):
            theory(sigma=2.0, delta0=1.0)

    def test_rejects_large_alpha0(self):
        with pytest.raises(ScheduleError, match="alpha0"):
            theory(l_hat=10.0, alpha0=0.1)

    def test_rejects_constant_alpha(self):
        with pytest.raises(ScheduleError, match="inv_sqrt"):
            ScheduleSet(
                mode="theory",
                alpha=AlphaSchedule(kind="constant", alpha0=1e-4),
                beta0=0.01,
                delta0=1.0,
                l_hat=10.0,
                sigma=0.5,
            )

    def test_rejects_missing_l_hat(self):
        with pytest.raises(ScheduleError, match="l_hat"):
            ScheduleSet(
                mode="theory",
                alpha=AlphaSchedule(kind="inv_sqrt", alpha0=1e-4),
                beta0=0.01,
                delta0=1.0,
            )

    def test_alpha_cap_holds_for_all_t(self):
        sched = theory(l_hat=50.0, sigma=0.3)
        cap = 3.0 / (4 * 50.0 + 1240.0)
        for t in (1, 2, 10, 1000, 10**6):
            assert sched.alpha_at(t) <= cap / math.sqrt(t) * (1 + 1e-12)
