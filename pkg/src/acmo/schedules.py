"""Time-indexed hyperparameter schedules.

A :class:`ScheduleSet` bundles the step size, the moment coefficient and
the denominator perturbation, in one of two regimes:

* ``practical`` -- defaults used for training runs (constant ``beta = 0.9``,
  tiny constant ``delta``), any step-size kind.
* ``theory`` -- the regime under which the convergence guarantee holds.
  Construction validates ``beta <= 1/50``, ``delta >= sigma`` and an
  inverse-square-root step size with ``alpha0 <= 3 / (4 * L + 1240)``
  against a caller-supplied smoothness bound ``l_hat >= L``.  The moment
  combiner in this regime caps growth of the calibration coefficient at
  ``sqrt(t / (t - 1))`` per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

THEORY_BETA_MAX = 1.0 / 50.0
PRACTICAL_BETA_DEFAULT = 0.9
PRACTICAL_DELTA_DEFAULT = 1e-8

ALPHA_KINDS = ("constant", "inv_sqrt", "step_decay")
MODES = ("practical", "theory")


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters or regime violations."""


def theory_alpha0_max(l_hat: float) -> float:
    """Largest admissible alpha0 for the theory regime given L-bound ``l_hat``."""
    if l_hat < 0 or not math.isfinite(l_hat):
        raise ScheduleError(f"l_hat must be finite and >= 0, got {l_hat!r}")
    return 3.0 / (4.0 * l_hat + 1240.0)


def beta_hat(beta_t: float, g_norm: float, mhat_prev_norm: float, delta_t: float) -> float:
    """Calibration coefficient ``beta_t * ||g|| / (||m_prev|| + delta)``.

    The denominator is zero only when both ``delta_t`` and the previous
    moment norm are zero, which is rejected as a configuration error.
    """
    if g_norm < 0 or mhat_prev_norm < 0 or delta_t < 0:
        raise ScheduleError("beta_hat arguments must be nonnegative")
    denom = mhat_prev_norm + delta_t
    if denom == 0.0:
        raise ScheduleError(
            "beta_hat denominator is zero: delta_t must be positive when the "
            "previous moment vanishes"
        )
    return beta_t * g_norm / denom


@dataclass(frozen=True)
class AlphaSchedule:
    """Step-size rule. ``factor``/``period`` are only used by ``step_decay``."""

    kind: str
    alpha0: float
    factor: float = 0.1
    period: int = 1

    def __post_init__(self):
        if self.kind not in ALPHA_KINDS:
            raise ScheduleError(f"unknown alpha kind {self.kind!r}; expected one of {ALPHA_KINDS}")
        if not (self.alpha0 > 0 and math.isfinite(self.alpha0)):
            raise ScheduleError(f"alpha0 must be positive and finite, got {self.alpha0!r}")
        if self.kind == "step_decay":
            if not (0 < self.factor <= 1):
                raise ScheduleError(f"step_decay factor must be in (0, 1], got {self.factor!r}")
            if self.period < 1:
                raise ScheduleError(f"step_decay period must be >= 1, got {self.period!r}")

    def value(self, t: int) -> float:
        if t < 1:
            raise ScheduleError(f"iteration index must be >= 1, got {t}")
        if self.kind == "constant":
            return self.alpha0
        if self.kind == "inv_sqrt":
            return self.alpha0 / math.sqrt(t)
        return self.alpha0 * self.factor ** ((t - 1) // self.period)


@dataclass(frozen=True)
class ScheduleSet:
    """Immutable bundle of (alpha, beta, delta) schedules plus the regime."""

    mode: str
    alpha: AlphaSchedule
    beta0: float
    delta0: float
    l_hat: Optional[float] = None
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScheduleError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not (0.0 <= self.beta0 <= 1.0):
            raise ScheduleError(f"beta0 must lie in [0, 1], got {self.beta0!r}")
        if self.delta0 < 0:
            raise ScheduleError(f"delta0 must be >= 0, got {self.delta0!r}")
        if self.mode == "theory":
            self._validate_theory()

    def _validate_theory(self) -> None:
        if self.l_hat is None:
            raise ScheduleError("theory mode requires a smoothness bound l_hat >= L")
        if self.beta0 > THEORY_BETA_MAX * (1 + 1e-12):
            raise ScheduleError(
                f"theory mode requires beta0 <= 1/50, got {self.beta0!r}"
            )
        if self.sigma is not None and self.delta0 < self.sigma * (1 - 1e-12):
            raise ScheduleError(
                f"theory mode requires delta0 >= sigma ({self.sigma!r}), got {self.delta0!r}"
            )
        if self.alpha.kind != "inv_sqrt":
            raise ScheduleError(
                "theory mode requires an inv_sqrt step size so that "
                "alpha_t <= 3 / ((4 L + 1240) sqrt(t)) for all t"
            )
        cap = theory_alpha0_max(self.l_hat)
        if self.alpha.alpha0 > cap * (1 + 1e-12):
            raise ScheduleError(
                f"theory mode requires alpha0 <= 3/(4*l_hat+1240) = {cap!r}, "
                f"got {self.alpha.alpha0!r}"
            )

    @staticmethod
    def practical(
        alpha: AlphaSchedule,
        beta0: float = PRACTICAL_BETA_DEFAULT,
        delta0: float = PRACTICAL_DELTA_DEFAULT,
    ) -> "ScheduleSet":
        return ScheduleSet(mode="practical", alpha=alpha, beta0=beta0, delta0=delta0)

    @staticmethod
    def theory(
        l_hat: float,
        sigma: float,
        alpha0: Optional[float] = None,
        beta0: float = THEORY_BETA_MAX,
        delta0: Optional[float] = None,
    ) -> "ScheduleSet":
        """Theory-regime schedule; ``alpha0`` defaults to its admissible maximum
        and ``delta0`` to ``max(1.01 * sigma, 1e-8)``."""
        if alpha0 is None:
            alpha0 = theory_alpha0_max(l_hat)
        if delta0 is None:
            delta0 = max(1.01 * sigma, 1e-8)
        return ScheduleSet(
            mode="theory",
            alpha=AlphaSchedule(kind="inv_sqrt", alpha0=alpha0),
            beta0=beta0,
            delta0=delta0,
            l_hat=l_hat,
            sigma=sigma,
        )

    def alpha_at(self, t: int) -> float:
        return self.alpha.value(t)

    def beta_at(self, t: int) -> float:
        if t < 1:
            raise ScheduleError(f"iteration index must be >= 1, got {t}")
        return self.beta0

    def delta_at(self, t: int) -> float:
        if t < 1:
            raise ScheduleError(f"iteration index must be >= 1, got {t}")
        return self.delta0

    def psi(self, beta_hat_t: float, beta_hat_prev: float, t: int) -> float:
        """Coefficient applied to the previous moment when forming the new one.

        Practical regime passes ``beta_hat_t`` through.  Theory regime returns
        ``min(beta_hat_t, sqrt(t / (t - 1)) * beta_hat_prev)`` for ``t >= 2``;
        at ``t = 1`` the cap is undefined and the value is ``beta_hat_t``
        (harmless: the initial moment is zero, so the term vanishes).
        """
        if t < 1:
            raise ScheduleError(f"iteration index must be >= 1, got {t}")
        if self.mode == "practical" or t == 1:
            return beta_hat_t
        return min(beta_hat_t, math.sqrt(t / (t - 1.0)) * beta_hat_prev)
