"""Angle-calibrated moment optimizer, baseline optimizers, and a numerical
verification harness for the method's descent and convergence guarantees."""

__version__ = "0.1.0"

from acmo.linalg import Rng, axpy, dot, l2_norm
from acmo.schedules import ScheduleSet, beta_hat

__all__ = ["Rng", "axpy", "dot", "l2_norm", "ScheduleSet", "beta_hat", "__version__"]
