import numpy as np
import pytest

from acmo.config import ExperimentConfig
from acmo.harness import run_experiment
from acmo.problems import Problem, SmoothnessMeta

SEED = 20260811


def make_config(**overrides) -> ExperimentConfig:
    data = {
        "problem": {"name": "quadratic", "seed": SEED},
        "optimizer": {"name": "acmo"},
        "schedule": {"mode": "theory"},
        "iterations": 100,
        "batch_size": 8,
        "seed": 1,
    }
    data.update(overrides)
    return ExperimentConfig(**data)


@pytest.fixture
def experiment():
    """Factory fixture: build a config from overrides and run it in-process."""

    def run(**overrides):
        return run_experiment(make_config(**overrides), emit_artifacts=False)

    return run


class ZeroProblem(Problem):
    """Constant objective; every gradient is exactly zero."""

    name = "zero"

    def __init__(self, dim=3, n_samples=4):
        super().__init__(dim, n_samples, SmoothnessMeta(L=1.0, G=1.0, sigma=0.0, f_star=0.0))

    def loss(self, theta):
        return 0.0

    def batch_loss(self, theta, batch):
        return 0.0

    def full_gradient(self, theta):
        return np.zeros(self.dim)

    def per_sample_gradients(self, theta):
        return np.zeros((self.n_samples, self.dim))

    def start_point(self):
        return np.ones(self.dim)


class ScalarQuadratic(Problem):
    """f(x) = x^2 / 2 in one dimension (single sample)."""

    name = "scalar_quadratic"

    def __init__(self):
        super().__init__(1, 1, SmoothnessMeta(L=1.0, G=10.0, sigma=0.0, f_star=0.0))

    def loss(self, theta):
        return float(0.5 * theta[0] ** 2)

    def batch_loss(self, theta, batch):
        return self.loss(theta)

    def full_gradient(self, theta):
        return theta.copy()

    def per_sample_gradients(self, theta):
        return theta[None, :].copy()

    def start_point(self):
        return np.array([1.0])
