"""Per-iteration trajectory log shared by the runner and the diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from acmo.linalg import Vector


@dataclass
class TrajectoryRecord:
    """Rows cover the update steps ``t = 1..T-1`` of a run visiting iterates
    ``theta_1 .. theta_T`` (row index ``t - 1``).

    ``loss``/``grad_norm`` refer to the full objective at ``theta_t``;
    ``minibatch_loss``/``g_norm`` to the sampled batch.  When full-metric
    logging is disabled those two columns hold NaN.  ``thetas`` (when
    stored) covers all of ``theta_1 .. theta_T``; ``iterations`` counts the
    step rows, i.e. ``T - 1``.
    """

    optimizer: str
    mode: str
    iterations: int
    t: np.ndarray
    loss: np.ndarray
    minibatch_loss: np.ndarray
    grad_norm: np.ndarray
    g_norm: np.ndarray
    beta_hat: np.ndarray
    mhat_norm: np.ndarray
    alpha: np.ndarray
    wall_ns: np.ndarray
    final_theta: Vector
    output_index: int
    projected_steps: int = 0
    thetas: Optional[np.ndarray] = None
    grads: Optional[np.ndarray] = None
    mhats: Optional[np.ndarray] = None
    psi_coefs: Optional[np.ndarray] = None
    batches: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        n = self.iterations
        for name in ("t", "loss", "minibatch_loss", "grad_norm", "g_norm",
                     "beta_hat", "mhat_norm", "alpha", "wall_ns"):
            col = getattr(self, name)
            if len(col) != n:
                raise ValueError(f"column {name!r} has {len(col)} rows, expected {n}")
        if not np.all(np.diff(self.t) > 0):
            raise ValueError("iteration column must be strictly increasing")

    @property
    def n_steps(self) -> int:
        return self.iterations

    def has_stored_vectors(self) -> bool:
        return self.thetas is not None and self.grads is not None and self.mhats is not None
