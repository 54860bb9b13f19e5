"""Dense float64 vector arithmetic and deterministic random streams.

Vectors are plain 1-D ``numpy.ndarray`` objects with ``dtype=float64``;
the helpers here add the dimension checks and (optional) finiteness
verification that the rest of the library relies on.  Randomness is
counter-based (Philox) so that a ``(seed, stream_id)`` pair identifies a
stream reproducibly across runs, platforms, and worker threads.
"""

from __future__ import annotations

import os
from typing import Sequence, Union

import numpy as np

Vector = np.ndarray
ArrayLike = Union[Sequence[float], np.ndarray]


class LinalgError(ValueError):
    """Base class for vector arithmetic errors."""


class DimensionMismatchError(LinalgError):
    """Raised when a binary operation receives vectors of unequal dimension."""


class NonFiniteError(LinalgError):
    """Raised in verify mode when an operation produces NaN or Inf."""


_VERIFY = os.environ.get("ACMO_VERIFY", "") not in ("", "0", "false")


def set_verify_mode(enabled: bool) -> None:
    """Toggle finiteness checking of library-produced vectors."""
    global _VERIFY
    _VERIFY = bool(enabled)


def verify_mode() -> bool:
    return _VERIFY


def as_vector(values: ArrayLike) -> Vector:
    """Coerce ``values`` to a 1-D float64 vector of dimension >= 1."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1:
        raise LinalgError(f"expected a 1-D vector, got shape {x.shape}")
    if x.size < 1:
        raise LinalgError("vectors must have dimension >= 1")
    return x


def _check_dims(x: Vector, y: Vector, op: str) -> None:
    if x.shape != y.shape:
        raise DimensionMismatchError(
            f"{op}: dimension mismatch {x.shape[0]} vs {y.shape[0]}"
        )


def assert_all_finite(x: ArrayLike, context: str = "vector") -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{context} contains NaN or Inf")


def axpy(a: float, x: Vector, y: Vector) -> Vector:
    """Return ``a * x + y`` elementwise."""
    _check_dims(x, y, "axpy")
    if not np.isfinite(a):
        raise LinalgError(f"axpy: scale factor must be finite, got {a!r}")
    out = a * x + y
    if _VERIFY:
        assert_all_finite(out, "axpy result")
    return out


def l2_norm(x: Vector) -> float:
    """Euclidean norm ``sqrt(sum(x_i^2))``; exactly 0 iff x == 0."""
    return float(np.linalg.norm(x))


def dot(x: Vector, y: Vector) -> float:
    """Inner product ``sum(x_i * y_i)``."""
    _check_dims(x, y, "dot")
    return float(np.dot(x, y))


class Rng:
    """Counter-based random stream identified by ``(seed, stream_id)``.

    Streams with distinct ids derived from the same seed are independent
    by construction (Philox keying), which makes per-trajectory streams
    safe to hand out to concurrent workers.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        bits = np.uint64(0xFFFFFFFFFFFFFFFF)
        key = [np.uint64(self.seed) & bits, np.uint64(self.stream_id) & bits]
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, index: int) -> "Rng":
        """Child stream with an id mixed from this stream's id and ``index``."""
        mixed = (self.stream_id * 1000003 + int(index) + 1) % (1 << 63)
        return Rng(self.seed, mixed)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"
