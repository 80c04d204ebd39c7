"""Numeric substrate: float64 arrays, keyed RNG streams and SGD with momentum."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DTYPE = np.float64


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class DivergenceError(FloatingPointError):
    """Raised when an optimisation produces a non-finite value."""


def check_finite(x, name="array"):
    x = np.asarray(x)
    if x.size and not np.all(np.isfinite(x)):
        raise ContractError(f"{name} contains NaN or Inf")
    return x


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """Counter-style random stream keyed by ``(seed, purpose, class, iteration)``.

    Two streams with the same seed and key always yield the same draws, no
    matter how many other streams were consumed before, so per-class work can
    be reordered or parallelised without changing results.
    """

    seed: int
    purpose: str = "root"
    class_id: int = -1
    iteration: int = -1

    def fork(self, purpose: str | None = None, class_id: int | None = None,
             iteration: int | None = None) -> "RngStream":
        return RngStream(
            self.seed,
            self.purpose if purpose is None else purpose,
            self.class_id if class_id is None else class_id,
            self.iteration if iteration is None else iteration,
        )

    def generator(self) -> np.random.Generator:
        # +1 keeps the -1 sentinels non-negative for SeedSequence.
        key = [
            int(self.seed) & 0xFFFFFFFFFFFFFFFF,
            _purpose_code(self.purpose),
            self.class_id + 1,
            self.iteration + 1,
        ]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def uniform(rng: RngStream, lo: float, hi: float, shape: Sequence[int]) -> np.ndarray:
    """Samples in ``[lo, hi)``, deterministic for a given stream key."""
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ContractError("uniform bounds must be finite")
    if lo >= hi:
        raise ContractError(f"uniform requires lo < hi, got lo={lo}, hi={hi}")
    return rng.generator().uniform(lo, hi, size=tuple(shape)).astype(DTYPE, copy=False)


@dataclass
class SgdState:
    learning_rate: float
    momentum: float
    velocity: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        self.velocity = np.asarray(self.velocity, dtype=DTYPE)

    @classmethod
    def zeros_like(cls, params, learning_rate, momentum):
        return cls(learning_rate, momentum, np.zeros(np.shape(params), dtype=DTYPE))


def sgd_step(params, grad, state: SgdState) -> np.ndarray:
    """One heavy-ball step: ``v <- m*v + g``; ``p <- p - lr*v``.

    ``state.velocity`` is updated in place; the new parameters are returned.
    """
    params = np.asarray(params, dtype=DTYPE)
    grad = np.asarray(grad, dtype=DTYPE)
    if params.shape != grad.shape or params.shape != state.velocity.shape:
        raise ContractError(
            f"shape mismatch: params {params.shape}, grad {grad.shape}, "
            f"velocity {state.velocity.shape}"
        )
    check_finite(params, "params")
    check_finite(grad, "grad")
    with np.errstate(over="ignore", invalid="ignore"):
        velocity = state.momentum * state.velocity + grad
        out = params - state.learning_rate * velocity
    if not np.all(np.isfinite(out)):
        raise DivergenceError("sgd_step produced non-finite parameters")
    state.velocity = velocity
    return out
