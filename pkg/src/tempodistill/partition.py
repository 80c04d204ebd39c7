"""Temporal partitioning: uniform crop followed by interleave-repeat resize.

Videos are arrays shaped ``(L, H, W, C)``; batched variants accept a leading
batch axis and operate on axis ``-4``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import DTYPE, ContractError


def segment_bounds(L: int, a: int) -> list[tuple[int, int]]:
    """Split ``[0, L)`` into ``a`` contiguous segments using floor boundaries."""
    L, a = int(L), int(a)
    if not 1 <= a <= L:
        raise ContractError(f"temporal resolution a={a} must satisfy 1 <= a <= L={L}")
    return [((i * L) // a, ((i + 1) * L) // a) for i in range(a)]


def _segment_index(L: int, a: int) -> np.ndarray:
    # For every output frame t, the index of the segment containing it.
    idx = np.empty(L, dtype=np.intp)
    for i, (s, e) in enumerate(segment_bounds(L, a)):
        idx[s:e] = i
    return idx


def _check_video(video, L=None):
    video = np.asarray(video, dtype=DTYPE)
    if video.ndim < 4:
        raise ContractError(f"expected (..., L, H, W, C) array, got shape {video.shape}")
    if L is not None and video.shape[-4] != L:
        raise ContractError(f"expected temporal length {L}, got {video.shape[-4]}")
    return video


def crop(video, a: int) -> np.ndarray:
    """Keep the first frame of each of the ``a`` segments."""
    video = _check_video(video)
    L = video.shape[-4]
    starts = [s for s, _ in segment_bounds(L, a)]
    return np.take(video, starts, axis=-4)


@dataclass
class CompactVideo:
    """``a`` stored frames that expand to ``expand_len`` frames on use."""

    frames: np.ndarray
    expand_len: int

    def __post_init__(self):
        self.frames = _check_video(self.frames)
        if self.frames.ndim != 4:
            raise ContractError("CompactVideo frames must be (a, H, W, C)")
        if not 1 <= self.frames.shape[0] <= self.expand_len:
            raise ContractError(
                f"compact length {self.frames.shape[0]} exceeds expand_len {self.expand_len}"
            )

    @property
    def a(self) -> int:
        return self.frames.shape[0]


def expand_frames(frames, L: int) -> np.ndarray:
    """Repeat each of the ``a`` frames over its segment to reach length ``L``."""
    frames = _check_video(frames)
    a = frames.shape[-4]
    return np.take(frames, _segment_index(L, a), axis=-4)


def expand(compact: CompactVideo) -> np.ndarray:
    return expand_frames(compact.frames, compact.expand_len)


def expand_adjoint(grad_out, a: int) -> np.ndarray:
    """Vector-Jacobian product of :func:`expand_frames`: sum gradients per segment."""
    grad_out = _check_video(grad_out)
    L = grad_out.shape[-4]
    bounds = segment_bounds(L, a)
    g = np.moveaxis(grad_out, -4, 0)
    starts = np.array([s for s, _ in bounds])
    summed = np.add.reduceat(g, starts, axis=0)
    return np.moveaxis(summed, 0, -4)


def partition(video, a: int) -> np.ndarray:
    """``expand(crop(video, a))`` at the input's own temporal length."""
    video = _check_video(video)
    return expand_frames(crop(video, a), video.shape[-4])
