"""Video <-> token-sequence plumbing for spatio-temporal scans.

Videos are (T, C, H, W). A scan order is spatial-first: every frame is read
completely before the next one, pixels in row-major order (forward) or its
exact reversal (reverse), frames in forward or reversed time. The four flips
realize the four orders on top of the forward/forward flatten, so a single
weight-shared pipeline can see all four directions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, as_tensor, flip as tensor_flip, take


class ScanOrder(enum.IntEnum):
    SPATIAL_FWD_TEMPORAL_FWD = 0
    SPATIAL_FWD_TEMPORAL_REV = 1
    SPATIAL_REV_TEMPORAL_FWD = 2
    SPATIAL_REV_TEMPORAL_REV = 3

    @property
    def temporal_reversed(self) -> bool:
        return bool(self & 1)

    @property
    def spatial_reversed(self) -> bool:
        return bool(self & 2)


# flip index -> axes of a (T, C, H, W) video
_FLIP_AXES = {0: (), 1: (0,), 2: (2, 3), 3: (0, 2, 3)}


@dataclass(frozen=True)
class ScanLayout:
    """Bijection between grid positions (t, y, x) and sequence positions.

    ``forward_index[g]`` is the sequence position of flat grid position ``g``;
    ``inverse_index[s]`` is the grid position read at sequence position ``s``.
    """

    grid: tuple[int, int, int]
    order: ScanOrder
    forward_index: np.ndarray
    inverse_index: np.ndarray

    @classmethod
    def build(cls, T: int, H: int, W: int, order: ScanOrder) -> "ScanLayout":
        order = ScanOrder(order)
        grid = np.arange(T * H * W).reshape(T, H, W)
        if order.temporal_reversed:
            grid = grid[::-1]
        if order.spatial_reversed:
            grid = grid[:, ::-1, ::-1]
        inverse = grid.reshape(-1).copy()
        forward = np.empty_like(inverse)
        forward[inverse] = np.arange(inverse.size)
        return cls((T, H, W), order, forward, inverse)

    def __len__(self) -> int:
        return self.inverse_index.size


def pad_frames(video, theta) -> Tensor:
    """Surround every frame with a one-pixel ring holding ``theta[c]``.

    ``theta`` has one value per channel, shared by all frames and border
    positions, so its adjoint is the sum of the output adjoint over the ring.
    """
    video, theta = as_tensor(video), as_tensor(theta)
    T, C, H, W = video.shape
    if H < 1 or W < 1:
        raise ValueError("frames must be at least 1x1")
    if theta.shape != (C,):
        raise ValueError(f"theta must have shape ({C},), got {theta.shape}")
    out = np.empty((T, C, H + 2, W + 2))
    out[...] = theta.data[None, :, None, None]
    out[:, :, 1:-1, 1:-1] = video.data

    def vjp(g):
        gv = g[:, :, 1:-1, 1:-1].copy()
        gt = g.sum(axis=(0, 2, 3)) - gv.sum(axis=(0, 2, 3))
        return gv, gt

    return Tensor.from_op(out, (video, theta), vjp)


def ring_mask(H: int, W: int) -> np.ndarray:
    """Boolean (H+2, W+2) mask of the padding ring."""
    mask = np.ones((H + 2, W + 2), dtype=bool)
    mask[1:-1, 1:-1] = False
    return mask


def crop_frames(video) -> Tensor:
    video = as_tensor(video)
    return video[:, :, 1:-1, 1:-1]


def flatten(video, order: ScanOrder = ScanOrder.SPATIAL_FWD_TEMPORAL_FWD) -> tuple[Tensor, ScanLayout]:
    """(T, C, H, W) -> tokens (T*H*W, C) read in ``order``."""
    video = as_tensor(video)
    T, C, H, W = video.shape
    layout = ScanLayout.build(T, H, W, order)
    grid_tokens = video.transpose(0, 2, 3, 1).reshape(T * H * W, C)
    if layout.order == ScanOrder.SPATIAL_FWD_TEMPORAL_FWD:
        return grid_tokens, layout
    return take(grid_tokens, layout.inverse_index, axis=0), layout


def unflatten(tokens, layout: ScanLayout) -> Tensor:
    tokens = as_tensor(tokens)
    T, H, W = layout.grid
    C = tokens.shape[1]
    if layout.order != ScanOrder.SPATIAL_FWD_TEMPORAL_FWD:
        tokens = take(tokens, layout.forward_index, axis=0)
    return tokens.reshape(T, H, W, C).transpose(0, 3, 1, 2)


def _check_branch(i: int) -> None:
    if i not in _FLIP_AXES:
        raise ValueError(f"flip index must be 0..3, got {i}")


def flip(video, i: int):
    """flip_0 identity, flip_1 time reversal, flip_2 180-degree spatial
    rotation, flip_3 both. Accepts a Tensor or an ndarray (returned as such)."""
    _check_branch(i)
    axes = _FLIP_AXES[i]
    if isinstance(video, Tensor):
        return video if not axes else tensor_flip(video, axes)
    video = np.asarray(video)
    return video.copy() if not axes else np.flip(video, axes).copy()


def unflip(video, i: int):
    """Inverse of :func:`flip`; every flip is an involution."""
    return flip(video, i)


def compose_flips(i: int, j: int) -> int:
    """Index of flip_i o flip_j (the group is Z2 x Z2)."""
    _check_branch(i)
    _check_branch(j)
    return i ^ j
