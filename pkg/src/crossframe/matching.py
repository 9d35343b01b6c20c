"""Pairwise matching costs, argmax correspondences, and track assembly.

Correspondence between two frames is read off a row-stochastic cost built
from their descriptor rows: softmax over target positions of the scaled
descriptor inner products. Tracks are the per-frame argmax targets of the
first-frame start points, mapped to pixel space at patch centers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class PointSet:
    """N points as (x, y) pairs attached to one frame.

    Coordinates are latent-resolution for the matching operations; synthetic
    data hands out pixel-resolution sets which are snapped to latent cells
    first (bounds are validated by each consumer against its own grid).
    """

    points: np.ndarray  # (N, 2) float, columns (x, y)
    frame: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 1:
            raise ValueError(f"points must be (N>=1, 2), got {self.points.shape}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class MatchingCost:
    """Row-stochastic hw x hw cost from a source frame to a target frame."""

    data: np.ndarray  # (hw, hw) float64, rows sum to 1
    height: int
    width: int
    source_frame: int = 0
    target_frame: int = 1
    timestep: int | None = None
    layer: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        hw = self.height * self.width
        if self.data.shape != (hw, hw):
            raise ValueError(f"cost shape {self.data.shape} != ({hw}, {hw})")


@dataclass
class TrackSet:
    """Pixel-space trajectories (F, N, 2) with a per-frame visibility mask."""

    tracks: np.ndarray      # (F, N, 2) float, columns (x, y)
    visibility: np.ndarray  # (F, N) bool
    height: int
    width: int

    def __post_init__(self):
        self.tracks = np.asarray(self.tracks, dtype=np.float64)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.tracks.ndim != 3 or self.tracks.shape[2] != 2:
            raise ValueError(f"tracks must be (F, N, 2), got {self.tracks.shape}")
        if self.visibility.shape != self.tracks.shape[:2]:
            raise ValueError(
                f"visibility shape {self.visibility.shape} != {self.tracks.shape[:2]}"
            )

    @property
    def frames(self) -> int:
        return self.tracks.shape[0]

    @property
    def count(self) -> int:
        return self.tracks.shape[1]

    def validate_in_bounds(self) -> None:
        vis = self.visibility
        x = self.tracks[..., 0][vis]
        y = self.tracks[..., 1][vis]
        if len(x) and (x.min() < 0 or x.max() >= self.width or y.min() < 0 or y.max() >= self.height):
            raise ValueError("visible track points fall outside the frame")


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def matching_cost(
    d_first: np.ndarray,
    d_target: np.ndarray,
    scale_dim: int | None = None,
    source_frame: int = 0,
    target_frame: int = 1,
    height: int | None = None,
    width: int | None = None,
    timestep: int | None = None,
    layer: int | None = None,
) -> MatchingCost:
    """Softmax-over-targets cost between two frames' descriptor rows.

    Both inputs are (hw, d_desc); the softmax temperature is sqrt(scale_dim),
    defaulting to the descriptor dimension. Text tokens never enter here.
    """
    d_first = np.asarray(d_first, dtype=np.float64)
    d_target = np.asarray(d_target, dtype=np.float64)
    if d_first.ndim != 2 or d_first.shape != d_target.shape:
        raise ValueError(f"descriptor shapes differ: {d_first.shape} vs {d_target.shape}")
    dim = scale_dim if scale_dim is not None else d_first.shape[1]
    cost = _softmax_rows(d_first @ d_target.T / np.sqrt(dim))
    if height is None or width is None:
        hw = d_first.shape[0]
        side = int(round(np.sqrt(hw)))
        if side * side != hw:
            raise ValueError("non-square grid: pass height and width explicitly")
        height, width = side, side
    return MatchingCost(cost, height, width, source_frame, target_frame, timestep, layer)


def bidirectional_cost(forward: MatchingCost, reverse: MatchingCost) -> MatchingCost:
    """Average a forward cost with the transposed reverse cost, then renormalize rows."""
    if forward.data.shape != reverse.data.shape:
        raise ValueError(
            f"cost shapes differ: {forward.data.shape} vs {reverse.data.shape}"
        )
    merged = 0.5 * (forward.data + reverse.data.T)
    merged = merged / merged.sum(axis=1, keepdims=True)
    return MatchingCost(
        merged, forward.height, forward.width, forward.source_frame,
        forward.target_frame, forward.timestep, forward.layer,
    )


def argmax_correspondence(cost: MatchingCost, starts: PointSet) -> PointSet:
    """Flat-argmax target position for each integer-latent start point.

    Ties resolve to the smallest flat (row-major) index. Returns latent
    (x, y) coordinates on the cost's target frame.
    """
    if len(starts) == 0:
        raise ValueError("starts is empty")
    pts = starts.points
    if not np.allclose(pts, np.round(pts)):
        raise ValueError("starts must be integer latent coordinates")
    xs = pts[:, 0].astype(int)
    ys = pts[:, 1].astype(int)
    if (xs < 0).any() or (xs >= cost.width).any() or (ys < 0).any() or (ys >= cost.height).any():
        raise ValueError(f"starts outside {cost.height}x{cost.width} latent grid")
    rows = ys * cost.width + xs
    flat = np.argmax(cost.data[rows], axis=1)
    out = np.stack([flat % cost.width, flat // cost.width], axis=1).astype(np.float64)
    return PointSet(out, frame=cost.target_frame)


def latent_to_pixel(points: np.ndarray, patch: int) -> np.ndarray:
    """Patch-center pixel coordinates of latent cells: pixel = latent*p + (p-1)/2."""
    return np.asarray(points, dtype=np.float64) * patch + (patch - 1) / 2.0


def pixel_to_latent(points: np.ndarray, patch: int, height: int, width: int) -> np.ndarray:
    """Snap pixel coordinates to the nearest integer latent cell, clipped in-bounds."""
    latent = np.round((np.asarray(points, dtype=np.float64) - (patch - 1) / 2.0) / patch)
    latent[:, 0] = np.clip(latent[:, 0], 0, width - 1)
    latent[:, 1] = np.clip(latent[:, 1], 0, height - 1)
    return latent


def assemble_track(
    starts: PointSet,
    matches: Sequence[PointSet],
    patch: int,
    temporal_ratio: int,
    frames: int,
    height: int,
    width: int,
) -> TrackSet:
    """Build pixel-space tracks from latent-space matches.

    `matches` holds one PointSet per latent frame after the first. Latent
    coordinates map to pixels at patch centers. With temporal_ratio q == 1
    every video frame is an anchor; with q > 1 the anchors sit q frames
    apart and intermediate coordinates are linearly interpolated. Frame 0 is
    pinned to the mapped starts.
    """
    if patch < 1 or temporal_ratio < 1:
        raise ValueError("patch and temporal_ratio must be >= 1")
    n = len(starts)
    for m in matches:
        if len(m) != n:
            raise ValueError("all frames must carry the same number of points")
    n_latent = 1 + len(matches)
    expected = (n_latent - 1) * temporal_ratio + 1
    if frames != expected:
        raise ValueError(
            f"frame count {frames} incompatible with {n_latent} latent frames at q={temporal_ratio}"
        )
    anchors = np.stack(
        [latent_to_pixel(starts.points, patch)]
        + [latent_to_pixel(m.points, patch) for m in matches]
    )  # (n_latent, N, 2)
    if temporal_ratio == 1:
        tracks = anchors
    else:
        tracks = np.empty((frames, n, 2))
        anchor_frames = np.arange(n_latent) * temporal_ratio
        ts = np.arange(frames)
        for axis in range(2):
            for point in range(n):
                tracks[:, point, axis] = np.interp(
                    ts, anchor_frames, anchors[:, point, axis]
                )
        tracks[0] = anchors[0]
    visibility = np.ones((frames, n), dtype=bool)
    return TrackSet(tracks, visibility, height, width)
