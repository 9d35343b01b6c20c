"""Zero-shot point tracking over long videos via interleaved chunks.

Long videos are split into chunks that all contain the global first frame,
with the remaining slots filled by frames sampled at a uniform interval so
the temporal gap to the first frame stays small. Matching costs between the
first frame and every other frame are computed per chunk at one selected
(timestep, layer), averaged where chunks overlap, and turned into tracks by
argmax correspondence.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ditcore import (
    KIND_FEATURE,
    KIND_KEY,
    KIND_QUERY,
    make_text_tokens,
    noised_frames,
)
from .matching import (
    MatchingCost,
    PointSet,
    TrackSet,
    argmax_correspondence,
    assemble_track,
    bidirectional_cost,
    matching_cost,
)
from .metrics import (
    KIND_FEATURE_DESC,
    KIND_QUERY_KEY,
    PckThresholds,
    pck,
)

COVERAGE_MINIMAL = "minimal"
COVERAGE_OVERLAP = "overlap"


@dataclass(frozen=True)
class ChunkPlan:
    """Chunks of 1-based frame numbers, each beginning with global frame 1."""

    frames: int
    capacity: int
    interval: int
    chunks: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        for chunk in self.chunks:
            if chunk[0] != 1:
                raise ValueError("every chunk must start with global frame 1")
            if len(chunk) > self.capacity:
                raise ValueError(f"chunk {chunk} exceeds capacity {self.capacity}")
            rest = chunk[1:]
            if any(b <= a for a, b in zip(rest, rest[1:])):
                raise ValueError(f"chunk {chunk} frames must be strictly increasing")

    def multiplicity(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for chunk in self.chunks:
            for frame in chunk[1:]:
                counts[frame] = counts.get(frame, 0) + 1
        return counts

    def validate_coverage(self) -> None:
        counts = self.multiplicity()
        missing = [f for f in range(2, self.frames + 1) if f not in counts]
        if missing:
            raise ValueError(f"chunk plan leaves frames uncovered: {missing}")


def _round_half_up(num: int, den: int) -> int:
    return (2 * num + den) // (2 * den)


def plan_chunks(frames: int, capacity: int, stride: int = 1,
                mode: str = COVERAGE_MINIMAL) -> ChunkPlan:
    """Build the interleaved chunk decomposition of a video.

    The interval is Delta = max(1, round((frames-1)/(capacity-1))). A chunk
    at offset o holds {1} then {o, o+Delta, ...} clipped to the video and
    truncated to capacity-1 entries (keeping the final frame if truncation
    would drop it). Offsets start at 2 and step by `stride`; minimal mode
    stops once every frame is covered, overlap mode keeps sliding until an
    offset contributes no new frame. Both guarantee full coverage.
    """
    if frames < 2:
        raise ValueError("need at least 2 frames")
    if capacity < 2:
        raise ValueError("capacity must be >= 2")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if capacity >= frames + 1:
        return ChunkPlan(frames, capacity, 1, (tuple(range(1, frames + 1)),))

    interval = max(1, _round_half_up(frames - 1, capacity - 1))

    def build(offset: int) -> tuple[int, ...]:
        prog = list(range(offset, frames + 1, interval))
        if len(prog) > capacity - 1:
            kept = prog[: capacity - 1]
            if prog[-1] == frames and kept[-1] != frames:
                kept[-1] = frames  # keep the endpoint when truncation drops it
            prog = kept
        return (1, *prog)

    chunks: list[tuple[int, ...]] = []
    covered: set[int] = set()
    target = set(range(2, frames + 1))
    offset = 2
    while offset <= frames:
        if mode == COVERAGE_MINIMAL and covered >= target:
            break
        chunk = build(offset)
        new = set(chunk[1:]) - covered
        if mode == COVERAGE_OVERLAP and not new and covered >= target:
            break
        if mode == COVERAGE_MINIMAL and not new:
            offset += stride
            continue
        chunks.append(chunk)
        covered |= set(chunk[1:])
        offset += stride
    # Strides > 1 can skip residues entirely; cover any leftovers directly.
    missing = sorted(target - covered)
    while missing:
        chunk = build(missing[0])
        chunks.append(chunk)
        covered |= set(chunk[1:])
        missing = sorted(target - covered)

    plan = ChunkPlan(frames, capacity, interval, tuple(chunks))
    plan.validate_coverage()
    return plan


@dataclass(frozen=True)
class TrackerConfig:
    """Selected analysis cell plus chunking and matching options."""

    timestep: int
    layer: int
    bidirectional: bool = True
    temporal_ratio: int = 1
    capacity: int = 13
    stride: int = 1
    kind: str = KIND_QUERY_KEY
    coverage_mode: str = COVERAGE_MINIMAL
    renormalize_merged: bool = True
    text_len: int = 4
    text_seed: int = 0

    def __post_init__(self):
        if self.temporal_ratio < 1:
            raise ValueError("temporal_ratio must be >= 1")
        if self.kind not in (KIND_QUERY_KEY, KIND_FEATURE_DESC):
            raise ValueError(f"unknown matching kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "timestep": self.timestep, "layer": self.layer,
            "bidirectional": self.bidirectional, "temporal_ratio": self.temporal_ratio,
            "capacity": self.capacity, "stride": self.stride, "kind": self.kind,
            "coverage_mode": self.coverage_mode,
            "renormalize_merged": self.renormalize_merged,
            "text_len": self.text_len, "text_seed": self.text_seed,
        }


def _chunk_costs(model, config: TrackerConfig, frames: np.ndarray,
                 chunk: Sequence[int]) -> dict[int, MatchingCost]:
    """Costs from global frame 1 to every other frame of one chunk."""
    model.schedule.check_timestep(config.timestep, minimum=1)
    pixel_frames = frames[[g - 1 for g in chunk]]
    z0 = model.encode(pixel_frames)
    z_t = noised_frames(z0, config.timestep, model.schedule, frame_keys=list(chunk))
    text = make_text_tokens(config.text_len, model.channels, config.text_seed)
    if config.kind == KIND_QUERY_KEY:
        kinds = (KIND_QUERY, KIND_KEY)
    else:
        kinds = (KIND_FEATURE,)
    stacks, _ = model.capture_run(z_t, text, config.timestep, [config.layer], kinds)

    def rows(kind: str, position: int) -> np.ndarray:
        return stacks[(config.layer, kind)].frame_rows(position)

    h = z0.height
    w = z0.width
    out: dict[int, MatchingCost] = {}
    for position in range(1, len(chunk)):
        if config.kind == KIND_QUERY_KEY:
            src, tgt = rows(KIND_QUERY, 0), rows(KIND_KEY, position)
            rev_src, rev_tgt = rows(KIND_QUERY, position), rows(KIND_KEY, 0)
        else:
            src, tgt = rows(KIND_FEATURE, 0), rows(KIND_FEATURE, position)
            rev_src, rev_tgt = tgt, src
        cost = matching_cost(src, tgt, src.shape[1], 0, position, h, w,
                             timestep=config.timestep, layer=config.layer)
        if config.bidirectional:
            reverse = matching_cost(rev_src, rev_tgt, src.shape[1], position, 0, h, w,
                                    timestep=config.timestep, layer=config.layer)
            cost = bidirectional_cost(cost, reverse)
        out[chunk[position]] = cost
    return out


def merge_chunk_costs(per_chunk: Sequence[dict[int, MatchingCost]],
                      renormalize: bool = True) -> tuple[dict[int, MatchingCost], bool]:
    """Average per-chunk costs frame by frame.

    Each input maps a 1-based frame number to that chunk's cost from frame 1.
    Frames seen once pass through bit-identical; frames seen in several
    chunks get the elementwise mean, with rows renormalized to sum 1 when
    `renormalize` is set. Returns the merged costs and whether any
    renormalization happened.
    """
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    geometry: dict[int, MatchingCost] = {}
    for chunk_costs in per_chunk:
        for g, cost in chunk_costs.items():
            if g in sums:
                sums[g] += cost.data
                counts[g] += 1
            else:
                sums[g] = cost.data.copy()
                counts[g] = 1
                geometry[g] = cost
    renormalized = False
    merged: dict[int, MatchingCost] = {}
    for g in sorted(sums):
        data = sums[g] / counts[g]
        if counts[g] > 1 and renormalize:
            data = data / data.sum(axis=1, keepdims=True)
            renormalized = True
        ref = geometry[g]
        merged[g] = MatchingCost(data, ref.height, ref.width, 0, g - 1,
                                 ref.timestep, ref.layer)
    return merged, renormalized


def track_video(frames: np.ndarray, starts: PointSet, model,
                config: TrackerConfig) -> tuple[TrackSet, dict]:
    """Track first-frame start points through a pixel video.

    With temporal_ratio q > 1 only every q-th frame becomes a latent anchor
    and intermediate coordinates are interpolated at assembly; the default
    q = 1 maps every frame to its own latent and performs no interpolation.
    Overlapping chunk costs are averaged per frame (and row-renormalized when
    any frame was seen more than once, recorded in the returned metadata).
    """
    frames = np.asarray(frames, dtype=np.float32)
    F, H, W = frames.shape
    q = config.temporal_ratio
    if q > 1 and (F - 1) % q != 0:
        raise ValueError(f"{F} frames incompatible with temporal_ratio {q}")
    anchor_idx = list(range(0, F, q))
    anchors = frames[anchor_idx]
    n_latent = len(anchor_idx)

    plan = plan_chunks(n_latent, config.capacity, config.stride, config.coverage_mode)
    per_chunk = [_chunk_costs(model, config, anchors, chunk) for chunk in plan.chunks]
    merged, renormalized = merge_chunk_costs(per_chunk, config.renormalize_merged)
    matches = [argmax_correspondence(merged[g], starts)
               for g in range(2, n_latent + 1)]

    tracks = assemble_track(starts, matches, model.patch, q, F, H, W)
    meta = {
        "tracker": config.to_dict(),
        "chunks": [list(c) for c in plan.chunks],
        "interval": plan.interval,
        "renormalized_after_merge": renormalized,
    }
    return tracks, meta


def evaluate_tracking(est: TrackSet, gt: TrackSet,
                      thresholds: PckThresholds = PckThresholds()) -> dict[str, float]:
    """Per-threshold accuracy table for an estimated track set."""
    if est.count != gt.count:
        raise ValueError(f"point count mismatch: est {est.count} vs gt {gt.count}")
    result = pck(est, gt, thresholds)
    if result is None:
        raise ValueError("ground truth has no visible points to evaluate")
    table = {label: float(v) for label, v in zip(thresholds.labels(), result.per_delta)}
    table["delta_avg"] = result.average
    return table


def evaluation_csv(table: dict[str, float], header_comment: str = "") -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    columns = [k for k in table if k != "delta_avg"] + ["delta_avg"]
    writer.writerow(columns)
    writer.writerow([repr(table[c]) for c in columns])
    return buf.getvalue()
