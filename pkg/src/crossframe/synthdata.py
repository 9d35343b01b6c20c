"""Synthetic videos with closed-form ground-truth motion, plus oracle doubles.

Scenes are rendered from procedural band-limited textures evaluated at
exact sub-pixel positions, so every ground-truth track is the analytic
motion of its start point rather than the output of any tracker. The module
also provides the content-coded descriptor doubles used to test matching
and tracking against construction-time known correspondences.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ditcore import (
    AttentionRecord,
    DescriptorStack,
    LatentVideo,
    NoiseSchedule,
    PatchEncoder,
    TextTokens,
    TokenLayout,
    KIND_ATTENTION,
    KIND_FEATURE,
    KIND_QUERY,
)
from .matching import PointSet, TrackSet, _softmax_rows

ANNOTATION_VERSION = 1

MOTION_KINDS = ("translate", "rotate", "scale", "camera-pan")


class SceneConstructionError(ValueError):
    """Raised when a spec's motion would carry content out of frame."""


class AnnotationError(ValueError):
    """Raised for malformed annotation files, with a field diagnostic."""


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic scene.

    translate moves textured sprite discs over a flat background;
    rotate / scale / camera-pan apply a global transform to a full-field
    texture. Motion is validated so tracked points never leave the frame.
    """

    motion: str = "translate"
    frames: int = 5
    height: int = 64
    width: int = 64
    sprites: int = 1
    velocity: tuple[float, float] = (8.0, 0.0)  # px/frame (translate, camera-pan)
    angle: float = 0.0                          # radians/frame (rotate)
    rate: float = 1.0                           # scale factor/frame (scale)
    sprite_radius: float = 14.0
    texture_seed: int = 0

    def __post_init__(self):
        if self.motion not in MOTION_KINDS:
            raise ValueError(f"unknown motion {self.motion!r}; expected {MOTION_KINDS}")
        if self.frames < 2:
            raise ValueError("a scene needs at least 2 frames")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["velocity"] = list(self.velocity)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "velocity" in d:
            d["velocity"] = tuple(d["velocity"])
        return cls(**d)


@dataclass(frozen=True)
class StartGrid:
    """Start-point sampling rule: object-grid over a mask, or a regular full grid.

    With snap_patch set, sampled points are snapped to the centers of that
    patch grid and deduplicated; this matches defining start points in
    latent resolution, where a point is a latent cell.
    """

    mode: str = "object-grid"
    fraction: float = 1.0 / 20.0  # object-grid spacing as a fraction of resolution
    full_points: int = 10         # full-grid emits full_points^2 points
    snap_patch: int | None = None

    def __post_init__(self):
        if self.mode not in ("object-grid", "full-grid"):
            raise ValueError(f"unknown grid mode {self.mode!r}")


def sample_starts(grid: StartGrid, mask: np.ndarray | None = None,
                  dims: tuple[int, int] | None = None) -> PointSet:
    """Sample start points in pixel space.

    full-grid places a full_points x full_points lattice of cell centers over
    the whole frame; object-grid lays a lattice with spacing fraction*(H, W)
    anchored at the mask's bounding box and keeps the points inside the mask.
    """
    if grid.mode == "full-grid":
        if dims is None:
            raise ValueError("full-grid sampling needs frame dims")
        H, W = dims
        n = grid.full_points
        ys = (np.arange(n) + 0.5) * H / n
        xs = (np.arange(n) + 0.5) * W / n
        gx, gy = np.meshgrid(xs, ys)
        points = np.stack([gx.ravel(), gy.ravel()], axis=1)
        return PointSet(_maybe_snap(points, grid, (H, W)), frame=0)

    if mask is None:
        raise ValueError("object-grid sampling needs a mask")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("object mask is empty")
    H, W = mask.shape
    step_y = H * grid.fraction
    step_x = W * grid.fraction
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    ys = np.arange(rows[0], rows[-1] + 1e-9, step_y)
    xs = np.arange(cols[0], cols[-1] + 1e-9, step_x)
    points = []
    for y in ys:
        for x in xs:
            if mask[int(round(y)), int(round(x))]:
                points.append((x, y))
    if not points:
        raise ValueError("no lattice point fell inside the mask")
    return PointSet(_maybe_snap(np.array(points, dtype=np.float64), grid, (H, W)),
                    frame=0)


def _maybe_snap(points: np.ndarray, grid: StartGrid,
                dims: tuple[int, int]) -> np.ndarray:
    if grid.snap_patch is None:
        return points
    from .matching import latent_to_pixel, pixel_to_latent

    H, W = dims
    p = grid.snap_patch
    cells = pixel_to_latent(points, p, H // p, W // p)
    snapped = latent_to_pixel(np.unique(cells, axis=0), p)
    return snapped


# ---------------------------------------------------------------------------
# Procedural textures and scene rendering
# ---------------------------------------------------------------------------


class _Texture:
    """Band-limited random-wave texture evaluated at exact float coordinates.

    The default band keeps wavelengths at or below the latent patch size, so
    adjacent patches decorrelate; smoother content would let a denoiser get
    away with same-frame neighborhood averaging instead of temporal matching.
    """

    def __init__(self, rng: np.random.Generator, waves: int = 12,
                 k_lo: float = 0.9, k_hi: float = 2.2, contrast: float = 0.9):
        theta = rng.uniform(0, 2 * np.pi, waves)
        kappa = rng.uniform(k_lo, k_hi, waves)
        self.kx = kappa * np.cos(theta)
        self.ky = kappa * np.sin(theta)
        self.phase = rng.uniform(0, 2 * np.pi, waves)
        amps = rng.uniform(0.5, 1.0, waves)
        self.amps = amps / amps.sum() * contrast

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        acc = np.zeros(np.broadcast(x, y).shape)
        for kx, ky, ph, a in zip(self.kx, self.ky, self.phase, self.amps):
            acc += a * np.cos(kx * x + ky * y + ph)
        return 0.5 + acc


def _smooth_disc(dist: np.ndarray, radius: float, edge: float = 1.5) -> np.ndarray:
    t = np.clip((radius - dist) / edge, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass
class Scene:
    """A rendered scene with its analytic ground truth."""

    scene_id: str
    spec: SceneSpec
    frames: np.ndarray        # (F, H, W) float32 in [0, 1]
    ground_truth: TrackSet
    text_seed: int = 0

    @property
    def starts(self) -> np.ndarray:
        return self.ground_truth.tracks[0]


def _motion_points(spec: SceneSpec, p0: np.ndarray) -> np.ndarray:
    """Closed-form positions (F, N, 2) of points starting at p0."""
    F = spec.frames
    cx, cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
    out = np.empty((F, len(p0), 2))
    for k in range(F):
        if spec.motion in ("translate", "camera-pan"):
            out[k] = p0 + k * np.asarray(spec.velocity)
        elif spec.motion == "rotate":
            a = k * spec.angle
            rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
            out[k] = (p0 - (cx, cy)) @ rot.T + (cx, cy)
        elif spec.motion == "scale":
            out[k] = (p0 - (cx, cy)) * spec.rate ** k + (cx, cy)
    return out


def generate(spec: SceneSpec, seed: int, grid: StartGrid | None = None,
             scene_id: str = "scene") -> tuple[np.ndarray, TrackSet]:
    """Render a scene and its analytic ground-truth tracks.

    Raises SceneConstructionError when the motion would move a sprite or any
    tracked point outside the frame; generated scenes therefore always carry
    an all-true visibility mask.
    """
    rng = np.random.default_rng([int(seed), spec.texture_seed])
    F, H, W = spec.frames, spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    if grid is None:
        grid = StartGrid("object-grid" if spec.motion == "translate" else "full-grid")

    if spec.motion == "translate":
        frames, mask = _render_sprites(spec, rng, xx, yy)
        starts = sample_starts(grid, mask=mask, dims=(H, W))
        tracks = _motion_points(spec, starts.points)
        if not _in_bounds(tracks, H, W).all():
            raise SceneConstructionError(
                f"{scene_id}: motion carries tracked points out of the {H}x{W} frame"
            )
    else:
        # global motions keep only start points whose whole trajectory stays
        # inside the frame, so visibility is all-true by construction
        frames = _render_global(spec, rng, xx, yy)
        starts = sample_starts(grid, mask=None, dims=(H, W))
        tracks = _motion_points(spec, starts.points)
        keep = _in_bounds(tracks, H, W).all(axis=0)
        if not keep.any():
            raise SceneConstructionError(
                f"{scene_id}: no start point survives the motion inside {H}x{W}"
            )
        tracks = tracks[:, keep]
    gt = TrackSet(tracks, np.ones(tracks.shape[:2], dtype=bool), H, W)
    return frames, gt


def _in_bounds(tracks: np.ndarray, height: int, width: int) -> np.ndarray:
    return ((tracks[..., 0] >= 0) & (tracks[..., 0] < width)
            & (tracks[..., 1] >= 0) & (tracks[..., 1] < height))


def generate_scene(spec: SceneSpec, seed: int, grid: StartGrid | None = None,
                   scene_id: str = "scene", text_seed: int | None = None) -> Scene:
    frames, gt = generate(spec, seed, grid, scene_id)
    return Scene(scene_id, spec, frames, gt,
                 text_seed=seed if text_seed is None else text_seed)


def _render_sprites(spec, rng, xx, yy):
    F, H, W = spec.frames, spec.height, spec.width
    v = np.asarray(spec.velocity)
    r = spec.sprite_radius
    total_motion = (F - 1) * v
    lo = np.maximum(r + 1.0, r + 1.0 - total_motion)        # (x, y) lower bounds
    hi = np.minimum((W - 1, H - 1), (W - 1, H - 1) - total_motion) - (r + 1.0)
    if (hi < lo).any():
        raise SceneConstructionError(
            f"velocity {tuple(v)} over {F} frames exceeds the {H}x{W} frame for radius {r}"
        )
    centers = []
    for _ in range(spec.sprites):
        for _ in range(200):
            c = rng.uniform(lo, hi)
            if all(np.hypot(*(c - other)) > 2 * r + 2 for other in centers):
                centers.append(c)
                break
        else:
            raise SceneConstructionError("could not place non-overlapping sprites")

    textures = [_Texture(rng) for _ in centers]
    background = 0.45  # near mid-gray so background latents carry little energy
    frames = np.full((F, H, W), background)
    for k in range(F):
        for c, tex in zip(centers, textures):
            pos = c + k * v
            dx = xx - pos[0]
            dy = yy - pos[1]
            window = _smooth_disc(np.hypot(dx, dy), spec.sprite_radius)
            frames[k] = np.where(window > 0, (1 - window) * frames[k] + window * tex(dx, dy), frames[k])
    mask = np.zeros((H, W), dtype=bool)
    for c in centers:
        mask |= np.hypot(xx - c[0], yy - c[1]) <= spec.sprite_radius - 1.0
    return np.clip(frames, 0.0, 1.0).astype(np.float32), mask


def _render_global(spec, rng, xx, yy):
    F, H, W = spec.frames, spec.height, spec.width
    tex = _Texture(rng, waves=16, k_lo=0.35, k_hi=1.2)
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    frames = np.empty((F, H, W))
    for k in range(F):
        if spec.motion == "camera-pan":
            u = xx - k * spec.velocity[0]
            v = yy - k * spec.velocity[1]
        elif spec.motion == "rotate":
            a = -k * spec.angle
            u = (xx - cx) * np.cos(a) - (yy - cy) * np.sin(a) + cx
            v = (xx - cx) * np.sin(a) + (yy - cy) * np.cos(a) + cy
        else:  # scale
            s = spec.rate ** k
            u = (xx - cx) / s + cx
            v = (yy - cy) / s + cy
        frames[k] = tex(u, v)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Raw video container
# ---------------------------------------------------------------------------

VIDEO_MAGIC = b"VIDF1"


def write_video(path, frames: np.ndarray) -> None:
    """Raw little-endian f32 container with header {F, H, W, C}.

    Accepts (F, H, W) grayscale or (F, H, W, C) data; the same container
    stores sampled latent videos, with C as the channel count.
    """
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim == 3:
        frames = frames[..., None]
    if frames.ndim != 4:
        raise ValueError(f"expected (F, H, W[, C]) data, got shape {frames.shape}")
    import struct

    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<4I", *frames.shape))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_video(path) -> np.ndarray:
    """Read a raw-f32 container; grayscale (C == 1) comes back as (F, H, W)."""
    import struct

    raw = Path(path).read_bytes()
    if len(raw) < 21 or raw[:5] != VIDEO_MAGIC:
        raise ValueError(f"{path}: not a raw video container")
    F, H, W, C = struct.unpack_from("<4I", raw, 5)
    expected = 21 + F * H * W * C * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: payload size {len(raw)} != expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=21).reshape(F, H, W, C).copy()
    return data[..., 0] if C == 1 else data


# ---------------------------------------------------------------------------
# Annotation files
# ---------------------------------------------------------------------------


def write_annotation(path, tracks: TrackSet, video_id: str,
                     meta: dict | None = None) -> None:
    payload = {
        "version": ANNOTATION_VERSION,
        "video_id": video_id,
        "F": tracks.frames,
        "H": tracks.height,
        "W": tracks.width,
        "starts": tracks.tracks[0].tolist(),
        "tracks": tracks.tracks.tolist(),
        "visibility": tracks.visibility.tolist(),
    }
    if meta:
        payload["meta"] = meta  # provenance extras; readers ignore unknown keys
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def _require(condition: bool, field: str, message: str) -> None:
    if not condition:
        raise AnnotationError(f"field {field!r}: {message}")


def read_annotation(path) -> tuple[TrackSet, str]:
    """Parse and validate an annotation file; returns (tracks, video_id)."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("version", "video_id", "F", "H", "W", "starts", "tracks", "visibility"):
        _require(key in payload, key, "missing")
    _require(payload["version"] == ANNOTATION_VERSION, "version",
             f"expected {ANNOTATION_VERSION}, got {payload['version']}")
    F, H, W = payload["F"], payload["H"], payload["W"]
    tracks = np.asarray(payload["tracks"], dtype=np.float64)
    visibility = np.asarray(payload["visibility"], dtype=bool)
    starts = np.asarray(payload["starts"], dtype=np.float64)
    _require(tracks.ndim == 3 and tracks.shape[2] == 2, "tracks", "must be F x N x 2")
    _require(tracks.shape[0] == F, "tracks", f"length {tracks.shape[0]} != F={F}")
    _require(visibility.shape == tracks.shape[:2], "visibility",
             f"shape {visibility.shape} != tracks {tracks.shape[:2]}")
    _require(starts.shape == tracks.shape[1:], "starts",
             f"shape {starts.shape} != (N, 2)")
    _require(np.array_equal(starts, tracks[0]), "starts", "must equal tracks[0]")
    return TrackSet(tracks, visibility, H, W), payload["video_id"]


# ---------------------------------------------------------------------------
# Planted-motion descriptor doubles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlantedMotion:
    """Per-frame permutation of latent cells with frame 0 as identity."""

    height: int
    width: int
    targets: np.ndarray  # (frames, h*w) int64, targets[0] == arange

    def __post_init__(self):
        targets = np.asarray(self.targets, dtype=np.int64)
        object.__setattr__(self, "targets", targets)
        hw = self.height * self.width
        if targets.ndim != 2 or targets.shape[1] != hw:
            raise ValueError(f"targets must be (frames, {hw})")
        if not np.array_equal(targets[0], np.arange(hw)):
            raise ValueError("frame 0 of a planted motion must be the identity")
        for k, row in enumerate(targets):
            if len(np.unique(row)) != hw:
                raise ValueError(f"planted motion is not injective at frame {k}")

    @property
    def frames(self) -> int:
        return self.targets.shape[0]

    def ground_truth(self, patch: int) -> TrackSet:
        """Patch-center pixel tracks of every latent cell under the motion."""
        hw = self.height * self.width
        cells = np.stack([np.arange(hw) % self.width, np.arange(hw) // self.width], axis=1)
        tracks = np.empty((self.frames, hw, 2))
        for k in range(self.frames):
            tgt = self.targets[k]
            tracks[k, :, 0] = (tgt % self.width) * patch + (patch - 1) / 2.0
            tracks[k, :, 1] = (tgt // self.width) * patch + (patch - 1) / 2.0
        vis = np.ones((self.frames, hw), dtype=bool)
        return TrackSet(tracks, vis, self.height * patch, self.width * patch)

    def start_cells(self) -> PointSet:
        hw = self.height * self.width
        pts = np.stack([np.arange(hw) % self.width, np.arange(hw) // self.width], axis=1)
        return PointSet(pts.astype(np.float64), frame=0)


def planted_shift(height: int, width: int, frames: int, dx: int, dy: int) -> PlantedMotion:
    """Toroidal shift of (dx, dy) latent cells per frame."""
    hw = height * width
    rows, cols = np.divmod(np.arange(hw), width)
    targets = np.empty((frames, hw), dtype=np.int64)
    for k in range(frames):
        targets[k] = ((rows + k * dy) % height) * width + (cols + k * dx) % width
    return PlantedMotion(height, width, targets)


def planted_rotation(height: int, width: int, frames: int) -> PlantedMotion:
    """Quarter-turn grid rotation per frame (square grids only)."""
    if height != width:
        raise ValueError("rotation permutation needs a square grid")
    hw = height * width
    rows, cols = np.divmod(np.arange(hw), width)
    targets = np.empty((frames, hw), dtype=np.int64)
    r, c = rows.copy(), cols.copy()
    for k in range(frames):
        targets[k] = r * width + c
        r, c = c, height - 1 - r  # rotate 90 degrees for the next frame
    return PlantedMotion(height, width, targets)


def planted_pan(height: int, width: int, frames: int, dx: int, dy: int) -> PlantedMotion:
    """Camera pan: content shifts opposite the camera motion."""
    return planted_shift(height, width, frames, -dx, -dy)


def inject_descriptors(planted: PlantedMotion, text_len: int = 1,
                       code_norm: float = 100.0, noise: float = 0.0,
                       seed: int = 0, kind: str = KIND_QUERY,
                       timestep: int = 1, layer: int = 0) -> DescriptorStack:
    """Content-coded descriptor stack whose correct matches are known.

    Cell m of frame 0 carries the scaled one-hot code norm*e_m; the cell it
    maps to in frame k carries the same code, and all other codes stay
    orthogonal. Optional Gaussian noise perturbs every row.
    """
    hw = planted.height * planted.width
    layout = TokenLayout(planted.frames, planted.height, planted.width, text_len)
    data = np.zeros((layout.total, hw), dtype=np.float64)
    for k in range(planted.frames):
        base = k * hw
        data[base + planted.targets[k], np.arange(hw)] = code_norm
    if noise > 0:
        rng = np.random.default_rng([int(seed), 0xC0DE])
        data = data + rng.normal(0.0, noise, data.shape)
    return DescriptorStack(timestep, layer, kind, data.astype(np.float32), layout)


def make_planted_video(planted: PlantedMotion, patch: int,
                       code_norm: float = 100.0) -> np.ndarray:
    """Pixel frames whose patches carry the planted content codes.

    Patch at a cell is the one-hot pixel pattern of its source cell scaled
    by code_norm, so raw patchification reproduces the planted descriptors.
    Requires h*w <= patch^2 so every cell gets a distinct one-hot code.
    """
    h, w = planted.height, planted.width
    hw = h * w
    if hw > patch * patch:
        raise ValueError(f"{hw} codes do not fit in {patch}x{patch} patches")
    frames = np.zeros((planted.frames, h * patch, w * patch), dtype=np.float32)
    for k in range(planted.frames):
        for m in range(hw):
            tgt = planted.targets[k, m]
            r, c = divmod(int(tgt), w)
            pr, pc = divmod(m, patch)  # one-hot position encodes the source cell
            frames[k, r * patch + pr, c * patch + pc] = code_norm
    return frames


class PlantedDescriptorModel:
    """Test double serving planted descriptors through the analysis interface.

    Implements the same protocol as CapturePipeline: `schedule`, `patch`,
    `channels`, `encode`, and `capture_run`. Descriptors are the raw
    patchified pixel content, so chunked tracking sees the right codes for
    whatever subset of frames it encodes. Feature descriptors can be
    corrupted with extra appearance noise to separate the two kinds.
    """

    def __init__(self, schedule: NoiseSchedule, patch: int = 8,
                 descriptor_noise: float = 0.0, feature_noise: float = 0.0,
                 seed: int = 0):
        self.schedule = schedule
        self.encoder = PatchEncoder(patch, gain=1.0, center=0.0)
        self.descriptor_noise = descriptor_noise
        self.feature_noise = feature_noise
        self.seed = seed

    @property
    def patch(self) -> int:
        return self.encoder.patch

    @property
    def channels(self) -> int:
        return self.encoder.channels

    def encode(self, frames: np.ndarray) -> LatentVideo:
        return self.encoder.encode(frames)

    def capture_run(self, latent: LatentVideo, text: TextTokens, t: int,
                    layers, kinds):
        layout = latent.layout(text.length)
        data = np.concatenate([latent.tokens(), text.data], axis=0)
        stacks: dict[tuple[int, str], DescriptorStack] = {}
        records: dict[int, AttentionRecord] = {}
        attn = None
        if KIND_ATTENTION in kinds:
            logits = data.astype(np.float64) @ data.T.astype(np.float64)
            attn = _softmax_rows(logits / np.sqrt(data.shape[1])).astype(np.float32)
        for layer in layers:
            for kind in kinds:
                if kind == KIND_ATTENTION:
                    records[layer] = AttentionRecord(t, layer, attn, layout)
                    continue
                rows = data
                sigma = (self.feature_noise if kind == KIND_FEATURE
                         else self.descriptor_noise)
                if sigma > 0:
                    rng = np.random.default_rng([self.seed, t, layer, 0xFEA7])
                    rows = data + rng.normal(0, sigma, data.shape).astype(np.float32)
                stacks[(layer, kind)] = DescriptorStack(t, layer, kind, rows, layout)
        return stacks, records
