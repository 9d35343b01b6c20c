"""Toy video diffusion transformer with full-sequence attention and capture hooks.

The denoiser operates on a flat token sequence: all frame latents in
frame-major raster order followed by the text tokens. Every layer runs a
single attention over the whole sequence, so any token can attend to any
other. Capture hooks record queries, keys, head-averaged attention maps,
and post-attention features at requested (timestep, layer) cells; these
are the raw material for all downstream correspondence analysis.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

KIND_QUERY = "query"
KIND_KEY = "key"
KIND_FEATURE = "feature"
KIND_ATTENTION = "attention"
DESCRIPTOR_KINDS = (KIND_QUERY, KIND_KEY, KIND_FEATURE)
CAPTURE_KINDS = DESCRIPTOR_KINDS + (KIND_ATTENTION,)

# Perturbation modes for cross-frame attention (used by the guidance sampler).
MODE_POST_SOFTMAX_ZERO = "post-softmax-zero"
MODE_PRE_SOFTMAX_MASK = "pre-softmax-mask"


class NonFiniteError(RuntimeError):
    """Raised when a forward pass or update produces NaN/inf values."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training loss became non-finite at step {step} ({loss})")
        self.step = step


# ---------------------------------------------------------------------------
# Token layout and core data types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TokenLayout:
    """Addressing scheme for the flat token sequence.

    Frame tokens come first, frame-major in raster order (row-major within a
    frame), followed by the text tokens. Frames are indexed from 0; frame 0
    is the designated first frame used as the matching source everywhere.
    """

    frames: int
    height: int
    width: int
    text_len: int

    def __post_init__(self):
        if self.frames < 1 or self.height < 1 or self.width < 1:
            raise ValueError(f"invalid layout dims {self}")
        if self.text_len < 1:
            raise ValueError("text_len must be >= 1")

    @property
    def spatial(self) -> int:
        return self.height * self.width

    @property
    def frame_tokens(self) -> int:
        return self.frames * self.spatial

    @property
    def total(self) -> int:
        return self.frame_tokens + self.text_len

    def flat_index(self, frame: int, row: int, col: int) -> int:
        if not (0 <= frame < self.frames):
            raise IndexError(f"frame {frame} out of range [0, {self.frames})")
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise IndexError(f"position ({row}, {col}) out of {self.height}x{self.width}")
        return frame * self.spatial + row * self.width + col

    def unflatten(self, index: int) -> tuple[int, int, int]:
        if not (0 <= index < self.frame_tokens):
            raise IndexError(f"{index} is not a frame-token index")
        frame, rest = divmod(index, self.spatial)
        row, col = divmod(rest, self.width)
        return frame, row, col

    def frame_slice(self, frame: int) -> slice:
        if not (0 <= frame < self.frames):
            raise IndexError(f"frame {frame} out of range [0, {self.frames})")
        return slice(frame * self.spatial, (frame + 1) * self.spatial)

    @property
    def text_slice(self) -> slice:
        return slice(self.frame_tokens, self.total)

    def frame_of_token(self) -> np.ndarray:
        """Frame index per token position; -1 for text tokens."""
        ids = np.full(self.total, -1, dtype=np.int64)
        for i in range(self.frames):
            ids[self.frame_slice(i)] = i
        return ids


@dataclass
class LatentVideo:
    """Latent video tensor, one latent frame per video frame (q=1)."""

    data: np.ndarray  # (frames, height, width, channels) float32

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"latent video must be 4-d, got shape {self.data.shape}")
        if self.frames < 2 or self.height < 2 or self.width < 2:
            raise ValueError(f"latent video too small: {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("latent video contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def tokens(self) -> np.ndarray:
        """Frame tokens in frame-major raster order, shape (frames*h*w, channels)."""
        return self.data.reshape(-1, self.channels)

    def layout(self, text_len: int) -> TokenLayout:
        return TokenLayout(self.frames, self.height, self.width, text_len)


@dataclass
class TextTokens:
    """Synthetic prompt embedding stand-in, shape (length, channels)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"text tokens must be (S>=1, channels), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("text tokens contain non-finite values")

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def make_text_tokens(length: int, channels: int, seed: int) -> TextTokens:
    """Seeded stand-in for prompt embeddings."""
    rng = np.random.default_rng([int(seed), 0x7E47])
    return TextTokens(rng.standard_normal((length, channels)).astype(np.float32) * 0.5)


@dataclass
class DescriptorStack:
    """Captured per-token representations at one (timestep, layer, kind) cell.

    Queries and keys are head-concatenated (columns cover all heads);
    features are taken after the attention block's residual add, before the
    feed-forward sublayer.
    """

    timestep: int
    layer: int
    kind: str
    data: np.ndarray  # (layout.total, d_desc) float32
    layout: TokenLayout

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape[0] != self.layout.total:
            raise ValueError(
                f"descriptor rows {self.data.shape[0]} != layout total {self.layout.total}"
            )
        if not np.isfinite(self.data).all():
            raise NonFiniteError("descriptor stack contains non-finite values")

    def frame_rows(self, frame: int) -> np.ndarray:
        """Rows of one frame, shape (h*w, d_desc)."""
        return self.data[self.layout.frame_slice(frame)]

    @property
    def text_rows(self) -> np.ndarray:
        return self.data[self.layout.text_slice]


@dataclass
class AttentionRecord:
    """Head-averaged full-sequence attention at one (timestep, layer) cell.

    Rows of a clean forward pass are stochastic (sum to 1). Records captured
    under a post-softmax perturbation are intentionally sub-stochastic in the
    zeroed blocks, so validation is opt-in.
    """

    timestep: int
    layer: int
    data: np.ndarray  # (layout.total, layout.total); dtype preserved from capture
    layout: TokenLayout
    head_data: np.ndarray | None = None  # (heads, total, total), per-head mode only

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.floating):
            raise ValueError(f"attention must be floating point, got {self.data.dtype}")
        n = self.layout.total
        if self.data.shape != (n, n):
            raise ValueError(f"attention shape {self.data.shape} != ({n}, {n})")

    def validate_stochastic(self, tol: float = 1e-5) -> None:
        if (self.data < 0).any():
            raise ValueError("attention entries must be non-negative")
        sums = self.data.sum(axis=1)
        if np.abs(sums - 1.0).max() > tol:
            raise ValueError(f"attention rows deviate from sum 1 by {np.abs(sums - 1.0).max()}")

    def cross_block(self, i: int, j: int) -> np.ndarray:
        """Attention from frame i queries to frame j keys, shape (hw, hw)."""
        return self.data[self.layout.frame_slice(i), self.layout.frame_slice(j)]

    def frame_to_text(self, i: int) -> np.ndarray:
        return self.data[self.layout.frame_slice(i), self.layout.text_slice]

    def row(self, frame: int, row: int, col: int) -> np.ndarray:
        return self.data[self.layout.flat_index(frame, row, col)]


@dataclass
class CaptureResult:
    """Bundle of captures from one forward pass."""

    stacks: dict[tuple[int, str], DescriptorStack] = field(default_factory=dict)
    records: dict[int, AttentionRecord] = field(default_factory=dict)

    def stack(self, layer: int, kind: str) -> DescriptorStack:
        return self.stacks[(layer, kind)]

    def record(self, layer: int) -> AttentionRecord:
        return self.records[layer]


# ---------------------------------------------------------------------------
# Noise schedule and diffusion steps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients alpha[t] for t in [0, T], alpha[0] = 1.

    The forward process is z_t = sqrt(alpha[t]) * z0 + sqrt(1 - alpha[t]) * eps
    with eps drawn from a generator derived from (seed, t).
    """

    total_steps: int
    alphas: np.ndarray  # (total_steps + 1,) float64, non-increasing, in (0, 1]
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.alphas, dtype=np.float64)
        object.__setattr__(self, "alphas", a)
        if a.shape != (self.total_steps + 1,):
            raise ValueError(f"alphas must have length T+1={self.total_steps + 1}")
        if a[0] != 1.0:
            raise ValueError("alpha[0] must be exactly 1")
        if (np.diff(a) > 0).any():
            raise ValueError("signal coefficients must be non-increasing in t")
        if (a <= 0).any() or (a > 1).any():
            raise ValueError("signal coefficients must lie in (0, 1]")

    @classmethod
    def cosine(cls, total_steps: int, seed: int = 0, offset: float = 0.008,
               floor: float = 1e-5) -> "NoiseSchedule":
        t = np.arange(total_steps + 1, dtype=np.float64) / total_steps
        f = np.cos((t + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
        alphas = np.clip(f / f[0], floor, 1.0)
        alphas[0] = 1.0
        return cls(total_steps, alphas, seed)

    @classmethod
    def linear(cls, total_steps: int, seed: int = 0, beta_start: float = 0.01,
               beta_end: float = 0.35) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, total_steps, dtype=np.float64)
        alphas = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(total_steps, alphas, seed)

    def check_timestep(self, t: int, minimum: int = 0) -> None:
        if not (minimum <= t <= self.total_steps):
            raise ValueError(f"timestep {t} outside [{minimum}, {self.total_steps}]")


def noised_latent(z0: LatentVideo, t: int, schedule: NoiseSchedule) -> LatentVideo:
    """Forward-process sample z_t for the whole latent video, keyed by (seed, t)."""
    schedule.check_timestep(t)
    if t == 0:
        return LatentVideo(z0.data.copy())
    rng = np.random.default_rng([schedule.seed, t])
    eps = rng.standard_normal(z0.data.shape).astype(np.float32)
    a = schedule.alphas[t]
    return LatentVideo(np.float32(math.sqrt(a)) * z0.data + np.float32(math.sqrt(1.0 - a)) * eps)


def noised_frames(z0: LatentVideo, t: int, schedule: NoiseSchedule,
                  frame_keys: Sequence[int]) -> LatentVideo:
    """Like :func:`noised_latent`, but noise is keyed per (seed, t, frame key).

    The tracker uses this so a video frame receives the same noise sample in
    every chunk it appears in, independent of chunk membership.
    """
    schedule.check_timestep(t)
    if len(frame_keys) != z0.frames:
        raise ValueError("one frame key per latent frame required")
    if t == 0:
        return LatentVideo(z0.data.copy())
    a = schedule.alphas[t]
    out = np.empty_like(z0.data)
    for i, key in enumerate(frame_keys):
        rng = np.random.default_rng([schedule.seed, t, int(key)])
        eps = rng.standard_normal(z0.data.shape[1:]).astype(np.float32)
        out[i] = np.float32(math.sqrt(a)) * z0.data[i] + np.float32(math.sqrt(1.0 - a)) * eps
    return LatentVideo(out)


def ddim_update(z_t: np.ndarray, eps: np.ndarray, t: int,
                schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from a noise prediction, z_t -> z_{t-1}."""
    schedule.check_timestep(t, minimum=1)
    if not np.isfinite(eps).all():
        raise NonFiniteError(f"noise prediction at t={t} contains non-finite values")
    a_t = schedule.alphas[t]
    a_prev = schedule.alphas[t - 1]
    x0 = (z_t - np.float32(math.sqrt(1.0 - a_t)) * eps) / np.float32(math.sqrt(a_t))
    return np.float32(math.sqrt(a_prev)) * x0 + np.float32(math.sqrt(1.0 - a_prev)) * eps


def denoise_step(model: "VideoDiT", z_t: LatentVideo, text: TextTokens, t: int,
                 schedule: NoiseSchedule) -> LatentVideo:
    """One deterministic denoising step using the model's noise prediction."""
    eps, _ = model.predict_noise(z_t, text, t)
    return LatentVideo(ddim_update(z_t.data, eps, t, schedule))


# ---------------------------------------------------------------------------
# Positional embeddings
# ---------------------------------------------------------------------------


def _sincos(values: np.ndarray, channels: int) -> np.ndarray:
    """Standard sinusoidal code: [sin(v*w_k)..., cos(v*w_k)...] over channels//2 freqs."""
    pairs = channels // 2
    if pairs == 0:
        return np.zeros((len(values), 0), dtype=np.float64)
    k = np.arange(pairs, dtype=np.float64)
    freqs = np.power(10000.0, -k / pairs)
    angles = values[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def positional_embedding(layout: TokenLayout, dim: int, kind: str = "sincos3d") -> np.ndarray:
    """Deterministic positional embeddings for a layout, shape (total, dim).

    Frame tokens get factored (frame, row, col) sinusoidal codes, one channel
    group per axis; text tokens get a 1-d code over their local position.
    Channels that do not divide evenly are zero-padded.
    """
    if kind != "sincos3d":
        raise ValueError(f"unknown positional embedding kind {kind!r}")
    emb = np.zeros((layout.total, dim), dtype=np.float64)
    per_axis = 2 * (dim // 6)  # sin/cos pairs per axis, remainder stays zero

    frames = np.arange(layout.frames, dtype=np.float64)
    rows = np.arange(layout.height, dtype=np.float64)
    cols = np.arange(layout.width, dtype=np.float64)
    f_code = _sincos(frames, per_axis)
    r_code = _sincos(rows, per_axis)
    c_code = _sincos(cols, per_axis)
    fi, ri, ci = np.meshgrid(
        np.arange(layout.frames), np.arange(layout.height), np.arange(layout.width),
        indexing="ij",
    )
    flat_f, flat_r, flat_c = fi.ravel(), ri.ravel(), ci.ravel()
    n_frame = layout.frame_tokens
    emb[:n_frame, 0:per_axis] = f_code[flat_f]
    emb[:n_frame, per_axis:2 * per_axis] = r_code[flat_r]
    emb[:n_frame, 2 * per_axis:3 * per_axis] = c_code[flat_c]

    text_pairs = 2 * (dim // 2)
    positions = np.arange(layout.text_len, dtype=np.float64)
    emb[layout.text_slice, :text_pairs] = _sincos(positions, text_pairs)
    return emb.astype(np.float32)


def add_positional(tokens: np.ndarray, layout: TokenLayout,
                   kind: str = "sincos3d") -> np.ndarray:
    """Add positional embeddings to a (total, dim) token matrix."""
    tokens = np.asarray(tokens, dtype=np.float32)
    if tokens.shape[0] != layout.total:
        raise ValueError(f"token rows {tokens.shape[0]} != layout total {layout.total}")
    return tokens + positional_embedding(layout, tokens.shape[1], kind)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiTConfig:
    """Architecture hyperparameters. model_dim must equal heads * head_dim."""

    layers: int = 4
    heads: int = 2
    head_dim: int = 16
    model_dim: int = 32
    latent_channels: int = 64
    pos_kind: str = "sincos3d"
    time_dim: int = 32
    ffn_ratio: int = 4
    qk_init_gain: float = 2.0  # symmetric q/k init scale; see _Block

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.model_dim != self.heads * self.head_dim:
            raise ValueError(
                f"model_dim {self.model_dim} != heads {self.heads} * head_dim {self.head_dim}"
            )

    def to_dict(self) -> dict:
        return {
            "layers": self.layers, "heads": self.heads, "head_dim": self.head_dim,
            "model_dim": self.model_dim, "latent_channels": self.latent_channels,
            "pos_kind": self.pos_kind, "time_dim": self.time_dim, "ffn_ratio": self.ffn_ratio,
            "qk_init_gain": self.qk_init_gain,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DiTConfig":
        return cls(**{k: d[k] for k in cls().to_dict() if k in d})


@dataclass(frozen=True)
class CrossFramePerturbation:
    """Zero cross-frame attention in selected layers during a forward pass.

    post-softmax-zero removes cross-frame mass after normalization, leaving
    every other entry untouched; pre-softmax-mask excludes cross-frame keys
    from the softmax, so the remaining entries renormalize upward.
    """

    layers: frozenset[int]
    mode: str = MODE_POST_SOFTMAX_ZERO
    timesteps: frozenset[int] | None = None  # None applies at all timesteps

    def __post_init__(self):
        if self.mode not in (MODE_POST_SOFTMAX_ZERO, MODE_PRE_SOFTMAX_MASK):
            raise ValueError(f"unknown perturbation mode {self.mode!r}")

    def active_at(self, layer: int, t: int) -> bool:
        if layer not in self.layers:
            return False
        return self.timesteps is None or t in self.timesteps


class _Block(nn.Module):
    """Pre-norm attention + feed-forward block.

    Queries and keys share their initial projection (scaled by qk_init_gain),
    so attention starts out as a similarity kernel over token content. On
    translating-texture data this seeds cross-frame matching, which training
    then sharpens; the projections are free to diverge afterwards.
    """

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        d = cfg.model_dim
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.norm1 = nn.LayerNorm(d)
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, cfg.ffn_ratio * d), nn.GELU(), nn.Linear(cfg.ffn_ratio * d, d)
        )
        with torch.no_grad():
            self.q_proj.weight.mul_(cfg.qk_init_gain)
            self.q_proj.bias.zero_()
            self.k_proj.weight.copy_(self.q_proj.weight)
            self.k_proj.bias.zero_()

    def forward(self, x, cross_mask=None, mode=None, capture=None, fast=False):
        # x: (B, N, d); cross_mask: (N, N) bool marking cross-frame (i != j) cells
        B, N, d = x.shape
        H, hd = self.heads, self.head_dim
        y = self.norm1(x)
        q = self.q_proj(y)
        k = self.k_proj(y)
        v = self.v_proj(y)
        qh = q.view(B, N, H, hd).transpose(1, 2)
        kh = k.view(B, N, H, hd).transpose(1, 2)
        vh = v.view(B, N, H, hd).transpose(1, 2)
        if fast and cross_mask is None and capture is None:
            ctx = nn.functional.scaled_dot_product_attention(qh, kh, vh)
        else:
            logits = qh @ kh.transpose(-2, -1) / math.sqrt(hd)
            if cross_mask is not None and mode == MODE_PRE_SOFTMAX_MASK:
                logits = logits.masked_fill(cross_mask, float("-inf"))
            attn = torch.softmax(logits, dim=-1)
            if cross_mask is not None and mode == MODE_POST_SOFTMAX_ZERO:
                attn = attn.masked_fill(cross_mask, 0.0)
            if capture is not None:
                capture["query"] = q
                capture["key"] = k
                capture["attention"] = attn
            ctx = attn @ vh
        x = x + self.out_proj(ctx.transpose(1, 2).reshape(B, N, d))
        if capture is not None:
            capture["feature"] = x  # after attention residual, before feed-forward
        x = x + self.ffn(self.norm2(x))
        return x


class VideoDiT(nn.Module):
    """Denoiser over the concatenated frame + text token sequence.

    The model is pure given (parameters, inputs); parameters are treated as
    immutable after construction or training, so a single instance can be
    shared across concurrent forward passes. Capture buffers are per-call.
    """

    def __init__(self, config: DiTConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.init_seed = seed
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            d = config.model_dim
            self.in_proj = nn.Linear(config.latent_channels, d)
            self.time_mlp = nn.Sequential(
                nn.Linear(config.time_dim, d), nn.SiLU(), nn.Linear(d, d)
            )
            self.blocks = nn.ModuleList(_Block(config) for _ in range(config.layers))
            self.out_norm = nn.LayerNorm(d)
            self.out_proj = nn.Linear(d, config.latent_channels)
        self._pos_cache: dict[TokenLayout, torch.Tensor] = {}
        self._mask_cache: dict[TokenLayout, torch.Tensor] = {}

    # -- helpers -----------------------------------------------------------

    def _positional(self, layout: TokenLayout) -> torch.Tensor:
        cached = self._pos_cache.get(layout)
        if cached is None:
            cached = torch.from_numpy(
                positional_embedding(layout, self.config.model_dim, self.config.pos_kind)
            )
            self._pos_cache[layout] = cached
        return cached

    def _cross_mask(self, layout: TokenLayout) -> torch.Tensor:
        cached = self._mask_cache.get(layout)
        if cached is None:
            fid = torch.from_numpy(layout.frame_of_token())
            is_frame = fid >= 0
            cached = (
                is_frame[:, None] & is_frame[None, :] & (fid[:, None] != fid[None, :])
            )
            self._mask_cache[layout] = cached
        return cached

    def _time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        # t: (B,) float; sinusoidal code -> MLP, shape (B, d)
        pairs = self.config.time_dim // 2
        k = torch.arange(pairs, dtype=torch.float32)
        freqs = torch.pow(torch.tensor(10000.0), -k / max(pairs, 1))
        angles = t[:, None] * freqs[None, :]
        code = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
        if code.shape[1] < self.config.time_dim:
            pad = torch.zeros(code.shape[0], self.config.time_dim - code.shape[1])
            code = torch.cat([code, pad], dim=1)
        return self.time_mlp(code)

    # -- forward -----------------------------------------------------------

    def forward_batch(
        self,
        tokens: torch.Tensor,
        layout: TokenLayout,
        t: torch.Tensor,
        capture: Mapping[int, Iterable[str]] | None = None,
        perturb: CrossFramePerturbation | None = None,
        per_head: bool = False,
        fast: bool = False,
    ) -> tuple[torch.Tensor, CaptureResult | None]:
        """Internal batched forward. tokens: (B, N, latent_channels), t: (B,)."""
        B, N, _ = tokens.shape
        if N != layout.total:
            raise ValueError(f"token count {N} != layout total {layout.total}")
        if capture:
            if B != 1:
                raise ValueError("capture requires batch size 1")
            for layer, kinds in capture.items():
                if not (0 <= layer < self.config.layers):
                    raise IndexError(f"capture layer {layer} out of range")
                bad = set(kinds) - set(CAPTURE_KINDS)
                if bad:
                    raise ValueError(f"unknown capture kinds {sorted(bad)}")
        if perturb is not None:
            for layer in perturb.layers:
                if not (0 <= layer < self.config.layers):
                    raise IndexError(f"perturbation layer {layer} out of range")

        x = self.in_proj(tokens) + self._positional(layout)[None]
        x = x + self._time_embedding(t.to(torch.float32))[:, None, :]

        result = CaptureResult() if capture else None
        t_int = int(t.reshape(-1)[0].item())
        for layer, block in enumerate(self.blocks):
            kinds = tuple(capture.get(layer, ())) if capture else ()
            buf = {} if kinds else None
            mask = None
            mode = None
            if perturb is not None and perturb.active_at(layer, t_int):
                mask = self._cross_mask(layout)
                mode = perturb.mode
            x = block(x, cross_mask=mask, mode=mode, capture=buf, fast=fast)
            if buf:
                self._collect(result, buf, kinds, layer, t_int, layout, per_head)
        out = self.out_proj(self.out_norm(x))
        return out, result

    @staticmethod
    def _collect(result, buf, kinds, layer, t, layout, per_head):
        for kind in kinds:
            if kind == KIND_ATTENTION:
                heads = buf["attention"][0]  # (H, N, N)
                record = AttentionRecord(
                    t, layer, heads.mean(dim=0).detach().numpy().astype(np.float32),
                    layout,
                    head_data=heads.detach().numpy().astype(np.float32) if per_head else None,
                )
                result.records[layer] = record
            else:
                data = buf[kind][0].detach().numpy().astype(np.float32)
                result.stacks[(layer, kind)] = DescriptorStack(t, layer, kind, data, layout)

    def forward_attention(
        self,
        tokens: np.ndarray,
        t: int,
        capture: Mapping[int, Iterable[str]] | None = None,
        perturb: CrossFramePerturbation | None = None,
        layout: TokenLayout | None = None,
        per_head: bool = False,
    ) -> tuple[np.ndarray, CaptureResult | None]:
        """Single-sequence forward over a raw (total, latent_channels) token matrix."""
        tokens = np.asarray(tokens, dtype=np.float32)
        if layout is None:
            raise ValueError("layout is required")
        if not np.isfinite(tokens).all():
            raise NonFiniteError("input tokens contain non-finite values")
        with torch.no_grad():
            out, result = self.forward_batch(
                torch.from_numpy(tokens)[None], layout,
                torch.tensor([float(t)]), capture, perturb, per_head,
            )
        return out[0].numpy(), result

    def predict_noise(
        self,
        latent: LatentVideo,
        text: TextTokens,
        t: int,
        capture: Mapping[int, Iterable[str]] | None = None,
        perturb: CrossFramePerturbation | None = None,
        per_head: bool = False,
    ) -> tuple[np.ndarray, CaptureResult | None]:
        """Noise prediction for a latent video; returns (frames, h, w, c) array."""
        if latent.channels != text.channels:
            raise ValueError("latent and text channel dims differ")
        layout = latent.layout(text.length)
        tokens = np.concatenate([latent.tokens(), text.data], axis=0)
        out, result = self.forward_attention(
            tokens, t, capture, perturb, layout=layout, per_head=per_head
        )
        eps = out[: layout.frame_tokens].reshape(latent.data.shape)
        if not np.isfinite(eps).all():
            raise NonFiniteError(f"noise prediction at t={t} is non-finite")
        return eps, result


# ---------------------------------------------------------------------------
# Pixel <-> latent bridge (q = 1 stand-in for a video autoencoder)
# ---------------------------------------------------------------------------


class PatchEncoder:
    """Maps pixel frames to latents by non-overlapping patch flattening.

    Each pixel frame (H, W) becomes an (H/p, W/p) latent grid whose channel
    vector is the centered, gain-scaled p*p patch. Exactly invertible, so
    every latent cell corresponds to one pixel patch with a known center.
    """

    def __init__(self, patch: int = 8, gain: float = 4.0, center: float = 0.5):
        if patch < 1:
            raise ValueError("patch must be >= 1")
        self.patch = patch
        self.gain = gain
        self.center = center

    @property
    def channels(self) -> int:
        return self.patch * self.patch

    def encode(self, frames: np.ndarray) -> LatentVideo:
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 3:
            raise ValueError(f"expected (F, H, W) grayscale frames, got {frames.shape}")
        F, H, W = frames.shape
        p = self.patch
        if H % p or W % p:
            raise ValueError(f"frame size {H}x{W} not divisible by patch {p}")
        x = (frames - self.center) * self.gain
        x = x.reshape(F, H // p, p, W // p, p).transpose(0, 1, 3, 2, 4)
        return LatentVideo(x.reshape(F, H // p, W // p, p * p))

    def decode(self, latent: LatentVideo) -> np.ndarray:
        p = self.patch
        F, h, w, c = latent.data.shape
        if c != p * p:
            raise ValueError(f"latent channels {c} != patch^2 {p * p}")
        x = latent.data.reshape(F, h, w, p, p).transpose(0, 1, 3, 2, 4)
        return x.reshape(F, h * p, w * p) / self.gain + self.center


class CapturePipeline:
    """Bundles a denoiser, pixel/latent encoder, and schedule for analysis runs.

    Exposes the small interface the sweep and tracker drive: `encode` maps
    pixel frames to latents, `capture_run` noiselessly forwards a latent and
    returns the requested descriptor stacks and attention records. Planted
    test doubles implement the same protocol.
    """

    def __init__(self, model: VideoDiT, encoder: PatchEncoder, schedule: NoiseSchedule):
        if encoder.channels != model.config.latent_channels:
            raise ValueError(
                f"encoder channels {encoder.channels} != model latent channels "
                f"{model.config.latent_channels}"
            )
        self.model = model
        self.encoder = encoder
        self.schedule = schedule

    @property
    def patch(self) -> int:
        return self.encoder.patch

    @property
    def channels(self) -> int:
        return self.encoder.channels

    def encode(self, frames: np.ndarray) -> LatentVideo:
        return self.encoder.encode(frames)

    def capture_run(self, latent: LatentVideo, text: TextTokens, t: int,
                    layers: Iterable[int], kinds: Iterable[str]):
        capture = {int(layer): tuple(kinds) for layer in layers}
        _, result = self.model.predict_noise(latent, text, t, capture=capture)
        return result.stacks, result.records


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    losses: np.ndarray  # (steps,) float64
    steps: int


def train_toy(
    model: VideoDiT,
    dataset: Sequence[tuple[LatentVideo, TextTokens]],
    steps: int,
    seed: int,
    schedule: NoiseSchedule,
    batch_size: int = 8,
    lr: float = 3e-3,
    final_lr_fraction: float = 0.1,
    log_every: int = 200,
) -> TrainResult:
    """Train the denoiser on the standard noise-prediction objective.

    The learning rate decays with a cosine profile to lr * final_lr_fraction;
    the decay preserves the content-matching attention found early instead of
    letting late high-lr steps wash it out. Deterministic under a fixed seed:
    batch indices, per-sample timesteps, and noise all come from one explicit
    generator. Raises TrainingDiverged (after restoring the last finite
    snapshot) if the loss goes non-finite.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return TrainResult(np.zeros(0), 0)
    if not dataset:
        raise ValueError("dataset is empty")

    latents = torch.stack([torch.from_numpy(lv.data) for lv, _ in dataset])
    texts = torch.stack([torch.from_numpy(tt.data) for lv, tt in dataset])
    n, F, h, w, c = latents.shape
    layout = dataset[0][0].layout(dataset[0][1].length)
    frame_tokens = latents.reshape(n, -1, c)
    alphas = torch.from_numpy(schedule.alphas.astype(np.float32))

    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched_lr = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=steps, eta_min=lr * final_lr_fraction)
    losses = np.zeros(steps)
    snapshot = {k: v.detach().clone() for k, v in model.state_dict().items()}
    snapshot_every = 50

    model.train()
    for step in range(steps):
        idx = torch.randint(n, (batch_size,), generator=gen)
        t = torch.randint(1, schedule.total_steps + 1, (batch_size,), generator=gen)
        z0 = frame_tokens[idx]
        eps = torch.randn(z0.shape, generator=gen)
        a = alphas[t][:, None, None]
        z_t = torch.sqrt(a) * z0 + torch.sqrt(1.0 - a) * eps
        tokens = torch.cat([z_t, texts[idx]], dim=1)
        out, _ = model.forward_batch(tokens, layout, t.to(torch.float32), fast=True)
        loss = (out[:, : layout.frame_tokens] - eps).pow(2).mean()
        value = float(loss.item())
        if not math.isfinite(value):
            model.load_state_dict(snapshot)
            model.eval()
            raise TrainingDiverged(step, value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched_lr.step()
        losses[step] = value
        if step % snapshot_every == 0:
            snapshot = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if log_every and step % log_every == 0:
            log.info("train step %d loss %.5f", step, value)
    model.eval()
    return TrainResult(losses, steps)
