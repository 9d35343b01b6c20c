"""Cross-frame attention guidance for the denoising sampler.

A perturbed forward pass zeroes the cross-frame attention blocks at
selected layers, simulating motion-degraded prediction; the guided noise
estimate pushes the sampler away from it:

    guided = clean + scale * (clean - perturbed)

Zeroing happens after the softmax by default, which leaves self-frame and
text attention untouched; the pre-softmax masking variant (kept for
ablation) renormalizes the remaining attention upward instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ditcore import (
    CaptureResult,
    CrossFramePerturbation,
    LatentVideo,
    MODE_POST_SOFTMAX_ZERO,
    MODE_PRE_SOFTMAX_MASK,
    NoiseSchedule,
    NonFiniteError,
    TextTokens,
    VideoDiT,
    ddim_update,
)


class SamplingDiverged(RuntimeError):
    """Raised when sampling produces non-finite values; carries the trace so far."""

    def __init__(self, t: int, trace: np.ndarray):
        super().__init__(f"sampling diverged at t={t}")
        self.t = t
        self.trace = trace


@dataclass(frozen=True)
class GuidanceConfig:
    """Perturbation target layers, guidance scale, and mode."""

    layers: frozenset[int] = frozenset()
    scale: float = 1.0
    mode: str = MODE_POST_SOFTMAX_ZERO
    timesteps: frozenset[int] | None = None  # None: apply at all timesteps

    def __post_init__(self):
        object.__setattr__(self, "layers", frozenset(self.layers))
        if self.timesteps is not None:
            object.__setattr__(self, "timesteps", frozenset(self.timesteps))
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.mode not in (MODE_POST_SOFTMAX_ZERO, MODE_PRE_SOFTMAX_MASK):
            raise ValueError(f"unknown guidance mode {self.mode!r}")

    def perturbation(self) -> CrossFramePerturbation | None:
        if not self.layers:
            return None
        return CrossFramePerturbation(self.layers, self.mode, self.timesteps)

    def to_dict(self) -> dict:
        return {
            "layers": sorted(self.layers), "scale": self.scale, "mode": self.mode,
            "timesteps": None if self.timesteps is None else sorted(self.timesteps),
        }


def perturbed_forward(model: VideoDiT, z_t: LatentVideo, text: TextTokens, t: int,
                      config: GuidanceConfig, capture=None) -> tuple[np.ndarray, CaptureResult | None]:
    """Noise prediction with cross-frame attention zeroed at the selected layers.

    With an empty layer set this is exactly the standard forward pass.
    """
    return model.predict_noise(z_t, text, t, capture=capture,
                               perturb=config.perturbation())


def cag_predict(model: VideoDiT, z_t: LatentVideo, text: TextTokens, t: int,
                config: GuidanceConfig) -> tuple[np.ndarray, float]:
    """Guided noise prediction and the guidance activity |clean - perturbed|.

    The guided estimate is clean + scale*(clean - perturbed), elementwise.
    An empty layer set short-circuits to the clean prediction with zero
    activity, and scale 0 returns the clean prediction bit-for-bit.
    """
    eps, _ = model.predict_noise(z_t, text, t)
    if not config.layers:
        return eps, 0.0
    eps_hat, _ = perturbed_forward(model, z_t, text, t, config)
    if not np.isfinite(eps_hat).all():
        raise NonFiniteError(f"perturbed prediction at t={t} is non-finite")
    activity = float(np.linalg.norm(eps - eps_hat))
    if config.scale == 0.0:
        return eps, activity
    guided = eps + np.float32(config.scale) * (eps - eps_hat)
    return guided, activity


def sample_with_cag(model: VideoDiT, text: TextTokens, schedule: NoiseSchedule,
                    config: GuidanceConfig, shape: tuple[int, int, int, int],
                    seed: int) -> tuple[LatentVideo, np.ndarray]:
    """Full deterministic denoising loop with guidance at every step.

    Returns the final latent video and the per-step guidance activity trace
    ordered from t = T down to t = 1. With scale 0 (or no layers) the
    trajectory is bit-identical to the unguided sampler under the same seed.
    """
    rng = np.random.default_rng([int(seed), 0x5A3F])
    z = rng.standard_normal(shape).astype(np.float32)
    trace = np.zeros(schedule.total_steps)
    for i, t in enumerate(range(schedule.total_steps, 0, -1)):
        try:
            guided, activity = cag_predict(model, LatentVideo(z), text, t, config)
            trace[i] = activity
            z = ddim_update(z, guided, t, schedule)
        except NonFiniteError as exc:
            raise SamplingDiverged(t, trace[: i + 1]) from exc
    return LatentVideo(z), trace


def sample_baseline(model: VideoDiT, text: TextTokens, schedule: NoiseSchedule,
                    shape: tuple[int, int, int, int], seed: int) -> LatentVideo:
    """Unguided deterministic sampler (identical loop with guidance disabled)."""
    latent, _ = sample_with_cag(model, text, schedule,
                                GuidanceConfig(frozenset(), 0.0), shape, seed)
    return latent
