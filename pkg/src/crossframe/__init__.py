"""Temporal-correspondence analysis for a toy video diffusion transformer.

The package trains and instruments a small denoising transformer with full
attention over frame and text tokens, measures where in its (timestep,
layer) grid cross-frame matching lives, and reuses the best cells for
zero-shot point tracking and motion-oriented sampling guidance.
"""

from .ditcore import (
    AttentionRecord,
    CapturePipeline,
    CrossFramePerturbation,
    DescriptorStack,
    DiTConfig,
    LatentVideo,
    NoiseSchedule,
    PatchEncoder,
    TextTokens,
    TokenLayout,
    VideoDiT,
    add_positional,
    ddim_update,
    denoise_step,
    make_text_tokens,
    noised_frames,
    noised_latent,
    positional_embedding,
    train_toy,
)
from .guidance import GuidanceConfig, cag_predict, perturbed_forward, sample_baseline, sample_with_cag
from .matching import (
    MatchingCost,
    PointSet,
    TrackSet,
    argmax_correspondence,
    assemble_track,
    bidirectional_cost,
    latent_to_pixel,
    matching_cost,
    pixel_to_latent,
)
from .metrics import (
    MetricCell,
    PckResult,
    PckThresholds,
    SweepReport,
    attention_decomposition,
    attention_score,
    confidence_score,
    harmonic_mean,
    pck,
    positional_bias,
)
from .sweep import SweepPlan, diagnostics, run_sweep, top_cells
from .synthdata import (
    PlantedDescriptorModel,
    PlantedMotion,
    Scene,
    SceneSpec,
    StartGrid,
    generate,
    generate_scene,
    inject_descriptors,
    make_planted_video,
    planted_pan,
    planted_rotation,
    planted_shift,
    read_annotation,
    read_video,
    sample_starts,
    write_annotation,
    write_video,
)
from .tracker import ChunkPlan, TrackerConfig, evaluate_tracking, plan_chunks, track_video

__version__ = "0.1.0"
