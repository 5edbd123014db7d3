"""Transparent glyph-animation toolkit.

Synthesizes RGBA text-animation clips, trains a joint RGB+alpha
flow-matching model over concatenated layouts, samples with classifier-free
guidance, and scores outputs with optical-flow motion alignment and soft
matte IoU.
"""

from .farneback import FlowConfig, farneback_flow
from .flowmatch import (
    POOL,
    SampleConfig,
    TrainConfig,
    compute_losses,
    decode_latent,
    encode_latent,
    grad_check,
    interpolate_path,
    sample_euler,
    target_velocity,
)
from .layout import (
    CompositeClip,
    LayoutMode,
    ReferenceImage,
    TemporalReference,
    compose_reference,
    concat_joint,
    duplicate_reference,
    make_trimap,
    split_joint,
)
from .metrics import AlignmentReport, alignment_score, flow_pair_metrics, soft_alpha_miou
from .model import Denoiser, DenoiserConfig, MaskMode
from .rgba import (
    RgbaClip,
    alpha_as_rgb_encode,
    alpha_decode,
    composite_over,
    read_rgb_png,
    write_rgb_png,
    write_rgba_png,
)
from .synth import (
    ClipSpec,
    EffectKind,
    GlyphSpec,
    build_dataset,
    middle_reference,
    rasterize_text,
    render_effect,
)

__all__ = [name for name in dir() if not name.startswith("_")]
