"""Joint RGB+alpha arrangement: concatenation layouts and reference composition.

The RGB stream always occupies the left / top / leading half of a composite;
the gray-encoded alpha stream occupies the other half. Trimaps binarize a
reference frame so the alpha half of the composite reference marks glyph
support.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .rgba import quantize_u8, validate_rgb_frame


class LayoutMode(Enum):
    WIDTH = "width"
    HEIGHT = "height"
    TEMPORAL = "temporal"


class TemporalReference(Enum):
    RGB = "rgb"
    TRIMAP = "trimap"


@dataclass
class CompositeClip:
    """An RGB-only clip holding both halves of the joint video.

    boundary is the index of the split line: the RGB half width (WIDTH),
    height (HEIGHT), or frame count (TEMPORAL).
    """

    frames: np.ndarray
    layout: LayoutMode
    boundary: int

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"frames must be (f, 3, h, w), got {self.frames.shape}")
        f, _, h, w = self.frames.shape
        if self.layout is LayoutMode.WIDTH and w != 2 * self.boundary:
            raise ValueError(f"width {w} does not equal twice the boundary {self.boundary}")
        if self.layout is LayoutMode.HEIGHT and h != 2 * self.boundary:
            raise ValueError(f"height {h} does not equal twice the boundary {self.boundary}")
        if self.layout is LayoutMode.TEMPORAL and f != 2 * self.boundary:
            raise ValueError(f"frame count {f} does not equal twice the boundary {self.boundary}")


@dataclass
class ReferenceImage:
    """Conditioning image: original frame, its trimap, and the composed view."""

    rgb: np.ndarray
    trimap: np.ndarray
    composed: np.ndarray

    def __post_init__(self) -> None:
        validate_rgb_frame(self.rgb, "rgb")
        validate_rgb_frame(self.trimap, "trimap")
        validate_rgb_frame(self.composed, "composed")
        if not np.isin(self.trimap, (0.0, 1.0)).all():
            raise ValueError("trimap pixels must be exactly 0 or 1")


def make_trimap(ref: np.ndarray, beta: int) -> np.ndarray:
    """Binarize a frame: pixels whose max 8-bit channel is < beta become black.

    beta is on the 8-bit scale; beta = 0 maps everything to white.
    """
    validate_rgb_frame(ref, "ref")
    if not 0 <= int(beta) <= 255:
        raise ValueError(f"beta must be in [0, 255], got {beta}")
    peak = quantize_u8(ref).max(axis=0)
    white = (peak >= int(beta)).astype(np.float64)
    return np.repeat(white[None, :, :], 3, axis=0)


def _check_clip_pair(rgb: np.ndarray, alpha_rgb: np.ndarray) -> None:
    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ValueError(f"rgb clip must be (f, 3, h, w), got {rgb.shape}")
    if alpha_rgb.ndim != 4 or alpha_rgb.shape[1] != 3:
        raise ValueError(f"alpha clip must be (f, 3, h, w), got {alpha_rgb.shape}")
    if rgb.shape != alpha_rgb.shape:
        raise ValueError(f"shape mismatch: rgb {rgb.shape} vs alpha {alpha_rgb.shape}")


def concat_joint(rgb: np.ndarray, alpha_rgb: np.ndarray, mode: LayoutMode) -> CompositeClip:
    """Concatenate the RGB clip and the gray-encoded alpha clip into one video."""
    rgb = np.asarray(rgb, dtype=np.float64)
    alpha_rgb = np.asarray(alpha_rgb, dtype=np.float64)
    _check_clip_pair(rgb, alpha_rgb)
    f, _, h, w = rgb.shape
    if mode is LayoutMode.WIDTH:
        return CompositeClip(np.concatenate([rgb, alpha_rgb], axis=3), mode, w)
    if mode is LayoutMode.HEIGHT:
        return CompositeClip(np.concatenate([rgb, alpha_rgb], axis=2), mode, h)
    return CompositeClip(np.concatenate([rgb, alpha_rgb], axis=0), mode, f)


def split_joint(comp: CompositeClip, mode: LayoutMode) -> tuple[np.ndarray, np.ndarray]:
    """Exact inverse of concat_joint. The second half may be non-gray when generated."""
    if comp.layout is not mode:
        raise ValueError(f"composite layout is {comp.layout.value}, asked to split as {mode.value}")
    b = comp.boundary
    frames = comp.frames
    if mode is LayoutMode.WIDTH:
        if frames.shape[3] != 2 * b:
            raise ValueError(f"boundary {b} inconsistent with width {frames.shape[3]}")
        return frames[:, :, :, :b].copy(), frames[:, :, :, b:].copy()
    if mode is LayoutMode.HEIGHT:
        if frames.shape[2] != 2 * b:
            raise ValueError(f"boundary {b} inconsistent with height {frames.shape[2]}")
        return frames[:, :, :b, :].copy(), frames[:, :, b:, :].copy()
    if frames.shape[0] != 2 * b:
        raise ValueError(f"boundary {b} inconsistent with frame count {frames.shape[0]}")
    return frames[:b].copy(), frames[b:].copy()


def compose_reference(
    ref: np.ndarray,
    beta: int,
    mode: LayoutMode,
    temporal_choice: TemporalReference = TemporalReference.RGB,
) -> ReferenceImage:
    """Build the conditioning image matching the active layout.

    Spatial layouts pair the frame with its trimap along the layout axis.
    The temporal layout cannot carry two images, so it degrades to either
    the plain frame or the trimap alone.
    """
    validate_rgb_frame(ref, "ref")
    trimap = make_trimap(ref, beta)
    if mode is LayoutMode.WIDTH:
        composed = np.concatenate([ref, trimap], axis=2)
    elif mode is LayoutMode.HEIGHT:
        composed = np.concatenate([ref, trimap], axis=1)
    elif temporal_choice is TemporalReference.RGB:
        composed = np.asarray(ref, dtype=np.float64).copy()
    else:
        composed = trimap.copy()
    return ReferenceImage(rgb=np.asarray(ref, dtype=np.float64), trimap=trimap, composed=composed)


def duplicate_reference(ref: np.ndarray, mode: LayoutMode) -> np.ndarray:
    """Plain-duplication conditioning: the frame repeated along the layout axis.

    Baseline counterpart of compose_reference for ablating the trimap; the
    temporal layout has nothing to duplicate and returns the frame itself.
    """
    validate_rgb_frame(ref, "ref")
    ref = np.asarray(ref, dtype=np.float64)
    if mode is LayoutMode.WIDTH:
        return np.concatenate([ref, ref], axis=2)
    if mode is LayoutMode.HEIGHT:
        return np.concatenate([ref, ref], axis=1)
    return ref.copy()
