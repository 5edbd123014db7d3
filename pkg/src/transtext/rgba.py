"""Alpha compositing and the gray-replication codec for transparency.

Frames are numpy arrays in [0, 1]: RGB frames are (3, h, w), alpha mattes
are (1, h, w). Everything stays 64-bit float internally; 8-bit quantization
happens only at PNG boundaries and inside the alpha->gray codec, which is
defined on the 8-bit grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


def quantize_u8(values: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to uint8 with round-half-away-from-zero."""
    q = np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def _check_range(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    lo, hi = float(arr.min(initial=0.0)), float(arr.max(initial=0.0))
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name} values outside [0,1]: min={lo}, max={hi}")


def validate_rgb_frame(frame: np.ndarray, name: str = "frame") -> None:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ValueError(f"{name} must have shape (3, h, w), got {frame.shape}")
    if frame.shape[1] < 1 or frame.shape[2] < 1:
        raise ValueError(f"{name} needs height >= 1 and width >= 1, got {frame.shape}")
    _check_range(frame, name)


def validate_alpha_matte(alpha: np.ndarray, name: str = "alpha") -> None:
    alpha = np.asarray(alpha)
    if alpha.ndim != 3 or alpha.shape[0] != 1:
        raise ValueError(f"{name} must have shape (1, h, w), got {alpha.shape}")
    if alpha.shape[1] < 1 or alpha.shape[2] < 1:
        raise ValueError(f"{name} needs height >= 1 and width >= 1, got {alpha.shape}")
    _check_range(alpha, name)


@dataclass
class RgbaClip:
    """A ground-truth transparent clip: per-frame foreground plus matte.

    rgb:   (f, 3, h, w) foreground colors
    alpha: (f, 1, h, w) opacity, 1 = fully opaque
    """

    rgb: np.ndarray
    alpha: np.ndarray

    def __post_init__(self) -> None:
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.rgb.ndim != 4 or self.rgb.shape[1] != 3:
            raise ValueError(f"rgb must be (f, 3, h, w), got {self.rgb.shape}")
        if self.alpha.ndim != 4 or self.alpha.shape[1] != 1:
            raise ValueError(f"alpha must be (f, 1, h, w), got {self.alpha.shape}")
        if self.rgb.shape[0] < 1:
            raise ValueError("clip needs at least one frame")
        if self.rgb.shape[0] != self.alpha.shape[0]:
            raise ValueError(
                f"frame count mismatch: rgb has {self.rgb.shape[0]}, alpha has {self.alpha.shape[0]}"
            )
        if self.rgb.shape[2:] != self.alpha.shape[2:]:
            raise ValueError(
                f"spatial mismatch: rgb {self.rgb.shape[2:]}, alpha {self.alpha.shape[2:]}"
            )
        _check_range(self.rgb, "rgb")
        _check_range(self.alpha, "alpha")

    @property
    def frame_count(self) -> int:
        return self.rgb.shape[0]

    @property
    def height(self) -> int:
        return self.rgb.shape[2]

    @property
    def width(self) -> int:
        return self.rgb.shape[3]


def composite_over(fg: np.ndarray, alpha: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """Blend foreground over background: alpha*fg + (1-alpha)*bg.

    With a zero background this is the premultiplied foreground.
    """
    validate_rgb_frame(fg, "fg")
    validate_alpha_matte(alpha, "alpha")
    validate_rgb_frame(bg, "bg")
    for axis, label in ((1, "height"), (2, "width")):
        if fg.shape[axis] != alpha.shape[axis]:
            raise ValueError(
                f"{label} mismatch: fg has {fg.shape[axis]}, alpha has {alpha.shape[axis]}"
            )
        if fg.shape[axis] != bg.shape[axis]:
            raise ValueError(
                f"{label} mismatch: fg has {fg.shape[axis]}, bg has {bg.shape[axis]}"
            )
    a = np.asarray(alpha, dtype=np.float64)
    return a * np.asarray(fg, dtype=np.float64) + (1.0 - a) * np.asarray(bg, dtype=np.float64)


def alpha_as_rgb_encode(alpha: np.ndarray) -> np.ndarray:
    """Quantize a matte to the 8-bit grid and replicate it across 3 channels."""
    validate_alpha_matte(alpha, "alpha")
    q = quantize_u8(alpha[0]).astype(np.float64) / 255.0
    return np.repeat(q[None, :, :], 3, axis=0)


def alpha_decode(frame: np.ndarray) -> np.ndarray:
    """Recover a matte from a (possibly non-gray) RGB frame: channel mean, clamped.

    The mean is evaluated as c0 + (c1-c0)/3 + (c2-c0)/3, which is exact on
    gray pixels so codec round-trips return 8-bit grid values bit-for-bit.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ValueError(f"frame must be (3, h, w), got {frame.shape}")
    mean = frame[0] + (frame[1] - frame[0]) / 3.0 + (frame[2] - frame[0]) / 3.0
    return np.clip(mean, 0.0, 1.0)[None, :, :]


def encode_alpha_clip(alpha: np.ndarray) -> np.ndarray:
    """Apply the gray-replication codec frame-wise: (f,1,h,w) -> (f,3,h,w)."""
    return np.stack([alpha_as_rgb_encode(a) for a in alpha])


def decode_alpha_clip(frames: np.ndarray) -> np.ndarray:
    """Channel-mean decode frame-wise: (f,3,h,w) -> (f,1,h,w)."""
    return np.stack([alpha_decode(fr) for fr in frames])


def is_gray_frame(frame: np.ndarray) -> bool:
    """True when all three channels are exactly equal per pixel."""
    frame = np.asarray(frame)
    return bool(np.array_equal(frame[0], frame[1]) and np.array_equal(frame[1], frame[2]))


def write_rgb_png(path: str | Path, frame: np.ndarray) -> None:
    validate_rgb_frame(frame, "frame")
    data = np.transpose(quantize_u8(frame), (1, 2, 0))
    Image.fromarray(data, mode="RGB").save(path)


def read_rgb_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return np.transpose(data, (2, 0, 1))


def write_rgba_png(path: str | Path, premultiplied: np.ndarray, alpha: np.ndarray) -> None:
    """Write a straight-alpha RGBA preview from a premultiplied frame.

    Colors are un-premultiplied (divided by alpha) so viewers that composite
    straight alpha reproduce the original appearance; fully transparent
    pixels get zero color.
    """
    validate_rgb_frame(premultiplied, "premultiplied")
    validate_alpha_matte(alpha, "alpha")
    a = alpha[0]
    safe = np.where(a > 0, a, 1.0)
    straight = np.clip(premultiplied / safe[None, :, :], 0.0, 1.0)
    straight = np.where(a[None, :, :] > 0, straight, 0.0)
    rgba = np.concatenate([straight, alpha], axis=0)
    data = np.transpose(quantize_u8(rgba), (1, 2, 0))
    Image.fromarray(data, mode="RGBA").save(path)
