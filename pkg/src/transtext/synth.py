"""Procedural ground-truth RGBA glyph animations and the on-disk dataset.

Clips are fully determined by (spec, seed): all randomness flows through a
splitmix64 stream keyed per clip, so regeneration is bit-identical across
platforms and scheduling.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .rgba import RgbaClip, encode_alpha_clip, write_rgb_png

ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 "

# 5x7 bitmap font, one string per row, '#' marks a set pixel. 'I' is a plain
# 7-pixel vertical bar.
FONT_5X7: dict[str, tuple[str, ...]] = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".####", "#....", "#....", "#....", "#....", "#....", ".####"),
    "D": ("####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "F": ("#####", "#....", "#....", "####.", "#....", "#....", "#...."),
    "G": (".####", "#....", "#....", "#.###", "#...#", "#...#", ".###."),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "I": ("..#..", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "J": ("....#", "....#", "....#", "....#", "....#", "#...#", ".###."),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "M": ("#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"),
    "N": ("#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"),
    "O": (".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "P": ("####.", "#...#", "#...#", "####.", "#....", "#....", "#...."),
    "Q": (".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"),
    "R": ("####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"),
    "S": (".####", "#....", "#....", ".###.", "....#", "....#", "####."),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "V": ("#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "W": ("#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"),
    "X": ("#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "Z": ("#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"),
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "..##.", ".#...", "#....", "#####"),
    "3": (".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": (".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."),
    " ": (".....",) * 7,
}

CELL_W = 5
CELL_H = 7
ADVANCE = CELL_W + 1  # one empty column between characters


class SplitMix64:
    """Tiny deterministic RNG; identical sequences on every platform."""

    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = int(seed) & self.MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & self.MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self.MASK
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return self.next_u64() / 2.0**64

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high)."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        return low + self.next_u64() % (high - low)

    def choice(self, items):
        return items[self.randint(0, len(items))]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]


def derive_stream(seed: int, *salts: int) -> SplitMix64:
    """Per-clip RNG stream: fold salts into the seed through splitmix steps."""
    rng = SplitMix64(seed)
    key = rng.next_u64()
    for salt in salts:
        key = SplitMix64(key ^ (int(salt) & SplitMix64.MASK)).next_u64()
    return SplitMix64(key)


class EffectKind(Enum):
    FADE_IN_OUT = "fade_in_out"
    LETTERS_COLLECT = "letters_collect"
    SNOW_FALL = "snow_fall"
    FLICKER = "flicker"


EFFECT_ORDER = (
    EffectKind.FADE_IN_OUT,
    EffectKind.LETTERS_COLLECT,
    EffectKind.SNOW_FALL,
    EffectKind.FLICKER,
)


def effect_id(effect: EffectKind) -> int:
    return EFFECT_ORDER.index(effect)


@dataclass
class GlyphSpec:
    text: str
    scale: int = 1
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if not self.text or len(self.text) > 16:
            raise ValueError(f"text must be 1..16 characters, got {len(self.text)}")
        bad = sorted({c for c in self.text if c not in FONT_5X7})
        if bad:
            raise ValueError(f"unsupported characters {bad}; allowed: A-Z, 0-9, space")
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if len(self.color) != 3 or any(not (0.0 <= c <= 1.0) for c in self.color):
            raise ValueError(f"color must be an RGB triple in [0,1], got {self.color}")


@dataclass
class ClipSpec:
    glyph: GlyphSpec
    effect: EffectKind
    frames: int = 9
    height: int = 32
    width: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.frames < 3 or self.frames % 2 == 0:
            raise ValueError(f"frames must be odd and >= 3, got {self.frames}")
        if self.height % 2 != 0 or self.width % 2 != 0:
            raise ValueError(
                f"height and width must be divisible by the pooling factor 2, got {self.height}x{self.width}"
            )


def _char_cells(text: str, scale: int, h: int, w: int) -> list[tuple[str, int, int]]:
    """Character placements (char, y0, x0) for centered text; errors if it overflows."""
    units_w = len(text) * ADVANCE - 1
    need_w = units_w * scale
    need_h = CELL_H * scale
    if need_w > w:
        raise ValueError(f"text {text!r} needs {need_w} px width, only {w} available")
    if need_h > h:
        raise ValueError(f"text {text!r} needs {need_h} px height, only {h} available")
    x0 = (w - need_w) // 2
    y0 = (h - need_h) // 2
    return [(c, y0, x0 + i * ADVANCE * scale) for i, c in enumerate(text)]


def _stamp(canvas: np.ndarray, char: str, y0: int, x0: int, scale: int) -> None:
    """Draw one glyph cell onto the canvas, clipping at the borders."""
    rows = FONT_5X7[char]
    cell = np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows])
    block = np.kron(cell, np.ones((scale, scale)))
    h, w = canvas.shape
    bh, bw = block.shape
    ys, xs = max(0, y0), max(0, x0)
    ye, xe = min(h, y0 + bh), min(w, x0 + bw)
    if ys >= ye or xs >= xe:
        return
    view = block[ys - y0 : ye - y0, xs - x0 : xe - x0]
    np.maximum(canvas[ys:ye, xs:xe], view, out=canvas[ys:ye, xs:xe])


def rasterize_text(spec: GlyphSpec, h: int, w: int) -> np.ndarray:
    """Binary (1, h, w) matte of the centered text."""
    canvas = np.zeros((h, w), dtype=np.float64)
    for char, y0, x0 in _char_cells(spec.text, spec.scale, h, w):
        _stamp(canvas, char, y0, x0, spec.scale)
    return canvas[None, :, :]


def _foreground(alpha: np.ndarray, color: tuple[float, float, float]) -> np.ndarray:
    """Solid color where alpha has support, black elsewhere."""
    support = (alpha[0] > 0).astype(np.float64)
    return np.array(color, dtype=np.float64)[:, None, None] * support[None, :, :]


def _fade_alphas(stencil: np.ndarray, f: int) -> list[np.ndarray]:
    mid = f // 2
    return [stencil * (1.0 - abs(i - mid) / mid) for i in range(f)]


def _collect_alphas(spec: ClipSpec, rng: SplitMix64) -> list[np.ndarray]:
    f, h, w = spec.frames, spec.height, spec.width
    mid = f // 2
    cells = _char_cells(spec.glyph.text, spec.glyph.scale, h, w)
    starts = []
    for _ in cells:
        side = rng.randint(0, 4)  # 0 left, 1 right, 2 top, 3 bottom
        span = CELL_W * spec.glyph.scale
        dist = rng.randint(span + 1, span + max(h, w))
        if side == 0:
            starts.append((0, -dist))
        elif side == 1:
            starts.append((0, dist))
        elif side == 2:
            starts.append((-dist, 0))
        else:
            starts.append((dist, 0))
    alphas = []
    for i in range(f):
        progress = min(i, mid) / mid
        canvas = np.zeros((h, w), dtype=np.float64)
        for (char, y0, x0), (sy, sx) in zip(cells, starts):
            dy = round(sy * (1.0 - progress))
            dx = round(sx * (1.0 - progress))
            _stamp(canvas, char, y0 + dy, x0 + dx, spec.glyph.scale)
        alphas.append(canvas[None, :, :])
    return alphas


def _snow_alphas(spec: ClipSpec, stencil: np.ndarray, rng: SplitMix64) -> list[np.ndarray]:
    f, h, w = spec.frames, spec.height, spec.width
    mid = f // 2
    text_top = next((y for y in range(h) if stencil[0, y].any()), h)
    count = rng.randint(8, 17)
    particles = []
    for _ in range(count):
        x = rng.randint(0, w)
        y0 = rng.randint(0, max(1, text_top))
        speed = 1 + rng.randint(0, 2)
        particles.append((y0, x, speed))
    alphas = []
    tail = f - 1 - mid
    for i in range(f):
        canvas = stencil[0].copy()
        if i > mid:
            # snow only after the reference frame so its support stays clean
            u = (i - mid) / tail
            strength = 4.0 * u * (1.0 - u)
            for y0, x, speed in particles:
                y = y0 + speed * (i - mid)
                if 0 <= y < h:
                    canvas[y, x] = max(canvas[y, x], strength)
        alphas.append(canvas[None, :, :])
    return alphas


def _flicker_alphas(spec: ClipSpec, stencil: np.ndarray, rng: SplitMix64) -> list[np.ndarray]:
    return [stencil * (0.5 + 0.5 * rng.uniform()) for _ in range(spec.frames)]


def render_effect(spec: ClipSpec) -> RgbaClip:
    """Render one clip; bit-identical for identical (spec, seed)."""
    stencil = rasterize_text(spec.glyph, spec.height, spec.width)
    rng = derive_stream(spec.seed, effect_id(spec.effect), spec.frames, spec.height, spec.width)
    if spec.effect is EffectKind.FADE_IN_OUT:
        alphas = _fade_alphas(stencil, spec.frames)
    elif spec.effect is EffectKind.LETTERS_COLLECT:
        alphas = _collect_alphas(spec, rng)
    elif spec.effect is EffectKind.SNOW_FALL:
        alphas = _snow_alphas(spec, stencil, rng)
    else:
        alphas = _flicker_alphas(spec, stencil, rng)
    rgb = np.stack([_foreground(a, spec.glyph.color) for a in alphas])
    return RgbaClip(rgb=rgb, alpha=np.stack(alphas))


def middle_reference(clip: RgbaClip) -> np.ndarray:
    """Premultiplied middle frame, the appearance the model is conditioned on."""
    if clip.frame_count % 2 == 0:
        raise ValueError(f"clip needs an odd frame count, got {clip.frame_count}")
    mid = clip.frame_count // 2
    return clip.alpha[mid] * clip.rgb[mid]


@dataclass
class ManifestEntry:
    id: str
    effect: str
    text: str
    seed: int
    split: str


@dataclass
class DatasetManifest:
    seed: int
    split_fraction: float
    entries: list[ManifestEntry] = field(default_factory=list)

    def ids(self, split: str) -> list[str]:
        return [e.id for e in self.entries if e.split == split]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "split_fraction": self.split_fraction,
            "counts": {
                "train": len(self.ids("train")),
                "val": len(self.ids("val")),
            },
            "entries": [vars(e) for e in self.entries],
        }


def _write_clip(out_dir: Path, clip_id: str, clip: RgbaClip) -> None:
    clip_dir = out_dir / clip_id
    clip_dir.mkdir(parents=True, exist_ok=True)
    premult = clip.alpha * clip.rgb
    alpha_rgb = encode_alpha_clip(clip.alpha)
    for i in range(clip.frame_count):
        write_rgb_png(clip_dir / f"rgb_{i:03d}.png", premult[i])
        write_rgb_png(clip_dir / f"alpha_{i:03d}.png", alpha_rgb[i])


def worker_count() -> int:
    cap = os.environ.get("TRANSTEXT_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def build_dataset(
    specs: list[ClipSpec],
    split_fraction: float,
    out_dir: str | Path,
    seed: int = 0,
) -> DatasetManifest:
    """Render all clips to PNG pairs plus a manifest; split by seeded shuffle."""
    if not 0.0 < split_fraction < 1.0:
        raise ValueError(f"split_fraction must be in (0, 1), got {split_fraction}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise ValueError(f"output directory {out} is not writable: {exc}") from exc

    order = list(range(len(specs)))
    derive_stream(seed, len(specs)).shuffle(order)
    n_train = int(round(split_fraction * len(specs)))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[idx] = "train" if rank < n_train else "val"

    manifest = DatasetManifest(seed=seed, split_fraction=split_fraction)
    ids = [f"clip_{i:05d}" for i in range(len(specs))]
    for i, spec in enumerate(specs):
        manifest.entries.append(
            ManifestEntry(
                id=ids[i],
                effect=spec.effect.value,
                text=spec.glyph.text,
                seed=spec.seed,
                split=split_of[i],
            )
        )

    def job(i: int) -> None:
        _write_clip(out, ids[i], render_effect(specs[i]))

    workers = worker_count()
    if workers > 1 and len(specs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(job, range(len(specs))))
    else:
        for i in range(len(specs)):
            job(i)

    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(dataset_dir: str | Path) -> DatasetManifest:
    with open(Path(dataset_dir) / "manifest.json") as fh:
        raw = json.load(fh)
    manifest = DatasetManifest(seed=raw["seed"], split_fraction=raw["split_fraction"])
    manifest.entries = [ManifestEntry(**e) for e in raw["entries"]]
    return manifest


def load_clip_arrays(dataset_dir: str | Path, clip_id: str) -> tuple[np.ndarray, np.ndarray]:
    """Load a stored clip: (premultiplied rgb (f,3,h,w), alpha (f,1,h,w))."""
    from .rgba import alpha_decode, read_rgb_png

    clip_dir = Path(dataset_dir) / clip_id
    rgb_paths = sorted(clip_dir.glob("rgb_*.png"))
    if not rgb_paths:
        raise ValueError(f"no frames found under {clip_dir}")
    rgb = np.stack([read_rgb_png(p) for p in rgb_paths])
    alpha = np.stack(
        [alpha_decode(read_rgb_png(clip_dir / f"alpha_{i:03d}.png")) for i in range(len(rgb_paths))]
    )
    return rgb, alpha


def default_specs(
    count: int,
    frames: int,
    height: int,
    width: int,
    seed: int,
    scale: int = 1,
    max_text_len: int = 4,
) -> list[ClipSpec]:
    """Seeded spec pool cycling through all effects with random text and color."""
    letters = ALPHABET.strip()  # no leading/trailing space in generated text
    max_fit = (width // scale + 1) // ADVANCE
    top = max(1, min(max_text_len, max_fit))
    specs = []
    for i in range(count):
        rng = derive_stream(seed, 0xDA7A, i)
        length = rng.randint(1, top + 1)
        text = "".join(rng.choice(letters) for _ in range(length))
        # keep glyphs bright enough that an 8-bit threshold of 5 always fires
        color = tuple(0.25 + 0.75 * rng.uniform() for _ in range(3))
        effect = EFFECT_ORDER[i % len(EFFECT_ORDER)]
        specs.append(
            ClipSpec(
                glyph=GlyphSpec(text=text, scale=scale, color=color),
                effect=effect,
                frames=frames,
                height=height,
                width=width,
                seed=derive_stream(seed, 0x5EED, i).next_u64(),
            )
        )
    return specs
