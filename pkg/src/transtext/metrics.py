"""Motion-alignment scoring between RGB and alpha streams, plus soft matte IoU.

The alignment score compares dense flow fields of the two streams through
four raw errors (endpoint, angular, magnitude correlation, directional
cosine), normalizes each to [0,1], and averages to a 0-100 scale.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .farneback import FlowConfig, farneback_flow
from .synth import worker_count

DEFAULT_TAU = 0.1  # pixels; both flows must exceed this for the direction term


@dataclass
class AlignmentReport:
    epe: float
    angle_deg: float
    mag_corr: float
    dir_cos: float
    s_epe: float
    s_angle: float
    s_mag: float
    s_dir: float
    final_score: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in vars(self).items()}


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Correlation of two fields; degenerate (constant) fields get 1 if both, else 0.

    The denominator is sqrt(sxx*syy), which makes r exactly 1 for identical
    non-constant inputs.
    """
    x = x.ravel()
    y = y.ravel()
    vx = float(np.var(x))
    vy = float(np.var(y))
    if vx < 1e-12 and vy < 1e-12:
        return 1.0
    if vx < 1e-12 or vy < 1e-12:
        return 0.0
    dx = x - x.mean()
    dy = y - y.mean()
    r = float((dx * dy).sum() / np.sqrt((dx * dx).sum() * (dy * dy).sum()))
    return min(1.0, max(-1.0, r))


def flow_pair_metrics(
    f1: np.ndarray, f2: np.ndarray, tau: float = DEFAULT_TAU
) -> tuple[float, float, float, float]:
    """Raw comparison of two (2, h, w) flow fields: (epe, angle_deg, mag_corr, dir_cos)."""
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape or f1.ndim != 3 or f1.shape[0] != 2:
        raise ValueError(f"flow fields must share shape (2, h, w), got {f1.shape} and {f2.shape}")
    if tau < 0:
        raise ValueError(f"tau must be >= 0, got {tau}")

    diff = f1 - f2
    epe = float(np.sqrt(diff[0] ** 2 + diff[1] ** 2).mean())

    # angles between (u, v, 1) lift vectors stay defined at zero flow; the
    # sqrt-of-product denominator yields exactly 0 degrees for identical flows
    dot = f1[0] * f2[0] + f1[1] * f2[1] + 1.0
    n1sq = f1[0] ** 2 + f1[1] ** 2 + 1.0
    n2sq = f2[0] ** 2 + f2[1] ** 2 + 1.0
    cos_ang = np.clip(dot / np.sqrt(n1sq * n2sq), -1.0, 1.0)
    angle_deg = float(np.degrees(np.arccos(cos_ang)).mean())

    m1sq = f1[0] ** 2 + f1[1] ** 2
    m2sq = f2[0] ** 2 + f2[1] ** 2
    m1 = np.sqrt(m1sq)
    m2 = np.sqrt(m2sq)
    mag_corr = _pearson(m1, m2)

    valid = (m1 > tau) & (m2 > tau)
    if valid.any():
        dots = f1[0][valid] * f2[0][valid] + f1[1][valid] * f2[1][valid]
        cos = np.clip(dots / np.sqrt(m1sq[valid] * m2sq[valid]), -1.0, 1.0)
        dir_cos = float(cos.mean())
    else:
        dir_cos = 1.0
    return epe, angle_deg, mag_corr, dir_cos


def to_grayscale_clip(frames: np.ndarray) -> np.ndarray:
    """(f, 3, h, w) -> (f, h, w) by unweighted channel mean."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError(f"expected (f, 3, h, w) clip, got {frames.shape}")
    return frames.mean(axis=1)


def alignment_score(
    rgb: np.ndarray,
    alpha: np.ndarray,
    flow_cfg: FlowConfig | None = None,
    tau: float = DEFAULT_TAU,
) -> AlignmentReport:
    """Score motion consistency between an RGB clip and its alpha clip (both (f,3,h,w)).

    Raw metrics are averaged over consecutive frame pairs first, then
    normalized: exp(-epe/10), exp(-angle/45), (corr+1)/2, (cos+1)/2; the
    final score is 100 times their mean.
    """
    flow_cfg = flow_cfg or FlowConfig()
    grgb = to_grayscale_clip(rgb)
    galpha = to_grayscale_clip(alpha)
    if grgb.shape != galpha.shape:
        raise ValueError(f"clip shape mismatch: {grgb.shape} vs {galpha.shape}")
    f = grgb.shape[0]
    if f < 2:
        raise ValueError(f"need at least 2 frames for flow, got {f}")

    def pair(i: int) -> tuple[float, float, float, float]:
        frgb = farneback_flow(grgb[i], grgb[i + 1], flow_cfg)
        falpha = farneback_flow(galpha[i], galpha[i + 1], flow_cfg)
        return flow_pair_metrics(frgb, falpha, tau)

    workers = worker_count()
    indices = range(f - 1)
    if workers > 1 and f > 2:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            raws = list(pool.map(pair, indices))
    else:
        raws = [pair(i) for i in indices]

    epe, angle, corr, dcos = (float(np.mean([r[j] for r in raws])) for j in range(4))
    return normalize_scores(epe, angle, corr, dcos)


def normalize_scores(epe: float, angle_deg: float, mag_corr: float, dir_cos: float) -> AlignmentReport:
    """Map raw motion errors to [0,1] sub-scores and the 0-100 aggregate."""
    s_epe = float(np.exp(-epe / 10.0))
    s_angle = float(np.exp(-angle_deg / 45.0))
    s_mag = (mag_corr + 1.0) / 2.0
    s_dir = (dir_cos + 1.0) / 2.0
    final = 100.0 * 0.25 * (s_epe + s_angle + s_mag + s_dir)
    return AlignmentReport(
        epe=epe,
        angle_deg=angle_deg,
        mag_corr=mag_corr,
        dir_cos=dir_cos,
        s_epe=s_epe,
        s_angle=s_angle,
        s_mag=s_mag,
        s_dir=s_dir,
        final_score=final,
    )


def soft_alpha_miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Soft Jaccard between matte clips (f, 1, h, w), averaged per frame, 0-100."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    ious = []
    for p, g in zip(pred, gt):
        inter = float(np.minimum(p, g).sum())
        union = float(np.maximum(p, g).sum())
        ious.append(1.0 if union == 0.0 else inter / union)
    return 100.0 * float(np.mean(ious))
