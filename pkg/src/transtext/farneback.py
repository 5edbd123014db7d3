"""Dense optical flow via quadratic polynomial expansion.

Each image is locally modeled as f(p+d) ~ c + b.d + d^T A d with coefficients
fit by Gaussian-weighted least squares over a poly_n window. Displacement
between two expansions solves A d = db, averaged over a Gaussian window via
the normal equations, refined iteratively and coarse-to-fine over an image
pyramid.

Flow fields are (2, h, w): channel 0 is the x displacement (u), channel 1
the y displacement (v), in pixels, mapping frame A pixels to frame B.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class FlowConfig:
    pyramid_levels: int = 3
    pyramid_scale: float = 0.5
    window: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self) -> None:
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError(f"pyramid_scale must be in (0,1), got {self.pyramid_scale}")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 1, got {self.window}")
        if self.poly_n < 3 or self.poly_n % 2 == 0:
            raise ValueError(f"poly_n must be odd and >= 3, got {self.poly_n}")
        if self.pyramid_levels < 1:
            raise ValueError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.poly_sigma <= 0:
            raise ValueError(f"poly_sigma must be positive, got {self.poly_sigma}")


def _poly_kernels(n: int, sigma: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    half = n // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return g, x * g, x * x * g


def _poly_inverse_constants(n: int, sigma: float) -> tuple[float, float, float, float]:
    """Inverse-Gramian entries for the basis (1, x, y, x^2, y^2, xy)."""
    half = n // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    wy, wx = np.meshgrid(g, g, indexing="ij")
    a = wy * wx
    yy, xx = np.meshgrid(x, x, indexing="ij")
    basis = np.stack(
        [np.ones_like(xx), xx, yy, xx**2, yy**2, xx * yy], axis=-1
    ).reshape(-1, 6)
    gram = basis.T @ (a.reshape(-1, 1) * basis)
    inv = np.linalg.inv(gram)
    return inv[1, 1], inv[0, 3], inv[3, 3], inv[5, 5]


def polynomial_expansion(img: np.ndarray, n: int, sigma: float) -> np.ndarray:
    """Per-pixel quadratic coefficients, shape (h, w, 5): b_y, b_x, a_yy, a_xx, a_xy."""
    img = np.asarray(img, dtype=np.float64)
    g, xg, xxg = _poly_kernels(n, sigma)
    ig11, ig03, ig33, ig55 = _poly_inverse_constants(n, sigma)

    # separable correlations: vertical moments first, then horizontal
    t0 = ndimage.correlate1d(img, g, axis=0, mode="mirror")
    t1 = ndimage.correlate1d(img, xg, axis=0, mode="mirror")
    t2 = ndimage.correlate1d(img, xxg, axis=0, mode="mirror")

    b1 = ndimage.correlate1d(t0, g, axis=1, mode="mirror")  # 1
    b2 = ndimage.correlate1d(t0, xg, axis=1, mode="mirror")  # x
    b3 = ndimage.correlate1d(t1, g, axis=1, mode="mirror")  # y
    b4 = ndimage.correlate1d(t0, xxg, axis=1, mode="mirror")  # x^2
    b5 = ndimage.correlate1d(t2, g, axis=1, mode="mirror")  # y^2
    b6 = ndimage.correlate1d(t1, xg, axis=1, mode="mirror")  # xy

    coeffs = np.empty(img.shape + (5,), dtype=np.float64)
    coeffs[..., 0] = b3 * ig11  # b_y
    coeffs[..., 1] = b2 * ig11  # b_x
    coeffs[..., 2] = b1 * ig03 + b5 * ig33  # a_yy
    coeffs[..., 3] = b1 * ig03 + b4 * ig33  # a_xx
    coeffs[..., 4] = b6 * ig55 * 0.5  # a_xy (true off-diagonal of A)
    return coeffs


def _bilinear_sample(field: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample each coefficient channel at float coordinates, clamped at borders."""
    h, w = field.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    top = field[y0, x0] * (1 - fx) + field[y0, x1] * fx
    bot = field[y1, x0] * (1 - fx) + field[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _border_weight(h: int, w: int, ramp: int = 5) -> np.ndarray:
    ys = np.minimum(np.arange(h), np.arange(h)[::-1])
    xs = np.minimum(np.arange(w), np.arange(w)[::-1])
    d = np.minimum(ys[:, None], xs[None, :])
    return np.minimum(d, ramp) / ramp


def _normal_equations(r0: np.ndarray, r1: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Per-pixel least-squares system (h, w, 5): G11, G12, G22, h1, h2."""
    h, w = r0.shape[:2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    u, v = flow[0], flow[1]
    wy = ys + v
    wx = xs + u
    inside = (wy >= 0) & (wy <= h - 1) & (wx >= 0) & (wx <= w - 1)
    r1w = _bilinear_sample(r1, wy, wx)

    a_yy = np.where(inside, 0.5 * (r0[..., 2] + r1w[..., 2]), r0[..., 2])
    a_xx = np.where(inside, 0.5 * (r0[..., 3] + r1w[..., 3]), r0[..., 3])
    a_xy = np.where(inside, 0.5 * (r0[..., 4] + r1w[..., 4]), r0[..., 4])
    db_y = np.where(inside, 0.5 * (r0[..., 0] - r1w[..., 0]), 0.0)
    db_x = np.where(inside, 0.5 * (r0[..., 1] - r1w[..., 1]), 0.0)

    # fold the current displacement back in so the solve yields total flow
    h_y = db_y + a_yy * v + a_xy * u
    h_x = db_x + a_xy * v + a_xx * u

    bw = _border_weight(h, w)
    a_yy, a_xx, a_xy = a_yy * bw, a_xx * bw, a_xy * bw
    h_y, h_x = h_y * bw, h_x * bw

    m = np.empty((h, w, 5), dtype=np.float64)
    m[..., 0] = a_yy**2 + a_xy**2  # G11
    m[..., 1] = (a_yy + a_xx) * a_xy  # G12
    m[..., 2] = a_xx**2 + a_xy**2  # G22
    m[..., 3] = a_yy * h_y + a_xy * h_x  # h1
    m[..., 4] = a_xy * h_y + a_xx * h_x  # h2
    return m


def _solve_flow(m: np.ndarray, window: int) -> np.ndarray:
    sigma = 0.3 * ((window - 1) * 0.5 - 1.0) + 0.8
    radius = max(1, window // 2)
    sm = np.empty_like(m)
    for c in range(5):
        sm[..., c] = ndimage.gaussian_filter(
            m[..., c], sigma=sigma, mode="mirror", truncate=radius / sigma
        )
    g11, g12, g22, h1, h2 = (sm[..., c] for c in range(5))
    det = g11 * g22 - g12 * g12 + 1e-3
    v = (g22 * h1 - g12 * h2) / det
    u = (g11 * h2 - g12 * h1) / det
    return np.stack([u, v])


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * w / out_w - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, grid, order=1, mode="nearest")


def farneback_flow(a: np.ndarray, b: np.ndarray, cfg: FlowConfig | None = None) -> np.ndarray:
    """Dense (2, h, w) displacement field mapping frame a onto frame b."""
    cfg = cfg or FlowConfig()
    # the solver's determinant regularizer is calibrated for 8-bit-range data
    a = np.asarray(a, dtype=np.float64) * 255.0
    b = np.asarray(b, dtype=np.float64) * 255.0
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"frames must be 2-d grayscale, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    h, w = a.shape
    if min(h, w) < cfg.poly_n:
        raise ValueError(f"frames of size {a.shape} are smaller than poly_n={cfg.poly_n}")

    # drop pyramid levels that would undercut the polynomial window
    levels = []
    for k in range(cfg.pyramid_levels):
        s = cfg.pyramid_scale**k
        lh, lw = int(round(h * s)), int(round(w * s))
        if min(lh, lw) < cfg.poly_n:
            break
        levels.append((lh, lw, s))

    flow = None
    for lh, lw, s in reversed(levels):
        if s == 1.0:
            ia, ib = a, b
        else:
            smooth = (1.0 / s - 1.0) * 0.5
            ia = _resize_bilinear(ndimage.gaussian_filter(a, smooth, mode="mirror"), lh, lw)
            ib = _resize_bilinear(ndimage.gaussian_filter(b, smooth, mode="mirror"), lh, lw)
        r0 = polynomial_expansion(ia, cfg.poly_n, cfg.poly_sigma)
        r1 = polynomial_expansion(ib, cfg.poly_n, cfg.poly_sigma)
        if flow is None:
            flow = np.zeros((2, lh, lw), dtype=np.float64)
        else:
            ph, pw = flow.shape[1:]
            flow = np.stack(
                [
                    _resize_bilinear(flow[0], lh, lw) * (lw / pw),
                    _resize_bilinear(flow[1], lh, lw) * (lh / ph),
                ]
            )
        for it in range(cfg.iterations):
            m = _normal_equations(r0, r1, flow)
            flow = _solve_flow(m, cfg.window)
    return flow
