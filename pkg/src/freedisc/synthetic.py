"""Seeded test signals and images with known discontinuities."""
from __future__ import annotations

import numpy as np

__all__ = [
    "piecewise_smooth_signal",
    "shapes_image",
    "edge_image",
    "square_hole_mask",
    "random_instance",
]


def piecewise_smooth_signal(n: int = 256, jumps: int = 4, noise: float = 0.02,
                            seed: int = 0):
    """Polynomial pieces separated by jumps, plus Gaussian noise.

    Returns ``(noisy, clean, jump_positions)`` where a jump at ``k`` sits
    between samples ``k`` and ``k + 1``.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng(seed)
    jumps = min(jumps, max(0, n // 8 - 1))
    if jumps:
        # keep pieces at least n/16 long
        slots = np.arange(n // 16, n - n // 16)
        cuts = np.sort(rng.choice(slots, size=jumps, replace=False))
        while jumps > 1 and np.diff(cuts).min() < n // 16:
            cuts = np.sort(rng.choice(slots, size=jumps, replace=False))
    else:
        cuts = np.array([], dtype=int)
    x = np.arange(n) / n
    clean = np.empty(n)
    bounds = [0, *(cuts + 1).tolist(), n]
    level = 0.0
    for a, b in zip(bounds[:-1], bounds[1:]):
        xs = x[a:b] - x[a]
        slope, curv = rng.uniform(-1.0, 1.0), rng.uniform(-2.0, 2.0)
        clean[a:b] = level + slope * xs + curv * xs**2
        end = clean[b - 1]
        level = end + rng.choice([-1.0, 1.0]) * rng.uniform(0.4, 1.0)
    clean -= clean.mean()
    noisy = clean + noise * rng.standard_normal(n)
    return noisy, clean, cuts.tolist()


def shapes_image(n: int = 80, noise: float = 0.05, seed: int = 0):
    """Rectangles and a disc on a gradient background, values roughly in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:n, 0:n] / n
    img = 0.2 + 0.1 * xx
    img[(xx > 0.15) & (xx < 0.45) & (yy > 0.2) & (yy < 0.6)] = 0.8
    img[(xx > 0.55) & (xx < 0.85) & (yy > 0.55) & (yy < 0.85)] = 0.5
    img[(xx - 0.7) ** 2 + (yy - 0.25) ** 2 < 0.15**2] = 0.95
    noisy = img + noise * rng.standard_normal(img.shape)
    return noisy, img


def edge_image(n: int = 40):
    """Binary image with a vertical edge at the middle column."""
    img = np.zeros((n, n))
    img[:, n // 2:] = 1.0
    return img


def square_hole_mask(n: int = 40, side: int | None = None) -> np.ndarray:
    """Boolean observation mask: False inside a centered square."""
    side = n // 4 if side is None else side
    if not 0 < side < n:
        raise ValueError("hole side must be in (0, n)")
    mask = np.ones((n, n), dtype=bool)
    a = (n - side) // 2
    mask[a:a + side, a:a + side] = False
    return mask


def random_instance(rng: np.random.Generator, rows: int, cols: int, norm: float = 0.95,
                    data_scale: float = 2.0):
    """Gaussian ``T`` rescaled to spectral norm ``norm`` and Gaussian data."""
    T = rng.standard_normal((rows, cols))
    T *= norm / np.linalg.norm(T, 2)
    g = data_scale * rng.standard_normal(rows)
    return T, g
