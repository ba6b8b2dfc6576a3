"""Synthetic test images drawn from the autoregressive model itself."""
from __future__ import annotations

import numpy as np

from .context import NeighborTemplate, make_template

__all__ = ["QUADRANT_PROCESSES", "ar_field", "ar_quadrants"]

#: (left, top-right, top) coefficients, stationary mean and innovation std per quadrant.
QUADRANT_PROCESSES = (
    ((0.55, 0.10, 0.33), 70.0, 2.0),
    ((0.25, 0.30, 0.42), 180.0, 2.5),
    ((0.80, -0.25, 0.40), 120.0, 2.0),
    ((0.05, 0.05, 0.85), 40.0, 3.0),
)


def ar_field(height, width, coeffs, mean, noise_std, rng, template: NeighborTemplate = None,
             out=None, region=None):
    """Raster-scan sample of a causal AR process.

    ``coeffs`` weight the template neighbours; the intercept is chosen so the
    process mean is ``mean``.  When ``out`` is given, only ``region``
    (top, left, h, w) of it is overwritten and neighbours outside the region
    are read from ``out``.  Out-of-image neighbours read ``mean``.
    """
    template = template or make_template(len(coeffs) + 1)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    intercept = mean * (1.0 - coeffs.sum())
    if out is None:
        out = np.full((height, width), float(mean))
    H, W = out.shape
    top, left, h, w = region if region is not None else (0, 0, H, W)
    for i in range(top, top + h):
        for j in range(left, left + w):
            acc = intercept
            for c, (r, q) in zip(coeffs, template.offsets):
                ii, jj = i + r, j + q
                acc += c * (out[ii, jj] if (0 <= ii < H and 0 <= jj < W) else mean)
            out[i, j] = acc + noise_std * rng.standard_normal()
    return out


def ar_quadrants(size: int = 64, seed: int = 0, processes=QUADRANT_PROCESSES) -> np.ndarray:
    """Square image whose four quadrants follow distinct AR processes."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size), 128.0)
    half = size // 2
    regions = [(0, 0, half, half), (0, half, half, size - half),
               (half, 0, size - half, half), (half, half, size - half, size - half)]
    # sample in raster order of quadrants so every causal neighbour is already drawn
    for (coeffs, mean, std), reg in zip(processes, regions):
        ar_field(size, size, coeffs, mean, std, rng, out=img, region=reg)
    return img
