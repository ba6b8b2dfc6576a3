"""Grayscale image handling: file I/O, noise injection, quality metrics and
the Gaussian-filter baseline.

Images are plain 2-D ``float64`` arrays on the 0-255 scale.  Values may leave
that range while the denoiser works on them; clamping happens only when an
image is written to disk or scored.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from scipy import ndimage

__all__ = [
    "ImageFormatError",
    "MetricsReport",
    "RNG_ALGORITHM",
    "as_image",
    "load_image",
    "save_image",
    "to_uint8",
    "add_gaussian_noise",
    "gaussian_kernel",
    "gaussian_filter",
    "ssim",
    "compute_metrics",
    "metrics_csv_row",
]

#: Identifier of the generator behind :func:`add_gaussian_noise`.
RNG_ALGORITHM = "numpy.random.Generator(PCG64).standard_normal"

_SEED_MASK = (1 << 64) - 1


class ImageFormatError(ValueError):
    """Raised for unreadable, corrupt or unsupported image files."""


def as_image(pixels) -> np.ndarray:
    """Validate ``pixels`` and return them as a C-contiguous float64 image."""
    img = np.ascontiguousarray(pixels, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be at least 1x1, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite pixel values")
    return img


# --------------------------------------------------------------------------
# File I/O
# --------------------------------------------------------------------------

def _read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()

    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])

    magic = tokens[0]
    if magic != b"P5":
        raise ImageFormatError(
            f"{path}: unsupported PGM variant {magic!r} (only binary P5 is supported)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: corrupt PGM header fields {tokens[1:]!r}") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: invalid PGM dimensions {width}x{height}")
    if maxval > 255 or maxval < 1:
        raise ImageFormatError(
            f"{path}: unsupported PGM maxval {maxval} (only 8-bit, maxval <= 255)")
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise ImageFormatError(
            f"{path}: PGM raster truncated ({len(raster)} of {width * height} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).astype(np.float64)


def _read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            fmt, mode = im.format, im.mode
            if fmt != "PNG":
                raise ImageFormatError(f"{path}: expected PNG data, found {fmt}")
            if mode != "L":
                raise ImageFormatError(
                    f"{path}: unsupported PNG mode {mode!r} (only 8-bit grayscale 'L')")
            arr = np.asarray(im, dtype=np.uint8)
    except ImageFormatError:
        raise
    except (OSError, SyntaxError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ImageFormatError(f"{path}: corrupt PNG ({exc})") from exc
    return arr.astype(np.float64)


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale PGM (P5) or PNG file.

    Returns
    -------
    ndarray
        ``float64`` array of shape ``(height, width)`` with values in [0, 255].
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such image file: {path}")
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"P") and head[1:2].isdigit():
        return _read_pgm(path)
    if head.startswith(b"\x89PNG"):
        return _read_png(path)
    raise ImageFormatError(f"{path}: unrecognised image format (expected PGM P5 or PNG)")


def to_uint8(image) -> np.ndarray:
    """Clamp to [0, 255] and round half away from zero."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 255.0)
    # after clamping everything is nonnegative, so floor(x + 0.5) rounds half away
    return np.floor(img + 0.5).astype(np.uint8)


def save_image(image, path) -> None:
    """Write ``image`` as 8-bit PGM or PNG, chosen by file extension."""
    path = os.fspath(path)
    data = to_uint8(as_image(image))
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        h, w = data.shape
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (w, h))
            fh.write(data.tobytes())
    elif ext == ".png":
        Image.fromarray(data, mode="L").save(path, format="PNG")
    else:
        raise ValueError(f"cannot infer image format from extension {ext!r} (use .pgm or .png)")


# --------------------------------------------------------------------------
# Degradation and baseline
# --------------------------------------------------------------------------

def add_gaussian_noise(image, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise to every pixel.

    The result is not clamped.  Identical ``(image, sigma, seed)`` give
    bit-identical output; see :data:`RNG_ALGORITHM`.
    """
    img = as_image(image)
    if not sigma >= 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(int(seed) & _SEED_MASK)
    return img + sigma * rng.standard_normal(img.shape)


def gaussian_kernel(kernel_sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel truncated at ``ceil(3 * kernel_sigma)``."""
    if not kernel_sigma > 0:
        raise ValueError(f"kernel_sigma must be positive, got {kernel_sigma}")
    radius = int(math.ceil(3.0 * kernel_sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / kernel_sigma) ** 2)
    return k / k.sum()


def gaussian_filter(image, kernel_sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with nearest-pixel edge replication."""
    img = as_image(image)
    k = gaussian_kernel(kernel_sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = (0.01 * 255) ** 2
_SSIM_C2 = (0.03 * 255) ** 2


@dataclass(frozen=True)
class MetricsReport:
    """RMSE, PSNR (dB, ``math.inf`` for identical images) and SSIM."""

    rmse: float
    psnr: float
    ssim: float


def _ssim_window_1d() -> np.ndarray:
    r = _SSIM_WIN // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / _SSIM_SIGMA) ** 2)
    return g / g.sum()


def _valid_filter(img, g):
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def ssim(reference, candidate) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows.

    Inputs are clamped to [0, 255] first; both must be at least 11x11.
    """
    x = np.clip(as_image(reference), 0, 255)
    y = np.clip(as_image(candidate), 0, 255)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < _SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {_SSIM_WIN}x{_SSIM_WIN}, got {x.shape}")
    g = _ssim_window_1d()
    mx = _valid_filter(x, g)
    my = _valid_filter(y, g)
    sxx = _valid_filter(x * x, g) - mx * mx
    syy = _valid_filter(y * y, g) - my * my
    sxy = _valid_filter(x * y, g) - mx * my
    num = (2 * mx * my + _SSIM_C1) * (2 * sxy + _SSIM_C2)
    den = (mx * mx + my * my + _SSIM_C1) * (sxx + syy + _SSIM_C2)
    return float(np.mean(num / den))


def compute_metrics(reference, candidate) -> MetricsReport:
    """Score ``candidate`` against ``reference`` on values clamped to [0, 255]."""
    x = np.clip(as_image(reference), 0, 255)
    y = np.clip(as_image(candidate), 0, 255)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    rmse = math.sqrt(float(np.mean((x - y) ** 2)))
    psnr = math.inf if rmse == 0 else 20.0 * math.log10(255.0 / rmse)
    return MetricsReport(rmse=rmse, psnr=psnr, ssim=ssim(x, y))


def metrics_csv_row(name: str, report: MetricsReport) -> str:
    """Format ``name,rmse,psnr,ssim`` with four decimals."""
    psnr = "inf" if math.isinf(report.psnr) else f"{report.psnr:.4f}"
    return f"{name},{report.rmse:.4f},{psnr},{report.ssim:.4f}"
