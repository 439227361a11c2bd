"""Image helpers shared by every stage of the pipeline.

Images are plain 2-D ``numpy.float32`` arrays in row-major order with the
origin at the top-left pixel and ``(row, col)`` indexing. Functions here never
modify their inputs.
"""
from __future__ import annotations

import math

import numpy as np

DTYPE = np.float32

# returned by psnr() when the two images are identical
INFINITE_PSNR = math.inf


class ImageError(ValueError):
    pass


def as_image(data, dtype=DTYPE) -> np.ndarray:
    """Validate ``data`` as a finite, non-empty 2-D image and return a copy."""
    img = np.array(data, dtype=dtype, copy=True)
    if img.ndim != 2:
        raise ImageError(f"expected a 2-D image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError(f"empty image with shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ImageError("image contains NaN or Inf samples")
    return img


def normalize_max(img: np.ndarray) -> np.ndarray:
    """Scale ``img`` so that its largest sample equals 1.0."""
    img = np.asarray(img)
    peak = float(img.max())
    if not peak > 0:
        raise ImageError(f"degenerate image: maximum sample is {peak}")
    if peak == 1.0:
        return img.astype(DTYPE, copy=True)
    return (img.astype(np.float64) / peak).astype(DTYPE)


def mse(reference: np.ndarray, test: np.ndarray) -> float:
    reference = np.asarray(reference)
    test = np.asarray(test)
    if reference.shape != test.shape:
        raise ImageError(f"shape mismatch: {reference.shape} vs {test.shape}")
    diff = reference.astype(np.float64) - test.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr(reference: np.ndarray, test: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in decibels.

    ``peak`` defaults to 1.0 because images are max-normalized; the
    reference's own maximum is deliberately not used. Identical images
    give :data:`INFINITE_PSNR`.
    """
    if not peak > 0:
        raise ImageError(f"peak must be positive, got {peak}")
    err = mse(reference, test)
    if err == 0.0:
        return INFINITE_PSNR
    return 10.0 * math.log10(peak * peak / err)


def extract_patch(img: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    img = np.asarray(img)
    H, W = img.shape
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > H or left + w > W:
        raise ImageError(
            f"patch (top={top}, left={left}, h={h}, w={w}) "
            f"is outside the {H}x{W} image"
        )
    return img[top:top + h, left:left + w].copy()


def paste_patch(img: np.ndarray, patch: np.ndarray, top: int, left: int) -> np.ndarray:
    """Return a copy of ``img`` with ``patch`` written at ``(top, left)``."""
    img = np.asarray(img)
    patch = np.asarray(patch)
    h, w = patch.shape
    H, W = img.shape
    if top < 0 or left < 0 or top + h > H or left + w > W:
        raise ImageError(
            f"patch (top={top}, left={left}, h={h}, w={w}) "
            f"is outside the {H}x{W} image"
        )
    out = img.copy()
    out[top:top + h, left:left + w] = patch
    return out
