"""Observation model: circular convolution with the PSF plus Gaussian noise.

Convolution here is true convolution (the kernel is flipped) and the kernel
origin sits at index ``(kh // 2, kw // 2)``. Full-image convolution uses a
periodic boundary so that every frequency-domain solver sees the exact same
operator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .conv import conv_forward
from .image import DTYPE, as_image
from .psf import Psf


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")


def _kernel_of(psf) -> np.ndarray:
    return np.asarray(psf.kernel if isinstance(psf, Psf) else psf, dtype=np.float64)


def transfer_function(kernel, shape: tuple[int, int]) -> np.ndarray:
    """Real-FFT transfer function of ``kernel`` circularly embedded in ``shape``."""
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    H, W = shape
    if kh > H or kw > W:
        raise ValueError(f"kernel {kh}x{kw} larger than image {H}x{W}")
    embedded = np.zeros(shape, dtype=np.float64)
    embedded[:kh, :kw] = kernel
    embedded = np.roll(embedded, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return sfft.rfft2(embedded)


def apply_transfer(img: np.ndarray, otf: np.ndarray, adjoint: bool = False) -> np.ndarray:
    """Multiply by ``otf`` (or its conjugate) in the frequency domain, float64 out."""
    spec = sfft.rfft2(np.asarray(img, dtype=np.float64))
    spec *= otf.conj() if adjoint else otf
    return sfft.irfft2(spec, s=img.shape)


def convolve_full_image(img, psf, boundary: str = "circular", method: str = "fft") -> np.ndarray:
    """Convolve a whole image with a PSF under a periodic boundary.

    ``method`` selects the frequency-domain path (``"fft"``) or the direct
    spatial sum (``"direct"``, O(n k^2), kept as the reference path).
    """
    if boundary != "circular":
        raise ValueError(f"unsupported boundary {boundary!r}; only 'circular' is implemented")
    img = as_image(img)
    kernel = _kernel_of(psf)
    if kernel.shape[0] > img.shape[0] or kernel.shape[1] > img.shape[1]:
        raise ValueError(f"kernel {kernel.shape} larger than image {img.shape}")
    if method == "fft":
        out = apply_transfer(img, transfer_function(kernel, img.shape))
    elif method == "direct":
        out = _convolve_direct(img.astype(np.float64), kernel)
    else:
        raise ValueError(f"unknown method {method!r}")
    return out.astype(DTYPE)


def _convolve_direct(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ch, cw = kh // 2, kw // 2
    out = np.zeros_like(img)
    for a in range(kh):
        for b in range(kw):
            if kernel[a, b] != 0.0:
                out += kernel[a, b] * np.roll(img, (a - ch, b - cw), axis=(0, 1))
    return out


def valid_convolve(img, kernel) -> np.ndarray:
    """Convolution restricted to positions where the kernel fits inside ``img``.

    Output shape is ``(H - kh + 1, W - kw + 1)``.
    """
    img = as_image(img)
    kernel = as_image(kernel)
    if kernel.shape[0] > img.shape[0] or kernel.shape[1] > img.shape[1]:
        raise ValueError(f"kernel {kernel.shape} larger than image {img.shape}")
    y, _ = conv_forward(
        img.astype(np.float64)[None, None], kernel.astype(np.float64)[None, None]
    )
    return y[0, 0].astype(DTYPE)


def add_gaussian_noise(img, spec: NoiseSpec) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise; the same seed always gives the same noise."""
    img = as_image(img)
    if spec.sigma == 0:
        return img
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(img.shape) * spec.sigma
    return (img.astype(np.float64) + noise).astype(DTYPE)


def degrade(img, psf, spec: NoiseSpec) -> np.ndarray:
    """Blur ``img`` with ``psf`` and add Gaussian noise. Noise is not clipped."""
    return add_gaussian_noise(convolve_full_image(img, psf), spec)
