"""Airy-pattern point spread functions.

The kernel is sampled from the diffraction pattern of a circular aperture,
``(2 J1(s d) / (s d))**2``, where ``d`` is the pixel distance from the kernel
center and ``s`` is calibrated so the continuous profile falls to half of
its peak at ``d = fwhm / 2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .image import DTYPE

# switch from the power series to the Hankel asymptotic expansion
_SERIES_LIMIT = 12.0
_SERIES_TERMS = 60


def _j1_series(x: np.ndarray) -> np.ndarray:
    half = x / 2.0
    sq = half * half
    term = half.copy()
    total = term.copy()
    for k in range(1, _SERIES_TERMS):
        term = term * (-sq) / (k * (k + 1))
        total += term
    return total


def _j1_asymptotic(x: np.ndarray) -> np.ndarray:
    # Hankel expansion, J1 = sqrt(2/(pi x)) (P cos(chi) - Q sin(chi)).
    # Accumulated term by term until the terms stop shrinking.
    mu = 4.0
    p = np.ones_like(x)
    q = np.zeros_like(x)
    a = np.ones_like(x)
    last = np.full_like(x, np.inf)
    active = np.ones(x.shape, dtype=bool)
    for k in range(1, 80):
        a = a * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        mag = np.abs(a)
        active &= mag < last
        if not active.any():
            break
        contrib = np.where(active, a, 0.0)
        # a_k enters P for even k and Q for odd k, with alternating signs
        if k % 2 == 0:
            p += contrib if k % 4 == 0 else -contrib
        else:
            q += contrib if k % 4 == 1 else -contrib
        last = np.where(active, mag, last)
        if np.all(mag < 1e-17):
            break
    chi = x - 0.75 * math.pi
    return np.sqrt(2.0 / (math.pi * x)) * (p * np.cos(chi) - q * np.sin(chi))


def bessel_j1(x):
    """Bessel function of the first kind, order one.

    Accepts scalars or arrays; absolute error is below 1e-7 for |x| <= 50.
    """
    arr = np.asarray(x, dtype=np.float64)
    ax = np.abs(arr)
    out = np.empty_like(ax)
    small = ax <= _SERIES_LIMIT
    if small.any():
        out[small] = _j1_series(ax[small])
    if (~small).any():
        out[~small] = _j1_asymptotic(ax[~small])
    out = np.where(arr < 0, -out, out)
    if out.ndim == 0:
        return float(out)
    return out


def airy_profile(r) -> np.ndarray:
    """Unit-peak Airy intensity ``(2 J1(r)/r)**2`` with the r -> 0 limit of 1."""
    r = np.asarray(r, dtype=np.float64)
    safe = np.where(r == 0, 1.0, r)
    ratio = np.where(r == 0, 1.0, 2.0 * np.asarray(bessel_j1(safe)) / safe)
    return ratio * ratio


def half_maximum_argument() -> float:
    """Argument x > 0 at which the unit-peak Airy profile equals 1/2 (about 1.61634)."""
    return brentq(lambda x: float(airy_profile(x)) - 0.5, 0.5, 3.0, xtol=1e-14)


def first_dark_ring_argument() -> float:
    """First positive zero of J1 (about 3.83171)."""
    return brentq(lambda x: float(bessel_j1(x)), 3.0, 4.5, xtol=1e-14)


@dataclass(frozen=True)
class Psf:
    kernel: np.ndarray
    fwhm_px: float
    scale: float

    @property
    def support(self) -> int:
        return self.kernel.shape[0]

    def profile(self, d) -> np.ndarray:
        """Continuous radial profile at pixel distance ``d``, unit peak."""
        return airy_profile(self.scale * np.asarray(d, dtype=np.float64))

    @property
    def first_dark_ring(self) -> float:
        return first_dark_ring_argument() / self.scale


def airy_kernel(support: int = 64, fwhm_px: float = 8.0) -> Psf:
    """Sample an Airy PSF on a ``support x support`` grid, normalized to sum 1.

    Distances are measured from the geometric center ``(support - 1) / 2``,
    which is a half-integer for even supports, so the sampled kernel keeps
    its 8-fold symmetry. Anything beyond the window is dropped before
    normalization.
    """
    support = int(support)
    if support < 3:
        raise ValueError(f"support must be >= 3, got {support}")
    if not 0 < fwhm_px < support:
        raise ValueError(f"fwhm_px must lie in (0, {support}), got {fwhm_px}")
    scale = half_maximum_argument() / (fwhm_px / 2.0)
    c = (support - 1) / 2.0
    idx = np.arange(support, dtype=np.float64) - c
    d = np.hypot(idx[:, None], idx[None, :])
    values = airy_profile(scale * d)
    kernel = (values / values.sum()).astype(DTYPE)
    return Psf(kernel=kernel, fwhm_px=float(fwhm_px), scale=scale)


def delta_psf(support: int = 1) -> Psf:
    """Identity PSF: a single unit sample at the convolution origin."""
    kernel = np.zeros((support, support), dtype=DTYPE)
    kernel[support // 2, support // 2] = 1.0
    return Psf(kernel=kernel, fwhm_px=0.0, scale=math.inf)
