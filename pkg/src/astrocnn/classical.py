"""Classical deconvolution baselines: Wiener, Richardson-Lucy and primal-dual TV.

All three share the periodic observation model of :mod:`astrocnn.degrade`,
so the forward operator is a pointwise product with the PSF transfer
function and its adjoint is the conjugate product.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .degrade import apply_transfer, transfer_function
from .image import DTYPE, as_image, psnr

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

# sigma_dual * tau * ||D||^2 uses this bound on the squared norm of the gradient
GRADIENT_NORM_SQ = 8.0

WIENER_GRID = tuple(float(v) for v in np.logspace(-4, 0, 13))
RL_GRID = (5, 10, 20, 30, 50, 75, 100)
TV_GRID = tuple(float(v) for v in np.logspace(-4, -1, 10))


class SingularInversion(ArithmeticError):
    pass


@dataclass(frozen=True)
class WienerParams:
    lam: float = 1e-2

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"Wiener lambda must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class RlParams:
    iterations: int = 30
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"RL needs at least one iteration, got {self.iterations}")
        if not self.epsilon > 0:
            raise ValueError(f"RL epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class TvParams:
    lam: float = 1e-2
    iterations: int = 100
    tau: float = 0.25
    sigma_dual: float = 0.25
    nonneg: bool = True

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"TV lambda must be >= 0, got {self.lam}")
        if self.iterations < 1:
            raise ValueError(f"TV needs at least one iteration, got {self.iterations}")
        if not (self.tau > 0 and self.sigma_dual > 0):
            raise ValueError("TV step sizes must be positive")


def _otf(psf, shape):
    kernel = psf.kernel if hasattr(psf, "kernel") else psf
    return transfer_function(kernel, shape)


# ---------------------------------------------------------------- Wiener

def wiener_deconvolve(y, psf, p: WienerParams = WienerParams()) -> np.ndarray:
    """Laplacian-regularized Wiener filter.

    Returns the minimizer of ``||h*x - y||^2 + lam ||l*x||^2`` with ``l``
    the 5-point Laplacian, computed in closed form in the frequency domain.
    """
    y = as_image(y)
    H = _otf(psf, y.shape)
    H2 = (H * H.conj()).real
    if p.lam == 0:
        if H2.min() <= 1e-12:
            raise SingularInversion(
                "singular inversion: the PSF transfer function vanishes and lambda is 0"
            )
        denom = H2
    else:
        L = transfer_function(LAPLACIAN, y.shape)
        denom = np.maximum(H2 + p.lam * (L * L.conj()).real, 1e-12)
    X = H.conj() * sfft.rfft2(y.astype(np.float64)) / denom
    return sfft.irfft2(X, s=y.shape).astype(DTYPE)


# ------------------------------------------------------- Richardson-Lucy

def _rl_iterates(y, otf, x0, eps):
    x = x0
    while True:
        blurred = np.maximum(apply_transfer(x, otf), 0.0)
        ratio = y / (blurred + eps)
        x = np.maximum(x * apply_transfer(ratio, otf, adjoint=True), 0.0)
        yield x


def richardson_lucy(y, psf, p: RlParams = RlParams(), x0=None) -> np.ndarray:
    """Richardson-Lucy iterations started from ``max(y, 0)``.

    ``x0`` overrides the starting point; it must be nonnegative.
    """
    y = np.maximum(as_image(y).astype(np.float64), 0.0)
    start = y.copy() if x0 is None else np.asarray(x0, dtype=np.float64)
    if start.shape != y.shape:
        raise ValueError(f"x0 shape {start.shape} differs from image {y.shape}")
    if start.min() < 0:
        raise ValueError("RL start point must be nonnegative")
    it = _rl_iterates(y, _otf(psf, y.shape), start, p.epsilon)
    for _ in range(p.iterations):
        x = next(it)
    return x.astype(DTYPE)


# --------------------------------------------------------------- TV

def gradient(x: np.ndarray) -> np.ndarray:
    """Forward differences with a Neumann boundary, shape (2, H, W)."""
    g = np.zeros((2,) + x.shape, dtype=x.dtype)
    g[0, :-1, :] = x[1:, :] - x[:-1, :]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return g


def divergence(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`gradient`."""
    d = np.zeros(p.shape[1:], dtype=p.dtype)
    d[:-1, :] += p[0, :-1, :]
    d[1:, :] -= p[0, :-1, :]
    d[:, :-1] += p[1, :, :-1]
    d[:, 1:] -= p[1, :, :-1]
    return d


def total_variation(x: np.ndarray) -> float:
    g = gradient(np.asarray(x, dtype=np.float64))
    return float(np.sqrt(g[0] ** 2 + g[1] ** 2).sum())


def project_dual_ball(p: np.ndarray, radius: float) -> np.ndarray:
    """Project each pixel's 2-vector onto the disc of the given radius."""
    norm = np.sqrt(p[0] ** 2 + p[1] ** 2)
    if radius == 0:
        return np.zeros_like(p)
    scale = np.maximum(1.0, norm / radius)
    return p / scale


def tv_objective(x, y, psf, lam: float) -> float:
    """``0.5 ||h*x - y||^2 + lam * TV(x)`` under the periodic model."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r = apply_transfer(x, _otf(psf, y.shape)) - y
    return 0.5 * float(np.sum(r * r)) + lam * total_variation(x)


def check_tv_steps(p: TvParams, lipschitz: float) -> None:
    lhs = p.sigma_dual * p.tau * GRADIENT_NORM_SQ
    rhs = 1.0 - p.tau * lipschitz / 2.0
    if lhs > rhs + 1e-12:
        raise ValueError(
            f"invalid TV steps: sigma*tau*||D||^2 = {lhs:.4g} exceeds "
            f"1 - tau*L/2 = {rhs:.4g} (tau={p.tau}, sigma={p.sigma_dual}, L={lipschitz:.4g})"
        )


def tv_deconvolve(y, psf, p: TvParams = TvParams(), history: list | None = None) -> np.ndarray:
    """Isotropic-TV deconvolution by Condat-Vu primal-dual splitting.

    Approximately minimizes ``0.5 ||h*x - y||^2 + lam ||Dx||_{2,1}`` (plus
    the nonnegativity constraint when ``p.nonneg``) starting from ``x = y``
    and running exactly ``p.iterations`` iterations. When ``history`` is a
    list, the primal iterate after every iteration is appended to it.
    """
    y = as_image(y).astype(np.float64)
    otf = _otf(psf, y.shape)
    lipschitz = float(np.max((otf * otf.conj()).real))
    check_tv_steps(p, lipschitz)

    x = y.copy()
    dual = np.zeros((2,) + y.shape)
    for _ in range(p.iterations):
        residual = apply_transfer(x, otf) - y
        grad = apply_transfer(residual, otf, adjoint=True)
        x_new = x - p.tau * (grad - divergence(dual))
        if p.nonneg:
            np.maximum(x_new, 0.0, out=x_new)
        dual = project_dual_ball(dual + p.sigma_dual * gradient(2.0 * x_new - x), p.lam)
        x = x_new
        if history is not None:
            history.append(x.copy())
    return x.astype(DTYPE)


# ---------------------------------------------------------- autotuning

@dataclass
class TuneResult:
    method: str
    params: object
    image: np.ndarray
    psnr_db: float


def autotune(method: str, y, psf, clean, grid=None) -> TuneResult:
    """Pick the grid value that maximizes PSNR against ``clean``."""
    clean = as_image(clean)
    best = None
    if method == "wiener":
        for lam in grid or WIENER_GRID:
            params = WienerParams(lam)
            img = wiener_deconvolve(y, psf, params)
            best = _keep_best(best, TuneResult(method, params, img, psnr(clean, img)))
    elif method == "rl":
        counts = sorted(grid or RL_GRID)
        yy = np.maximum(as_image(y).astype(np.float64), 0.0)
        eps = RlParams().epsilon
        it = _rl_iterates(yy, _otf(psf, yy.shape), yy.copy(), eps)
        for k in range(1, counts[-1] + 1):
            x = next(it)
            if k in counts:
                img = x.astype(DTYPE)
                params = RlParams(k, eps)
                best = _keep_best(best, TuneResult(method, params, img, psnr(clean, img)))
    elif method == "tv":
        for lam in grid or TV_GRID:
            params = TvParams(lam=lam)
            img = tv_deconvolve(y, psf, params)
            best = _keep_best(best, TuneResult(method, params, img, psnr(clean, img)))
    else:
        raise ValueError(f"unknown method {method!r}; expected wiener, rl or tv")
    return best


def _keep_best(best, cand):
    if best is None or cand.psnr_db > best.psnr_db or math.isnan(best.psnr_db):
        return cand
    return best


def deconvolve(method: str, y, psf, params=None) -> np.ndarray:
    if method == "wiener":
        return wiener_deconvolve(y, psf, params or WienerParams())
    if method == "rl":
        return richardson_lucy(y, psf, params or RlParams())
    if method == "tv":
        return tv_deconvolve(y, psf, params or TvParams())
    raise ValueError(f"unknown method {method!r}; expected wiener, rl or tv")
