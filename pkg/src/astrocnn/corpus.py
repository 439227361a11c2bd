"""Clean-image corpora: loading from disk and the seeded synthetic sky images."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .formats import read_image, write_image
from .image import DTYPE, normalize_max

IMAGE_SUFFIXES = (".imf1", ".pgm")


def load_corpus(directory) -> dict[str, np.ndarray]:
    """Read every ``.imf1``/``.pgm`` file in ``directory``, max-normalized.

    Keys are file stems, in sorted order.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory {directory} does not exist")
    corpus = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES:
            if path.stem in corpus:
                raise ValueError(f"duplicate image id {path.stem!r} in {directory}")
            corpus[path.stem] = normalize_max(read_image(path))
    if not corpus:
        raise ValueError(f"no .imf1 or .pgm images found in {directory}")
    return corpus


def _gaussian_splat(img, rows, cols, fluxes, sigmas, radius=5):
    H, W = img.shape
    offs = np.arange(-radius, radius + 1)
    for r, c, f, s in zip(rows, cols, fluxes, sigmas):
        ir, ic = int(np.floor(r)), int(np.floor(c))
        rr = (ir + offs) % H
        cc = (ic + offs) % W
        dr = (ir + offs) - r
        dc = (ic + offs) - c
        gr = np.exp(-0.5 * (dr / s) ** 2)
        gc = np.exp(-0.5 * (dc / s) ** 2)
        blob = np.outer(gr, gc)
        img[np.ix_(rr, cc)] += f * blob / blob.sum()


def _galaxy(shape, rng) -> np.ndarray:
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    r0 = rng.uniform(0.3, 0.7) * H
    c0 = rng.uniform(0.3, 0.7) * W
    theta = rng.uniform(0, np.pi)
    q = rng.uniform(0.35, 0.95)
    scale = rng.uniform(0.06, 0.14) * min(H, W)
    dy, dx = yy - r0, xx - c0
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / q
    rad = np.hypot(u, v)
    disk = np.exp(-rad / scale)
    bulge = np.exp(-((rad / (0.25 * scale)) ** 0.5) * 3.0)
    # two-armed logarithmic spiral modulation of the disk
    phi = np.arctan2(v, u)
    pitch = rng.uniform(0.25, 0.5)
    arms = 0.5 * (1.0 + np.cos(2.0 * (phi - np.log(rad / scale + 1e-3) / pitch)))
    spiral = rng.uniform(0.3, 0.8)
    return disk * ((1 - spiral) + spiral * arms) * 0.6 + bulge


def synthetic_sky(size: int = 512, seed: int = 0, n_stars: int | None = None) -> np.ndarray:
    """One synthetic sky image: smooth galaxy light plus a star field.

    Stars are point sources with power-law fluxes splatted as small
    Gaussians; the galaxy is an inclined exponential disk with spiral arm
    modulation and a compact bulge. The result is normalized to max 1.
    """
    rng = np.random.default_rng(seed)
    shape = (size, size)
    img = np.zeros(shape)
    for _ in range(rng.integers(1, 3)):
        img += rng.uniform(0.3, 1.0) * _galaxy(shape, rng)
    if n_stars is None:
        n_stars = int(rng.integers(150, 400) * (size / 512) ** 2)
    rows = rng.uniform(0, size, n_stars)
    cols = rng.uniform(0, size, n_stars)
    # Pareto-distributed fluxes (many faint stars, a few bright ones), capped
    # so that the galaxy light stays within a decade of the brightest star
    fluxes = np.minimum(0.4 * (rng.pareto(1.5, n_stars) + 1.0), 8.0)
    sigmas = rng.uniform(0.6, 1.4, n_stars)
    _gaussian_splat(img, rows, cols, fluxes, sigmas)
    img += 0.02 * rng.uniform(0.0, 1.0)
    return normalize_max(img.astype(DTYPE))


def synthetic_corpus(n_images: int = 6, size: int = 512, seed: int = 0) -> dict[str, np.ndarray]:
    """The bundled stand-in corpus: ``n_images`` seeded synthetic skies."""
    seeds = np.random.SeedSequence(seed).generate_state(n_images)
    return {f"synth{k}": synthetic_sky(size, int(s)) for k, s in enumerate(seeds)}


def write_corpus(corpus: dict[str, np.ndarray], directory) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, img in corpus.items():
        path = os.path.join(directory, f"{name}.imf1")
        write_image(img, path)
        paths.append(path)
    return paths
