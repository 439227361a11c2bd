"""Full-image reconstruction with a trained network, and feature-map extraction."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cnn import CnnModel, forward
from .image import DTYPE, as_image


def tile_origins(length: int, tile: int) -> list[int]:
    """Stride-``tile`` origins covering ``length``; the last one is anchored to the end."""
    if length < tile:
        raise ValueError(f"length {length} is shorter than one {tile}-pixel tile")
    origins = list(range(0, length - tile + 1, tile))
    if origins[-1] + tile < length:
        origins.append(length - tile)
    return origins


def pad_for_model(model: CnnModel, img: np.ndarray) -> np.ndarray:
    """Mirror-pad (edge pixel not repeated) by the model's margin on every side."""
    m = model.margin
    if m >= img.shape[0] or m >= img.shape[1]:
        raise ValueError(f"image {img.shape} too small to mirror-pad by {m} pixels")
    return np.pad(img, m, mode="reflect")


def predict_image(model: CnnModel, degraded, tile: int | None = None,
                  batch_size: int = 256) -> np.ndarray:
    """Reconstruct a whole image by sliding the network's input window.

    The image is mirror-padded by the model margin, then windows of the
    model's receptive field plus ``tile - 1`` pixels are taken with stride
    ``tile`` (default: the 14-pixel output of a 32-pixel input window).
    Windows at the bottom and right edges are anchored to the image border
    and overwrite the overlap. The output has the input's shape.
    """
    img = as_image(degraded)
    rh, rw = model.receptive_field
    if rh != rw:
        raise ValueError("tiled prediction needs a square receptive field")
    if tile is None:
        tile = 32 - rh + 1
    if tile < 1:
        raise ValueError(f"tile must be >= 1, got {tile}")
    H, W = img.shape
    if H < tile or W < tile:
        raise ValueError(
            f"image {H}x{W} is smaller than one {rh + tile - 1}-pixel window after padding"
        )
    padded = pad_for_model(model, img)
    win = rh + tile - 1
    windows = sliding_window_view(padded, (win, win))
    rows = tile_origins(H, tile)
    cols = tile_origins(W, tile)
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    grid_r = grid_r.ravel()
    grid_c = grid_c.ravel()

    out = np.empty((H, W), dtype=DTYPE)
    for start in range(0, len(grid_r), batch_size):
        r = grid_r[start:start + batch_size]
        c = grid_c[start:start + batch_size]
        pred = forward(model, windows[r, c])
        for k in range(len(r)):
            out[r[k]:r[k] + tile, c[k]:c[k] + tile] = pred[k]
    return out


def predict_untiled(model: CnnModel, degraded) -> np.ndarray:
    """Single forward pass over the whole padded image (reference for tiling)."""
    img = as_image(degraded)
    return np.asarray(forward(model, pad_for_model(model, img)), dtype=DTYPE)


def extract_feature_maps(model: CnnModel, img, layer: int) -> list[np.ndarray]:
    """Post-activation feature maps of ``layer`` (1-based) for one input image."""
    if not 1 <= layer <= len(model.layers):
        raise IndexError(f"layer must be in 1..{len(model.layers)}, got {layer}")
    _, maps = forward(model, as_image(img), keep_intermediates=True)
    return [m.astype(DTYPE) for m in maps[layer - 1][0]]
