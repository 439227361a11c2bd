"""Batched multi-channel valid convolution with its adjoints.

Arrays use the ``(batch, channel, row, col)`` layout and kernels
``(out, in, kh, kw)``. Convolution is true convolution (kernel flipped).

Two interchangeable paths are used:

* single-channel inputs go through an im2col matrix product, which keeps the
  work in one well-shaped BLAS call;
* multi-channel inputs go through the FFT. A valid convolution of an
  ``H x W`` input is exact as a circular convolution on any grid of at least
  ``H x W`` samples, because the wrap-around only reaches output positions
  that the valid region discards. Channel mixing then becomes one small
  complex matrix product per frequency.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft


def fft_grid(h: int, w: int) -> tuple[int, int]:
    return sfft.next_fast_len(h, real=True), sfft.next_fast_len(w, real=True)


def _to_freq_major(a: np.ndarray) -> np.ndarray:
    # (n0, n1, F1, F2) -> contiguous (F1*F2, n0, n1); batched BLAS needs contiguity
    n0, n1 = a.shape[:2]
    return np.ascontiguousarray(a.reshape(n0, n1, -1).transpose(2, 0, 1))


def _from_freq_major(a: np.ndarray, freq_shape) -> np.ndarray:
    n0, n1 = a.shape[1:]
    return np.ascontiguousarray(a.transpose(1, 2, 0)).reshape(n0, n1, *freq_shape)


@dataclass
class ConvCache:
    x_shape: tuple[int, ...]
    w_shape: tuple[int, ...]
    # im2col path
    cols: np.ndarray | None = None
    w_flipped: np.ndarray | None = None
    # FFT path
    x_freq: np.ndarray | None = None  # (F, B, Ci)
    w_freq: np.ndarray | None = None  # (F, Ci, Co)
    grid: tuple[int, int] | None = None
    freq_shape: tuple[int, int] | None = None


def _check(x, w):
    B, Ci, H, W = x.shape
    Co, Ci_w, kh, kw = w.shape
    if Ci != Ci_w:
        raise ValueError(f"input has {Ci} channels, kernel expects {Ci_w}")
    if kh > H or kw > W:
        raise ValueError(f"kernel {kh}x{kw} larger than input {H}x{W}")


def conv_forward(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, ConvCache]:
    """Valid convolution of ``x`` (B, Ci, H, W) with ``w`` (Co, Ci, kh, kw).

    Returns the (B, Co, H-kh+1, W-kw+1) result and the cache consumed by
    :func:`conv_backward`.
    """
    _check(x, w)
    if x.shape[1] == 1:
        return _forward_im2col(x, w)
    return _forward_fft(x, w)


def conv_backward(g: np.ndarray, cache: ConvCache, need_input_grad: bool = True):
    """Gradients w.r.t. the kernel and, optionally, the input.

    ``g`` is the gradient of the loss w.r.t. the output of
    :func:`conv_forward`. Returns ``(dw, dx)``; ``dx`` is None when not
    requested.
    """
    if cache.cols is not None:
        return _backward_im2col(g, cache, need_input_grad)
    return _backward_fft(g, cache, need_input_grad)


def _forward_im2col(x, w):
    B, _, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    cols = sliding_window_view(x[:, 0], (kh, kw), axis=(1, 2)).reshape(B * Ho * Wo, kh * kw)
    w_flipped = np.ascontiguousarray(w[:, 0, ::-1, ::-1].reshape(Co, kh * kw))
    y = cols @ w_flipped.T  # (B*Ho*Wo, Co)
    y = np.ascontiguousarray(y.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))
    return y, ConvCache(x.shape, w.shape, cols=cols, w_flipped=w_flipped)


def _backward_im2col(g, cache, need_input_grad):
    B, _, H, W = cache.x_shape
    Co, _, kh, kw = cache.w_shape
    Ho, Wo = H - kh + 1, W - kw + 1
    gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Co)
    dw = (gm.T @ cache.cols).reshape(Co, 1, kh, kw)[:, :, ::-1, ::-1]
    dw = np.ascontiguousarray(dw)
    dx = None
    if need_input_grad:
        dcols = (gm @ cache.w_flipped).reshape(B, Ho, Wo, kh, kw)
        dx = np.zeros((B, 1, H, W), dtype=g.dtype)
        for a in range(kh):
            for b in range(kw):
                dx[:, 0, a:a + Ho, b:b + Wo] += dcols[:, :, :, a, b]
    return dw, dx


def _forward_fft(x, w):
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    grid = fft_grid(H, W)
    xf = sfft.rfft2(x, s=grid)
    freq_shape = xf.shape[2:]
    x_freq = _to_freq_major(xf)
    w_freq = np.ascontiguousarray(
        sfft.rfft2(w, s=grid).reshape(Co, Ci, -1).transpose(2, 1, 0)
    )
    y_freq = np.matmul(x_freq, w_freq)  # (F, B, Co)
    y = sfft.irfft2(_from_freq_major(y_freq, freq_shape), s=grid)
    y = np.ascontiguousarray(y[:, :, kh - 1:H, kw - 1:W])
    return y, ConvCache(x.shape, w.shape, x_freq=x_freq, w_freq=w_freq,
                        grid=grid, freq_shape=freq_shape)


def _backward_fft(g, cache, need_input_grad):
    B, Ci, H, W = cache.x_shape
    Co, _, kh, kw = cache.w_shape
    g_full = np.zeros((B, Co) + cache.grid, dtype=g.dtype)
    g_full[:, :, kh - 1:H, kw - 1:W] = g
    g_freq = _to_freq_major(sfft.rfft2(g_full))  # (F, B, Co)

    # correlation of the output gradient with the input, summed over the batch
    dw_freq = np.matmul(cache.x_freq.conj().transpose(0, 2, 1), g_freq)  # (F, Ci, Co)
    dw = sfft.irfft2(
        np.ascontiguousarray(dw_freq.transpose(2, 1, 0)).reshape(Co, Ci, *cache.freq_shape),
        s=cache.grid,
    )
    dw = np.ascontiguousarray(dw[:, :, :kh, :kw])

    dx = None
    if need_input_grad:
        dx_freq = np.matmul(g_freq, cache.w_freq.conj().transpose(0, 2, 1))  # (F, B, Ci)
        dx = sfft.irfft2(_from_freq_major(dx_freq, cache.freq_shape), s=cache.grid)
        dx = np.ascontiguousarray(dx[:, :, :H, :W])
    return dw, dx


def valid_convolve_direct(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Spatial reference for :func:`conv_forward` (same layout, explicit sum)."""
    _check(x, w)
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    out = np.zeros((B, Co, Ho, Wo), dtype=np.result_type(x, w))
    for a in range(kh):
        for b in range(kw):
            # output (r, c) reads input (r + kh-1-a, c + kw-1-b)
            window = x[:, :, kh - 1 - a:kh - 1 - a + Ho, kw - 1 - b:kw - 1 - b + Wo]
            out += np.einsum("bihw,oi->bohw", window, w[:, :, a, b])
    return out
