"""Separable bicubic resampling (Keys kernel, a = -0.5) expressed as dense weight matrices."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch

CUBIC_A = -0.5


def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix; rows sum to 1, borders replicate, downscaling is antialiased."""
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be positive")
    scale = n_out / n_in
    stretch = 1.0 / scale if scale < 1 else 1.0
    support = 2.0 * stretch
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) / scale - 0.5
        lo = int(np.floor(center - support)) + 1
        hi = int(np.ceil(center + support))
        taps = np.arange(lo, hi)
        k = cubic((center - taps) / stretch)
        idx = np.clip(taps, 0, n_in - 1)
        np.add.at(w[i], idx, k)
    w /= w.sum(axis=1, keepdims=True)
    w.setflags(write=False)
    return w


def resize_array(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the two leading spatial axes of an (H, W[, C]) float array; no clamping."""
    wy = resize_matrix(img.shape[0], out_h)
    wx = resize_matrix(img.shape[1], out_w)
    a = img.astype(np.float64)
    out = np.tensordot(wy, a, axes=(1, 0))
    out = np.tensordot(wx, out, axes=(1, 1)).swapaxes(0, 1)
    return out


def resize_tensor(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Resize the last two axes of a (..., H, W) tensor with the same kernel."""
    wy = torch.tensor(resize_matrix(x.shape[-2], out_h), dtype=x.dtype)
    wx = torch.tensor(resize_matrix(x.shape[-1], out_w), dtype=x.dtype)
    return wy @ x @ wx.T
