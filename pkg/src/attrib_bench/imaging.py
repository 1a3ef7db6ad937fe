"""Image-space kernels: bilinear upsampling and Gaussian map smoothing.

Upsampling uses half-pixel source centers (align_corners=False): the source
coordinate of output row i is (i + 0.5) * H / H2 - 0.5, clamped to the valid
range. Smoothing uses a K x K kernel with sigma = K / 4, normalized to unit
sum, applied with zero padding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = ["bilinear_upsample", "gaussian_kernel_1d", "gaussian_kernel", "gaussian_smooth"]


def _axis_weights(n_src: int, n_dst: int):
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1.0)
    lo = np.floor(pos).astype(np.intp)
    if n_src > 1:
        lo = np.minimum(lo, n_src - 2)
    frac = pos - lo
    return lo, frac


def bilinear_upsample(x: np.ndarray, target) -> np.ndarray:
    """Upsample the trailing two axes of x to target = (H2, W2)."""
    h2, w2 = target
    h, w = x.shape[-2], x.shape[-1]
    if h2 < h or w2 < w:
        raise ShapeError(f"bilinear_upsample: target {h2}x{w2} smaller than source {h}x{w}")
    ly, fy = _axis_weights(h, h2)
    lx, fx = _axis_weights(w, w2)
    hy = np.minimum(ly + 1, h - 1)
    hx = np.minimum(lx + 1, w - 1)
    rows = x[..., ly, :] * (1.0 - fy)[:, None] + x[..., hy, :] * fy[:, None]
    return rows[..., lx] * (1.0 - fx) + rows[..., hx] * fx


def gaussian_kernel_1d(k: int) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"gaussian kernel size must be odd and >= 1, got {k}")
    sigma = k / 4.0
    t = np.arange(k) - (k - 1) / 2.0
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def gaussian_kernel(k: int) -> np.ndarray:
    """K x K kernel with sigma = K/4; entries sum to 1 (within f64 rounding)."""
    g = gaussian_kernel_1d(k)
    return np.outer(g, g)


def _correlate_axis(x: np.ndarray, kern: np.ndarray, axis: int) -> np.ndarray:
    p = len(kern) // 2
    pads = [(0, 0)] * x.ndim
    pads[axis] = (p, p)
    xp = np.pad(x, pads)
    return sliding_window_view(xp, len(kern), axis=axis) @ kern


def gaussian_smooth(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded K x K Gaussian smoothing of the trailing two axes; K=1 is identity.

    Applied separably; the effective 2-D kernel is exactly gaussian_kernel(k).
    Constant maps stay constant in the interior and are attenuated near the
    borders by the kernel mass that falls off the map.
    """
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"gaussian_smooth: kernel size must be odd and >= 1, got {k}")
    if k == 1:
        return x.copy()
    g = gaussian_kernel_1d(k)
    return _correlate_axis(_correlate_axis(x, g, x.ndim - 2), g, x.ndim - 1)
