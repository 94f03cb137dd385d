"""Pure-numpy convolution kernels.

Each 2-D convolution is decomposed into one BLAS contraction per kernel
tap, which keeps peak memory at one activation copy instead of a full
im2col buffer.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded cross-correlation.

    x: (N, C, H, W), w: (F, C, kh, kw) with odd kh/kw, b: (F,).
    Returns (N, F, H, W).
    """
    n, _, h, wd = x.shape
    f, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = _pad_hw(x, ph, pw)
    out = np.empty((n, f, h, wd), dtype=x.dtype)
    out[:] = b[None, :, None, None]
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + h, j : j + wd]
            # (N,C,H,W) x (F,C) -> (N,H,W,F)
            out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    return out


def conv2d_backward_input(gy: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient of conv2d_forward w.r.t. x. gy: (N, F, H, W)."""
    n, _, h, wd = gy.shape
    _, c, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    gxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            # (N,F,H,W) x (F,C) -> (N,H,W,C)
            contrib = np.tensordot(gy, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            gxp[:, :, i : i + h, j : j + wd] += contrib
    if ph == 0 and pw == 0:
        return gxp
    return gxp[:, :, ph : ph + h, pw : pw + wd].copy()


def conv2d_backward_weights(
    x: np.ndarray, gy: np.ndarray, kh: int, kw: int
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. w and b."""
    n, c, h, wd = x.shape
    f = gy.shape[1]
    ph, pw = kh // 2, kw // 2
    xp = _pad_hw(x, ph, pw)
    gw = np.empty((f, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + h, j : j + wd]
            # sum over n, h, w
            gw[:, :, i, j] = np.tensordot(gy, patch, axes=([0, 2, 3], [0, 2, 3]))
    gb = gy.sum(axis=(0, 2, 3))
    return gw, gb
