"""Numba-jitted convolution kernels.

Parallelism is only over independent output slices so results are
deterministic regardless of thread scheduling. fastmath stays off to keep
numba and numpy paths numerically interchangeable.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

BACKEND_NAME = "numba"


@njit(cache=True, parallel=True)
def _conv2d_forward(x, w, b, out):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    for nf in prange(n * f):
        ni = nf // f
        fi = nf % f
        for oh in range(h):
            for ow in range(wd):
                acc = b[fi]
                for ci in range(c):
                    for i in range(kh):
                        ih = oh + i - ph
                        if ih < 0 or ih >= h:
                            continue
                        for j in range(kw):
                            iw = ow + j - pw
                            if iw < 0 or iw >= wd:
                                continue
                            acc += x[ni, ci, ih, iw] * w[fi, ci, i, j]
                out[ni, fi, oh, ow] = acc


@njit(cache=True, parallel=True)
def _conv2d_backward_input(gy, w, gx):
    n, f, h, wd = gy.shape
    _, c, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    for nc in prange(n * c):
        ni = nc // c
        ci = nc % c
        for ih in range(h):
            for iw in range(wd):
                acc = 0.0
                for fi in range(f):
                    for i in range(kh):
                        oh = ih - i + ph
                        if oh < 0 or oh >= h:
                            continue
                        for j in range(kw):
                            ow = iw - j + pw
                            if ow < 0 or ow >= wd:
                                continue
                            acc += gy[ni, fi, oh, ow] * w[fi, ci, i, j]
                gx[ni, ci, ih, iw] = acc


@njit(cache=True, parallel=True)
def _conv2d_backward_weights(x, gy, gw, gb):
    n, c, h, wd = x.shape
    f, _, kh, kw = gw.shape
    ph, pw = kh // 2, kw // 2
    for fi in prange(f):
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for ni in range(n):
                        for oh in range(h):
                            ih = oh + i - ph
                            if ih < 0 or ih >= h:
                                continue
                            for ow in range(wd):
                                iw = ow + j - pw
                                if iw < 0 or iw >= wd:
                                    continue
                                acc += x[ni, ci, ih, iw] * gy[ni, fi, oh, ow]
                    gw[fi, ci, i, j] = acc
    for fi in prange(f):
        acc = 0.0
        for ni in range(n):
            for oh in range(h):
                for ow in range(wd):
                    acc += gy[ni, fi, oh, ow]
        gb[fi] = acc


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, _, h, wd = x.shape
    f = w.shape[0]
    out = np.empty((n, f, h, wd), dtype=x.dtype)
    _conv2d_forward(x, w, b, out)
    return out


def conv2d_backward_input(gy: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, _, h, wd = gy.shape
    c = w.shape[1]
    gx = np.empty((n, c, h, wd), dtype=gy.dtype)
    _conv2d_backward_input(gy, w, gx)
    return gx


def conv2d_backward_weights(
    x: np.ndarray, gy: np.ndarray, kh: int, kw: int
) -> tuple[np.ndarray, np.ndarray]:
    c = x.shape[1]
    f = gy.shape[1]
    gw = np.empty((f, c, kh, kw), dtype=x.dtype)
    gb = np.empty((f,), dtype=x.dtype)
    _conv2d_backward_weights(x, gy, gw, gb)
    return gw, gb
