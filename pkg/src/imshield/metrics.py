"""Full-reference image metrics and the optional text-image scorer.

All metrics operate on (H, W, 3) unit-interval arrays:

* ``ssim``: structural similarity with the standard 11x11 Gaussian
  window (sigma 1.5, K1 0.01, K2 0.03), averaged over channels.
* ``psnr``: 10 log10(1 / MSE) against peak 1.0, +inf for identical
  inputs.
* ``fsim``: feature similarity on luminance, combining phase congruency
  (4-scale, 4-orientation log-Gabor bank) with Scharr gradient
  magnitude; constants T1 = 0.85 and T2 = 160 assume the 0..255 scale.
* ``clip_t``: 100 x cosine similarity between image and prompt
  embeddings from a contrastive scorer; optional at desk scale.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ScorerUnavailableError, ShapeError

# --- SSIM ----------------------------------------------------------------

_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gaussian_taps(radius: int, sigma: float) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def _filter_valid(plane: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a symmetric 1-D kernel."""
    k = taps.size
    h, w = plane.shape
    tmp = np.zeros((h, w - k + 1), dtype=np.float64)
    for i in range(k):
        tmp += taps[i] * plane[:, i : i + w - k + 1]
    out = np.zeros((h - k + 1, w - k + 1), dtype=np.float64)
    for i in range(k):
        out += taps[i] * tmp[i : i + h - k + 1, :]
    return out


def _check_pair(a: np.ndarray, b: np.ndarray, min_side: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) arrays, got {a.shape}")
    if min(a.shape[0], a.shape[1]) < min_side:
        raise ShapeError(
            f"image sides must be >= {min_side} for this metric, got {a.shape[:2]}"
        )
    return a, b


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Channel-averaged structural similarity in [-1, 1]; 1.0 iff equal."""
    a, b = _check_pair(a, b, _SSIM_WIN)
    taps = _gaussian_taps(_SSIM_WIN // 2, _SSIM_SIGMA)
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    scores = []
    for ch in range(3):
        x, y = a[:, :, ch], b[:, :, ch]
        ux = _filter_valid(x, taps)
        uy = _filter_valid(y, taps)
        uxx = _filter_valid(x * x, taps)
        uyy = _filter_valid(y * y, taps)
        uxy = _filter_valid(x * y, taps)
        vx = uxx - ux * ux
        vy = uyy - uy * uy
        vxy = uxy - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
            (ux * ux + uy * uy + c1) * (vx + vy + c2)
        )
        scores.append(s.mean())
    return float(np.mean(scores))


# --- PSNR ----------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; +inf sentinel for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


# --- FSIM ----------------------------------------------------------------

_PC_NSCALE = 4
_PC_NORIENT = 4
_PC_MIN_WAVELENGTH = 6
_PC_MULT = 2.0
_PC_SIGMA_ONF = 0.55
_PC_DTHETA_ON_SIGMA = 1.2
_PC_K = 2.0
_PC_EPS = 1e-4

_FSIM_T1 = 0.85
_FSIM_T2 = 160.0


def _freq_grid(n: int) -> np.ndarray:
    if n % 2:
        return np.arange(-(n - 1) // 2, (n - 1) // 2 + 1, dtype=np.float64) / (n - 1)
    return np.arange(-(n // 2), n // 2, dtype=np.float64) / n


@lru_cache(maxsize=8)
def _pc_filter_bank(rows: int, cols: int):
    """Log-Gabor x angular-spread filter bank for one image size."""
    x, y = np.meshgrid(_freq_grid(cols), _freq_grid(rows))
    radius = np.fft.ifftshift(np.sqrt(x * x + y * y))
    theta = np.fft.ifftshift(np.arctan2(-y, x))
    lowpass = 1.0 / (1.0 + (np.fft.ifftshift(np.sqrt(x * x + y * y)) / 0.45) ** 30)
    radius[0, 0] = 1.0
    sintheta, costheta = np.sin(theta), np.cos(theta)

    log_gabor = []
    for s in range(_PC_NSCALE):
        wavelength = _PC_MIN_WAVELENGTH * _PC_MULT**s
        f0 = 1.0 / wavelength
        g = np.exp(-(np.log(radius / f0) ** 2) / (2.0 * np.log(_PC_SIGMA_ONF) ** 2))
        g *= lowpass
        g[0, 0] = 0.0
        log_gabor.append(g)

    theta_sigma = np.pi / _PC_NORIENT / _PC_DTHETA_ON_SIGMA
    spreads = []
    for o in range(_PC_NORIENT):
        angl = o * np.pi / _PC_NORIENT
        ds = sintheta * np.cos(angl) - costheta * np.sin(angl)
        dc = costheta * np.cos(angl) + sintheta * np.sin(angl)
        dtheta = np.abs(np.arctan2(ds, dc))
        spreads.append(np.exp(-(dtheta**2) / (2.0 * theta_sigma**2)))
    return log_gabor, spreads


def _phase_congruency(plane: np.ndarray) -> np.ndarray:
    """Phase congruency map with median-based noise compensation."""
    rows, cols = plane.shape
    log_gabor, spreads = _pc_filter_bank(rows, cols)
    image_fft = np.fft.fft2(plane)
    energy_all = np.zeros((rows, cols))
    an_all = np.zeros((rows, cols))
    for o in range(_PC_NORIENT):
        sum_e = np.zeros((rows, cols))
        sum_o = np.zeros((rows, cols))
        sum_an = np.zeros((rows, cols))
        eo = []
        tau = 0.0
        for s in range(_PC_NSCALE):
            response = np.fft.ifft2(image_fft * log_gabor[s] * spreads[o])
            an = np.abs(response)
            eo.append(response)
            sum_an += an
            sum_e += response.real
            sum_o += response.imag
            if s == 0:
                tau = float(np.median(an)) / np.sqrt(np.log(4.0))
        x_energy = np.sqrt(sum_e**2 + sum_o**2) + _PC_EPS
        mean_e = sum_e / x_energy
        mean_o = sum_o / x_energy
        energy = np.zeros((rows, cols))
        for s in range(_PC_NSCALE):
            e, od = eo[s].real, eo[s].imag
            energy += e * mean_e + od * mean_o - np.abs(e * mean_o - od * mean_e)
        total_tau = tau * (1.0 - (1.0 / _PC_MULT) ** _PC_NSCALE) / (1.0 - 1.0 / _PC_MULT)
        noise_mean = total_tau * np.sqrt(np.pi / 2.0)
        noise_sigma = total_tau * np.sqrt((4.0 - np.pi) / 2.0)
        threshold = (noise_mean + _PC_K * noise_sigma) / 1.7
        energy_all += np.maximum(energy - threshold, 0.0)
        an_all += sum_an
    return energy_all / (an_all + _PC_EPS)


def _scharr_gradient(plane: np.ndarray) -> np.ndarray:
    dx = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]], dtype=np.float64) / 16.0
    padded = np.pad(plane, 1)
    gx = np.zeros_like(plane)
    gy = np.zeros_like(plane)
    h, w = plane.shape
    for i in range(3):
        for j in range(3):
            patch = padded[i : i + h, j : j + w]
            gx += dx[i, j] * patch
            gy += dx[j, i] * patch
    return np.sqrt(gx * gx + gy * gy)


def _luminance(image: np.ndarray) -> np.ndarray:
    return (
        0.299 * image[:, :, 0] + 0.587 * image[:, :, 1] + 0.114 * image[:, :, 2]
    ) * 255.0


def _fsim_downsample(plane: np.ndarray) -> np.ndarray:
    factor = max(1, int(round(min(plane.shape) / 256.0)))
    if factor == 1:
        return plane
    h, w = plane.shape
    pad_before = factor // 2
    pad_after = factor - 1 - pad_before
    padded = np.pad(plane, ((pad_before, pad_after), (pad_before, pad_after)))
    avg = np.zeros_like(plane)
    for i in range(factor):
        for j in range(factor):
            avg += padded[i : i + h, j : j + w]
    return (avg / (factor * factor))[::factor, ::factor]


def fsim(a: np.ndarray, b: np.ndarray) -> float:
    """Feature similarity on luminance in [0, 1]; 1.0 for identical inputs."""
    a, b = _check_pair(a, b, 16)
    y1 = _fsim_downsample(_luminance(a))
    y2 = _fsim_downsample(_luminance(b))
    pc1 = _phase_congruency(y1)
    pc2 = _phase_congruency(y2)
    g1 = _scharr_gradient(y1)
    g2 = _scharr_gradient(y2)
    pc_sim = (2.0 * pc1 * pc2 + _FSIM_T1) / (pc1**2 + pc2**2 + _FSIM_T1)
    grad_sim = (2.0 * g1 * g2 + _FSIM_T2) / (g1**2 + g2**2 + _FSIM_T2)
    pc_max = np.maximum(pc1, pc2)
    denom = float(pc_max.sum())
    if denom < 1e-12:
        # no phase structure anywhere (e.g. constant images): fall back to
        # gradient similarity, which is 1.0 for identical inputs
        return float(grad_sim.mean())
    return float((pc_sim * grad_sim * pc_max).sum() / denom)


# --- text-image scorer ----------------------------------------------------


@dataclass
class TextScorerHandle:
    """Handle to a contrastive text-image scorer.

    ``backend`` must expose ``embed_image(np.ndarray) -> np.ndarray`` and
    ``embed_text(str) -> np.ndarray``.
    """

    model_id: str
    embedding_dim: int
    backend: object

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return np.asarray(self.backend.embed_image(image), dtype=np.float64)

    def embed_text(self, text: str) -> np.ndarray:
        return np.asarray(self.backend.embed_text(text), dtype=np.float64)


def clip_t(image: np.ndarray, prompt: str, scorer: TextScorerHandle) -> float:
    """100 x cosine similarity between image and prompt embeddings."""
    if scorer is None:
        raise ScorerUnavailableError("no text-image scorer configured")
    e_img = scorer.embed_image(image)
    e_txt = scorer.embed_text(prompt)
    denom = float(np.linalg.norm(e_img) * np.linalg.norm(e_txt))
    if denom == 0.0:
        raise ScorerUnavailableError("scorer returned a zero embedding")
    return float(100.0 * np.dot(e_img, e_txt) / denom)


class _SentenceTransformerBackend:
    def __init__(self, model):
        self.model = model

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        from PIL import Image

        pil = Image.fromarray(np.rint(np.asarray(image) * 255.0).astype(np.uint8))
        return self.model.encode([pil], convert_to_numpy=True)[0]

    def embed_text(self, text: str) -> np.ndarray:
        return self.model.encode([text], convert_to_numpy=True)[0]


def get_text_scorer(model_id: str | None = None) -> TextScorerHandle:
    """Load a contrastive scorer; never downloads weights implicitly.

    ``model_id`` may be a local directory containing a CLIP-style
    sentence-transformers model; defaults to ``IMSHIELD_CLIP_MODEL``.
    Raises ScorerUnavailableError when the library or weights are absent
    so callers can degrade gracefully.
    """
    model_id = model_id or os.environ.get("IMSHIELD_CLIP_MODEL", "")
    if not model_id:
        raise ScorerUnavailableError(
            "no scorer configured; set IMSHIELD_CLIP_MODEL to a local model directory"
        )
    allow_download = os.environ.get("IMSHIELD_ALLOW_DOWNLOAD", "") == "1"
    if not Path(model_id).exists() and not allow_download:
        raise ScorerUnavailableError(
            f"scorer weights {model_id!r} not found locally and downloads are disabled "
            "(set IMSHIELD_ALLOW_DOWNLOAD=1 to permit fetching)"
        )
    try:
        from sentence_transformers import SentenceTransformer
    except ImportError as exc:
        raise ScorerUnavailableError(
            "sentence-transformers is not installed (pip install 'imshield[clip]')"
        ) from exc
    try:
        model = SentenceTransformer(model_id)
        dim = int(model.get_sentence_embedding_dimension() or 0)
    except Exception as exc:
        raise ScorerUnavailableError(f"cannot load scorer {model_id!r}: {exc}") from exc
    return TextScorerHandle(model_id=model_id, embedding_dim=dim,
                            backend=_SentenceTransformerBackend(model))
