"""Feed-forward noise generator and the masked apply-and-clamp step.

The generator is a nested U-shaped encoder-decoder with dense skip
connections. It maps an image to a per-pixel perturbation field bounded
by ``eps_max`` through a scaled tanh, so the imperceptibility budget is
enforced structurally, not just by the loss. The perturbation is applied
only inside the protected region and the result is clamped to [0, 1];
pixels outside the region are returned bit-identical to the input.
"""

from __future__ import annotations

import json
import time
import tracemalloc
import zipfile
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .data import validate_image, validate_mask
from .errors import ShapeError, VersionError

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class ImmunizerConfig:
    """Architecture hyperparameters; all overridable from config files."""

    depth: int = 4
    base_width: int = 32
    eps_max: float = 0.125
    negative_slope: float = 0.1
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if not 0.0 < self.eps_max <= 1.0:
            raise ValueError("eps_max must lie in (0, 1]")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")


def _channels(cfg: ImmunizerConfig, level: int) -> int:
    return cfg.base_width * (2**level)


def _block_specs(cfg: ImmunizerConfig):
    """Yield (name, c_in, c_out) for every conv block in topological order."""
    L = cfg.depth
    for i in range(L + 1):
        c_in = 3 if i == 0 else _channels(cfg, i - 1)
        yield f"n{i}_0", c_in, _channels(cfg, i)
    for j in range(1, L + 1):
        for i in range(L + 1 - j):
            c_in = j * _channels(cfg, i) + _channels(cfg, i + 1)
            yield f"n{i}_{j}", c_in, _channels(cfg, i)


class ImmunizerModel:
    """Noise generator with learnable weights stored as autograd leaves."""

    def __init__(self, cfg: ImmunizerConfig = ImmunizerConfig(), seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, ag.Tensor] = {}
        rng = np.random.Generator(np.random.PCG64(seed))
        dt = np.dtype(cfg.dtype)
        for name, c_in, c_out in _block_specs(cfg):
            self._init_conv(rng, f"{name}_c1", c_in, c_out, 3, dt)
            self._init_conv(rng, f"{name}_c2", c_out, c_out, 3, dt)
        self._init_conv(rng, "head", cfg.base_width, 3, 1, dt)

    def _init_conv(self, rng, name: str, c_in: int, c_out: int, k: int, dt) -> None:
        fan_in = c_in * k * k
        fan_out = c_out * k * k
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(c_out, c_in, k, k)).astype(dt)
        b = np.zeros((c_out,), dtype=dt)
        self.params[f"{name}_w"] = ag.leaf(w)
        self.params[f"{name}_b"] = ag.leaf(b)

    def parameters(self) -> list[ag.Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def _block(self, name: str, x: ag.Tensor) -> ag.Tensor:
        s = self.cfg.negative_slope
        h = ag.leaky_relu(ag.conv2d(x, self.params[f"{name}_c1_w"], self.params[f"{name}_c1_b"]), s)
        return ag.leaky_relu(ag.conv2d(h, self.params[f"{name}_c2_w"], self.params[f"{name}_c2_b"]), s)

    def forward(self, x: ag.Tensor) -> ag.Tensor:
        """Noise field for a (N, 3, H, W) input, bounded by eps_max."""
        L = self.cfg.depth
        n, c, h, w = x.value.shape
        if c != 3:
            raise ShapeError(f"expected 3 input channels, got {c}")
        if h % (2**L) or w % (2**L):
            raise ShapeError(
                f"spatial size {h}x{w} must be divisible by 2^depth = {2**L}"
            )
        nodes: dict[tuple[int, int], ag.Tensor] = {}
        nodes[(0, 0)] = self._block("n0_0", x)
        for i in range(1, L + 1):
            nodes[(i, 0)] = self._block(f"n{i}_0", ag.avg_pool2(nodes[(i - 1, 0)]))
        for j in range(1, L + 1):
            for i in range(L + 1 - j):
                skips = [nodes[(i, k)] for k in range(j)]
                up = ag.upsample_nearest2(nodes[(i + 1, j - 1)])
                nodes[(i, j)] = self._block(f"n{i}_{j}", ag.concat_channels(skips + [up]))
        raw = ag.conv2d(nodes[(0, L)], self.params["head_w"], self.params["head_b"])
        return ag.mul(ag.tanh(raw), self.cfg.eps_max)


def _to_nchw(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image.transpose(2, 0, 1)[None])


def _to_hwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[0].transpose(1, 2, 0))


def generate_noise(model: ImmunizerModel, image: np.ndarray) -> np.ndarray:
    """Run the generator on one (H, W, 3) image; returns the noise field."""
    validate_image(image)
    x = ag.const(_to_nchw(image.astype(model.cfg.dtype)))
    noise = model.forward(x)
    return _to_hwc(noise.value).astype(np.float64)


def apply_immunization(image: np.ndarray, noise: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """clamp(image + noise * mask, 0, 1); exact passthrough outside the mask."""
    validate_image(image)
    validate_mask(mask, image.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != image.shape:
        raise ShapeError(f"noise shape {noise.shape} != image shape {image.shape}")
    perturbed = np.clip(image + noise * mask, 0.0, 1.0)
    return np.where(mask > 0, perturbed, image)


@dataclass
class ImmunizeResult:
    """Immunized image plus the profiling data of the forward pass."""

    image: np.ndarray
    duration_s: float
    peak_mem_mib: float


def immunize(model: ImmunizerModel, image: np.ndarray, mask: np.ndarray) -> ImmunizeResult:
    """Single forward pass: generate noise, apply inside the mask, clamp."""
    started_tracing = False
    if not tracemalloc.is_tracing():
        tracemalloc.start()
        started_tracing = True
    else:
        tracemalloc.reset_peak()
    t0 = time.perf_counter()
    try:
        noise = generate_noise(model, image)
        out = apply_immunization(image, noise, mask)
    finally:
        duration = time.perf_counter() - t0
        peak = tracemalloc.get_traced_memory()[1]
        if started_tracing:
            tracemalloc.stop()
    return ImmunizeResult(image=out, duration_s=duration, peak_mem_mib=peak / (1024.0 * 1024.0))


def identity_immunizer(image: np.ndarray, mask: np.ndarray) -> ImmunizeResult:
    """No-noise reference immunizer used by sanity checks."""
    t0 = time.perf_counter()
    out = image.copy()
    return ImmunizeResult(image=out, duration_s=time.perf_counter() - t0, peak_mem_mib=0.0)


def save_checkpoint(
    model: ImmunizerModel,
    path,
    run_id: str = "",
    extra_arrays: dict[str, np.ndarray] | None = None,
    extra_meta: dict | None = None,
) -> None:
    """Write weights plus a metadata header to a versioned npz container."""
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "depth": model.cfg.depth,
        "base_width": model.cfg.base_width,
        "eps_max": model.cfg.eps_max,
        "negative_slope": model.cfg.negative_slope,
        "dtype": model.cfg.dtype,
        "run_id": run_id,
        "param_names": sorted(model.params),
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {f"param/{k}": v.value for k, v in model.params.items()}
    if extra_arrays:
        for k, v in extra_arrays.items():
            arrays[f"extra/{k}"] = v
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ImmunizerModel, dict, dict[str, np.ndarray]]:
    """Load a checkpoint; returns (model, metadata, extra arrays).

    Raises VersionError on truncation, schema mismatch, or missing
    parameters so partially written files never load silently.
    """
    try:
        with np.load(path) as npz:
            files = set(npz.files)
            if "meta" not in files:
                raise VersionError(f"{path}: missing metadata header")
            meta = json.loads(bytes(npz["meta"].tobytes()).decode("utf-8"))
            if meta.get("schema") != CHECKPOINT_SCHEMA:
                raise VersionError(
                    f"{path}: schema {meta.get('schema')!r} != expected {CHECKPOINT_SCHEMA}"
                )
            cfg = ImmunizerConfig(
                depth=meta["depth"],
                base_width=meta["base_width"],
                eps_max=meta["eps_max"],
                negative_slope=meta.get("negative_slope", 0.1),
                dtype=meta.get("dtype", "float64"),
            )
            model = ImmunizerModel(cfg, seed=0)
            for name in meta["param_names"]:
                key = f"param/{name}"
                if key not in files:
                    raise VersionError(f"{path}: missing parameter {name!r}")
                model.params[name].value = npz[key]
            extras = {
                k.removeprefix("extra/"): npz[k] for k in files if k.startswith("extra/")
            }
    except (zipfile.BadZipFile, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise VersionError(f"{path}: unreadable checkpoint: {exc}") from exc
    return model, meta, extras
