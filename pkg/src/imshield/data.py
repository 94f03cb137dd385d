"""Image/mask/prompt data model, raster I/O, manifests, and splits.

Conventions used across the toolkit:

* images are float64 arrays of shape (H, W, 3) with values in [0, 1];
* masks are float64 arrays of the same shape with entries in {0, 1} and
  identical channel planes (1 marks the protected region);
* manifests are JSONL files, one record per line with fields
  ``id, image_path, mask_path, prompt, split``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, EmptyDatasetError, ShapeError

MIN_SIDE = 8

SPLIT_SEEN = "seen"
SPLIT_UNSEEN = "unseen"


def validate_image(pixels: np.ndarray) -> np.ndarray:
    """Check the (H, W, 3) unit-interval contract; returns the array."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got shape {pixels.shape}")
    if pixels.shape[0] < MIN_SIDE or pixels.shape[1] < MIN_SIDE:
        raise ShapeError(f"image sides must be >= {MIN_SIDE}, got {pixels.shape[:2]}")
    if not np.isfinite(pixels).all():
        raise ShapeError("image contains non-finite values")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ShapeError("image values must lie in [0, 1]")
    return pixels


def validate_mask(values: np.ndarray, image_shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Check the binary, channel-replicated mask contract; returns the array."""
    values = np.asarray(values)
    if values.ndim != 3 or values.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) mask, got shape {values.shape}")
    if image_shape is not None and tuple(values.shape) != tuple(image_shape):
        raise ShapeError(f"mask shape {values.shape} != image shape {tuple(image_shape)}")
    if not np.isin(values, (0.0, 1.0)).all():
        raise ShapeError("mask entries must be exactly 0 or 1")
    if not (
        np.array_equal(values[:, :, 0], values[:, :, 1])
        and np.array_equal(values[:, :, 0], values[:, :, 2])
    ):
        raise ShapeError("mask channel planes must be identical")
    return values


def mask_complement(mask: np.ndarray) -> np.ndarray:
    return 1.0 - mask


@dataclass(frozen=True)
class SampleTuple:
    """One (image, mask, prompt) training/evaluation record."""

    id: str
    image: np.ndarray
    mask: np.ndarray
    prompt: str
    split: str = SPLIT_SEEN

    def __post_init__(self) -> None:
        validate_image(self.image)
        validate_mask(self.mask, self.image.shape)
        if not self.prompt.strip():
            raise ValueError(f"sample {self.id!r} has an empty prompt")
        if self.split not in (SPLIT_SEEN, SPLIT_UNSEEN):
            raise ValueError(f"sample {self.id!r} has unknown split {self.split!r}")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    mask_path: str
    prompt: str
    split: str = SPLIT_SEEN


@dataclass
class DatasetManifest:
    """Ordered list of records plus the seed that fixes any auto-split."""

    records: list[ManifestRecord] = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def validate_unique_ids(self) -> None:
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise ValueError(f"duplicate record id {rec.id!r} in manifest")
            seen.add(rec.id)


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit RGB raster into a unit-interval (H, W, 3) array."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "L", "RGBA", "P"):
                raise ShapeError(f"{path}: unsupported mode {im.mode!r}")
            if im.mode != "RGB":
                if im.mode == "L":
                    raise ShapeError(f"{path}: expected 3-channel input, got single-channel")
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    pixels = arr.astype(np.float64) / 255.0
    return validate_image(pixels)


def save_image(pixels: np.ndarray, path: str | Path) -> None:
    """Write a unit-interval image as 8-bit RGB PNG."""
    validate_image(pixels)
    arr = np.rint(np.asarray(pixels) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_mask(
    path: str | Path,
    target_shape: tuple[int, int, int],
    strict: bool = False,
) -> np.ndarray:
    """Load a single-channel raster as a binary 3-channel mask.

    Soft values are thresholded at 0.5 and resized with nearest-neighbor
    to ``target_shape``. With ``strict=True`` a resize that would change
    the aspect ratio raises ShapeError.
    """
    th, tw, tc = target_shape
    if tc != 3:
        raise ShapeError(f"target shape must have 3 channels, got {target_shape}")
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            h, w = im.height, im.width
            if strict and not math.isclose(w * th, h * tw, rel_tol=1e-9):
                raise ShapeError(
                    f"mask {path} has aspect {w}x{h}, incompatible with target {tw}x{th}"
                )
            if (im.width, im.height) != (tw, th):
                im = im.resize((tw, th), resample=Image.NEAREST)
            plane = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DecodeError(f"cannot decode mask {path}: {exc}") from exc
    binary = (plane >= 0.5).astype(np.float64)
    return np.repeat(binary[:, :, None], 3, axis=2)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    """Write the first channel plane of a binary mask as 8-bit PNG."""
    validate_mask(mask)
    plane = (mask[:, :, 0] * 255.0).astype(np.uint8)
    Image.fromarray(plane, mode="L").save(path, format="PNG")


def resize_image(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bicubic-resize an image to (H, W); output clipped back to [0, 1]."""
    validate_image(pixels)
    th, tw = size
    im = Image.fromarray(np.rint(pixels * 255.0).astype(np.uint8), mode="RGB")
    out = np.asarray(im.resize((tw, th), resample=Image.BICUBIC), dtype=np.float64)
    return np.clip(out / 255.0, 0.0, 1.0)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize for masks."""
    validate_mask(mask)
    th, tw = size
    im = Image.fromarray((mask[:, :, 0] * 255.0).astype(np.uint8), mode="L")
    plane = np.asarray(im.resize((tw, th), resample=Image.NEAREST), dtype=np.float64) / 255.0
    return np.repeat((plane >= 0.5).astype(np.float64)[:, :, None], 3, axis=2)


def read_manifest(path: str | Path, seed: int = 0) -> DatasetManifest:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(
                    ManifestRecord(
                        id=obj["id"],
                        image_path=obj["image_path"],
                        mask_path=obj["mask_path"],
                        prompt=obj["prompt"],
                        split=obj.get("split", SPLIT_SEEN),
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise DecodeError(f"{path}:{lineno}: bad manifest line: {exc}") from exc
    manifest = DatasetManifest(records=records, seed=seed)
    manifest.validate_unique_ids()
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "image_path": rec.image_path,
                        "mask_path": rec.mask_path,
                        "prompt": rec.prompt,
                        "split": rec.split,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def split_manifest(
    manifest: DatasetManifest, ratio: float = 0.8, seed: int | None = None
) -> tuple[DatasetManifest, DatasetManifest]:
    """Deterministically partition records into (seen, unseen) manifests.

    The shuffle is driven by PCG64 so the partition is stable across
    platforms. The first partition receives floor(ratio * N) records.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    n = len(manifest.records)
    if n == 0:
        raise EmptyDatasetError("cannot split an empty manifest")
    if seed is None:
        seed = manifest.seed
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    cut = math.floor(ratio * n)
    first = [replace(manifest.records[i], split=SPLIT_SEEN) for i in order[:cut]]
    second = [replace(manifest.records[i], split=SPLIT_UNSEEN) for i in order[cut:]]
    return (
        DatasetManifest(records=first, seed=seed),
        DatasetManifest(records=second, seed=seed),
    )


def load_sample(
    record: ManifestRecord,
    resolution: tuple[int, int] | None = None,
) -> SampleTuple:
    """Materialize a manifest record; optionally resize to a working size."""
    image = load_image(record.image_path)
    if resolution is not None and image.shape[:2] != resolution:
        image = resize_image(image, resolution)
    mask = load_mask(record.mask_path, target_shape=image.shape)
    return SampleTuple(
        id=record.id, image=image, mask=mask, prompt=record.prompt, split=record.split
    )


def iter_samples(
    dataset: DatasetManifest | Iterable[SampleTuple],
    resolution: tuple[int, int] | None = None,
) -> Iterator[SampleTuple]:
    """Yield SampleTuples from a manifest or pass through in-memory samples."""
    if isinstance(dataset, DatasetManifest):
        for rec in dataset.records:
            yield load_sample(rec, resolution=resolution)
    else:
        yield from dataset
