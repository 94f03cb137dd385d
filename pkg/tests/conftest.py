import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from imshield.data import SampleTuple
from imshield.immunizer import ImmunizerConfig, ImmunizerModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_image(rng, h=32, w=32, lo=0.0, hi=1.0):
    return rng.uniform(lo, hi, (h, w, 3))


def make_mask(h=32, w=32, box=None):
    mask = np.zeros((h, w, 3))
    if box is None:
        box = (h // 4, 3 * h // 4, w // 4, 3 * w // 4)
    r0, r1, c0, c1 = box
    mask[r0:r1, c0:c1, :] = 1.0
    return mask


def textured_image(h, w, seed=0):
    """Deterministic natural-looking fixture with edges and gradients."""
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.stack(
        [
            0.5 + 0.35 * np.sin(xx / 5.0 + r.uniform(0, 6)),
            0.5 + 0.35 * np.cos(yy / 7.0 + r.uniform(0, 6)),
            0.5 + 0.2 * np.sin((xx + 2 * yy) / 9.0) + 0.1 * np.sign(np.sin(xx / 16.0)),
        ],
        axis=2,
    )
    img += r.normal(0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


@pytest.fixture
def toy_sample(rng):
    image = make_image(rng, 32, 32, 0.3, 0.4)
    return SampleTuple(id="s0", image=image, mask=make_mask(32, 32), prompt="a beach")


@pytest.fixture
def tiny_model():
    return ImmunizerModel(ImmunizerConfig(depth=2, base_width=4), seed=7)


def tiny_model_cfg(depth=2, base_width=4, eps_max=0.125):
    return ImmunizerConfig(depth=depth, base_width=base_width, eps_max=eps_max)


def write_toy_manifest(tmp_path, n=3, size=32, seed=0, splits=None, prompt="a beach"):
    """Write PNGs and a JSONL manifest; returns the manifest path."""
    import json

    from imshield.data import save_image, save_mask

    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        image = make_image(rng, size, size, 0.25, 0.45)
        mask = make_mask(size, size)
        img_path = tmp_path / f"img{i}.png"
        mask_path = tmp_path / f"mask{i}.png"
        save_image(image, img_path)
        save_mask(mask, mask_path)
        split = splits[i] if splits else "seen"
        lines.append(
            json.dumps(
                {
                    "id": f"s{i}",
                    "image_path": str(img_path),
                    "mask_path": str(mask_path),
                    "prompt": f"{prompt} {i}",
                    "split": split,
                }
            )
        )
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
