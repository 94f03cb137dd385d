"""Deterministic differentiable surrogate editors for desk-scale work.

Two editors ship in-tree so the full training/evaluation stack runs
without pretrained weights:

* ``surrogate-mean``: fills the editable region with the per-channel
  spatial mean of the protected region. Closed-form, unit gain.
* ``surrogate-conv``: a two-conv-layer toy editor whose fill is driven
  by a feature summary pooled over the protected region, blended with a
  box-blurred copy of the input. Its response to protected-region
  changes is amplified and saturating, and a deterministic per-prompt
  bias makes it prompt-sensitive.

Both ignore the request seed: they are pure functions of their inputs.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .. import autograd as ag
from .base import BackendCapabilities, EditBackend, EditRequest, Vjp


def _protected_plane(request_mask: np.ndarray) -> np.ndarray:
    """2-D protected-region plane from the editable-region mask."""
    return 1.0 - request_mask[:, :, 0]


class MeanFillEditor(EditBackend):
    """Fill the editable region with the protected region's mean color."""

    backend_id = "surrogate-mean"
    capabilities = BackendCapabilities(
        supports_masked_inpainting=True,
        supports_instruction_edit=False,
        differentiable=True,
    )

    def _fill_stats(self, request: EditRequest) -> tuple[np.ndarray, np.ndarray, float]:
        prot = _protected_plane(request.edit_region_mask)
        count = prot.sum()
        if count == 0:
            prot = np.ones_like(prot)
            count = prot.sum()
        fill = (request.image * prot[:, :, None]).sum(axis=(0, 1)) / count
        return fill, prot, count

    def raw_edit(self, request: EditRequest) -> np.ndarray:
        fill, _, _ = self._fill_stats(request)
        return np.broadcast_to(fill, request.image.shape).copy()

    def raw_edit_with_vjp(self, request: EditRequest) -> tuple[np.ndarray, Vjp]:
        fill, prot, count = self._fill_stats(request)
        out = np.broadcast_to(fill, request.image.shape).copy()

        def vjp(g: np.ndarray) -> np.ndarray:
            per_channel = g.sum(axis=(0, 1)) / count
            return prot[:, :, None] * per_channel[None, None, :]

        return out, vjp

    def encode_context(self, image: np.ndarray, edit_region_mask: np.ndarray) -> np.ndarray:
        prot = _protected_plane(edit_region_mask)
        count = max(prot.sum(), 1.0)
        return (image * prot[:, :, None]).sum(axis=(0, 1)) / count

    def encode_context_with_vjp(self, image, edit_region_mask):
        prot = _protected_plane(edit_region_mask)
        count = max(prot.sum(), 1.0)
        latent = (image * prot[:, :, None]).sum(axis=(0, 1)) / count

        def vjp(g: np.ndarray) -> np.ndarray:
            return prot[:, :, None] * g[None, None, :] / count

        return latent, vjp


def _prompt_bias(prompt: str) -> np.ndarray:
    """Deterministic per-prompt shift of the fill, stable across runs."""
    digest = hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "big")))
    return rng.uniform(-0.4, 0.4, size=3)


class ConvEditor(EditBackend):
    """Two-conv-layer toy editor conditioned on the protected region.

    The fill logits combine local conv features with a luminance summary
    pooled over the protected region, scaled by ``context_gain``. Small
    changes to the protected content therefore move the whole fill, with
    the response saturating through the sigmoid; that gives
    gradient-based callers a large-but-bounded sensitivity to exploit,
    qualitatively like a generative editor reacting to its conditioning.
    """

    backend_id = "surrogate-conv"
    capabilities = BackendCapabilities(
        supports_masked_inpainting=True,
        supports_instruction_edit=True,
        differentiable=True,
    )

    FEATURES = 8
    BLEND = 0.65   # weight of the generated fill vs the blurred input
    REF_LUM = 0.35  # protected-region luminance with neutral exposure

    def __init__(self, context_gain: float = 40.0, seed: int = 0xC0FFEE):
        rng = np.random.Generator(np.random.PCG64(seed))
        f = self.FEATURES
        self.context_gain = float(context_gain)
        self.w1 = rng.normal(0.0, 0.5, size=(f, 3, 3, 3))
        self.b1 = rng.normal(0.0, 0.1, size=(f,))
        self.w2 = rng.normal(0.0, 0.15, size=(3, f, 3, 3))
        self.b2 = rng.normal(0.0, 0.1, size=(3,))
        # luminance pooling as a fixed 1x1 conv
        self.wlum = np.full((1, 3, 1, 1), 1.0 / 3.0)
        blur = np.zeros((3, 3, 3, 3))
        for c in range(3):
            blur[c, c] = 1.0 / 9.0
        self.blur = blur

    def _parameter_arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.wlum,
                np.asarray([self.context_gain, self.REF_LUM, self.BLEND])]

    def _graph(self, image_t: ag.Tensor, request: EditRequest) -> ag.Tensor:
        prot2d = _protected_plane(request.edit_region_mask)
        if prot2d.sum() == 0:
            prot2d = np.ones_like(prot2d)
        h = ag.tanh(ag.conv2d(image_t, ag.const(self.w1), ag.const(self.b1)))
        lum = ag.conv2d(image_t, ag.const(self.wlum), ag.const(np.zeros(1)))
        ctx = ag.spatial_masked_mean(lum, prot2d)  # (N, 1, 1, 1)
        # exposure-style response: constant relative sensitivity to the
        # protected luminance, clipped at white
        exposure = ag.exp_(ag.mul(ag.add(ctx, -self.REF_LUM), self.context_gain))
        local_logit = ag.conv2d(h, ag.const(self.w2), ag.const(self.b2))
        bias = _prompt_bias(request.prompt).reshape(1, 3, 1, 1)
        fill = ag.min_const(ag.mul(ag.sigmoid(ag.add(local_logit, ag.const(bias))), exposure), 1.0)
        blurred = ag.conv2d(image_t, ag.const(self.blur), ag.const(np.zeros(3)))
        return ag.add(ag.mul(fill, self.BLEND), ag.mul(blurred, 1.0 - self.BLEND))

    def raw_edit(self, request: EditRequest) -> np.ndarray:
        x = ag.const(request.image.transpose(2, 0, 1)[None])
        out = self._graph(x, request)
        return np.clip(out.value[0].transpose(1, 2, 0), 0.0, 1.0)

    def raw_edit_with_vjp(self, request: EditRequest) -> tuple[np.ndarray, Vjp]:
        x = ag.leaf(np.ascontiguousarray(request.image.transpose(2, 0, 1)[None]))
        out_t = self._graph(x, request)
        clipped = np.clip(out_t.value, 0.0, 1.0)
        inside = (out_t.value >= 0.0) & (out_t.value <= 1.0)

        def vjp(g: np.ndarray) -> np.ndarray:
            x.grad = None
            cot = np.ascontiguousarray(g.transpose(2, 0, 1)[None]) * inside
            ag.backward(ag.sum_(ag.mul(out_t, ag.const(cot))))
            return x.grad[0].transpose(1, 2, 0)

        return clipped[0].transpose(1, 2, 0), vjp

    def encode_context(self, image: np.ndarray, edit_region_mask: np.ndarray) -> np.ndarray:
        prot2d = _protected_plane(edit_region_mask)
        if prot2d.sum() == 0:
            prot2d = np.ones_like(prot2d)
        x = ag.const(image.transpose(2, 0, 1)[None])
        h = ag.tanh(ag.conv2d(x, ag.const(self.w1), ag.const(self.b1)))
        return ag.spatial_masked_mean(h, prot2d).value.reshape(-1)

    def encode_context_with_vjp(self, image, edit_region_mask):
        prot2d = _protected_plane(edit_region_mask)
        if prot2d.sum() == 0:
            prot2d = np.ones_like(prot2d)
        x = ag.leaf(np.ascontiguousarray(image.transpose(2, 0, 1)[None]))
        h = ag.tanh(ag.conv2d(x, ag.const(self.w1), ag.const(self.b1)))
        ctx = ag.spatial_masked_mean(h, prot2d)

        def vjp(g: np.ndarray) -> np.ndarray:
            x.grad = None
            cot = g.reshape(ctx.value.shape)
            ag.backward(ag.sum_(ag.mul(ctx, ag.const(cot))))
            return x.grad[0].transpose(1, 2, 0)

        return ctx.value.reshape(-1), vjp
