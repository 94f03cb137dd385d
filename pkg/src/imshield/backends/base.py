"""Adapter contract between the toolkit and diffusion-based editors.

A backend receives the image to edit, the *editable* region mask (the
complement of the protected region), a prompt, and sampler controls.
Whatever the underlying editor does, the wrapper composites protected
pixels back from the input, so the passthrough invariant
``output == input`` on the protected region holds for every backend.
"""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..data import validate_image, validate_mask
from ..errors import CapabilityError, ShapeError

Vjp = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BackendCapabilities:
    supports_masked_inpainting: bool = True
    supports_instruction_edit: bool = False
    differentiable: bool = False


@dataclass(frozen=True)
class EditRequest:
    """One editing call. ``edit_region_mask`` marks where the editor may write."""

    image: np.ndarray
    edit_region_mask: np.ndarray
    prompt: str
    steps: int = 4
    guidance: float = 7.5
    seed: int = 0

    def __post_init__(self) -> None:
        validate_image(self.image)
        validate_mask(self.edit_region_mask, self.image.shape)
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.guidance < 0:
            raise ValueError(f"guidance must be >= 0, got {self.guidance}")

    @property
    def protected_mask(self) -> np.ndarray:
        return 1.0 - self.edit_region_mask


@dataclass
class EditResult:
    """Edited image; ``vjp`` carries gradient lineage when differentiable."""

    image: np.ndarray
    backend_id: str
    differentiable: bool
    vjp: Vjp | None = field(default=None, repr=False)


class EditBackend(ABC):
    """Base class for editing adapters.

    Subclasses implement ``raw_edit`` (and ``raw_edit_with_vjp`` when
    differentiable). The raw output covers the whole frame; compositing
    of the protected region is handled by :func:`composite_edit`.
    """

    backend_id: str = "abstract"
    capabilities: BackendCapabilities = BackendCapabilities()
    native_resolution: tuple[int, int] | None = None

    @abstractmethod
    def raw_edit(self, request: EditRequest) -> np.ndarray:
        """Editor output before compositing; values in [0, 1]."""

    def raw_edit_with_vjp(self, request: EditRequest) -> tuple[np.ndarray, Vjp]:
        raise CapabilityError(f"backend {self.backend_id!r} is inference-only")

    def encode_context(self, image: np.ndarray, edit_region_mask: np.ndarray) -> np.ndarray:
        """Latent encoding of the image, if the editor exposes one."""
        raise CapabilityError(f"backend {self.backend_id!r} exposes no encoder")

    def encode_context_with_vjp(
        self, image: np.ndarray, edit_region_mask: np.ndarray
    ) -> tuple[np.ndarray, Vjp]:
        raise CapabilityError(f"backend {self.backend_id!r} exposes no encoder")

    def param_checksum(self) -> str:
        """Digest of all editor parameters; used by frozen-editor checks."""
        h = hashlib.sha256()
        for arr in self._parameter_arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def _parameter_arrays(self) -> list[np.ndarray]:
        return []


def composite_edit(request: EditRequest, raw: np.ndarray) -> np.ndarray:
    """Replace protected pixels of the raw editor output with the input."""
    if raw.shape != request.image.shape:
        raise ShapeError(
            f"editor returned shape {raw.shape}, expected {request.image.shape}"
        )
    return np.where(request.edit_region_mask > 0, raw, request.image)


def checksum_arrays(arrays: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
