"""Editing-backend registry and the uniform edit entry points."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import BackendFailure, CapabilityError, DuplicateIdError, UnknownBackendError
from .base import (
    BackendCapabilities,
    EditBackend,
    EditRequest,
    EditResult,
    Vjp,
    composite_edit,
)
from .surrogates import ConvEditor, MeanFillEditor

_REGISTRY: dict[str, Callable[..., EditBackend]] = {}


def register_backend(backend_id: str, factory: Callable[..., EditBackend]) -> None:
    """Make a backend constructible by id from config and CLI."""
    if backend_id in _REGISTRY:
        raise DuplicateIdError(f"backend id {backend_id!r} is already registered")
    _REGISTRY[backend_id] = factory


def available_backends() -> list[str]:
    return sorted(_REGISTRY)


def create_backend(backend_id: str, **kwargs) -> EditBackend:
    try:
        factory = _REGISTRY[backend_id]
    except KeyError:
        raise UnknownBackendError(
            f"unknown backend {backend_id!r}; available: {', '.join(available_backends())}"
        ) from None
    return factory(**kwargs)


def _needs_masked_inpainting(request: EditRequest) -> bool:
    return not np.all(request.edit_region_mask == 1.0)


def edit(backend: EditBackend, request: EditRequest) -> EditResult:
    """Run one edit; protected pixels are composited back exactly."""
    if _needs_masked_inpainting(request) and not backend.capabilities.supports_masked_inpainting:
        raise CapabilityError(
            f"backend {backend.backend_id!r} cannot restrict edits to a region"
        )
    try:
        raw = backend.raw_edit(request)
    except (CapabilityError, BackendFailure):
        raise
    except Exception as exc:
        raise BackendFailure(f"backend {backend.backend_id!r} failed: {exc}") from exc
    out = composite_edit(request, raw)
    return EditResult(image=out, backend_id=backend.backend_id, differentiable=False)


def edit_with_gradient(backend: EditBackend, request: EditRequest) -> EditResult:
    """Run one edit retaining gradient lineage to the input pixels.

    The returned result carries a ``vjp`` mapping an upstream gradient on
    the composited output to the gradient on ``request.image``.
    """
    if not backend.capabilities.differentiable:
        raise CapabilityError(f"backend {backend.backend_id!r} is inference-only")
    if _needs_masked_inpainting(request) and not backend.capabilities.supports_masked_inpainting:
        raise CapabilityError(
            f"backend {backend.backend_id!r} cannot restrict edits to a region"
        )
    try:
        raw, raw_vjp = backend.raw_edit_with_vjp(request)
    except (CapabilityError, BackendFailure):
        raise
    except Exception as exc:
        raise BackendFailure(f"backend {backend.backend_id!r} failed: {exc}") from exc
    out = composite_edit(request, raw)
    editable = request.edit_region_mask

    def vjp(g: np.ndarray) -> np.ndarray:
        return raw_vjp(g * editable) + g * (1.0 - editable)

    return EditResult(image=out, backend_id=backend.backend_id, differentiable=True, vjp=vjp)


def _register_builtins() -> None:
    register_backend("surrogate-mean", MeanFillEditor)
    register_backend("surrogate-conv", ConvEditor)

    # Pretrained adapters are registered lazily so the registry imports
    # without torch/diffusers; construction raises BackendFailure with
    # install instructions when the stack or weights are missing.
    def _sd15(**kwargs):
        from .diffusion import Sd15InpaintBackend

        return Sd15InpaintBackend(**kwargs)

    def _ip2p(**kwargs):
        from .diffusion import InstructEditBackend

        return InstructEditBackend(**kwargs)

    register_backend("sd15-inpaint", _sd15)
    register_backend("instruct-edit", _ip2p)


_register_builtins()

__all__ = [
    "BackendCapabilities",
    "EditBackend",
    "EditRequest",
    "EditResult",
    "Vjp",
    "available_backends",
    "composite_edit",
    "create_backend",
    "edit",
    "edit_with_gradient",
    "register_backend",
    "ConvEditor",
    "MeanFillEditor",
]
