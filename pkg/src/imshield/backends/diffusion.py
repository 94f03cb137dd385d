"""Adapters for pretrained diffusion editors.

These backends require the optional ``[diffusion]`` extra (torch,
diffusers) plus locally available pretrained weights. Weight locations
come from constructor arguments or environment variables
(``IMSHIELD_SD15_WEIGHTS``, ``IMSHIELD_IP2P_WEIGHTS``); nothing is ever
downloaded implicitly. Construction fails with BackendFailure when a
dependency or weight path is missing, so the registry stays importable
on machines without them.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..errors import BackendFailure, CapabilityError
from .base import BackendCapabilities, EditBackend, EditRequest, Vjp


def _import_torch_stack():
    try:
        import torch  # noqa: F401
        import diffusers  # noqa: F401
    except ImportError as exc:
        raise BackendFailure(
            "pretrained diffusion backends need the [diffusion] extra "
            "(pip install 'imshield[diffusion]')"
        ) from exc
    return torch, diffusers


def _resolve_weights(explicit: str | None, env_var: str) -> str:
    weights = explicit or os.environ.get(env_var, "")
    if not weights or not Path(weights).exists():
        raise BackendFailure(
            f"pretrained weights not found; pass weights_path or set {env_var} "
            "to a local checkpoint directory"
        )
    return weights


class Sd15InpaintBackend(EditBackend):
    """Latent-diffusion inpainting editor behind the adapter contract."""

    backend_id = "sd15-inpaint"
    capabilities = BackendCapabilities(
        supports_masked_inpainting=True,
        supports_instruction_edit=False,
        differentiable=True,
    )
    native_resolution = (512, 512)

    def __init__(self, weights_path: str | None = None, device: str | None = None):
        torch, diffusers = _import_torch_stack()
        weights = _resolve_weights(weights_path, "IMSHIELD_SD15_WEIGHTS")
        self._torch = torch
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        self.pipe = diffusers.StableDiffusionInpaintPipeline.from_pretrained(
            weights, safety_checker=None
        ).to(self.device)
        for module in (self.pipe.vae, self.pipe.unet, self.pipe.text_encoder):
            module.requires_grad_(False)
            module.eval()

    def _to_torch(self, image: np.ndarray):
        torch = self._torch
        # pipeline pixel space is [-1, 1], NCHW
        t = torch.from_numpy(image.astype(np.float32).transpose(2, 0, 1))[None]
        return (t * 2.0 - 1.0).to(self.device)

    def raw_edit(self, request: EditRequest) -> np.ndarray:
        torch = self._torch
        from PIL import Image

        h, w = request.image.shape[:2]
        image = Image.fromarray(np.rint(request.image * 255.0).astype(np.uint8))
        # diffusers inpainting expects white where the editor may write
        mask = Image.fromarray(
            np.rint(request.edit_region_mask[:, :, 0] * 255.0).astype(np.uint8)
        )
        generator = torch.Generator(device=self.device).manual_seed(request.seed)
        out = self.pipe(
            prompt=request.prompt,
            image=image,
            mask_image=mask,
            num_inference_steps=request.steps,
            guidance_scale=request.guidance,
            generator=generator,
            output_type="np",
        ).images[0]
        if out.shape[:2] != (h, w):
            out = np.asarray(
                Image.fromarray(np.rint(out * 255.0).astype(np.uint8)).resize((w, h))
            ).astype(np.float64) / 255.0
        return np.clip(out.astype(np.float64), 0.0, 1.0)

    def _denoise_differentiable(self, request: EditRequest, image_t):
        """Reduced-step denoising loop with gradient retention."""
        torch = self._torch
        pipe = self.pipe
        mask = torch.from_numpy(
            request.edit_region_mask[:, :, :1].astype(np.float32).transpose(2, 0, 1)
        )[None].to(self.device)

        text_inputs = pipe.tokenizer(
            [""] if request.guidance <= 1 else ["", request.prompt],
            padding="max_length",
            max_length=pipe.tokenizer.model_max_length,
            return_tensors="pt",
        )
        text_emb = pipe.text_encoder(text_inputs.input_ids.to(self.device))[0]

        latents_shape = (1, pipe.vae.config.latent_channels,
                         image_t.shape[2] // 8, image_t.shape[3] // 8)
        generator = torch.Generator(device=self.device).manual_seed(request.seed)
        latents = torch.randn(latents_shape, generator=generator, device=self.device)
        # masked-image conditioning: protected pixels only
        masked_image = image_t * (1.0 - mask)
        masked_latents = pipe.vae.encode(masked_image).latent_dist.mean * 0.18215
        mask_latent = torch.nn.functional.interpolate(mask, size=latents_shape[2:], mode="nearest")

        pipe.scheduler.set_timesteps(request.steps)
        latents = latents * pipe.scheduler.init_noise_sigma
        n_cond = text_emb.shape[0]
        for t in pipe.scheduler.timesteps:
            latent_in = torch.cat([latents] * n_cond)
            latent_in = torch.cat(
                [latent_in, mask_latent.expand(n_cond, -1, -1, -1),
                 masked_latents.expand(n_cond, -1, -1, -1)], dim=1
            )
            noise_pred = pipe.unet(latent_in, t, encoder_hidden_states=text_emb).sample
            if n_cond == 2:
                uncond, cond = noise_pred.chunk(2)
                noise_pred = uncond + request.guidance * (cond - uncond)
            latents = pipe.scheduler.step(noise_pred, t, latents).prev_sample
        decoded = pipe.vae.decode(latents / 0.18215).sample
        return (decoded.clamp(-1, 1) + 1.0) / 2.0

    def raw_edit_with_vjp(self, request: EditRequest) -> tuple[np.ndarray, Vjp]:
        torch = self._torch
        image_t = self._to_torch(request.image).requires_grad_(True)
        with torch.enable_grad():
            out_t = self._denoise_differentiable(request, image_t)
        out = out_t.detach().cpu().numpy()[0].transpose(1, 2, 0).astype(np.float64)

        def vjp(g: np.ndarray) -> np.ndarray:
            cot = torch.from_numpy(
                g.astype(np.float32).transpose(2, 0, 1)
            )[None].to(self.device)
            (grad,) = torch.autograd.grad(out_t, image_t, grad_outputs=cot, retain_graph=True)
            # chain through the [0,1] -> [-1,1] input rescale
            return grad.cpu().numpy()[0].transpose(1, 2, 0).astype(np.float64) * 2.0

        return np.clip(out, 0.0, 1.0), vjp

    def encode_context(self, image: np.ndarray, edit_region_mask: np.ndarray) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            latent = self.pipe.vae.encode(self._to_torch(image)).latent_dist.mean
        return latent.cpu().numpy().astype(np.float64)

    def encode_context_with_vjp(self, image, edit_region_mask):
        torch = self._torch
        image_t = self._to_torch(image).requires_grad_(True)
        with torch.enable_grad():
            latent = self.pipe.vae.encode(image_t).latent_dist.mean

        def vjp(g: np.ndarray) -> np.ndarray:
            cot = torch.from_numpy(g.astype(np.float32)).to(self.device)
            (grad,) = torch.autograd.grad(latent, image_t, grad_outputs=cot, retain_graph=True)
            return grad.cpu().numpy()[0].transpose(1, 2, 0).astype(np.float64) * 2.0

        return latent.detach().cpu().numpy().astype(np.float64), vjp

    def _parameter_arrays(self) -> list[np.ndarray]:
        arrays = []
        for module in (self.pipe.vae, self.pipe.unet, self.pipe.text_encoder):
            for p in module.parameters():
                arrays.append(p.detach().cpu().numpy())
        return arrays


class InstructEditBackend(EditBackend):
    """Instruction-following editor; edits the whole frame, no region mask."""

    backend_id = "instruct-edit"
    capabilities = BackendCapabilities(
        supports_masked_inpainting=False,
        supports_instruction_edit=True,
        differentiable=False,
    )
    native_resolution = (512, 512)

    def __init__(self, weights_path: str | None = None, device: str | None = None):
        torch, diffusers = _import_torch_stack()
        weights = _resolve_weights(weights_path, "IMSHIELD_IP2P_WEIGHTS")
        self._torch = torch
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        self.pipe = diffusers.StableDiffusionInstructPix2PixPipeline.from_pretrained(
            weights, safety_checker=None
        ).to(self.device)

    def raw_edit(self, request: EditRequest) -> np.ndarray:
        torch = self._torch
        from PIL import Image

        h, w = request.image.shape[:2]
        image = Image.fromarray(np.rint(request.image * 255.0).astype(np.uint8))
        generator = torch.Generator(device=self.device).manual_seed(request.seed)
        out = self.pipe(
            prompt=request.prompt,
            image=image,
            num_inference_steps=request.steps,
            guidance_scale=request.guidance,
            generator=generator,
            output_type="np",
        ).images[0]
        if out.shape[:2] != (h, w):
            out = np.asarray(
                Image.fromarray(np.rint(out * 255.0).astype(np.uint8)).resize((w, h))
            ).astype(np.float64) / 255.0
        return np.clip(out.astype(np.float64), 0.0, 1.0)
