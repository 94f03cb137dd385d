"""Optimization-based immunization baselines and counter-attacks.

Baselines reproduce the comparison arms: uniform random noise inside the
protected region, and projected-gradient-descent perturbations computed
against either the editor's latent encoder or the full differentiable
edit. Counter-attacks simulate an adversary stripping the protection
with JPEG re-encoding or a registered denoiser before editing.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from . import backends as bk
from .data import DatasetManifest, SampleTuple, iter_samples, validate_image, validate_mask
from .errors import CapabilityError, UnknownDenoiserError
from .training import stable_seed

GradFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PerturbationBudget:
    """Norm bound keeping a perturbation imperceptible."""

    kappa: float = 16.0 / 255.0
    norm: str = "l_inf"

    def __post_init__(self) -> None:
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [0, 1], got {self.kappa}")
        if self.norm not in ("l_inf", "l_2"):
            raise ValueError(f"norm must be 'l_inf' or 'l_2', got {self.norm!r}")


@dataclass(frozen=True)
class PgdConfig:
    steps: int = 200
    step_size: float | None = None  # defaults to kappa / 10
    target: str = "encoder_latent"
    target_value: np.ndarray | float = 0.0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.target not in ("encoder_latent", "full_edit"):
            raise ValueError(f"unknown pgd target {self.target!r}")


@dataclass(frozen=True)
class CounterAttackSpec:
    kind: str = "jpeg"
    jpeg_quality: int = 75
    denoiser_id: str = "median3"

    def __post_init__(self) -> None:
        if self.kind not in ("jpeg", "denoise"):
            raise ValueError(f"counter-attack kind must be 'jpeg' or 'denoise', got {self.kind!r}")
        if not 1 <= self.jpeg_quality <= 100:
            raise ValueError(f"jpeg_quality must be in [1, 100], got {self.jpeg_quality}")

    @property
    def arm_name(self) -> str:
        return f"jpeg:{self.jpeg_quality}" if self.kind == "jpeg" else f"denoise:{self.denoiser_id}"


def parse_counter_attack(text: str) -> CounterAttackSpec:
    """Parse CLI arm names like ``jpeg:75`` or ``denoise:median3``."""
    kind, _, arg = text.partition(":")
    if kind == "jpeg":
        return CounterAttackSpec(kind="jpeg", jpeg_quality=int(arg or 75))
    if kind == "denoise":
        return CounterAttackSpec(kind="denoise", denoiser_id=arg or "median3")
    raise ValueError(f"unknown counter-attack {text!r}")


def random_noise_immunize(
    image: np.ndarray, mask: np.ndarray, budget: PerturbationBudget, seed: int = 0
) -> np.ndarray:
    """Uniform noise in [-kappa, kappa] inside the mask, then clamp."""
    validate_image(image)
    validate_mask(mask, image.shape)
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = rng.uniform(-budget.kappa, budget.kappa, size=image.shape)
    perturbed = np.clip(image + noise * mask, 0.0, 1.0)
    return np.where(mask > 0, perturbed, image)


def project(delta: np.ndarray, budget: PerturbationBudget) -> np.ndarray:
    """Project a perturbation onto the budget ball."""
    if budget.norm == "l_inf":
        return np.clip(delta, -budget.kappa, budget.kappa)
    norm = float(np.sqrt((delta**2).sum()))
    if norm <= budget.kappa or norm == 0.0:
        return delta
    return delta * (budget.kappa / norm)


def projected_gradient_descent(
    grad_fn: GradFn,
    delta0: np.ndarray,
    budget: PerturbationBudget,
    steps: int,
    step_size: float,
    mask: np.ndarray | None = None,
    on_iteration: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Generic projected descent on a perturbation array.

    l_inf mode uses signed gradient steps; l_2 mode uses raw gradient
    steps. After every iteration the perturbation is projected onto the
    budget ball and zeroed outside the mask.
    """
    delta = np.array(delta0, dtype=np.float64, copy=True)
    if mask is not None:
        delta = delta * mask
    for it in range(steps):
        g = grad_fn(delta)
        if budget.norm == "l_inf":
            delta = delta - step_size * np.sign(g)
        else:
            delta = delta - step_size * g
        delta = project(delta, budget)
        if mask is not None:
            delta = delta * mask
        if on_iteration is not None:
            on_iteration(it, delta)
    return delta


def _pgd_objective(
    image: np.ndarray,
    mask: np.ndarray,
    backend: bk.EditBackend,
    cfg: PgdConfig,
    prompt: str,
    edit_steps: int,
    seed: int,
) -> GradFn:
    """Gradient of the squared distance between the attacked surface and its target.

    Candidates are evaluated on the clamped image so every editor call
    sees a valid input; the clamp subgradient confines updates to
    non-saturated pixels.
    """
    edit_region = 1.0 - mask

    def grad_fn(delta: np.ndarray) -> np.ndarray:
        pre = image + delta
        candidate = np.clip(pre, 0.0, 1.0)
        inside = ((pre >= 0.0) & (pre <= 1.0)).astype(np.float64)
        if cfg.target == "encoder_latent":
            try:
                latent, vjp = backend.encode_context_with_vjp(candidate, edit_region)
            except CapabilityError:
                raise CapabilityError(
                    f"backend {backend.backend_id!r} exposes no latent encoder "
                    "for the encoder attack"
                ) from None
            residual = latent - np.asarray(cfg.target_value, dtype=np.float64)
            g = vjp(2.0 * residual / residual.size)
        else:
            if not backend.capabilities.differentiable:
                raise CapabilityError(
                    f"backend {backend.backend_id!r} is not differentiable; "
                    "the full-edit attack needs gradients"
                )
            request = bk.EditRequest(
                image=candidate,
                edit_region_mask=edit_region,
                prompt=prompt,
                steps=edit_steps,
                seed=seed,
            )
            result = bk.edit_with_gradient(backend, request)
            residual = result.image - np.asarray(cfg.target_value, dtype=np.float64)
            g = result.vjp(2.0 * residual / residual.size)
        return g * inside

    return grad_fn


def pgd_immunize(
    image: np.ndarray,
    mask: np.ndarray,
    backend: bk.EditBackend,
    budget: PerturbationBudget,
    cfg: PgdConfig,
    prompt: str = "",
    edit_steps: int = 4,
    seed: int = 0,
    on_iteration: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Per-image optimization baseline; perturbation confined to the mask."""
    validate_image(image)
    validate_mask(mask, image.shape)
    step_size = cfg.step_size if cfg.step_size is not None else budget.kappa / 10.0
    grad_fn = _pgd_objective(image, mask, backend, cfg, prompt, edit_steps, seed)
    delta = projected_gradient_descent(
        grad_fn,
        np.zeros_like(image),
        budget,
        steps=cfg.steps,
        step_size=step_size,
        mask=mask,
        on_iteration=on_iteration,
    )
    perturbed = np.clip(image + delta, 0.0, 1.0)
    return np.where(mask > 0, perturbed, image)


# --- counter-attacks ---------------------------------------------------

_DENOISERS: dict[str, Callable[[np.ndarray], np.ndarray]] = {}


def register_denoiser(denoiser_id: str, fn: Callable[[np.ndarray], np.ndarray]) -> None:
    from .errors import DuplicateIdError

    if denoiser_id in _DENOISERS:
        raise DuplicateIdError(f"denoiser id {denoiser_id!r} is already registered")
    _DENOISERS[denoiser_id] = fn


def available_denoisers() -> list[str]:
    return sorted(_DENOISERS)


def _median3(image: np.ndarray) -> np.ndarray:
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    stack = [
        padded[i : i + image.shape[0], j : j + image.shape[1]]
        for i in range(3)
        for j in range(3)
    ]
    return np.median(np.stack(stack), axis=0)


def _gaussian5(image: np.ndarray) -> np.ndarray:
    taps = np.exp(-0.5 * (np.arange(-2, 3) / 1.0) ** 2)
    taps /= taps.sum()
    padded = np.pad(image, ((2, 2), (2, 2), (0, 0)), mode="reflect")
    h = sum(taps[k] * padded[k : k + image.shape[0], 2:-2] for k in range(5))
    out = sum(taps[k] * h[:, k : k + image.shape[1]] for k in range(5))
    return np.clip(out, 0.0, 1.0)


register_denoiser("median3", _median3)
register_denoiser("gaussian5", _gaussian5)


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    """Encode as JPEG at the given quality and decode back to [0, 1]."""
    validate_image(image)
    buf = io.BytesIO()
    Image.fromarray(np.rint(image * 255.0).astype(np.uint8), mode="RGB").save(
        buf, format="JPEG", quality=quality
    )
    buf.seek(0)
    with Image.open(buf) as im:
        out = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return out


def jpeg_bytes(image: np.ndarray, quality: int) -> bytes:
    """Encoded JPEG payload; determinism checks compare these bytes."""
    buf = io.BytesIO()
    Image.fromarray(np.rint(image * 255.0).astype(np.uint8), mode="RGB").save(
        buf, format="JPEG", quality=quality
    )
    return buf.getvalue()


def counter_attack(image: np.ndarray, spec: CounterAttackSpec) -> np.ndarray:
    """Apply one counter-attack; output has the input's shape and range."""
    validate_image(image)
    if spec.kind == "jpeg":
        return jpeg_roundtrip(image, spec.jpeg_quality)
    try:
        fn = _DENOISERS[spec.denoiser_id]
    except KeyError:
        raise UnknownDenoiserError(
            f"unknown denoiser {spec.denoiser_id!r}; available: {', '.join(available_denoisers())}"
        ) from None
    out = np.asarray(fn(image), dtype=np.float64)
    if out.shape != image.shape:
        raise ValueError(
            f"denoiser {spec.denoiser_id!r} changed shape {image.shape} -> {out.shape}"
        )
    return np.clip(out, 0.0, 1.0)


def robustness_protocol(
    immunizer_fn,
    dataset: DatasetManifest | Sequence[SampleTuple],
    backend: bk.EditBackend,
    specs: Sequence[CounterAttackSpec],
    scorer=None,
    edit_steps: int = 4,
    edit_seed: int = 0,
) -> "RobustnessReport":
    """Immunize, counter-attack, edit, and score each sample per arm.

    The no-attack arm is always included. Per-sample failures are
    recorded and the sweep continues.
    """
    from .metrics import clip_t, ssim

    arms = ["none"] + [spec.arm_name for spec in specs]
    by_arm = {"none": None, **{spec.arm_name: spec for spec in specs}}
    rows: list[dict] = []
    failures: list[dict] = []
    for sample in iter_samples(dataset):
        seed = stable_seed(edit_seed, sample.id)
        request_base = dict(
            edit_region_mask=1.0 - sample.mask,
            prompt=sample.prompt,
            steps=edit_steps,
            seed=seed,
        )
        try:
            edited_original = bk.edit(
                backend, bk.EditRequest(image=sample.image, **request_base)
            ).image
            res = immunizer_fn(sample.image, sample.mask)
            immunized = np.asarray(getattr(res, "image", res))
        except Exception as exc:  # sweep continues past broken samples
            failures.append({"sample_id": sample.id, "arm": "immunize", "error": str(exc)})
            continue
        for arm in arms:
            try:
                spec = by_arm[arm]
                attacked = immunized if spec is None else counter_attack(immunized, spec)
                edited = bk.edit(
                    backend, bk.EditRequest(image=attacked, **request_base)
                ).image
                row = {
                    "sample_id": sample.id,
                    "split": sample.split,
                    "arm": arm,
                    "ssim_edit": ssim(edited, edited_original),
                    "ssim_noise": ssim(sample.image, attacked),
                }
                if scorer is not None:
                    row["clip_t"] = clip_t(edited, sample.prompt, scorer)
                rows.append(row)
            except Exception as exc:
                failures.append({"sample_id": sample.id, "arm": arm, "error": str(exc)})
    return RobustnessReport(arms=arms, rows=rows, failures=failures)


@dataclass
class RobustnessReport:
    arms: list[str]
    rows: list[dict]
    failures: list[dict]

    def aggregates(self) -> dict:
        """Mean of each metric per (arm, split)."""
        out: dict[str, dict[str, dict[str, float]]] = {}
        for arm in self.arms:
            out[arm] = {}
            for split in ("seen", "unseen"):
                subset = [r for r in self.rows if r["arm"] == arm and r["split"] == split]
                if not subset:
                    continue
                agg = {}
                for key in ("ssim_edit", "ssim_noise", "clip_t"):
                    vals = [r[key] for r in subset if key in r]
                    if vals:
                        agg[key] = float(np.mean(vals))
                out[arm][split] = agg
        return out
