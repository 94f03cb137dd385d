"""Loss terms and the end-to-end training loop for the immunizer.

Per training step: generate noise, apply-and-clamp inside the protected
region, run the (frozen) editing backend on the immunized image, compute

* ``noise_loss``: mean absolute deviation between immunized and original
  image over the protected region, and
* ``edit_loss``: mean absolute value of the edited output over the
  editable region (driving the edited background toward black),

combine them as ``alpha * noise_loss + edit_loss`` and take an
adaptive-moment gradient step on the generator weights only. Editor
parameters are never touched; checksum equality across steps is part of
the test suite.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import backends as bk
from .data import DatasetManifest, SampleTuple, iter_samples, load_sample
from .errors import DegenerateMaskError, NonFiniteLossError
from .immunizer import ImmunizerModel


@dataclass(frozen=True)
class LossWeights:
    """Relative weight of the imperceptibility term."""

    alpha: float = 4.0

    def __post_init__(self) -> None:
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 350
    batch_size: int = 5
    learning_rate: float = 1e-5
    optimizer: str = "adam"
    precision: str = "full"
    seed: int = 0
    editor_id: str = "surrogate-mean"
    editor_steps: int = 4
    editor_guidance: float = 7.5
    checkpoint_interval: int = 0  # epochs between checkpoints; 0 = final only

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.editor_steps < 1:
            raise ValueError("epochs, batch_size and editor_steps must be positive")
        # zero is allowed so probing runs can report losses without updating
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.precision not in ("full", "mixed"):
            raise ValueError(f"precision must be 'full' or 'mixed', got {self.precision!r}")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    mean_noise_loss: float = float("nan")
    mean_edit_loss: float = float("nan")
    mean_total_loss: float = float("nan")
    checkpoints: list[str] = field(default_factory=list)
    skipped_samples: list[str] = field(default_factory=list)


def stable_seed(*parts) -> int:
    """Platform-stable 63-bit seed derived from arbitrary parts."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big") >> 1


def _noise_loss_graph(imm: ag.Tensor, original: np.ndarray, mask: np.ndarray) -> ag.Tensor:
    denom = float(mask.sum())
    if denom == 0:
        raise DegenerateMaskError("noise loss needs a non-empty protected region")
    dev = ag.abs_(ag.mul(ag.add(imm, ag.mul(ag.const(original), -1.0)), ag.const(mask)))
    return ag.mul(ag.sum_(dev), 1.0 / denom)


def _edit_loss_graph(edited: ag.Tensor, mask: np.ndarray) -> ag.Tensor:
    comp = 1.0 - mask
    denom = float(comp.sum())
    if denom == 0:
        raise DegenerateMaskError("edit loss needs a non-empty editable region")
    dev = ag.abs_(ag.mul(edited, ag.const(comp)))
    return ag.mul(ag.sum_(dev), 1.0 / denom)


def noise_loss(immunized: np.ndarray, original: np.ndarray, mask: np.ndarray) -> float:
    """Masked mean absolute deviation between immunized and original."""
    immunized = np.asarray(immunized, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if immunized.shape != original.shape or immunized.shape != mask.shape:
        raise ValueError("immunized, original and mask must share one shape")
    return _noise_loss_graph(ag.const(immunized), original, mask).item()


def edit_loss(edited, mask: np.ndarray) -> float:
    """Mean absolute value of the edited image over the editable region."""
    image = edited.image if isinstance(edited, bk.EditResult) else edited
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.shape != mask.shape:
        raise ValueError("edited image and mask must share one shape")
    return _edit_loss_graph(ag.const(image), mask).item()


def total_loss(l_noise: float, l_edit: float, w: LossWeights) -> float:
    if not (np.isfinite(l_noise) and np.isfinite(l_edit)):
        raise ValueError("loss terms must be finite")
    return w.alpha * l_noise + l_edit


class Adam:
    """Adaptive-moment optimizer over autograd leaves."""

    def __init__(self, params: Sequence[ag.Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mh = self.m[i] / b1c
            vh = self.v[i] / b2c
            p.value = p.value - self.lr * mh / (np.sqrt(vh) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"adam_t": np.asarray([self.t], dtype=np.int64)}
        for i, _ in enumerate(self.params):
            out[f"adam_m{i}"] = self.m[i]
            out[f"adam_v{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam_t"][0])
        for i, _ in enumerate(self.params):
            self.m[i] = arrays[f"adam_m{i}"]
            self.v[i] = arrays[f"adam_v{i}"]


@dataclass
class StepLosses:
    l_noise: float
    l_edit: float
    l_total: float


def _to_nchw(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(2, 0, 1)[None])


def _editor_node(imm: ag.Tensor, backend: bk.EditBackend, sample: SampleTuple,
                 cfg: TrainConfig, compute_grad: bool = True) -> ag.Tensor:
    """Splice the editing backend into the graph as a custom op."""
    imm_hwc = np.ascontiguousarray(imm.value[0].transpose(1, 2, 0))
    request = bk.EditRequest(
        image=np.clip(imm_hwc, 0.0, 1.0),
        edit_region_mask=1.0 - sample.mask,
        prompt=sample.prompt,
        steps=cfg.editor_steps,
        guidance=cfg.editor_guidance,
        seed=stable_seed(cfg.seed, sample.id),
    )
    if compute_grad:
        result = bk.edit_with_gradient(backend, request)
        vjp_hwc = result.vjp

        def vjp(g_nchw: np.ndarray) -> np.ndarray:
            g_hwc = g_nchw[0].transpose(1, 2, 0)
            return _to_nchw(vjp_hwc(g_hwc))

        return ag.from_vjp(_to_nchw(result.image), vjp, imm)
    result = bk.edit(backend, request)
    return ag.const(_to_nchw(result.image))


def _forward_losses(
    model: ImmunizerModel, sample: SampleTuple, backend: bk.EditBackend,
    cfg: TrainConfig, mode: str = "full",
) -> tuple[ag.Tensor, ag.Tensor, ag.Tensor]:
    """Build the per-sample loss graph; mode selects which terms train."""
    image = sample.image.astype(model.cfg.dtype)
    mask = sample.mask.astype(model.cfg.dtype)
    x = ag.const(_to_nchw(image))
    mask_nchw = _to_nchw(mask)
    noise = model.forward(x)
    imm = ag.clamp01(ag.add(x, ag.mul(noise, ag.const(mask_nchw))))
    l_noise_t = _noise_loss_graph(imm, x.value, mask_nchw)
    edited = _editor_node(imm, backend, sample, cfg, compute_grad=(mode != "no_edit_loss"))
    l_edit_t = _edit_loss_graph(edited, mask_nchw)
    return imm, l_noise_t, l_edit_t


def _combine(l_noise_t: ag.Tensor, l_edit_t: ag.Tensor, w: LossWeights, mode: str) -> ag.Tensor:
    if mode == "no_noise_loss":
        return l_edit_t
    if mode == "no_edit_loss":
        return ag.mul(l_noise_t, w.alpha)
    return ag.add(ag.mul(l_noise_t, w.alpha), l_edit_t)


class Trainer:
    """Owns optimizer state for a training run against one frozen backend."""

    def __init__(self, model: ImmunizerModel, backend: bk.EditBackend,
                 cfg: TrainConfig, w: LossWeights, mode: str = "full"):
        if mode not in ("full", "no_noise_loss", "no_edit_loss"):
            raise ValueError(f"unknown training mode {mode!r}")
        self.model = model
        self.backend = backend
        self.cfg = cfg
        self.w = w
        self.mode = mode
        self.opt = Adam(model.parameters(), lr=cfg.learning_rate)
        self.state = TrainState()

    def step_batch(self, samples: Sequence[SampleTuple]) -> list[tuple[str, StepLosses]]:
        """One optimizer step over a batch; per-sample losses averaged."""
        ag.zero_grads(self.model.parameters())
        results: list[tuple[str, StepLosses]] = []
        contributed = 0
        for sample in samples:
            _, l_noise_t, l_edit_t = _forward_losses(
                self.model, sample, self.backend, self.cfg, self.mode
            )
            l_total_t = _combine(l_noise_t, l_edit_t, self.w, self.mode)
            losses = StepLosses(
                l_noise=l_noise_t.item(), l_edit=l_edit_t.item(), l_total=l_total_t.item()
            )
            if not np.isfinite(losses.l_total):
                raise NonFiniteLossError(
                    f"non-finite loss on sample {sample.id!r}: {losses}"
                )
            ag.backward(ag.mul(l_total_t, 1.0 / len(samples)))
            contributed += 1
            results.append((sample.id, losses))
        if contributed:
            self.opt.step()
            self.state.step += 1
        return results


def train_step(model: ImmunizerModel, sample: SampleTuple, backend: bk.EditBackend,
               cfg: TrainConfig, w: LossWeights,
               trainer: Trainer | None = None) -> tuple[ImmunizerModel, StepLosses]:
    """Run exactly one optimization step on one sample.

    Without an explicit ``trainer`` the adaptive-moment state is
    transient; pass one to keep momentum across calls.
    """
    if trainer is None:
        trainer = Trainer(model, backend, cfg, w)
    results = trainer.step_batch([sample])
    return model, results[0][1]


def train(
    model: ImmunizerModel,
    dataset: DatasetManifest | Sequence[SampleTuple],
    backend: bk.EditBackend,
    cfg: TrainConfig,
    w: LossWeights,
    mode: str = "full",
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    run_id: str = "",
    start_epoch: int = 0,
    trainer: Trainer | None = None,
) -> tuple[ImmunizerModel, TrainState, list[dict]]:
    """Epoch loop with deterministic per-epoch shuffling and skip-on-NaN.

    Sample order within epoch ``e`` is the PCG64 permutation seeded by
    ``(cfg.seed, e)``, so runs are reproducible and resumable: restoring
    a checkpoint written after epoch ``e`` and passing
    ``start_epoch=e + 1`` replays the exact remaining schedule.
    """
    from .immunizer import save_checkpoint  # local import keeps module load light

    if isinstance(dataset, DatasetManifest):
        records = list(dataset.records)
        if not records:
            raise DegenerateMaskError("empty dataset")
        get = lambda i: load_sample(records[i])  # noqa: E731
        n = len(records)
    else:
        samples = list(dataset)
        if not samples:
            raise DegenerateMaskError("empty dataset")
        get = lambda i: samples[i]  # noqa: E731
        n = len(samples)

    if trainer is None:
        trainer = Trainer(model, backend, cfg, w, mode=mode)
    state = trainer.state
    state.epoch = start_epoch
    rows: list[dict] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            order = np.random.Generator(
                np.random.PCG64(stable_seed(cfg.seed, "epoch", epoch))
            ).permutation(n)
            for lo in range(0, n, cfg.batch_size):
                batch_idx = order[lo : lo + cfg.batch_size]
                batch = [get(i) for i in batch_idx]
                t0 = time.perf_counter()
                try:
                    results = trainer.step_batch(batch)
                except NonFiniteLossError as exc:
                    state.skipped_samples.append(str(exc))
                    continue
                wall_ms = (time.perf_counter() - t0) * 1000.0 / max(len(results), 1)
                for sample_id, losses in results:
                    row = {
                        "step": state.step,
                        "epoch": epoch,
                        "sample_id": sample_id,
                        "l_noise": losses.l_noise,
                        "l_edit": losses.l_edit,
                        "l_total": losses.l_total,
                        "wall_ms": wall_ms,
                    }
                    rows.append(row)
                    if log_fh:
                        log_fh.write(json.dumps(row) + "\n")
            state.epoch = epoch + 1
            final = epoch == cfg.epochs - 1
            if checkpoint_dir and (
                final
                or (cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0)
            ):
                path = Path(checkpoint_dir) / f"epoch_{epoch + 1:05d}.npz"
                save_checkpoint(
                    model,
                    path,
                    run_id=run_id,
                    extra_arrays=trainer.opt.state_arrays(),
                    extra_meta={"epoch": epoch + 1, "step": state.step},
                )
                state.checkpoints.append(str(path))
    finally:
        if log_fh:
            log_fh.close()

    if rows:
        state.mean_noise_loss = float(np.mean([r["l_noise"] for r in rows]))
        state.mean_edit_loss = float(np.mean([r["l_edit"] for r in rows]))
        state.mean_total_loss = float(np.mean([r["l_total"] for r in rows]))
    return model, state, rows


def ablation_run(
    mode: str,
    model: ImmunizerModel,
    dataset: DatasetManifest | Sequence[SampleTuple],
    backend: bk.EditBackend,
    cfg: TrainConfig,
    w: LossWeights,
) -> dict:
    """Train under an ablated loss and report the shared metric schema.

    ``no_noise_loss`` removes the imperceptibility term (alpha = 0);
    ``no_edit_loss`` removes the edit-failure term. The returned mapping
    uses the same keys for every mode so runs are directly comparable.
    """
    from .evaluation import evaluate_method
    from .immunizer import immunize

    model, state, rows = train(model, dataset, backend, cfg, w, mode=mode)
    report = evaluate_method(
        lambda image, mask: immunize(model, image, mask),
        dataset,
        backend,
        scorer=None,
        edit_steps=cfg.editor_steps,
        edit_seed=cfg.seed,
    )
    agg = report.aggregates.get("seen", {})
    return {
        "mode": mode,
        "alpha": 0.0 if mode == "no_noise_loss" else w.alpha,
        "ssim_edit": agg.get("ssim_edit"),
        "psnr_edit": agg.get("psnr_edit"),
        "fsim_edit": agg.get("fsim_edit"),
        "ssim_noise": agg.get("ssim_noise"),
        "final_noise_loss": rows[-1]["l_noise"] if rows else None,
        "final_edit_loss": rows[-1]["l_edit"] if rows else None,
        "steps": state.step,
    }
