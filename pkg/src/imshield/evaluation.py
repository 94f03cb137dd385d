"""Evaluation harness: per-sample metric rows and split aggregates.

The editing-failure protocol fixes the editor seed per sample, edits the
original and the immunized image with identical requests, and scores the
two edits against each other. That isolates the effect of immunization
from sampler randomness. Imperceptibility is scored between the original
and the immunized image. PSNR of identical images is recorded as the
+inf sentinel and excluded from means with a footnote count.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import backends as bk
from .data import DatasetManifest, SampleTuple, iter_samples
from .errors import FrameMismatchError, ScorerUnavailableError, ShapeError
from .metrics import TextScorerHandle, clip_t, fsim, psnr, ssim
from .training import stable_seed

ImmunizerFn = Callable[[np.ndarray, np.ndarray], object]

_METRIC_KEYS = (
    "ssim_edit",
    "psnr_edit",
    "fsim_edit",
    "ssim_noise",
    "clip_t",
    "runtime_ms",
    "peak_mem_mib",
)


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @property
    def aggregates(self) -> dict:
        """Arithmetic mean of present values per split; absent stays absent.

        Non-finite PSNR values are excluded from the mean and counted in
        ``psnr_inf_count``.
        """
        out: dict[str, dict[str, float]] = {}
        for split in ("seen", "unseen"):
            subset = [r for r in self.rows if r["split"] == split]
            if not subset:
                continue
            agg: dict[str, float] = {"rows": len(subset)}
            for key in _METRIC_KEYS:
                vals = [r[key] for r in subset if key in r]
                if key == "psnr_edit":
                    finite = [v for v in vals if np.isfinite(v)]
                    agg["psnr_inf_count"] = len(vals) - len(finite)
                    vals = finite
                if vals:
                    agg[key] = float(np.mean(vals))
            out[split] = agg
        return out

    def write_rows(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps(row) + "\n")


def _unwrap_immunized(result) -> tuple[np.ndarray, float | None, float | None]:
    image = getattr(result, "image", result)
    duration = getattr(result, "duration_s", None)
    peak = getattr(result, "peak_mem_mib", None)
    return np.asarray(image), duration, peak


def evaluate_method(
    immunizer_fn: ImmunizerFn,
    dataset: DatasetManifest | Sequence[SampleTuple],
    backend: bk.EditBackend,
    scorer: TextScorerHandle | None = None,
    edit_steps: int = 4,
    edit_guidance: float = 7.5,
    edit_seed: int = 0,
) -> MetricReport:
    """Score one immunizer against one editor over a dataset."""
    report = MetricReport()
    for sample in iter_samples(dataset):
        seed = stable_seed(edit_seed, sample.id)
        base = dict(
            edit_region_mask=1.0 - sample.mask,
            prompt=sample.prompt,
            steps=edit_steps,
            guidance=edit_guidance,
            seed=seed,
        )
        try:
            edited_original = bk.edit(
                backend, bk.EditRequest(image=sample.image, **base)
            ).image
            t0 = time.perf_counter()
            immunized, duration, peak = _unwrap_immunized(
                immunizer_fn(sample.image, sample.mask)
            )
            if duration is None:
                duration = time.perf_counter() - t0
            edited_immunized = bk.edit(
                backend, bk.EditRequest(image=immunized, **base)
            ).image
        except Exception as exc:
            report.failures.append({"sample_id": sample.id, "error": str(exc)})
            continue

        row: dict = {"sample_id": sample.id, "split": sample.split}
        row["runtime_ms"] = duration * 1000.0
        if peak is not None:
            row["peak_mem_mib"] = peak
        row["ssim_edit"] = ssim(edited_immunized, edited_original)
        row["psnr_edit"] = psnr(edited_immunized, edited_original)
        try:
            row["fsim_edit"] = fsim(edited_immunized, edited_original)
        except ShapeError:
            pass  # image below the metric's minimum size: leave absent
        row["ssim_noise"] = ssim(sample.image, immunized)
        if scorer is not None:
            try:
                row["clip_t"] = clip_t(edited_immunized, sample.prompt, scorer)
            except ScorerUnavailableError:
                pass
        report.rows.append(row)
    return report


def video_evaluate(
    frames: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    prompts: Sequence[str],
    immunizer_fn: ImmunizerFn,
    backend: bk.EditBackend,
    edit_steps: int = 4,
    edit_guidance: float = 7.5,
    edit_seed: int = 0,
) -> dict:
    """Per-frame immunize-and-edit protocol.

    Returns the mean PSNR between edited-original and edited-immunized
    frames (the +inf sentinel when every frame is identical) and the
    summed immunization runtime.
    """
    if len(frames) != len(masks):
        raise FrameMismatchError(f"{len(frames)} frames vs {len(masks)} masks")
    if len(prompts) == 1:
        prompts = list(prompts) * len(frames)
    if len(prompts) != len(frames):
        raise FrameMismatchError(f"{len(frames)} frames vs {len(prompts)} prompts")

    per_frame: list[float] = []
    total_runtime = 0.0
    for idx, (frame, mask, prompt) in enumerate(zip(frames, masks, prompts)):
        seed = stable_seed(edit_seed, "frame", idx)
        base = dict(
            edit_region_mask=1.0 - mask,
            prompt=prompt,
            steps=edit_steps,
            guidance=edit_guidance,
            seed=seed,
        )
        edited_original = bk.edit(backend, bk.EditRequest(image=frame, **base)).image
        t0 = time.perf_counter()
        immunized, duration, _ = _unwrap_immunized(immunizer_fn(frame, mask))
        total_runtime += duration if duration is not None else time.perf_counter() - t0
        edited_immunized = bk.edit(backend, bk.EditRequest(image=immunized, **base)).image
        per_frame.append(psnr(edited_immunized, edited_original))

    finite = [v for v in per_frame if np.isfinite(v)]
    mean_psnr = float(np.mean(finite)) if finite else float("inf")
    return {
        "frames": len(per_frame),
        "mean_psnr": mean_psnr,
        "psnr_inf_count": len(per_frame) - len(finite),
        "total_runtime_s": total_runtime,
        "per_frame_psnr": per_frame,
    }


# --- reporting ------------------------------------------------------------


def _fmt(value, width: int = 8) -> str:
    if value is None:
        return "absent".rjust(width)
    if isinstance(value, float):
        if np.isinf(value):
            return "inf".rjust(width)
        return f"{value:.3f}".rjust(width)
    return str(value).rjust(width)


def render_metric_table(report: MetricReport, method: str = "immunizer") -> str:
    """Plain-text table with seen/unseen columns per metric."""
    agg = report.aggregates
    header_metrics = ["ssim_edit", "psnr_edit", "fsim_edit", "ssim_noise", "clip_t"]
    lines = []
    title = f"{'method':<18}" + "".join(f"{m:>12}{'(u)':>10}" for m in header_metrics)
    title += f"{'runtime_ms':>12}{'mem_mib':>10}"
    lines.append(title)
    seen = agg.get("seen", {})
    unseen = agg.get("unseen", {})
    row = f"{method:<18}"
    for m in header_metrics:
        row += _fmt(seen.get(m), 12) + _fmt(unseen.get(m), 10)
    row += _fmt(seen.get("runtime_ms", unseen.get("runtime_ms")), 12)
    row += _fmt(seen.get("peak_mem_mib", unseen.get("peak_mem_mib")), 10)
    lines.append(row)
    inf_notes = []
    for split_name, split_agg in agg.items():
        count = split_agg.get("psnr_inf_count", 0)
        if count:
            inf_notes.append(f"{split_name}: {count} identical-edit pair(s) excluded from PSNR")
    if inf_notes:
        lines.append("note: " + "; ".join(inf_notes))
    return "\n".join(lines)


def render_robustness_table(aggregates: dict) -> str:
    """Counter-attack table: one row per arm, seen/unseen columns."""
    lines = [
        f"{'arm':<18}{'ssim':>10}{'(u)':>10}{'ssim_noise':>12}{'(u)':>10}{'clip_t':>10}{'(u)':>10}"
    ]
    for arm, splits in aggregates.items():
        seen = splits.get("seen", {})
        unseen = splits.get("unseen", {})
        lines.append(
            f"{arm:<18}"
            + _fmt(seen.get("ssim_edit"), 10)
            + _fmt(unseen.get("ssim_edit"), 10)
            + _fmt(seen.get("ssim_noise"), 12)
            + _fmt(unseen.get("ssim_noise"), 10)
            + _fmt(seen.get("clip_t"), 10)
            + _fmt(unseen.get("clip_t"), 10)
        )
    return "\n".join(lines)


def plot_split_summary(report: MetricReport, out_path: str | Path) -> None:
    """Bar chart of the aggregate metrics per split."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    agg = report.aggregates
    metrics = ["ssim_edit", "fsim_edit", "ssim_noise"]
    splits = [s for s in ("seen", "unseen") if s in agg]
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.35
    xs = np.arange(len(metrics))
    for k, split in enumerate(splits):
        vals = [agg[split].get(m, 0.0) for m in metrics]
        ax.bar(xs + k * width, vals, width, label=split)
    ax.set_xticks(xs + width * (len(splits) - 1) / 2)
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
