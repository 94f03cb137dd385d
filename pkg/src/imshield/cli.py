"""Command-line surface.

Every command runs inside a run directory with ``config/``,
``checkpoints/``, ``logs/``, ``reports/`` and ``outputs/`` subfolders and
echoes the full effective configuration for reproducibility.

Exit codes: 0 success, 1 partial failure, 2 configuration error,
3 missing artifact (checkpoint, manifest, frames).
"""

from __future__ import annotations

import functools
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import backends as bk
from .attacks import (
    parse_counter_attack,
    pgd_immunize,
    random_noise_immunize,
    robustness_protocol,
)
from .config import Config, echo_config, load_config
from .data import (
    SampleTuple,
    load_image,
    load_mask,
    load_sample,
    read_manifest,
    resize_image,
    save_image,
)
from .errors import ConfigError, ImshieldError, VersionError
from .evaluation import (
    evaluate_method,
    plot_split_summary,
    render_metric_table,
    render_robustness_table,
    video_evaluate,
)
from .immunizer import (
    ImmunizerModel,
    identity_immunizer,
    immunize,
    load_checkpoint,
    save_checkpoint,
)
from .metrics import get_text_scorer
from .training import LossWeights, Trainer, ablation_run, train

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3


class ArtifactMissing(ImshieldError):
    """A required file or directory does not exist."""


def _command(fn):
    """Translate toolkit errors into the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            code = fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (ArtifactMissing, VersionError) as exc:
            click.echo(f"artifact error: {exc}", err=True)
            sys.exit(EXIT_ARTIFACT)
        except ImshieldError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_PARTIAL)
        sys.exit(code or EXIT_OK)

    return wrapper


def _common_options(fn):
    fn = click.option(
        "--config", "config_path", type=click.Path(), default=None,
        help="YAML config file (flat key: value schema).",
    )(fn)
    fn = click.option(
        "--set", "overrides", multiple=True, metavar="KEY=VALUE",
        help="Override one config key; unknown keys are rejected.",
    )(fn)
    fn = click.option(
        "--run-dir", type=click.Path(), default=None,
        help="Run directory (default: runs/<command>-<timestamp>).",
    )(fn)
    return fn


def _setup_run(command: str, config_path, overrides, run_dir) -> tuple[Config, Path]:
    if config_path is not None and not Path(config_path).exists():
        raise ConfigError(f"config file {config_path} does not exist")
    cfg = load_config(config_path, list(overrides))
    if run_dir is None:
        run_dir = Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    run_dir = Path(run_dir)
    for sub in ("config", "checkpoints", "logs", "reports", "outputs"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    echo_config(cfg, run_dir / "config" / "effective.yaml")
    return cfg, run_dir


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ArtifactMissing(f"{what} {p} does not exist")
    return p


def _load_samples(manifest_path, cfg: Config) -> list[SampleTuple]:
    manifest = read_manifest(_require(manifest_path, "manifest"), seed=cfg.seed)
    res = (cfg.resolution, cfg.resolution)
    return [load_sample(rec, resolution=res) for rec in manifest.records]


def _load_model(checkpoint, cfg: Config) -> ImmunizerModel:
    model, _, _ = load_checkpoint(_require(checkpoint, "checkpoint"))
    return model


def _scorer_or_none(cfg: Config):
    if not cfg.clip_model:
        return None
    try:
        return get_text_scorer(cfg.clip_model)
    except ImshieldError as exc:
        click.echo(f"scorer unavailable, continuing without CLIP-T: {exc}", err=True)
        return None


@click.group()
def main() -> None:
    """Immunize images and videos against diffusion-based editing."""


@main.command("train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--resume", "resume_path", type=click.Path(), default=None)
@_common_options
@_command
def train_cmd(manifest_path, resume_path, config_path, overrides, run_dir):
    """Train the immunizer on a manifest's seen partition."""
    cfg, run = _setup_run("train", config_path, overrides, run_dir)
    samples = [s for s in _load_samples(manifest_path, cfg) if s.split == "seen"]
    if not samples:
        raise ConfigError("manifest has no seen-split records to train on")
    backend = bk.create_backend(cfg.editor_id)
    start_epoch = 0
    if resume_path:
        model, meta, extras = load_checkpoint(_require(resume_path, "checkpoint"))
        start_epoch = int(meta.get("epoch", 0))
    else:
        model = ImmunizerModel(cfg.immunizer_config(), seed=cfg.seed)
    trainer = Trainer(model, backend, cfg.train_config(), cfg.loss_weights())
    if resume_path:
        trainer.opt.load_state_arrays(extras)
        trainer.state.step = int(meta.get("step", 0))
    model, state, rows = train(
        model,
        samples,
        backend,
        cfg.train_config(),
        cfg.loss_weights(),
        log_path=run / "logs" / "loss.jsonl",
        checkpoint_dir=run / "checkpoints",
        run_id=run.name,
        start_epoch=start_epoch,
        trainer=trainer,
    )
    final = run / "checkpoints" / "final.npz"
    save_checkpoint(model, final, run_id=run.name,
                    extra_arrays=trainer.opt.state_arrays(),
                    extra_meta={"epoch": state.epoch, "step": state.step})
    click.echo(f"trained {state.step} steps over {state.epoch} epochs -> {final}")
    if state.skipped_samples:
        click.echo(f"skipped {len(state.skipped_samples)} non-finite step(s)", err=True)
        return EXIT_PARTIAL
    return EXIT_OK


@main.command("immunize")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--self-check/--no-self-check", default=True,
              help="Assert mask confinement on every output.")
@_common_options
@_command
def immunize_cmd(checkpoint, manifest_path, self_check, config_path, overrides, run_dir):
    """Write one immunized PNG per manifest record plus a timing log."""
    cfg, run = _setup_run("immunize", config_path, overrides, run_dir)
    model = _load_model(checkpoint, cfg)
    samples = _load_samples(manifest_path, cfg)
    failures = 0
    with open(run / "logs" / "timing.jsonl", "w", encoding="utf-8") as log:
        for sample in samples:
            try:
                result = immunize(model, sample.image, sample.mask)
                if self_check:
                    outside = (1.0 - sample.mask) > 0
                    if not np.array_equal(result.image[outside], sample.image[outside]):
                        raise ImshieldError(f"mask confinement violated on {sample.id}")
                save_image(result.image, run / "outputs" / f"{sample.id}.png")
                log.write(json.dumps({
                    "id": sample.id,
                    "duration_s": result.duration_s,
                    "peak_mem_mib": result.peak_mem_mib,
                }) + "\n")
            except ImshieldError as exc:
                failures += 1
                click.echo(f"{sample.id}: {exc}", err=True)
    click.echo(f"immunized {len(samples) - failures}/{len(samples)} image(s)")
    return EXIT_PARTIAL if failures else EXIT_OK


@main.command("edit")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--images-dir", type=click.Path(), default=None,
              help="Edit these files (named <id>.png) instead of manifest images.")
@_common_options
@_command
def edit_cmd(manifest_path, images_dir, config_path, overrides, run_dir):
    """Run the configured editing backend over a manifest."""
    from .training import stable_seed

    cfg, run = _setup_run("edit", config_path, overrides, run_dir)
    backend = bk.create_backend(cfg.editor_id)
    samples = _load_samples(manifest_path, cfg)
    failures = 0
    for sample in samples:
        try:
            image = sample.image
            if images_dir:
                override_path = Path(images_dir) / f"{sample.id}.png"
                image = load_image(_require(override_path, "input image"))
                if image.shape != sample.image.shape:
                    image = resize_image(image, sample.image.shape[:2])
            request = bk.EditRequest(
                image=image,
                edit_region_mask=1.0 - sample.mask,
                prompt=sample.prompt,
                steps=cfg.editor_steps,
                guidance=cfg.editor_guidance,
                seed=stable_seed(cfg.seed, sample.id),
            )
            result = bk.edit(backend, request)
            save_image(result.image, run / "outputs" / f"{sample.id}_edited.png")
        except ImshieldError as exc:
            failures += 1
            click.echo(f"{sample.id}: {exc}", err=True)
    click.echo(f"edited {len(samples) - failures}/{len(samples)} image(s)")
    return EXIT_PARTIAL if failures else EXIT_OK


@main.command("evaluate")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--checkpoint", type=click.Path(), default=None,
              help="Immunizer checkpoint; omit for the identity immunizer.")
@click.option("--plot/--no-plot", default=False, help="Also render a bar summary.")
@_common_options
@_command
def evaluate_cmd(manifest_path, checkpoint, plot, config_path, overrides, run_dir):
    """Score editing failure, imperceptibility, and scalability."""
    cfg, run = _setup_run("evaluate", config_path, overrides, run_dir)
    samples = _load_samples(manifest_path, cfg)
    if checkpoint:
        model = _load_model(checkpoint, cfg)
        immunizer_fn = lambda image, mask: immunize(model, image, mask)  # noqa: E731
        method = "checkpoint"
    else:
        immunizer_fn = identity_immunizer
        method = "identity"
    backend = bk.create_backend(cfg.editor_id)
    report = evaluate_method(
        immunizer_fn, samples, backend,
        scorer=_scorer_or_none(cfg),
        edit_steps=cfg.editor_steps,
        edit_guidance=cfg.editor_guidance,
        edit_seed=cfg.seed,
    )
    report.write_rows(run / "reports" / "rows.jsonl")
    table = render_metric_table(report, method=method)
    (run / "reports" / "table.txt").write_text(table + "\n", encoding="utf-8")
    click.echo(table)
    if plot:
        plot_split_summary(report, run / "reports" / "summary.png")
    return EXIT_PARTIAL if report.failures else EXIT_OK


@main.command("attack")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--arm", type=click.Choice(["checkpoint", "random", "pgd-encoder", "pgd-full"]),
              default="random", help="Which immunizer produces the protected images.")
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--counter", "counters", multiple=True, metavar="KIND[:ARG]",
              help="Counter-attack arms, e.g. jpeg:75 or denoise:median3.")
@_common_options
@_command
def attack_cmd(manifest_path, arm, checkpoint, counters, config_path, overrides, run_dir):
    """Immunize, counter-attack, edit, and tabulate robustness metrics."""
    cfg, run = _setup_run("attack", config_path, overrides, run_dir)
    samples = _load_samples(manifest_path, cfg)
    backend = bk.create_backend(cfg.editor_id)
    budget = cfg.budget()

    if arm == "checkpoint":
        if not checkpoint:
            raise ConfigError("--arm checkpoint requires --checkpoint")
        model = _load_model(checkpoint, cfg)
        immunizer_fn = lambda image, mask: immunize(model, image, mask)  # noqa: E731
    elif arm == "random":
        immunizer_fn = lambda image, mask: random_noise_immunize(  # noqa: E731
            image, mask, budget, seed=cfg.seed
        )
    else:
        pgd_cfg = cfg.pgd_config()
        target = "encoder_latent" if arm == "pgd-encoder" else "full_edit"
        pgd_cfg = type(pgd_cfg)(steps=pgd_cfg.steps, step_size=pgd_cfg.step_size,
                                target=target, target_value=pgd_cfg.target_value)
        immunizer_fn = lambda image, mask: pgd_immunize(  # noqa: E731
            image, mask, backend, budget, pgd_cfg,
            edit_steps=cfg.editor_steps, seed=cfg.seed,
        )

    try:
        specs = [parse_counter_attack(c) for c in counters]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = robustness_protocol(
        immunizer_fn, samples, backend, specs,
        scorer=_scorer_or_none(cfg),
        edit_steps=cfg.editor_steps, edit_seed=cfg.seed,
    )
    agg = report.aggregates()
    with open(run / "reports" / "robustness.jsonl", "w", encoding="utf-8") as fh:
        for row in report.rows:
            fh.write(json.dumps(row) + "\n")
    (run / "reports" / "robustness.json").write_text(
        json.dumps(agg, indent=2), encoding="utf-8"
    )
    table = render_robustness_table(agg)
    (run / "reports" / "robustness.txt").write_text(table + "\n", encoding="utf-8")
    click.echo(table)
    return EXIT_PARTIAL if report.failures else EXIT_OK


@main.command("video")
@click.option("--frames", "frames_dir", required=True, type=click.Path())
@click.option("--masks", "masks_dir", required=True, type=click.Path())
@click.option("--prompt", "prompts", multiple=True, required=True,
              help="Prompt(s); one shared or one per frame.")
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--edit/--no-edit", "do_edit", default=True,
              help="Also edit per frame and report the PSNR summary.")
@_common_options
@_command
def video_cmd(frames_dir, masks_dir, prompts, checkpoint, do_edit,
              config_path, overrides, run_dir):
    """Per-frame immunization for an ordered frame directory."""
    from .errors import FrameMismatchError

    cfg, run = _setup_run("video", config_path, overrides, run_dir)
    frames_dir = _require(frames_dir, "frames directory")
    masks_dir = _require(masks_dir, "masks directory")
    frame_paths = sorted(frames_dir.glob("*.png"))
    mask_paths = sorted(masks_dir.glob("*.png"))
    if not frame_paths:
        raise ArtifactMissing(f"no PNG frames found in {frames_dir}")
    if len(frame_paths) != len(mask_paths):
        raise ConfigError(
            f"frame/mask mismatch: {len(frame_paths)} frames vs {len(mask_paths)} masks"
        )
    if len(prompts) not in (1, len(frame_paths)):
        raise ConfigError(
            f"need 1 or {len(frame_paths)} prompts, got {len(prompts)}"
        )

    frames = [load_image(p) for p in frame_paths]
    masks = [load_mask(p, target_shape=f.shape) for p, f in zip(mask_paths, frames)]

    if checkpoint:
        model = _load_model(checkpoint, cfg)
        immunizer_fn = lambda image, mask: immunize(model, image, mask)  # noqa: E731
    else:
        immunizer_fn = identity_immunizer

    out_dir = run / "outputs" / "frames"
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for idx, (frame, mask) in enumerate(zip(frames, masks)):
        result = immunizer_fn(frame, mask)
        image = getattr(result, "image", result)
        save_image(image, out_dir / f"frame_{idx:05d}.png")
        results.append(result)
    click.echo(f"immunized {len(frames)} frame(s) -> {out_dir}")

    if do_edit:
        backend = bk.create_backend(cfg.editor_id)
        try:
            summary = video_evaluate(
                frames, masks, list(prompts), immunizer_fn, backend,
                edit_steps=cfg.editor_steps,
                edit_guidance=cfg.editor_guidance,
                edit_seed=cfg.seed,
            )
        except FrameMismatchError as exc:
            raise ConfigError(str(exc)) from exc
        payload = {k: v for k, v in summary.items() if k != "per_frame_psnr"}
        (run / "reports" / "video.json").write_text(
            json.dumps(payload, indent=2), encoding="utf-8"
        )
        click.echo(
            f"mean PSNR {summary['mean_psnr']:.3f} over {summary['frames']} frames, "
            f"immunization runtime {summary['total_runtime_s']:.3f}s"
        )
    return EXIT_OK


@main.command("ablate")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(["full", "no_noise_loss", "no_edit_loss", "all"]),
              default="all")
@_common_options
@_command
def ablate_cmd(manifest_path, mode, config_path, overrides, run_dir):
    """Loss-term ablations emitting one comparable metric row per mode."""
    cfg, run = _setup_run("ablate", config_path, overrides, run_dir)
    samples = _load_samples(manifest_path, cfg)
    backend = bk.create_backend(cfg.editor_id)
    modes = ["full", "no_noise_loss", "no_edit_loss"] if mode == "all" else [mode]
    results = []
    for m in modes:
        model = ImmunizerModel(cfg.immunizer_config(), seed=cfg.seed)
        results.append(
            ablation_run(m, model, samples, backend, cfg.train_config(), cfg.loss_weights())
        )
    (run / "reports" / "ablation.json").write_text(
        json.dumps(results, indent=2), encoding="utf-8"
    )
    for row in results:
        click.echo(json.dumps(row))
    return EXIT_OK


@main.command("sweep-alpha")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--values", default="2,4,6", show_default=True,
              help="Comma-separated loss-weight values.")
@_common_options
@_command
def sweep_alpha_cmd(manifest_path, values, config_path, overrides, run_dir):
    """Train one toy model per loss weight and tabulate the trade-off."""
    cfg, run = _setup_run("sweep-alpha", config_path, overrides, run_dir)
    try:
        alphas = [float(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values: {exc}") from exc
    if not alphas:
        raise ConfigError("--values must name at least one weight")
    samples = _load_samples(manifest_path, cfg)
    backend = bk.create_backend(cfg.editor_id)
    rows = []
    for alpha in alphas:
        model = ImmunizerModel(cfg.immunizer_config(), seed=cfg.seed)
        try:
            row = ablation_run(
                "full", model, samples, backend, cfg.train_config(), LossWeights(alpha=alpha)
            )
            row["alpha"] = alpha
        except ImshieldError as exc:
            row = {"alpha": alpha, "error": str(exc)}
        rows.append(row)
    (run / "reports" / "alpha_sweep.json").write_text(
        json.dumps(rows, indent=2), encoding="utf-8"
    )
    for row in rows:
        click.echo(json.dumps(row))
    return EXIT_PARTIAL if any("error" in r for r in rows) else EXIT_OK


@main.command("prompt-agnostic")
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--mask", "mask_path", required=True, type=click.Path())
@click.option("--seen-prompts", required=True, type=click.Path())
@click.option("--unseen-prompts", required=True, type=click.Path())
@_common_options
@_command
def prompt_agnostic_cmd(image_path, mask_path, seen_prompts, unseen_prompts,
                        config_path, overrides, run_dir):
    """Train on one image with seen prompts; compare metric distributions."""
    from .training import edit_loss, stable_seed

    cfg, run = _setup_run("prompt-agnostic", config_path, overrides, run_dir)
    seen = [p.strip() for p in Path(_require(seen_prompts, "prompt list")).read_text(
        encoding="utf-8").splitlines() if p.strip()]
    unseen = [p.strip() for p in Path(_require(unseen_prompts, "prompt list")).read_text(
        encoding="utf-8").splitlines() if p.strip()]
    overlap = sorted(set(seen) & set(unseen))
    if overlap:
        raise ConfigError(f"prompt lists must be disjoint; shared: {overlap}")
    if not seen or not unseen:
        raise ConfigError("both prompt lists must be non-empty")

    image = load_image(_require(image_path, "image"))
    if image.shape[:2] != (cfg.resolution, cfg.resolution):
        image = resize_image(image, (cfg.resolution, cfg.resolution))
    mask = load_mask(_require(mask_path, "mask"), target_shape=image.shape)
    samples = [
        SampleTuple(id=f"seen{i:04d}", image=image, mask=mask, prompt=p, split="seen")
        for i, p in enumerate(seen)
    ]
    backend = bk.create_backend(cfg.editor_id)
    model = ImmunizerModel(cfg.immunizer_config(), seed=cfg.seed)
    model, _, _ = train(model, samples, backend, cfg.train_config(), cfg.loss_weights())

    immunized = immunize(model, image, mask).image
    rows = []
    for group, prompts in (("seen", seen), ("unseen", unseen)):
        for i, prompt in enumerate(prompts):
            request = bk.EditRequest(
                image=immunized,
                edit_region_mask=1.0 - mask,
                prompt=prompt,
                steps=cfg.editor_steps,
                guidance=cfg.editor_guidance,
                seed=stable_seed(cfg.seed, group, i),
            )
            edited = bk.edit(backend, request)
            rows.append({
                "group": group,
                "prompt": prompt,
                "edit_loss": edit_loss(edited, mask),
            })
    summary = {}
    for group in ("seen", "unseen"):
        vals = [r["edit_loss"] for r in rows if r["group"] == group]
        summary[group] = {
            "count": len(vals),
            "mean_edit_loss": float(np.mean(vals)),
            "var_edit_loss": float(np.var(vals)),
        }
    with open(run / "reports" / "prompt_agnostic.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    (run / "reports" / "prompt_agnostic.json").write_text(
        json.dumps(summary, indent=2), encoding="utf-8"
    )
    click.echo(json.dumps(summary))
    return EXIT_OK


if __name__ == "__main__":
    main()
