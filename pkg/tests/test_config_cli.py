import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from conftest import make_image, make_mask, tiny_model_cfg, write_toy_manifest
from imshield.cli import main
from imshield.config import load_config, parse_overrides
from imshield.data import save_image, save_mask
from imshield.errors import ConfigError
from imshield.immunizer import ImmunizerModel, save_checkpoint

TOY = [
    "--set", "resolution=32", "--set", "depth=2", "--set", "base_width=4",
    "--set", "editor_steps=1",
]


@pytest.fixture
def runner():
    return CliRunner()


def _toy_checkpoint(tmp_path, seed=0):
    model = ImmunizerModel(tiny_model_cfg(depth=2, base_width=4), seed=seed)
    path = tmp_path / "model.npz"
    save_checkpoint(model, path, run_id="fixture")
    return path


# --- config ---------------------------------------------------------------


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    cfg = load_config(path)
    assert cfg.alpha == 4.0
    assert cfg.learning_rate == 1e-5
    assert cfg.batch_size == 5
    assert cfg.epochs == 350
    assert cfg.editor_steps == 4
    assert cfg.eps_max == 0.125
    assert abs(cfg.kappa - 16.0 / 255.0) < 1e-12
    assert cfg.jpeg_quality == 75


def test_override_applied_last(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("alpha: 2\n")
    cfg = load_config(path, overrides=["alpha=6"])
    assert cfg.alpha == 6.0


def test_unknown_key_named(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("aplha: 6\n")
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert "aplha" in str(exc.value)


def test_all_bad_keys_reported(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("aplha: 6\nlearning_rat: 1\n")
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert "aplha" in str(exc.value) and "learning_rat" in str(exc.value)


def test_override_parsing_errors():
    with pytest.raises(ConfigError):
        parse_overrides(["no_equals_sign"])
    with pytest.raises(ConfigError):
        parse_overrides(["epochs=three"])
    assert parse_overrides(["pgd_step_size=none"]) == {"pgd_step_size": None}


def test_bad_value_types(tmp_path):
    path = tmp_path / "types.yaml"
    path.write_text("epochs: many\n")
    with pytest.raises(ConfigError):
        load_config(path)


# --- cli ------------------------------------------------------------------


def test_cli_immunize_outputs_and_timing(tmp_path, runner):
    manifest = write_toy_manifest(tmp_path, n=3)
    ck = _toy_checkpoint(tmp_path)
    run_dir = tmp_path / "run"
    result = runner.invoke(main, [
        "immunize", "--checkpoint", str(ck), "--manifest", str(manifest),
        "--run-dir", str(run_dir), *TOY,
    ])
    assert result.exit_code == 0, result.output
    outputs = sorted((run_dir / "outputs").glob("*.png"))
    assert len(outputs) == 3
    timing = (run_dir / "logs" / "timing.jsonl").read_text().splitlines()
    assert len(timing) == 3
    for line in timing:
        row = json.loads(line)
        assert row["duration_s"] > 0
    # effective config snapshot present
    effective = yaml.safe_load((run_dir / "config" / "effective.yaml").read_text())
    assert effective["resolution"] == 32


def test_cli_immunize_rerun_bit_identical(tmp_path, runner):
    manifest = write_toy_manifest(tmp_path, n=2)
    ck = _toy_checkpoint(tmp_path)
    digests = []
    for name in ("runA", "runB"):
        run_dir = tmp_path / name
        result = runner.invoke(main, [
            "immunize", "--checkpoint", str(ck), "--manifest", str(manifest),
            "--run-dir", str(run_dir), *TOY,
        ])
        assert result.exit_code == 0, result.output
        digests.append([p.read_bytes() for p in sorted((run_dir / "outputs").glob("*.png"))])
    assert digests[0] == digests[1]


def test_cli_immunize_mask_confinement(tmp_path, runner):
    from imshield.data import load_image, load_mask, load_sample, read_manifest

    manifest = write_toy_manifest(tmp_path, n=1)
    ck = _toy_checkpoint(tmp_path)
    run_dir = tmp_path / "run"
    result = runner.invoke(main, [
        "immunize", "--checkpoint", str(ck), "--manifest", str(manifest),
        "--run-dir", str(run_dir), "--self-check", *TOY,
    ])
    assert result.exit_code == 0, result.output
    rec = read_manifest(manifest).records[0]
    sample = load_sample(rec, resolution=(32, 32))
    out = load_image(run_dir / "outputs" / f"{rec.id}.png")
    outside = sample.mask == 0
    np.testing.assert_array_equal(out[outside], sample.image[outside])


def test_cli_missing_checkpoint_exit_3(tmp_path, runner):
    manifest = write_toy_manifest(tmp_path, n=1)
    result = runner.invoke(main, [
        "immunize", "--checkpoint", str(tmp_path / "nope.npz"),
        "--manifest", str(manifest), "--run-dir", str(tmp_path / "r"), *TOY,
    ])
    assert result.exit_code == 3


def test_cli_bad_config_key_exit_2(tmp_path, runner):
    manifest = write_toy_manifest(tmp_path, n=1)
    ck = _toy_checkpoint(tmp_path)
    result = runner.invoke(main, [
        "immunize", "--checkpoint", str(ck), "--manifest", str(manifest),
        "--run-dir", str(tmp_path / "r"), "--set", "aplha=6",
    ])
    assert result.exit_code == 2
    assert "aplha" in result.output


def test_cli_train_writes_checkpoint_and_log(tmp_path, runner):
    manifest = write_toy_manifest(tmp_path, n=2)
    run_dir = tmp_path / "run"
    result = runner.invoke(main, [
        "train", "--manifest", str(manifest), "--run-dir", str(run_dir), *TOY,
        "--set", "epochs=2", "--set", "batch_size=1",
        "--set", "learning_rate=0.001", "--set", "editor_id=surrogate-mean",
    ])
    assert result.exit_code == 0, result.output
    assert (run_dir / "checkpoints" / "final.npz").exists()
    rows = [json.loads(l) for l in (run_dir / "logs" / "loss.jsonl").read_text().splitlines()]
    assert len(rows) == 4  # 2 epochs x 2 samples
    assert all(np.isfinite(r["l_total"]) for r in rows)


def test_cli_evaluate_identity(tmp_path, runner):
    manifest = write_toy_manifest(tmp_path, n=2)
    run_dir = tmp_path / "run"
    result = runner.invoke(main, [
        "evaluate", "--manifest", str(manifest), "--run-dir", str(run_dir),
        "--plot", *TOY,
    ])
    assert result.exit_code == 0, result.output
    rows = (run_dir / "reports" / "rows.jsonl").read_text().splitlines()
    assert len(rows) == 2
    assert (run_dir / "reports" / "table.txt").exists()
    assert (run_dir / "reports" / "summary.png").exists()


def test_cli_attack_random_with_counters(tmp_path, runner):
    manifest = write_toy_manifest(tmp_path, n=2)
    run_dir = tmp_path / "run"
    result = runner.invoke(main, [
        "attack", "--manifest", str(manifest), "--arm", "random",
        "--counter", "jpeg:60", "--counter", "denoise:median3",
        "--run-dir", str(run_dir), *TOY,
    ])
    assert result.exit_code == 0, result.output
    agg = json.loads((run_dir / "reports" / "robustness.json").read_text())
    assert set(agg) == {"none", "jpeg:60", "denoise:median3"}
    rows = (run_dir / "reports" / "robustness.jsonl").read_text().splitlines()
    assert len(rows) == 6  # 2 samples x 3 arms


def test_cli_edit_command(tmp_path, runner):
    manifest = write_toy_manifest(tmp_path, n=2)
    run_dir = tmp_path / "run"
    result = runner.invoke(main, [
        "edit", "--manifest", str(manifest), "--run-dir", str(run_dir), *TOY,
    ])
    assert result.exit_code == 0, result.output
    assert len(sorted((run_dir / "outputs").glob("*_edited.png"))) == 2


def _write_frames(tmp_path, n, size=16):
    frames_dir = tmp_path / "frames"
    masks_dir = tmp_path / "masks"
    frames_dir.mkdir()
    masks_dir.mkdir()
    rng = np.random.default_rng(0)
    for i in range(n):
        save_image(make_image(rng, size, size, 0.3, 0.5), frames_dir / f"frame_{i:05d}.png")
        save_mask(make_mask(size, size), masks_dir / f"frame_{i:05d}.png")
    return frames_dir, masks_dir


def test_cli_video_eight_frames(tmp_path, runner):
    frames_dir, masks_dir = _write_frames(tmp_path, 8)
    run_dir = tmp_path / "run"
    result = runner.invoke(main, [
        "video", "--frames", str(frames_dir), "--masks", str(masks_dir),
        "--prompt", "a beach", "--run-dir", str(run_dir), *TOY,
    ])
    assert result.exit_code == 0, result.output
    outputs = sorted((run_dir / "outputs" / "frames").glob("*.png"))
    assert [p.name for p in outputs] == [f"frame_{i:05d}.png" for i in range(8)]
    summary = json.loads((run_dir / "reports" / "video.json").read_text())
    assert summary["frames"] == 8


def test_cli_video_mismatch_aborts_before_writes(tmp_path, runner):
    frames_dir, masks_dir = _write_frames(tmp_path, 4)
    (sorted(masks_dir.glob("*.png"))[-1]).unlink()  # 4 frames vs 3 masks
    run_dir = tmp_path / "run"
    result = runner.invoke(main, [
        "video", "--frames", str(frames_dir), "--masks", str(masks_dir),
        "--prompt", "p", "--run-dir", str(run_dir), *TOY,
    ])
    assert result.exit_code == 2
    assert not (run_dir / "outputs" / "frames").exists() or \
        not any((run_dir / "outputs" / "frames").glob("*.png"))


def test_cli_sweep_alpha_single_value(tmp_path, runner):
    manifest = write_toy_manifest(tmp_path, n=1, size=32)
    run_dir = tmp_path / "run"
    result = runner.invoke(main, [
        "sweep-alpha", "--manifest", str(manifest), "--values", "4",
        "--run-dir", str(run_dir), *TOY,
        "--set", "epochs=3", "--set", "batch_size=1",
        "--set", "learning_rate=0.001", "--set", "editor_id=surrogate-mean",
    ])
    assert result.exit_code == 0, result.output
    rows = json.loads((run_dir / "reports" / "alpha_sweep.json").read_text())
    assert len(rows) == 1
    assert rows[0]["alpha"] == 4.0
    assert "ssim_noise" in rows[0]


def test_cli_prompt_agnostic_disjointness(tmp_path, runner):
    rng = np.random.default_rng(0)
    img_path = tmp_path / "img.png"
    mask_path = tmp_path / "mask.png"
    save_image(make_image(rng, 32, 32, 0.3, 0.5), img_path)
    save_mask(make_mask(32, 32), mask_path)
    seen = tmp_path / "seen.txt"
    unseen = tmp_path / "unseen.txt"
    seen.write_text("a beach\na forest\n")
    unseen.write_text("a beach\na desert\n")  # overlaps
    result = runner.invoke(main, [
        "prompt-agnostic", "--image", str(img_path), "--mask", str(mask_path),
        "--seen-prompts", str(seen), "--unseen-prompts", str(unseen),
        "--run-dir", str(tmp_path / "run"), *TOY,
    ])
    assert result.exit_code == 2
    assert "disjoint" in result.output


def test_cli_prompt_agnostic_row_counts(tmp_path, runner):
    rng = np.random.default_rng(0)
    img_path = tmp_path / "img.png"
    mask_path = tmp_path / "mask.png"
    save_image(make_image(rng, 32, 32, 0.3, 0.5), img_path)
    save_mask(make_mask(32, 32), mask_path)
    seen = tmp_path / "seen.txt"
    unseen = tmp_path / "unseen.txt"
    seen.write_text("a beach\na forest\na city\n")
    unseen.write_text("a desert\na glacier\n")
    run_dir = tmp_path / "run"
    result = runner.invoke(main, [
        "prompt-agnostic", "--image", str(img_path), "--mask", str(mask_path),
        "--seen-prompts", str(seen), "--unseen-prompts", str(unseen),
        "--run-dir", str(run_dir), *TOY,
        "--set", "epochs=2", "--set", "batch_size=1",
        "--set", "learning_rate=0.001", "--set", "editor_id=surrogate-conv",
    ])
    assert result.exit_code == 0, result.output
    rows = (run_dir / "reports" / "prompt_agnostic.jsonl").read_text().splitlines()
    assert len(rows) == 5  # |seen| + |unseen|
    summary = json.loads((run_dir / "reports" / "prompt_agnostic.json").read_text())
    assert summary["seen"]["count"] == 3
    assert summary["unseen"]["count"] == 2
