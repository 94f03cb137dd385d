"""Flat key-value run configuration.

One schema covers model, training, attack, and evaluation settings so a
single file (plus ``--set key=value`` overrides) reproduces any run.
Unknown keys are rejected with every offending key named; the effective
configuration is echoed into the run directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .attacks import CounterAttackSpec, PerturbationBudget, PgdConfig
from .errors import ConfigError
from .immunizer import ImmunizerConfig
from .training import LossWeights, TrainConfig


@dataclass
class Config:
    seed: int = 0
    resolution: int = 512

    # immunizer architecture
    depth: int = 4
    base_width: int = 32
    eps_max: float = 0.125

    # training
    alpha: float = 4.0
    learning_rate: float = 1e-5
    epochs: int = 350
    batch_size: int = 5
    precision: str = "full"
    editor_id: str = "surrogate-mean"
    editor_steps: int = 4
    editor_guidance: float = 7.5
    checkpoint_interval: int = 0
    split_ratio: float = 0.8

    # optimization baselines
    kappa: float = 16.0 / 255.0
    pgd_norm: str = "l_inf"
    pgd_steps: int = 200
    pgd_step_size: float | None = None
    pgd_target: str = "encoder_latent"

    # counter-attacks
    jpeg_quality: int = 75
    denoiser_id: str = "median3"

    # evaluation
    clip_model: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # derived objects; ValueError from their validators becomes ConfigError
    def immunizer_config(self) -> ImmunizerConfig:
        dtype = "float32" if self.precision == "mixed" else "float64"
        return _wrap(
            ImmunizerConfig,
            depth=self.depth,
            base_width=self.base_width,
            eps_max=self.eps_max,
            dtype=dtype,
        )

    def train_config(self) -> TrainConfig:
        return _wrap(
            TrainConfig,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            precision=self.precision,
            seed=self.seed,
            editor_id=self.editor_id,
            editor_steps=self.editor_steps,
            editor_guidance=self.editor_guidance,
            checkpoint_interval=self.checkpoint_interval,
        )

    def loss_weights(self) -> LossWeights:
        return _wrap(LossWeights, alpha=self.alpha)

    def budget(self) -> PerturbationBudget:
        return _wrap(PerturbationBudget, kappa=self.kappa, norm=self.pgd_norm)

    def pgd_config(self) -> PgdConfig:
        return _wrap(
            PgdConfig,
            steps=self.pgd_steps,
            step_size=self.pgd_step_size,
            target=self.pgd_target,
        )

    def jpeg_spec(self) -> CounterAttackSpec:
        return _wrap(CounterAttackSpec, kind="jpeg", jpeg_quality=self.jpeg_quality)

    def denoise_spec(self) -> CounterAttackSpec:
        return _wrap(CounterAttackSpec, kind="denoise", denoiser_id=self.denoiser_id)


def _wrap(cls, **kwargs):
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _coerce(key: str, value):
    f = _FIELDS[key]
    if value is None:
        if f.type in ("float | None",):
            return None
        raise ValueError(f"{key}: null is not allowed")
    if f.type == "int":
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ValueError(f"{key}: expected integer, got {value!r}")
        return int(value)
    if f.type in ("float", "float | None"):
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ValueError(f"{key}: expected number, got {value!r}")
        if isinstance(value, str) and value.strip().lower() in ("none", "null"):
            return None
        return float(value)
    if f.type == "str":
        return str(value)
    raise ValueError(f"{key}: unsupported field type {f.type}")


def parse_overrides(pairs: list[str]) -> dict:
    """Parse ``key=value`` strings; raises ConfigError naming bad entries."""
    out: dict = {}
    problems: list[str] = []
    for pair in pairs:
        key, sep, value = pair.partition("=")
        key = key.strip()
        if not sep:
            problems.append(f"override {pair!r} is not of the form key=value")
            continue
        if key not in _FIELDS:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            out[key] = _coerce(key, value.strip())
        except ValueError as exc:
            problems.append(str(exc))
    if problems:
        raise ConfigError("; ".join(problems))
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    """Defaults, then file values, then overrides; rejects unknown keys."""
    values: dict = {}
    problems: list[str] = []
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping of key: value")
        for key, value in loaded.items():
            if key not in _FIELDS:
                problems.append(f"unknown key {key!r}")
                continue
            try:
                values[key] = _coerce(key, value)
            except ValueError as exc:
                problems.append(str(exc))
    if problems:
        raise ConfigError("; ".join(problems))
    if overrides:
        values.update(parse_overrides(list(overrides)))
    return Config(**values)


def echo_config(cfg: Config, path: str | Path) -> None:
    """Write the full effective configuration for reproducibility."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
