"""Experiment configuration: flat dotted keys, text round-trip, content hash.

Config files are plain `key = value` lines; '#' starts a comment. Every key
maps to one typed field of RunConfig, unknown keys are rejected by name, and
the canonical serialization (sorted keys) feeds the config hash stamped into
every artifact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from gridfusion.data import NoiseConfig, SceneConfig
from gridfusion.fuser import FuserConfig
from gridfusion.losses import LossWeights
from gridfusion.modulation import GsmConfig
from gridfusion.samplers import SAMPLER_KINDS
from gridfusion.sensor_dropout import GRANULARITIES, TARGETS, PsdtConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


@dataclass
class RunConfig:
    data_grid: int = 32
    data_channels: int = 9
    data_det_classes: int = 2
    data_seg_classes: int = 3
    data_max_boxes: int = 5
    data_sigma_cam: float = 0.08
    data_sigma_lidar: float = 0.05
    data_jitter: int = 1
    data_sparsify: float = 0.5
    data_scenes: int = 256
    data_path: str = ""

    diffusion_t: int = 100
    diffusion_kind: str = "linear"
    diffusion_beta_start: float = 1e-4
    diffusion_beta_end: float = 0.02

    sampler_kind: str = "ddim"
    sampler_steps: int = 8
    sampler_eta: float = 0.0

    fuser_channels: int = 6
    fuser_scales: int = 3
    fuser_epsilon: float = 1e-4

    gsm_scale: bool = True
    gsm_shift: bool = True
    gsm_gate: bool = True
    gsm_time_dim: int = 32
    gsm_stop_grad: bool = True

    psdt_alpha_max: float = 25.0
    psdt_target: str = "random"
    psdt_granularity: str = "modality"

    loss_lambda_diff: float = 1.0
    loss_lambda_seg: float = 1.0
    loss_lambda_det: float = 1.0
    loss_lambda_cls: float = 1.0
    loss_lambda_reg: float = 0.25
    loss_focal_alpha: float = 0.25
    loss_focal_gamma: float = 2.0

    det_top_k: int = 8

    train_epochs: int = 4
    train_batch: int = 4
    train_lr: float = 0.05
    train_optimizer: str = "sgd"
    train_task: str = "joint"
    train_force_drop: str = "none"

    eval_scenes: int = 64
    eval_threshold: float = 0.5
    eval_ap_dist: float = 2.0

    seed_data: int = 0
    seed_init: int = 1
    seed_noise: int = 2


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _key_to_field(key: str) -> str:
    field = key.strip().replace(".", "_").replace("-", "_")
    if field == "diffusion_T":
        field = "diffusion_t"
    return field


def _field_to_key(field: str) -> str:
    if field == "diffusion_t":
        return "diffusion.T"
    return field.replace("_", ".", 1)


_CHOICES = {
    "diffusion_kind": ("linear", "cosine"),
    "sampler_kind": SAMPLER_KINDS,
    "psdt_target": TARGETS,
    "psdt_granularity": GRANULARITIES,
    "train_optimizer": ("sgd", "adam"),
    "train_task": ("seg", "det", "joint"),
    "train_force_drop": ("none", "cam", "lidar"),
}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines into a dict; comments and blanks skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    for key, value in overrides.items():
        field = _key_to_field(key)
        if field not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}'")
        kind = _FIELD_TYPES[field]
        try:
            if kind in ("bool", bool):
                parsed = _bool(value)
            elif kind in ("int", int):
                parsed = int(value)
            elif kind in ("float", float):
                parsed = float(value)
            else:
                parsed = str(value)
        except ValueError as exc:
            raise ConfigError(f"config key '{key}': {exc}") from exc
        setattr(cfg, field, parsed)
    return cfg


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    problems: list[str] = []
    for field, choices in _CHOICES.items():
        if getattr(cfg, field) not in choices:
            problems.append(
                f"{_field_to_key(field)}: '{getattr(cfg, field)}' not in {choices}"
            )
    if cfg.data_grid < 8 or cfg.data_grid % 4:
        problems.append(f"data.grid: must be >= 8 and divisible by 4, got {cfg.data_grid}")
    if cfg.data_seg_classes != cfg.data_det_classes + 1:
        problems.append("data.seg_classes: must equal data.det_classes + 1")
    if 3 * cfg.fuser_channels != 2 * cfg.data_channels:
        problems.append(
            "fuser.channels: the three decoded scales concatenate back to the "
            f"latent, so 3 * fuser.channels must equal 2 * data.channels "
            f"(got 3*{cfg.fuser_channels} != 2*{cfg.data_channels})"
        )
    if cfg.fuser_scales != 3:
        problems.append(f"fuser.scales: fixed at 3, got {cfg.fuser_scales}")
    if cfg.diffusion_t < 1:
        problems.append("diffusion.T: must be >= 1")
    if not 1 <= cfg.sampler_steps <= cfg.diffusion_t:
        problems.append(
            f"sampler.steps: must be in [1, diffusion.T], got {cfg.sampler_steps}"
        )
    if cfg.sampler_eta < 0:
        problems.append("sampler.eta: must be >= 0")
    if not 0 <= cfg.psdt_alpha_max <= 100:
        problems.append("psdt.alpha_max: must be in [0, 100]")
    if cfg.train_epochs < 0:
        problems.append("train.epochs: must be >= 0")
    if cfg.train_batch < 1:
        problems.append("train.batch: must be >= 1")
    if cfg.train_lr < 0:
        problems.append("train.lr: must be >= 0")
    if cfg.eval_scenes < 1:
        problems.append("eval.scenes: must be >= 1")
    if not 0 < cfg.eval_threshold < 1:
        problems.append("eval.threshold: must be in (0, 1)")
    if cfg.det_top_k < 1:
        problems.append("det.top_k: must be >= 1")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))


def to_text(cfg: RunConfig) -> str:
    """Canonical serialization: sorted dotted keys, one per line."""
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: _field_to_key(f.name)):
        lines.append(f"{_field_to_key(f.name)} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(to_text(cfg).encode("utf-8")).hexdigest()[:12]


# adapters into the module-level config types


def scene_config(cfg: RunConfig) -> SceneConfig:
    return SceneConfig(
        grid=cfg.data_grid,
        channels=cfg.data_channels,
        det_classes=cfg.data_det_classes,
        seg_classes=cfg.data_seg_classes,
        max_boxes=cfg.data_max_boxes,
    )


def noise_config(cfg: RunConfig) -> NoiseConfig:
    return NoiseConfig(
        sigma_cam=cfg.data_sigma_cam,
        sigma_lidar=cfg.data_sigma_lidar,
        jitter=cfg.data_jitter,
        sparsify=cfg.data_sparsify,
    )


def fuser_config(cfg: RunConfig) -> FuserConfig:
    return FuserConfig(
        in_channels=2 * cfg.data_channels,
        channels=cfg.fuser_channels,
        epsilon=cfg.fuser_epsilon,
        scales=cfg.fuser_scales,
        modulation=GsmConfig(
            scale=cfg.gsm_scale,
            shift=cfg.gsm_shift,
            gate=cfg.gsm_gate,
            time_dim=cfg.gsm_time_dim,
        ),
    )


def psdt_config(cfg: RunConfig) -> PsdtConfig:
    return PsdtConfig(
        alpha_max=cfg.psdt_alpha_max,
        epochs=max(cfg.train_epochs, 1),
        target=cfg.psdt_target,
        granularity=cfg.psdt_granularity,
    )


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(
        lambda_diff=cfg.loss_lambda_diff,
        lambda_seg=cfg.loss_lambda_seg,
        lambda_det=cfg.loss_lambda_det,
        lambda_cls=cfg.loss_lambda_cls,
        lambda_reg=cfg.loss_lambda_reg,
        focal_alpha=cfg.loss_focal_alpha,
        focal_gamma=cfg.loss_focal_gamma,
    )
