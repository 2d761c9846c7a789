"""End-to-end orchestration: training, conditional sampling inference, the
solver sweep and the sensor-dropout robustness experiment.

One training step: concatenate both modality renders into the latent, keep
it as the regression target, sensor-mask a copy as the condition, noise the
latent to a uniformly drawn time, run the fuser, apply the task heads to
the predicted clean latent, and descend the weighted total loss.

Everything that consumes randomness draws from named streams, so reports
are byte-reproducible for a fixed (config, seeds) pair regardless of
evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gridfusion import autodiff as ad
from gridfusion import config as cfgmod
from gridfusion.autodiff import Tape, backward
from gridfusion.config import ConfigError, RunConfig
from gridfusion.container import read_container, write_container
from gridfusion.data import SceneSample
from gridfusion.fuser import fuser_forward, init_fuser_params
from gridfusion.heads import (
    DetectionSet,
    decode_detections,
    det_head,
    det_head_dense,
    init_det_head,
    init_seg_head,
    seg_head,
)
from gridfusion.losses import detection_loss, diffusion_loss, focal_map_loss, total_loss
from gridfusion.metrics import average_precision, miou
from gridfusion.rng import Rng
from gridfusion.samplers import SamplerKind, sample_loop
from gridfusion.schedule import make_schedule, q_sample
from gridfusion.sensor_dropout import dropout_prob, modality_mask

Array = np.ndarray

CSV_COLUMNS = (
    "config_hash", "seed", "experiment", "solver", "steps",
    "condition", "scene_id", "metric", "class", "value",
)

SWEEP_STEPS = (1, 2, 4, 8)


class PipelineError(RuntimeError):
    pass


def init_model_params(cfg: RunConfig, gen: np.random.Generator) -> dict[str, Array]:
    fuser_cfg = cfgmod.fuser_config(cfg)
    params = init_fuser_params(gen, fuser_cfg)
    params.update(init_seg_head(gen, fuser_cfg.out_channels, cfg.data_seg_classes))
    params.update(init_det_head(gen, fuser_cfg.out_channels, cfg.data_det_classes))
    return params


def bind_constants(tape: Tape, store: dict[str, Array]):
    return {name: tape.constant(value) for name, value in store.items()}


def latent_of(sample: SceneSample, drop: str | None = None) -> Array:
    """Concatenate (cam, lidar) to the fusion latent; `drop` zeroes one block."""
    cam = sample.cam.astype(np.float64)
    lidar = sample.lidar.astype(np.float64)
    if drop == "cam":
        cam = np.zeros_like(cam)
    elif drop == "lidar":
        lidar = np.zeros_like(lidar)
    elif drop not in (None, "none"):
        raise PipelineError(f"unknown drop condition '{drop}'")
    return np.concatenate([cam, lidar], axis=0)


def _modality_block(which: str, channels: int) -> slice:
    return slice(0, channels) if which == "camera" else slice(channels, 2 * channels)


@dataclass
class TrainState:
    store: dict[str, Array]
    rows: list[dict]
    final_loss: float


def _lr_at(cfg: RunConfig, step: int, total: int) -> float:
    if total <= 1:
        return cfg.train_lr
    return cfg.train_lr * 0.5 * (1.0 + math.cos(math.pi * step / (total - 1)))


def train(
    cfg: RunConfig,
    samples: list[SceneSample],
    force_drop: str | None = None,
    seed_tag: str = "",
) -> TrainState:
    """Train a model on rendered scenes; returns parameters and loss rows.

    `force_drop` zeroes one modality in the latent itself for single-sensor
    baselines. `seed_tag` shifts every random stream, giving independent
    training replicas without touching the config.
    """
    if not samples:
        raise PipelineError("training needs at least one scene (key data.path)")
    if force_drop is None and cfg.train_force_drop != "none":
        force_drop = cfg.train_force_drop
    fuser_cfg = cfgmod.fuser_config(cfg)
    weights = cfgmod.loss_weights(cfg)
    psdt = cfgmod.psdt_config(cfg)
    schedule = make_schedule(
        cfg.diffusion_t, cfg.diffusion_kind, cfg.diffusion_beta_start, cfg.diffusion_beta_end
    )
    init_gen = Rng(cfg.seed_init).stream(f"params{seed_tag}")
    store = init_model_params(cfg, init_gen)
    noise = Rng(cfg.seed_noise)
    t_gen = noise.stream(f"train/t{seed_tag}")
    eps_gen = noise.stream(f"train/eps{seed_tag}")
    mask_gen = noise.stream(f"train/mask{seed_tag}")
    order_gen = noise.stream(f"train/order{seed_tag}")

    steps_per_epoch = math.ceil(len(samples) / cfg.train_batch)
    total_steps = cfg.train_epochs * steps_per_epoch
    adam_m = {k: np.zeros_like(v) for k, v in store.items()} if cfg.train_optimizer == "adam" else None
    adam_v = {k: np.zeros_like(v) for k, v in store.items()} if cfg.train_optimizer == "adam" else None

    rows: list[dict] = []
    step = 0
    final_loss = math.nan
    for epoch in range(cfg.train_epochs):
        order = order_gen.permutation(len(samples))
        p_drop = dropout_prob(epoch, psdt) if psdt.alpha_max > 0 else 0.0
        for start in range(0, len(samples), cfg.train_batch):
            batch = [samples[i] for i in order[start : start + cfg.train_batch]]
            losses = _train_step(
                cfg, fuser_cfg, weights, schedule, store, batch,
                p_drop=p_drop, force_drop=force_drop,
                t_gen=t_gen, eps_gen=eps_gen, mask_gen=mask_gen,
                lr=_lr_at(cfg, step, total_steps),
                adam=(adam_m, adam_v, step) if adam_m is not None else None,
            )
            for name, value in losses.items():
                rows.append({
                    "experiment": "train", "scene_id": step, "metric": name,
                    "value": value, "condition": force_drop or "both",
                })
            final_loss = losses["loss_total"]
            step += 1
    return TrainState(store=store, rows=rows, final_loss=final_loss)


def _train_step(
    cfg, fuser_cfg, weights, schedule, store, batch,
    p_drop, force_drop, t_gen, eps_gen, mask_gen, lr, adam,
) -> dict[str, float]:
    x0_np = np.stack([latent_of(s, force_drop) for s in batch])
    cond_np = np.empty_like(x0_np)
    for i in range(len(batch)):
        if cfg.psdt_target == "random":
            which = "camera" if mask_gen.random() < 0.5 else "lidar"
        else:
            which = cfg.psdt_target
        block = _modality_block(which, cfg.data_channels)
        mask = modality_mask(
            x0_np[i].shape, block, p_drop, mask_gen, cfg.psdt_granularity
        )
        cond_np[i] = x0_np[i] * mask

    t = int(t_gen.integers(1, cfg.diffusion_t + 1))
    eps = eps_gen.standard_normal(x0_np.shape)

    tape = Tape()
    params = tape.bind(store)
    x0 = tape.constant(x0_np)
    cond = tape.constant(cond_np)
    noisy_src = ad.stop_gradient(x0) if cfg.gsm_stop_grad else x0
    x_t = q_sample(noisy_src, t, tape.constant(eps), schedule)
    pred = fuser_forward(params, x_t, cond, t, fuser_cfg)

    l_diff = diffusion_loss(pred, x0)
    zero = tape.constant(0.0)
    l_seg = zero
    l_det = zero
    if cfg.train_task in ("seg", "joint"):
        probs = seg_head(params, pred)
        targets = np.stack([s.scene.class_maps for s in batch]).astype(np.float64)
        l_seg = focal_map_loss(probs, targets, weights.focal_alpha, weights.focal_gamma)
    if cfg.train_task in ("det", "joint"):
        dense = det_head_dense(params, pred)
        per_sample = []
        for i, sample in enumerate(batch):
            dets = decode_detections(dense, cfg.det_top_k, cfg.data_det_classes, sample=i)
            per_sample.append(detection_loss(dets.boxes, sample.scene.boxes, weights))
        acc = per_sample[0]
        for term in per_sample[1:]:
            acc = ad.add(acc, term)
        l_det = ad.scalar_mul(acc, 1.0 / len(per_sample))

    loss = total_loss(l_diff, l_seg, l_det, weights)
    if not np.isfinite(loss.data):
        raise PipelineError(f"non-finite loss at t={t}")
    grads = backward(tape, loss)

    if adam is None:
        for name in sorted(store):
            store[name] = store[name] - lr * grads[name]
    else:
        m, v, step = adam
        b1, b2, eps_hat = 0.9, 0.999, 1e-8
        for name in sorted(store):
            m[name] = b1 * m[name] + (1 - b1) * grads[name]
            v[name] = b2 * v[name] + (1 - b2) * grads[name] ** 2
            mh = m[name] / (1 - b1 ** (step + 1))
            vh = v[name] / (1 - b2 ** (step + 1))
            store[name] = store[name] - lr * mh / (np.sqrt(vh) + eps_hat)

    for name, value in store.items():
        if not np.all(np.isfinite(value)):
            raise PipelineError(f"non-finite parameter '{name}' after update")

    return {
        "loss_total": float(loss.data),
        "loss_diffusion": float(l_diff.data),
        "loss_seg": float(l_seg.data),
        "loss_det": float(l_det.data),
    }


@dataclass
class InferResult:
    seg_probs: Array  # (seg_classes, H, W)
    detections: DetectionSet
    x0_hat: Array  # (2C, H, W)


def build_predictor(store: dict[str, Array], cfg: RunConfig):
    """Fuser closure for the sampling loop: (x_t, t, cond) -> clean estimate."""
    fuser_cfg = cfgmod.fuser_config(cfg)

    def predict(x_t: Array, t: int, cond: Array) -> Array:
        tape = Tape()
        params = bind_constants(tape, store)
        out = fuser_forward(
            params, tape.constant(x_t[None]), tape.constant(cond[None]), t, fuser_cfg
        )
        return out.data[0]

    return predict


def infer_with_predictor(
    predictor,
    cond: Array,
    store: dict[str, Array],
    cfg: RunConfig,
    noise_gen: np.random.Generator,
    solver: str | None = None,
    steps: int | None = None,
) -> InferResult:
    schedule = make_schedule(
        cfg.diffusion_t, cfg.diffusion_kind, cfg.diffusion_beta_start, cfg.diffusion_beta_end
    )
    kind = SamplerKind(solver or cfg.sampler_kind, eta=cfg.sampler_eta)
    x0_hat = sample_loop(
        predictor, cond, kind, steps or cfg.sampler_steps, schedule, noise_gen
    )
    tape = Tape()
    params = bind_constants(tape, store)
    fused = tape.constant(x0_hat[None])
    seg = seg_head(params, fused)
    dets = det_head(params, fused, cfg.det_top_k, cfg.data_det_classes)
    return InferResult(seg_probs=seg.data[0], detections=dets, x0_hat=x0_hat)


def infer(
    store: dict[str, Array],
    cfg: RunConfig,
    sample: SceneSample,
    noise_gen: np.random.Generator,
    drop: str | None = None,
    solver: str | None = None,
    steps: int | None = None,
) -> InferResult:
    cond = latent_of(sample, drop)
    predictor = build_predictor(store, cfg)
    return infer_with_predictor(predictor, cond, store, cfg, noise_gen, solver, steps)


def evaluate(
    store: dict[str, Array],
    cfg: RunConfig,
    samples: list[SceneSample],
    experiment: str,
    drop: str | None = None,
    solver: str | None = None,
    steps: int | None = None,
) -> tuple[list[dict], float, float]:
    """Per-scene mIoU and AP rows plus their means. Each scene gets its own
    noise stream keyed by (experiment, condition, solver, steps, index)."""
    solver = solver or cfg.sampler_kind
    steps = steps or cfg.sampler_steps
    condition = drop or "both"
    rows: list[dict] = []
    mious: list[float] = []
    aps: list[float] = []
    noise = Rng(cfg.seed_noise)
    for i, sample in enumerate(samples):
        gen = noise.stream(f"eval/{experiment}/{condition}/{solver}/{steps}/{i}")
        result = infer(store, cfg, sample, gen, drop=drop, solver=solver, steps=steps)
        per_class, mean_iou, _ = miou(
            result.seg_probs, sample.scene.class_maps, cfg.eval_threshold
        )
        gts = np.column_stack([
            sample.scene.boxes[:, 5], sample.scene.boxes[:, 0], sample.scene.boxes[:, 1],
        ]) if len(sample.scene.boxes) else np.zeros((0, 3))
        _, mean_ap = average_precision(result.detections.to_array(), gts, cfg.eval_ap_dist)
        base = {"experiment": experiment, "solver": solver, "steps": steps,
                "condition": condition, "scene_id": i}
        for c, value in enumerate(per_class):
            if np.isfinite(value):
                rows.append({**base, "metric": "iou", "class": c, "value": float(value)})
        if np.isfinite(mean_iou):
            rows.append({**base, "metric": "miou", "value": mean_iou})
            mious.append(mean_iou)
        if np.isfinite(mean_ap):
            rows.append({**base, "metric": "ap", "value": mean_ap})
            aps.append(mean_ap)
    mean_miou = float(np.mean(mious)) if mious else math.nan
    mean_ap = float(np.mean(aps)) if aps else math.nan
    rows.append({"experiment": experiment, "solver": solver, "steps": steps,
                 "condition": condition, "metric": "miou_mean", "value": mean_miou})
    rows.append({"experiment": experiment, "solver": solver, "steps": steps,
                 "condition": condition, "metric": "ap_mean", "value": mean_ap})
    return rows, mean_miou, mean_ap


def solver_sweep(
    store: dict[str, Array], cfg: RunConfig, samples: list[SceneSample]
) -> tuple[list[dict], dict[tuple[str, int], float]]:
    """mIoU for every solver at 1, 2, 4 and 8 steps; the 12-cell table."""
    rows: list[dict] = []
    table: dict[tuple[str, int], float] = {}
    for solver in ("ddim", "dpmpp", "deis"):
        for steps in SWEEP_STEPS:
            cell_rows, mean_miou, _ = evaluate(
                store, cfg, samples, experiment="sweep", solver=solver, steps=steps
            )
            per_scene = [r["value"] for r in cell_rows if r["metric"] == "miou"]
            std = float(np.std(per_scene)) if per_scene else math.nan
            rows.extend(cell_rows)
            rows.append({"experiment": "sweep", "solver": solver, "steps": steps,
                         "condition": "both", "metric": "miou_std", "value": std})
            table[(solver, steps)] = mean_miou
    return rows, table


def robustness_eval(
    store_psdt: dict[str, Array],
    store_plain: dict[str, Array],
    cfg: RunConfig,
    samples: list[SceneSample],
) -> tuple[list[dict], dict[tuple[str, str, int], float]]:
    """mIoU under intact and single-sensor conditions for a dropout-trained
    and a plain model, across the step grid."""
    rows: list[dict] = []
    table: dict[tuple[str, str, int], float] = {}
    for model_name, store in (("psdt", store_psdt), ("no_psdt", store_plain)):
        for drop in (None, "cam", "lidar"):
            for steps in SWEEP_STEPS:
                cell_rows, mean_miou, _ = evaluate(
                    store, cfg, samples,
                    experiment=f"robustness/{model_name}", drop=drop, steps=steps,
                )
                rows.extend(cell_rows)
                table[(model_name, drop or "both", steps)] = mean_miou
    return rows, table


# --- reports and checkpoints ------------------------------------------------


def format_rows(rows: list[dict], cfg: RunConfig) -> str:
    """Render rows to the fixed CSV schema with a stable float format."""
    chash = cfgmod.config_hash(cfg)
    seed = f"{cfg.seed_data}/{cfg.seed_init}/{cfg.seed_noise}"
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        record = {"config_hash": chash, "seed": seed, **row}
        cells = []
        for col in CSV_COLUMNS:
            value = record.get(col, "")
            if isinstance(value, float):
                cells.append(f"{value:.12g}")
            else:
                cells.append(str(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_report(path: str | Path, rows: list[dict], cfg: RunConfig) -> None:
    Path(path).write_text(format_rows(rows, cfg))


def save_checkpoint(path: str | Path, store: dict[str, Array], cfg: RunConfig) -> None:
    header = {"config_hash": cfgmod.config_hash(cfg)}
    for line in cfgmod.to_text(cfg).strip().splitlines():
        key, value = line.split(" = ", 1)
        header[f"cfg.{key}"] = value
    arrays = [(name, store[name]) for name in sorted(store)]
    write_container(path, "checkpoint", header, arrays)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Array], RunConfig]:
    _, header, arrays = read_container(path, expect_kind="checkpoint")
    overrides = {
        key[len("cfg."):]: value for key, value in header.items() if key.startswith("cfg.")
    }
    cfg = cfgmod.apply_overrides(RunConfig(), overrides)
    cfgmod.validate(cfg)
    if cfgmod.config_hash(cfg) != header.get("config_hash"):
        raise ConfigError(f"{path}: checkpoint config hash mismatch")
    return dict(arrays), cfg
