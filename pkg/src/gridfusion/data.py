"""Synthetic scenes: rotated-box ground truth plus two imperfect sensor
renders standing in for camera and lidar latents.

The two modalities are deliberately asymmetric. Camera channels carry class
identity (each class paints a fixed color vector) but blurred, jittered and
noisy geometry. Lidar channels carry exact occupancy thinned with range but
no class information. Neither alone supports both tasks, which is what
makes fusion and sensor-dropout experiments measurable.

All arrays are float32, the container storage type, so a written dataset
reloads bit exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gridfusion.container import read_container, write_container
from gridfusion.rng import Rng

Array = np.ndarray

logger = logging.getLogger(__name__)

_PALETTE_SEED = 0x5EED_C0DE  # palette is fixed across datasets
BOX_COLUMNS = ("cx", "cy", "w", "h", "heading", "class")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    grid: int = 32
    channels: int = 9  # per modality
    det_classes: int = 2
    seg_classes: int = 3
    max_boxes: int = 5

    def __post_init__(self):
        if self.grid < 8 or self.grid % 4:
            raise DataError(f"grid must be >= 8 and divisible by 4, got {self.grid}")
        if self.seg_classes != self.det_classes + 1:
            raise DataError(
                "seg_classes must be det_classes + 1 (one map per class plus occupancy), "
                f"got {self.seg_classes} vs {self.det_classes}"
            )
        if self.max_boxes < 1:
            raise DataError("max_boxes must be >= 1")


@dataclass(frozen=True)
class NoiseConfig:
    sigma_cam: float = 0.08
    sigma_lidar: float = 0.05
    jitter: int = 1
    sparsify: float = 0.5

    def __post_init__(self):
        if self.sigma_cam < 0 or self.sigma_lidar < 0:
            raise DataError("noise sigmas must be >= 0")
        if not 0.0 <= self.sparsify <= 1.0:
            raise DataError(f"sparsify must be in [0, 1], got {self.sparsify}")


@dataclass
class Scene:
    """Ground truth: boxes (n, 6) with columns BOX_COLUMNS, one binary map
    per detection class plus an occupancy map as the last class."""

    grid: int
    boxes: Array
    class_maps: Array
    seed: int


@dataclass
class SceneSample:
    """A scene together with its rendered modality pair."""

    scene: Scene
    cam: Array
    lidar: Array


def rasterize_box(cx, cy, w, h, heading, grid: int) -> Array:
    """Cells whose centers fall inside the rotated rectangle."""
    rows, cols = np.mgrid[0:grid, 0:grid]
    dx = cols + 0.5 - cx
    dy = rows + 0.5 - cy
    cos_t, sin_t = math.cos(heading), math.sin(heading)
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    return (np.abs(u) <= w / 2.0) & (np.abs(v) <= h / 2.0)


def generate_scene(seed: int, cfg: SceneConfig) -> Scene:
    """Rejection-sample non-overlapping boxes and rasterize the class maps."""
    gen = Rng(seed).stream("boxes")
    grid = cfg.grid
    n_target = int(gen.integers(1, cfg.max_boxes + 1))
    occupancy = np.zeros((grid, grid), dtype=bool)
    boxes = []
    size_hi = min(8.0, grid / 4.0)
    for _ in range(n_target):
        placed = False
        for _ in range(40):
            w = float(gen.uniform(3.0, size_hi))
            h = float(gen.uniform(3.0, size_hi))
            heading = float(gen.uniform(-math.pi / 2, math.pi / 2))
            half_x = (abs(w * math.cos(heading)) + abs(h * math.sin(heading))) / 2.0
            half_y = (abs(w * math.sin(heading)) + abs(h * math.cos(heading))) / 2.0
            if 2 * half_x >= grid or 2 * half_y >= grid:
                continue
            cx = float(gen.uniform(half_x, grid - half_x))
            cy = float(gen.uniform(half_y, grid - half_y))
            footprint = rasterize_box(cx, cy, w, h, heading, grid)
            if not footprint.any() or (footprint & occupancy).any():
                continue
            occupancy |= footprint
            cls = int(gen.integers(0, cfg.det_classes))
            boxes.append((cx, cy, w, h, heading, cls))
            placed = True
            break
        if not placed:
            logger.info("scene %d: placement gave up, keeping %d boxes", seed, len(boxes))
    box_arr = np.asarray(boxes, dtype=np.float32).reshape(-1, 6)
    maps = np.zeros((cfg.seg_classes, grid, grid), dtype=np.float32)
    for cx, cy, w, h, heading, cls in boxes:
        footprint = rasterize_box(cx, cy, w, h, heading, grid)
        maps[int(cls)][footprint] = 1.0
        maps[-1][footprint] = 1.0
    return Scene(grid=grid, boxes=box_arr, class_maps=maps, seed=seed)


def modality_palette(channels: int, det_classes: int) -> tuple[Array, Array, Array]:
    """Class color vectors for the camera and two basis vectors for lidar."""
    gen = Rng(_PALETTE_SEED).stream("palette")
    colors = gen.uniform(-1.0, 1.0, size=(det_classes, channels))
    occ_basis = gen.uniform(0.5, 1.0, size=channels) * np.sign(gen.uniform(-1, 1, size=channels))
    range_basis = gen.uniform(-1.0, 1.0, size=channels)
    return colors, occ_basis, range_basis


def _box_blur3(x: Array) -> Array:
    padded = np.pad(x, 1, mode="edge")
    out = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            out += padded[di : di + x.shape[0], dj : dj + x.shape[1]]
    return out / 9.0


def _shift2d(x: Array, dy: int, dx: int) -> Array:
    out = np.zeros_like(x)
    h, w = x.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = x[ys_src, xs_src]
    return out


def render_modalities(
    scene: Scene, noise_cfg: NoiseConfig, rng: Rng, channels: int = 9
) -> tuple[Array, Array]:
    """Render (cam, lidar) float32 feature stacks of shape (channels, H, W)."""
    grid = scene.grid
    det_classes = scene.class_maps.shape[0] - 1
    colors, occ_basis, range_basis = modality_palette(channels, det_classes)

    jitter_gen = rng.stream("render/jitter")
    cam_noise = rng.stream("render/cam")
    lidar_gen = rng.stream("render/lidar")

    cam = np.zeros((channels, grid, grid))
    lo, hi = -noise_cfg.jitter, noise_cfg.jitter + 1
    for cls in range(det_classes):
        dy = int(jitter_gen.integers(lo, hi))
        dx = int(jitter_gen.integers(lo, hi))
        shifted = _shift2d(scene.class_maps[cls].astype(np.float64), dy, dx)
        cam += colors[cls][:, None, None] * _box_blur3(shifted)[None]
    if noise_cfg.sigma_cam > 0:
        cam += noise_cfg.sigma_cam * cam_noise.standard_normal(cam.shape)

    occupancy = scene.class_maps[-1].astype(np.float64)
    center = (grid - 1) / 2.0
    rows, cols = np.mgrid[0:grid, 0:grid]
    dist = np.hypot(rows - center, cols - center)
    dist = dist / dist.max()
    keep = lidar_gen.random((grid, grid)) >= noise_cfg.sparsify * dist
    occ_kept = occupancy * keep
    range_map = occ_kept * (1.0 - dist)
    lidar = occ_basis[:, None, None] * occ_kept[None] + range_basis[:, None, None] * range_map[None]
    if noise_cfg.sigma_lidar > 0:
        lidar += noise_cfg.sigma_lidar * lidar_gen.standard_normal(lidar.shape)

    return cam.astype(np.float32), lidar.astype(np.float32)


def generate_dataset(
    seed: int,
    n_scenes: int,
    scene_cfg: SceneConfig,
    noise_cfg: NoiseConfig,
) -> list[SceneSample]:
    """Pure function of (seed, configs); scenes carry derived child seeds."""
    if n_scenes < 1:
        raise DataError(f"n_scenes must be >= 1, got {n_scenes}")
    root = Rng(seed)
    samples = []
    for i in range(n_scenes):
        child = root.child_seed(f"scene/{i}")
        scene = generate_scene(child, scene_cfg)
        cam, lidar = render_modalities(scene, noise_cfg, Rng(child), scene_cfg.channels)
        samples.append(SceneSample(scene=scene, cam=cam, lidar=lidar))
    return samples


def save_dataset(path: str | Path, samples: list[SceneSample], seed: int, cfg: SceneConfig) -> None:
    header = {
        "grid": str(cfg.grid),
        "channels": str(cfg.channels),
        "det_classes": str(cfg.det_classes),
        "seg_classes": str(cfg.seg_classes),
        "scenes": str(len(samples)),
        "seed": str(seed),
    }
    arrays: list[tuple[str, Array]] = []
    for i, sample in enumerate(samples):
        header[f"s{i}.seed"] = str(sample.scene.seed)
        arrays.append((f"s{i}.boxes", sample.scene.boxes))
        arrays.append((f"s{i}.maps", sample.scene.class_maps))
        arrays.append((f"s{i}.cam", sample.cam))
        arrays.append((f"s{i}.lidar", sample.lidar))
    write_container(path, "dataset", header, arrays)


def load_dataset(path: str | Path) -> tuple[list[SceneSample], dict[str, str]]:
    _, header, arrays = read_container(path, expect_kind="dataset")
    for key in ("grid", "channels", "scenes", "seed"):
        if key not in header:
            raise DataError(f"{path}: dataset header missing '{key}'")
    n = int(header["scenes"])
    grid = int(header["grid"])
    samples = []
    for i in range(n):
        try:
            scene = Scene(
                grid=grid,
                boxes=arrays[f"s{i}.boxes"],
                class_maps=arrays[f"s{i}.maps"],
                seed=int(header[f"s{i}.seed"]),
            )
            samples.append(SceneSample(scene=scene, cam=arrays[f"s{i}.cam"], lidar=arrays[f"s{i}.lidar"]))
        except KeyError as exc:
            raise DataError(f"{path}: dataset missing array for scene {i}: {exc}") from exc
    return samples, header
