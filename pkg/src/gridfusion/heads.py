"""Task heads on the fused feature map.

Segmentation: two 3x3 convs and a per-class sigmoid (classes overlap, so
multi-label rather than softmax). Detection: dense per-cell predictions of
objectness, class logits, center offset, size and heading, reduced to the
top-K cells by objectness with row-major order breaking ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gridfusion import autodiff as ad
from gridfusion.autodiff import Tensor, fan_in_uniform

Array = np.ndarray


@dataclass
class BoxPrediction:
    """One decoded box; tensors keep the decode differentiable."""

    box: Tensor  # (5,) cx, cy, w, h, heading
    class_probs: Tensor  # (n_classes,)
    objectness: Tensor  # (1,)
    confidence: float
    cell: tuple[int, int]

    @property
    def center(self) -> tuple[float, float]:
        return float(self.box.data[0]), float(self.box.data[1])

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.class_probs.data))


@dataclass
class DetectionSet:
    """Top-K predictions in descending confidence order."""

    boxes: list[BoxPrediction]
    k: int

    def __post_init__(self):
        confs = [b.confidence for b in self.boxes]
        if confs != sorted(confs, reverse=True):
            raise ValueError("detections must be sorted by descending confidence")

    def to_array(self) -> Array:
        """(n, 4) rows of confidence, class, cx, cy for metric evaluation."""
        return np.array(
            [[b.confidence, b.predicted_class, *b.center] for b in self.boxes]
        ).reshape(-1, 4)


def init_seg_head(gen: np.random.Generator, in_channels: int, classes: int) -> dict[str, Array]:
    fan = in_channels * 9
    return {
        "seg.c1.w": fan_in_uniform(gen, (in_channels, in_channels, 3, 3), fan),
        "seg.c1.b": fan_in_uniform(gen, (in_channels,), fan),
        "seg.c2.w": fan_in_uniform(gen, (classes, in_channels, 3, 3), fan),
        "seg.c2.b": fan_in_uniform(gen, (classes,), fan),
    }


def seg_head(params, fused: Tensor) -> Tensor:
    """Per-class probability maps in (0, 1), shape (N, classes, H, W)."""
    h = ad.swish(ad.conv2d(fused, params["seg.c1.w"], params["seg.c1.b"], 1, 1))
    return ad.sigmoid(ad.conv2d(h, params["seg.c2.w"], params["seg.c2.b"], 1, 1))


def init_det_head(
    gen: np.random.Generator, in_channels: int, classes: int
) -> dict[str, Array]:
    fan = in_channels * 9
    out_ch = 1 + classes + 5
    return {
        "det.c1.w": fan_in_uniform(gen, (in_channels, in_channels, 3, 3), fan),
        "det.c1.b": fan_in_uniform(gen, (in_channels,), fan),
        "det.c2.w": fan_in_uniform(gen, (out_ch, in_channels, 3, 3), fan),
        "det.c2.b": fan_in_uniform(gen, (out_ch,), fan),
    }


def det_head_dense(params, fused: Tensor) -> Tensor:
    """Dense per-cell prediction map, shared across the batch decode."""
    h = ad.swish(ad.conv2d(fused, params["det.c1.w"], params["det.c1.b"], 1, 1))
    return ad.conv2d(h, params["det.c2.w"], params["det.c2.b"], 1, 1)


def det_head(params, fused: Tensor, k: int, n_classes: int, sample: int = 0) -> DetectionSet:
    """Decode the top-k cells of one sample of the fused batch."""
    return decode_detections(det_head_dense(params, fused), k, n_classes, sample)


def decode_detections(raw: Tensor, k: int, n_classes: int, sample: int = 0) -> DetectionSet:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n, ch, height, width = raw.shape
    cells = height * width
    k = min(k, cells)

    conf_map = 1.0 / (1.0 + np.exp(-raw.data[sample, 0]))
    order = np.argsort(-conf_map.ravel(), kind="stable")[:k]

    boxes = []
    for flat in order:
        r, c = divmod(int(flat), width)
        idx = [((sample * ch + channel) * height + r) * width + c for channel in range(ch)]
        vec = ad.take(raw, idx)
        objectness = ad.sigmoid(ad.slice_axis(vec, 0, 0, 1))
        class_probs = ad.sigmoid(ad.slice_axis(vec, 0, 1, 1 + n_classes))
        box_raw = ad.slice_axis(vec, 0, 1 + n_classes, 6 + n_classes)
        offsets = vec.tape.constant(np.array([c + 0.5, r + 0.5]))
        center = ad.add(ad.slice_axis(box_raw, 0, 0, 2), offsets)
        size = ad.softplus(ad.slice_axis(box_raw, 0, 2, 4))
        heading = ad.slice_axis(box_raw, 0, 4, 5)
        boxes.append(
            BoxPrediction(
                box=ad.concat([center, size, heading], axis=0),
                class_probs=class_probs,
                objectness=objectness,
                confidence=float(conf_map[r, c]),
                cell=(r, c),
            )
        )
    return DetectionSet(boxes=boxes, k=k)
