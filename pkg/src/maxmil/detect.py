"""Inference: per-class region scoring, thresholding and greedy NMS."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .bags import Dataset, FeatureBag
from .errors import ConfigError, ValidationError
from .models import LossConfig, region_confidences

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class DetectConfig:
    """Inference thresholds; score weighting comes from the loss config."""

    loss: LossConfig = LossConfig()
    nms_iou: float = 0.3
    min_confidence: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ConfigError("nms_iou must lie in [0, 1]")


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_name: str
    box: Box
    confidence: float


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(0.0, ix) * max(0.0, iy)
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-confidence remaining detection (ties break
    toward earlier input order) and discards the rest overlapping it with
    IoU strictly above the threshold. Output is confidence-sorted.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[Detection] = []
    suppressed = [False] * len(dets)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(dets[i])
        for j in order:
            if not suppressed[j] and iou(dets[i].box, dets[j].box) > iou_threshold:
                suppressed[j] = True
    return kept


def detect_image(models, bag: FeatureBag, config: DetectConfig) -> list[Detection]:
    """All detections of one image, per class: score, threshold, NMS.

    ``models`` maps class name to a trained model; classes are processed in
    mapping order and do not interact.
    """
    out: list[Detection] = []
    for class_name, model in models.items():
        if model.feature_dim != bag.features.shape[1]:
            raise ValidationError(
                f"model for {class_name!r} expects {model.feature_dim} features, "
                f"bag {bag.image_id!r} has {bag.features.shape[1]}")
        conf = region_confidences(model, bag, config.loss)
        keep = np.flatnonzero(conf > config.min_confidence)
        cand = [
            Detection(bag.image_id, class_name,
                      tuple(float(v) for v in bag.boxes[k]), float(conf[k]))
            for k in keep
        ]
        out.extend(nms(cand, config.nms_iou))
    return out


def detect_dataset(models, dataset: Dataset, config: DetectConfig,
                   jobs: int = 1) -> list[Detection]:
    """Detections over every bag, in dataset order (images are independent)."""
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_bag = list(pool.map(lambda bag: detect_image(models, bag, config),
                                    dataset.bags))
    else:
        per_bag = [detect_image(models, bag, config) for bag in dataset.bags]
    return [det for dets in per_bag for det in dets]


def write_detections(dets: list[Detection], path) -> None:
    """One JSON object per line: {"image", "class", "box", "score"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for det in dets:
            fh.write(json.dumps(
                {"image": det.image_id, "class": det.class_name,
                 "box": list(det.box), "score": det.confidence}) + "\n")


def read_detections(path) -> list[Detection]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(Detection(rec["image"], rec["class"],
                                 tuple(float(v) for v in rec["box"]),
                                 float(rec["score"])))
    return out
