"""PASCAL-style detection AP, bag classification AP, recall and reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .bags import Dataset
from .detect import DetectConfig, Detection, detect_dataset, iou
from .errors import ValidationError
from .models import region_confidences


def _ap_from_flags(tp_flags: np.ndarray, n_gt: int) -> float:
    """Area under the precision-recall curve with the precision envelope.

    ``tp_flags`` is the TP/FP sequence in descending-confidence order.
    """
    if n_gt < 1:
        raise ValidationError("AP needs at least one positive")
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def _sorted_by_confidence(confidences) -> list[int]:
    # stable sort: ties keep input order
    return sorted(range(len(confidences)), key=lambda i: -confidences[i])


def match_detections(dets: list[Detection], gt_boxes: dict[str, np.ndarray],
                     iou_threshold: float) -> np.ndarray:
    """Greedy TP/FP flags for confidence-ranked detections.

    Each detection takes the unmatched ground-truth box of its image with the
    highest IoU, provided that IoU reaches the threshold; every ground-truth
    box is matched at most once.
    """
    matched = {image_id: np.zeros(len(boxes), dtype=bool)
               for image_id, boxes in gt_boxes.items()}
    flags = np.zeros(len(dets), dtype=bool)
    order = _sorted_by_confidence([d.confidence for d in dets])
    for rank, i in enumerate(order):
        det = dets[i]
        boxes = gt_boxes.get(det.image_id)
        if boxes is None:
            continue
        free = ~matched[det.image_id]
        best_j = -1
        best_iou = 0.0
        for j in np.flatnonzero(free):
            val = iou(det.box, tuple(boxes[j]))
            if val > best_iou:
                best_iou = val
                best_j = j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[det.image_id][best_j] = True
            flags[rank] = True
    return flags


def detection_ap(dets: list[Detection], dataset: Dataset, class_name: str,
                 iou_threshold: float = 0.5) -> float | None:
    """AP of one class at the given IoU threshold; None when it has no GT."""
    dataset.class_index(class_name)  # raises on unknown class
    dets = [d for d in dets if d.class_name == class_name]
    gt_boxes = dataset.gt_boxes(class_name)
    n_gt = sum(len(b) for b in gt_boxes.values())
    if n_gt == 0:
        return None
    flags = match_detections(dets, gt_boxes, iou_threshold)
    return _ap_from_flags(flags, n_gt)


def ranking_ap(scores, labels) -> float | None:
    """AP of ranking items by score against {-1,+1} labels; ties keep input order."""
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0 or n_pos == len(labels):
        return None
    order = _sorted_by_confidence(list(scores))
    flags = np.array([labels[i] == 1 for i in order], dtype=bool)
    return _ap_from_flags(flags, n_pos)


def classification_ap(models, dataset: Dataset, class_name: str,
                      config: DetectConfig) -> float | None:
    """Bag-level AP: score a bag by its best region confidence, rank all bags."""
    model = models[class_name]
    scores = [float(np.max(region_confidences(model, bag, config.loss)))
              for bag in dataset.bags]
    return ranking_ap(scores, dataset.labels_for(class_name))


def proposal_recall(dataset: Dataset, class_name: str,
                    iou_threshold: float = 0.5) -> float | None:
    """Fraction of GT boxes covered by some region box at IoU >= threshold."""
    gt_boxes = dataset.gt_boxes(class_name)
    total = sum(len(b) for b in gt_boxes.values())
    if total == 0:
        return None
    by_id = {bag.image_id: bag for bag in dataset.bags}
    hit = 0
    for image_id, boxes in gt_boxes.items():
        bag = by_id.get(image_id)
        if bag is None:
            continue
        for g in boxes:
            g = tuple(g)
            if any(iou(tuple(r), g) >= iou_threshold for r in bag.boxes):
                hit += 1
    return hit / total


@dataclass
class EvalReport:
    """Per-class metrics plus the configuration that produced them."""

    dataset_name: str
    classes: list[str]
    ap: dict[str, float | None]
    mean_ap: float | None
    classification_ap: dict[str, float | None]
    proposal_recall: dict[str, float | None]
    gt_counts: dict[str, int]
    detection_counts: dict[str, int]
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset_name,
            "classes": self.classes,
            "ap": self.ap,
            "mean_ap": self.mean_ap,
            "classification_ap": self.classification_ap,
            "proposal_recall": self.proposal_recall,
            "gt_counts": self.gt_counts,
            "detection_counts": self.detection_counts,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        """Aligned percentage table: one column per class plus the mean."""
        headers = ["metric"] + self.classes + ["mean"]

        def fmt(value):
            return "-" if value is None else f"{100.0 * value:.1f}"

        defined = [v for v in self.classification_ap.values() if v is not None]
        mean_cls = sum(defined) / len(defined) if defined else None
        defined_rec = [v for v in self.proposal_recall.values() if v is not None]
        mean_rec = sum(defined_rec) / len(defined_rec) if defined_rec else None
        rows = [
            ["detection AP"] + [fmt(self.ap.get(c)) for c in self.classes]
            + [fmt(self.mean_ap)],
            ["classif AP"] + [fmt(self.classification_ap.get(c)) for c in self.classes]
            + [fmt(mean_cls)],
            ["recall"] + [fmt(self.proposal_recall.get(c)) for c in self.classes]
            + [fmt(mean_rec)],
        ]
        widths = [max(len(str(row[i])) for row in [headers] + rows)
                  for i in range(len(headers))]
        lines = []
        for row in [headers] + rows:
            lines.append("  ".join(str(cell).rjust(w) for cell, w in zip(row, widths)))
        return "\n".join(lines) + "\n"


def evaluate_models(models, dataset: Dataset, config: DetectConfig,
                    iou_threshold: float = 0.5, classes=None,
                    provenance=None, jobs: int = 1,
                    detections: list[Detection] | None = None) -> EvalReport:
    """Detect on every bag and score per class; the report only covers ``classes``.

    Pass precomputed ``detections`` to skip inference (they must come from the
    same models and config).
    """
    if classes is None:
        classes = [c for c in dataset.class_names if c in models]
    missing = [c for c in classes if c not in models]
    if missing:
        raise ValidationError(f"no model for classes {missing}")
    for c in classes:
        if models[c].feature_dim != dataset.feature_dim:
            raise ValidationError(
                f"model for {c!r} expects {models[c].feature_dim} features, "
                f"dataset has {dataset.feature_dim}")
    subset = {c: models[c] for c in classes}
    if detections is None:
        detections = detect_dataset(subset, dataset, config, jobs=jobs)
    ap = {}
    cls_ap = {}
    recall = {}
    gt_counts = {}
    det_counts = {}
    for c in classes:
        ap[c] = detection_ap(detections, dataset, c, iou_threshold)
        cls_ap[c] = classification_ap(subset, dataset, c, config)
        recall[c] = proposal_recall(dataset, c, iou_threshold)
        gt_counts[c] = sum(len(b) for b in dataset.gt_boxes(c).values())
        det_counts[c] = sum(1 for d in detections if d.class_name == c)
    defined = [v for v in ap.values() if v is not None]
    mean_ap = sum(defined) / len(defined) if defined else None
    return EvalReport(
        dataset_name=dataset.name,
        classes=list(classes),
        ap=ap,
        mean_ap=mean_ap,
        classification_ap=cls_ap,
        proposal_recall=recall,
        gt_counts=gt_counts,
        detection_counts=det_counts,
        provenance=provenance or {},
    )


def transfer_evaluate(source_models, target: Dataset, config: DetectConfig,
                      iou_threshold: float = 0.5, provenance=None,
                      jobs: int = 1) -> EvalReport:
    """Evaluate source-trained models on a target dataset's common classes."""
    common = [c for c in target.class_names if c in source_models]
    if not common:
        raise ValidationError("source models and target dataset share no class")
    return evaluate_models(source_models, target, config, iou_threshold,
                           classes=common, provenance=provenance, jobs=jobs)
