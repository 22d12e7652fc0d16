"""Detection quality metrics: IoU, greedy matching, AP, TPR, per-image FPR.

Matching is greedy per image: detections in descending confidence order each
claim the unclaimed ground-truth box of highest IoU at or above the
threshold.  Confidence ties are broken by the box corner coordinates
(lexicographic), IoU ties by the lower ground-truth index, so results do not
depend on input order.  Average precision uses all-point interpolation (the
area under the precision envelope as a function of recall).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box; corners must satisfy x_max > x_min, y_max > y_min."""

    image_id: str
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float | None = None

    def __post_init__(self) -> None:
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box {self.corners()} in image "
                             f"{self.image_id!r}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class DetectionReport:
    """Aggregate metrics plus per-image (detection, matched) lists."""

    mean_ap: float
    tpr: float
    fpr_per_image: float
    iou_threshold: float
    per_image: dict


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _confidence_order(detections: list[BoundingBox]) -> list[int]:
    # Descending confidence; ties by corner coordinates so shuffled input
    # produces identical matches.
    return sorted(range(len(detections)),
                  key=lambda i: (-(detections[i].confidence or 0.0),
                                 detections[i].corners()))


def match_detections(detections: list[BoundingBox], ground_truths: list[BoundingBox],
                     iou_threshold: float = 0.5) -> list[bool]:
    """Greedy per-image matching; returns TP flags aligned with ``detections``."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    gt_by_image: dict[str, list[int]] = {}
    for j, gt in enumerate(ground_truths):
        gt_by_image.setdefault(gt.image_id, []).append(j)
    claimed = [False] * len(ground_truths)
    flags = [False] * len(detections)
    det_by_image: dict[str, list[int]] = {}
    for i in _confidence_order(detections):
        det_by_image.setdefault(detections[i].image_id, []).append(i)
    for image_id, det_indices in det_by_image.items():
        candidates = gt_by_image.get(image_id, [])
        for i in det_indices:
            best_j, best_iou = -1, 0.0
            for j in candidates:
                if claimed[j]:
                    continue
                overlap = iou(detections[i], ground_truths[j])
                if overlap >= iou_threshold and overlap > best_iou:
                    best_j, best_iou = j, overlap
            if best_j >= 0:
                claimed[best_j] = True
                flags[i] = True
    return flags


def average_precision(confidences, tp_flags, n_ground_truth: int) -> float:
    """All-point interpolated AP from per-detection confidences and TP flags."""
    if n_ground_truth < 1:
        raise ValueError("average precision needs at least one ground-truth box")
    conf = np.asarray(confidences, dtype=np.float64)
    flags = np.asarray(tp_flags, dtype=bool)
    if conf.shape != flags.shape:
        raise ValueError("confidences and flags must align")
    if conf.size == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    tp = flags[order].astype(np.float64)
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_ground_truth
    precision = cum_tp / np.arange(1, conf.size + 1)
    # Precision envelope: best precision at any recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def detection_report(detections: list[BoundingBox], ground_truths: list[BoundingBox],
                     iou_threshold: float = 0.5) -> DetectionReport:
    """Match detections and report mAP, TPR, and false positives per image."""
    if not ground_truths:
        raise ValueError("detection report needs a nonempty ground-truth set")
    flags = match_detections(detections, ground_truths, iou_threshold)
    confidences = [d.confidence or 0.0 for d in detections]
    mean_ap = average_precision(confidences, flags, len(ground_truths))
    n_tp = sum(flags)
    images = {gt.image_id for gt in ground_truths} | {d.image_id for d in detections}
    per_image: dict[str, list] = {image_id: [] for image_id in sorted(images)}
    for det, flag in zip(detections, flags):
        per_image[det.image_id].append((det, flag))
    return DetectionReport(
        mean_ap=mean_ap,
        tpr=n_tp / len(ground_truths),
        fpr_per_image=(len(detections) - n_tp) / len(images),
        iou_threshold=iou_threshold,
        per_image=per_image,
    )


def load_boxes(path, with_confidence: bool) -> list[BoundingBox]:
    """Read ``image_id,x_min,y_min,x_max,y_max[,confidence]`` CSV rows.

    Comment lines (``#``) and a header row starting with ``image_id`` are
    skipped.  Malformed rows are reported with their line number.
    """
    path = Path(path)
    expected = 6 if with_confidence else 5
    boxes = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                 start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith("image_id"):
            continue
        fields = line.split(",")
        if len(fields) != expected:
            raise ValueError(f"{path}: line {lineno}: expected {expected} fields, "
                             f"got {len(fields)}")
        try:
            coords = [float(v) for v in fields[1:5]]
            confidence = float(fields[5]) if with_confidence else None
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: malformed number") from None
        try:
            boxes.append(BoundingBox(fields[0], *coords, confidence=confidence))
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return boxes
