"""COCO-style AP/AR and fixed-IoU precision/recall/F1 for single-class boxes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import pairwise_iou
from .synthdata import AnnotationFile

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.96, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


class ValidationError(ValueError):
    pass


@dataclass
class PRF:
    iou: float
    precision: float
    recall: float
    f1: float
    score_cut: float


@dataclass
class MetricsReport:
    mAP: float
    AP50: float
    AP75: float
    AR: float
    prf: list[PRF] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mAP": self.mAP, "AP50": self.AP50, "AP75": self.AP75, "AR": self.AR,
                "prf": [asdict(p) for p in self.prf]}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        for key in ("mAP", "AP50", "AP75", "AR", "prf"):
            if key not in d:
                raise ValidationError(f"metrics report missing '{key}'")
        rep = cls(float(d["mAP"]), float(d["AP50"]), float(d["AP75"]), float(d["AR"]),
                  [PRF(**p) for p in d["prf"]])
        rep.validate()
        return rep

    def validate(self) -> None:
        vals = [self.mAP, self.AP50, self.AP75, self.AR]
        for p in self.prf:
            vals += [p.precision, p.recall, p.f1]
            if abs(p.f1 - f1_score(p.precision, p.recall)) > 1e-12:
                raise ValidationError(f"F1 at IoU {p.iou} is not the harmonic mean of P and R")
        if not all(0.0 <= v <= 1.0 for v in vals):
            raise ValidationError("metric outside [0, 1]")

    def to_text(self) -> str:
        lines = [f"{'metric':<10}{'value':>10}"]
        for k in ("mAP", "AP50", "AP75", "AR"):
            lines.append(f"{k:<10}{getattr(self, k):>10.4f}")
        lines.append("")
        lines.append(f"{'IoU':<6}{'cut':>6}{'P':>9}{'R':>9}{'F1':>9}")
        for p in self.prf:
            lines.append(f"{p.iou:<6.2f}{p.score_cut:>6.2f}{p.precision:>9.4f}{p.recall:>9.4f}{p.f1:>9.4f}")
        return "\n".join(lines) + "\n"

    def write(self, json_path: str | Path, text_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        if text_path is not None:
            Path(text_path).write_text(self.to_text())


def f1_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def match_detections(pred_boxes, gt_boxes, iou_thr: float) -> np.ndarray:
    """Greedy TP flags for predictions already sorted by descending score.

    Each prediction claims the unclaimed ground truth of highest IoU, if that
    IoU reaches ``iou_thr``; equal IoUs go to the lowest ground-truth index.
    """
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {iou_thr}")
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    flags = np.zeros(len(pred_boxes), dtype=bool)
    if len(pred_boxes) == 0 or len(gt_boxes) == 0:
        return flags
    ious = pairwise_iou(pred_boxes, gt_boxes)
    claimed = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(pred_boxes)):
        cand = np.where(claimed, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr:
            claimed[j] = True
            flags[i] = True
    return flags


def average_precision(flags, n_gt: int) -> float:
    """101-point interpolated AP from TP flags in rank order."""
    flags = np.asarray(flags, dtype=bool)
    if n_gt <= 0 or flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def _ranked(preds: dict, scores: dict, ids) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    out = {}
    for i in ids:
        b = np.asarray(preds.get(i, np.zeros((0, 4)))).reshape(-1, 4)
        s = np.asarray(scores.get(i, np.zeros(0)), dtype=np.float64)
        order = np.argsort(-s, kind="mergesort")[:MAX_DETS]
        out[i] = (b[order], s[order])
    return out


def evaluate_threshold(ranked: dict, gts: dict, iou_thr: float) -> tuple[float, float]:
    """(AP, recall) at one IoU threshold across images."""
    all_scores, all_flags = [], []
    n_gt = 0
    matched = 0
    for i in sorted(gts):
        boxes, scores = ranked[i]
        flags = match_detections(boxes, gts[i], iou_thr)
        all_scores.append(scores)
        all_flags.append(flags)
        n_gt += len(gts[i])
        matched += int(flags.sum())
    if not all_scores:
        return 0.0, 0.0
    scores = np.concatenate(all_scores)
    flags = np.concatenate(all_flags)
    order = np.argsort(-scores, kind="mergesort")
    ap = average_precision(flags[order], n_gt)
    return ap, (matched / n_gt if n_gt else 0.0)


def prf(ranked: dict, gts: dict, iou_thr: float, score_cut: float = 0.5) -> PRF:
    tp = fp = n_gt = 0
    for i in sorted(gts):
        boxes, scores = ranked[i]
        keep = scores >= score_cut
        flags = match_detections(boxes[keep], gts[i], iou_thr)
        tp += int(flags.sum())
        fp += int((~flags).sum())
        n_gt += len(gts[i])
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / n_gt if n_gt else 0.0
    return PRF(float(iou_thr), p, r, f1_score(p, r), float(score_cut))


def _check_ids(pred: AnnotationFile, gt: AnnotationFile) -> None:
    known = {int(im["id"]) for im in gt.images}
    unknown = sorted({a.image_id for a in pred.annotations} - known)
    if unknown:
        raise ValidationError(f"predictions reference unknown image ids {unknown[:5]}")


def evaluate(pred_boxes: dict, pred_scores: dict, gt_boxes: dict,
             prf_thresholds=(0.8, 0.9), score_cut: float = 0.5) -> MetricsReport:
    """Metrics from per-image arrays keyed by image id (``gt_boxes`` defines the image set)."""
    unknown = set(pred_boxes) - set(gt_boxes)
    if unknown:
        raise ValidationError(f"predictions reference unknown image ids {sorted(unknown)[:5]}")
    ranked = _ranked(pred_boxes, pred_scores, gt_boxes.keys())
    aps, recalls = [], []
    for thr in IOU_THRESHOLDS:
        ap, rec = evaluate_threshold(ranked, gt_boxes, float(thr))
        aps.append(ap)
        recalls.append(rec)
    rep = MetricsReport(
        mAP=float(np.mean(aps)), AP50=aps[0], AP75=aps[5], AR=float(np.mean(recalls)),
        prf=[prf(ranked, gt_boxes, t, score_cut) for t in prf_thresholds],
    )
    return rep


def coco_report(pred: AnnotationFile, gt: AnnotationFile, score_cut: float = 0.5) -> MetricsReport:
    _check_ids(pred, gt)
    return evaluate(pred.boxes_by_image(), pred.scores_by_image(), gt.boxes_by_image(), score_cut=score_cut)


def prf_at_iou(pred: AnnotationFile, gt: AnnotationFile, thr: float, score_cut: float = 0.5) -> PRF:
    if not 0.0 < thr <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {thr}")
    _check_ids(pred, gt)
    gts = gt.boxes_by_image()
    ranked = _ranked(pred.boxes_by_image(), pred.scores_by_image(), gts.keys())
    return prf(ranked, gts, thr, score_cut)
