"""Segmentation IoU, detection AP, and the comparison-table report."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .postproc import UNEVALUATED, SegMask, box_iou

STUDY_COLUMNS = ("STL Seg", "STL Det", "MTL", "MTL_10", "MTL_100")


class ConfusionMatrix:
    """C x C pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate_confusion(pred, gt: np.ndarray, cm: ConfusionMatrix,
                         ignore: int = UNEVALUATED) -> ConfusionMatrix:
    """Add one image. Pixels whose ground truth or prediction carries the
    ignore/unevaluated marker are skipped."""
    p = pred.labels if isinstance(pred, SegMask) else np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    keep = (g != ignore) & (p != ignore)
    gk, pk = g[keep].astype(np.int64), p[keep].astype(np.int64)
    c = cm.num_classes
    if gk.size and (gk.min() < 0 or gk.max() >= c or pk.min() < 0 or pk.max() >= c):
        raise ValueError("class index out of range in confusion accumulation")
    counts = np.bincount(gk * c + pk, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(c, cm.counts + counts)


def seg_iou(cm: ConfusionMatrix) -> tuple:
    """Per-class IoU (``None`` where undefined) and their mean over defined classes."""
    m = cm.counts
    inter = np.diag(m)
    union = m.sum(axis=1) + m.sum(axis=0) - inter
    per = [float(inter[c] / union[c]) if union[c] > 0 else None for c in range(cm.num_classes)]
    defined = [v for v in per if v is not None]
    mean = float(np.mean(defined)) if defined else None
    return per, mean


@dataclass
class PRCurve:
    tp: np.ndarray
    fp: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    num_gt: int


def pr_curve(dets: Sequence, gts: Mapping, class_idx: int, iou_thresh: float = 0.5) -> PRCurve:
    """TP/FP flags for one class.

    ``dets`` is a sequence of (image_id, Detection); ``gts`` maps image_id to a
    list of (class_idx, box). Detections are visited by score (descending),
    ties by image_id then input order; each takes the highest-IoU unmatched GT
    with IoU >= threshold.
    """
    cand = [(i, img, d) for i, (img, d) in enumerate(dets) if d.class_idx == class_idx]
    cand.sort(key=lambda t: (-t[2].score, str(t[1]), t[0]))
    gt_boxes = {img: [b for c, b in rows if c == class_idx] for img, rows in gts.items()}
    used = {img: [False] * len(b) for img, b in gt_boxes.items()}
    num_gt = sum(len(b) for b in gt_boxes.values())
    tp = np.zeros(len(cand))
    fp = np.zeros(len(cand))
    for k, (_, img, d) in enumerate(cand):
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(gt_boxes.get(img, [])):
            if used[img][j]:
                continue
            iou = box_iou(d.box, g)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            used[img][best] = True
            tp[k] = 1
        else:
            fp[k] = 1
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / num_gt if num_gt else np.zeros_like(ctp)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    return PRCurve(tp, fp, precision, recall, num_gt)


def average_precision(curve: PRCurve) -> Optional[float]:
    """All-points interpolated AP: area under the monotone precision envelope."""
    if curve.num_gt == 0:
        return None
    if curve.recall.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], curve.recall, [1.0]])
    mpre = np.concatenate([[0.0], curve.precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def det_ap(dets: Sequence, gts: Mapping, num_classes: int, iou_thresh: float = 0.5) -> tuple:
    """Per-class AP (``None`` for classes without GT) and mAP over classes with GT."""
    per = [average_precision(pr_curve(dets, gts, c, iou_thresh)) for c in range(num_classes)]
    defined = [v for v in per if v is not None]
    return per, (float(np.mean(defined)) if defined else None)


# --------------------------------------------------------------------------
# comparison table


def table_rows(seg_classes: Sequence[str], det_classes: Sequence[str]) -> list:
    """(row label, group, class index or None for the mean row)."""
    rows = [(f"JI {c}", "seg", i) for i, c in enumerate(seg_classes)]
    rows.append(("mean IOU", "seg", None))
    rows += [(f"AP {c}", "det", i) for i, c in enumerate(det_classes)]
    rows.append(("mean AP", "det", None))
    return rows


def report_table(results: Mapping[str, Mapping], seg_classes: Sequence[str],
                 det_classes: Sequence[str], columns: Sequence[str] = STUDY_COLUMNS) -> dict:
    """Build the single-task vs multi-task table.

    ``results[column]`` may hold ``seg_iou`` (per-class list), ``det_ap``
    (per-class list); the mean rows are recomputed from the class rows.
    Absent cells stay ``None`` (blank in CSV).
    """
    rows = table_rows(seg_classes, det_classes)
    cells = {label: {} for label, _, _ in rows}
    for col in columns:
        res = results.get(col) or {}
        for group, key in (("seg", "seg_iou"), ("det", "det_ap")):
            per = res.get(key)
            group_rows = [r for r in rows if r[1] == group]
            if per is None:
                for label, _, _ in group_rows:
                    cells[label][col] = None
                continue
            vals = []
            for label, _, idx in group_rows:
                if idx is None:
                    cells[label][col] = float(np.mean(vals)) if vals else None
                else:
                    v = per[idx]
                    v = None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)
                    cells[label][col] = v
                    if v is not None:
                        vals.append(v)
    return {"columns": list(columns),
            "rows": [{"metric": label, "group": group,
                      "values": {c: cells[label][c] for c in columns}} for label, group, _ in rows]}


def table_csv(table: dict) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["Metrics"] + table["columns"])
    for row in table["rows"]:
        wr.writerow([row["metric"]] + ["" if row["values"][c] is None else f"{row['values'][c]:.4f}"
                                       for c in table["columns"]])
    return buf.getvalue()


def write_report(table: dict, out_dir) -> None:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(table_csv(table))
    (out / "results.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
