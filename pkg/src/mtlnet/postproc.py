"""Decoding raw head outputs: YOLO boxes, NMS, segmentation argmax, overlays."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .tensor import Tensor, _sigmoid_np, _softmax_np

UNEVALUATED = 255

# road green, sidewalk pink; indices follow the default seg class order
SEG_TINT = {1: (0, 200, 0), 2: (255, 105, 180), 3: (255, 220, 0)}
BOX_COLORS = [(255, 40, 40), (40, 120, 255), (255, 200, 0), (200, 0, 255), (0, 255, 255)]


@dataclass(frozen=True)
class Detection:
    class_idx: int
    score: float
    box: tuple  # (x1, y1, x2, y2) pixels

    def to_json(self, image_id: str, class_names: Optional[Sequence[str]] = None) -> dict:
        cls = class_names[self.class_idx] if class_names else self.class_idx
        return {"image_id": image_id, "class": cls, "score": float(self.score),
                "box": [float(v) for v in self.box]}


@dataclass
class SegMask:
    labels: np.ndarray  # [H, W] uint8 class indices
    horizon_row: Optional[int] = None


def decode_boxes(raw, anchors: Sequence, img_size: tuple, num_classes: int) -> list:
    """All anchor predictions of every image as Detections (before NMS).

    ``img_size`` is (H, W) in pixels. Boxes are clipped to the image; boxes
    that vanish after clipping are dropped.
    """
    data = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    n, ch, hg, wg = data.shape
    a = len(anchors)
    per = 5 + num_classes
    if ch != a * per:
        raise ValueError(f"raw has {ch} channels, expected {a}*(5+{num_classes})")
    r = data.astype(np.float64).reshape(n, a, per, hg, wg)
    h_img, w_img = img_size
    cx = np.arange(wg)[None, None, :]
    cy = np.arange(hg)[None, :, None]
    aw = np.array([p[0] for p in anchors], dtype=np.float64)[:, None, None]
    ah = np.array([p[1] for p in anchors], dtype=np.float64)[:, None, None]
    out = []
    for i in range(n):
        bx = (_sigmoid_np(r[i, :, 0]) + cx) / wg
        by = (_sigmoid_np(r[i, :, 1]) + cy) / hg
        bw = aw * np.exp(r[i, :, 2]) / wg
        bh = ah * np.exp(r[i, :, 3]) / hg
        obj = _sigmoid_np(r[i, :, 4])
        probs = _softmax_np(r[i, :, 5:], axis=1)
        cls = probs.argmax(axis=1)
        score = obj * probs.max(axis=1)
        x1 = np.clip((bx - bw / 2) * w_img, 0, w_img)
        x2 = np.clip((bx + bw / 2) * w_img, 0, w_img)
        y1 = np.clip((by - bh / 2) * h_img, 0, h_img)
        y2 = np.clip((by + bh / 2) * h_img, 0, h_img)
        dets = []
        # anchor-major, then row, then column
        for k, y, x in np.ndindex(a, hg, wg):
            if x2[k, y, x] > x1[k, y, x] and y2[k, y, x] > y1[k, y, x]:
                dets.append(Detection(int(cls[k, y, x]), float(score[k, y, x]),
                                      (float(x1[k, y, x]), float(y1[k, y, x]),
                                       float(x2[k, y, x]), float(y2[k, y, x]))))
        out.append(dets)
    return out


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    aa = (a[2] - a[0]) * (a[3] - a[1])
    ab = (b[2] - b[0]) * (b[3] - b[1])
    if aa <= 0 or ab <= 0:
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aa + ab - inter)


def _nms_key(d: Detection):
    return (-d.score, d.box[0], d.box[1])


def nms(dets: Iterable[Detection], iou_thresh: float = 0.5, score_thresh: float = 0.0) -> list:
    """Per-class greedy suppression. Output is ordered by (score desc, x1, y1)."""
    if not (0 <= iou_thresh <= 1 and 0 <= score_thresh <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    cand = sorted((d for d in dets if d.score >= score_thresh), key=_nms_key)
    if not cand:
        return []
    boxes = np.array([d.box for d in cand], dtype=np.float64)
    classes = np.array([d.class_idx for d in cand])
    alive = np.ones(len(cand), dtype=bool)
    keep = []
    for i in range(len(cand)):
        if not alive[i]:
            continue
        keep.append(cand[i])
        rest = np.nonzero(alive & (classes == classes[i]))[0]
        rest = rest[rest > i]
        if rest.size:
            ious = _iou_many(boxes[i], boxes[rest])
            alive[rest[ious > iou_thresh]] = False
    return keep


def _iou_many(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    # same arithmetic as box_iou so the vectorised path agrees bit-for-bit
    aa = (box[2] - box[0]) * (box[3] - box[1])
    ab = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    iw = np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0])
    ih = np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1])
    inter = iw * ih
    ok = (iw > 0) & (ih > 0) & (ab > 0) & (aa > 0)
    out = np.zeros(len(others))
    out[ok] = inter[ok] / (aa + ab[ok] - inter[ok])
    return out


def seg_argmax(logits, horizon_row: Optional[int] = None) -> list:
    """Per-pixel class for each image; rows above ``horizon_row`` are marked
    :data:`UNEVALUATED` and never looked at."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim == 3:
        data = data[None]
    n, c, h, w = data.shape
    if horizon_row is not None and not 0 <= horizon_row <= h:
        raise ValueError(f"horizon_row {horizon_row} outside [0, {h}]")
    start = horizon_row or 0
    masks = []
    for i in range(n):
        lab = np.full((h, w), UNEVALUATED, dtype=np.uint8)
        lab[start:] = data[i, :, start:].argmax(axis=0)
        masks.append(SegMask(lab, horizon_row))
    return masks


def horizon_mask(h: int, w: int, horizon_row: Optional[int]) -> np.ndarray:
    """Boolean [H, W] mask of evaluated pixels."""
    m = np.ones((h, w), dtype=bool)
    if horizon_row:
        m[:horizon_row] = False
    return m


def postprocess(raw_det, anchors, img_size, num_classes, iou_thresh=0.5, score_thresh=0.05) -> list:
    return [nms(d, iou_thresh, score_thresh) for d in decode_boxes(raw_det, anchors, img_size, num_classes)]


def write_detections_jsonl(fh, image_id: str, dets: Sequence[Detection],
                           class_names: Optional[Sequence[str]] = None) -> None:
    for d in dets:
        fh.write(json.dumps(d.to_json(image_id, class_names), sort_keys=True) + "\n")


def read_detections_jsonl(lines: Iterable[str], class_names: Optional[Sequence[str]] = None) -> dict:
    out: dict = {}
    for line in lines:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        cls = rec["class"]
        if isinstance(cls, str):
            cls = list(class_names).index(cls)
        out.setdefault(rec["image_id"], []).append(Detection(int(cls), float(rec["score"]), tuple(rec["box"])))
    return out


def render_overlay(image: np.ndarray, mask: Optional[SegMask], dets: Sequence[Detection],
                   alpha: float = 0.45) -> np.ndarray:
    """uint8 [H, W, 3] picture: seg tint blended over the image, box outlines on top."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3:
        img = img.transpose(1, 2, 0)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    out = img.astype(np.float64)
    if mask is not None:
        for cls, color in SEG_TINT.items():
            sel = mask.labels == cls
            out[sel] = (1 - alpha) * out[sel] + alpha * np.array(color, dtype=np.float64)
    out = np.clip(np.round(out), 0, 255).astype(np.uint8)
    h, w = out.shape[:2]
    for d in dets:
        color = BOX_COLORS[d.class_idx % len(BOX_COLORS)]
        x1, y1 = int(np.floor(d.box[0])), int(np.floor(d.box[1]))
        x2, y2 = min(int(np.ceil(d.box[2])), w) - 1, min(int(np.ceil(d.box[3])), h) - 1
        if x2 < x1 or y2 < y1:
            continue
        out[y1, x1:x2 + 1] = color
        out[y2, x1:x2 + 1] = color
        out[y1:y2 + 1, x1] = color
        out[y1:y2 + 1, x2] = color
    return out
