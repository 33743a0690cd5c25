"""Segmentation cross-entropy, YOLO-style detection loss and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

IGNORE_LABEL = 255


@dataclass(frozen=True)
class LossWeights:
    w_seg: float = 1.0
    w_det: float = 1.0

    def __post_init__(self):
        if self.w_seg < 0 or self.w_det < 0:
            raise ValueError("loss weights must be non-negative")
        if self.w_seg == 0 and self.w_det == 0:
            raise ValueError("loss weights cannot both be zero")


@dataclass
class DetTargets:
    """Ground truth for one image: rows of (class_idx, cx, cy, w, h), normalised."""

    boxes: list = field(default_factory=list)

    def validate(self, num_classes: int) -> None:
        for cls, cx, cy, w, h in self.boxes:
            if not 0 <= int(cls) < num_classes:
                raise ValueError(f"class index {cls} out of range")
            if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
                raise ValueError(f"box centre ({cx}, {cy}) outside [0, 1]")
            if w <= 0 or h <= 0:
                raise ValueError("box width and height must be positive")


@dataclass
class AssignedTargets:
    """Dense per-(anchor, cell) targets for a batch.

    coords: (N, A, 4, Hg, Wg) holding (x offset in cell, y offset, log(w/pw), log(h/ph))
    resp:   (N, A, Hg, Wg) 1 where an anchor is responsible for a GT box
    onehot: (N, A, C, Hg, Wg)
    """

    coords: np.ndarray
    resp: np.ndarray
    onehot: np.ndarray
    collisions: int = 0


def shape_iou(w: float, h: float, pw: float, ph: float) -> float:
    """IoU of two boxes sharing a centre."""
    inter = min(w, pw) * min(h, ph)
    return inter / (w * h + pw * ph - inter)


def responsible_cell(cx: float, cy: float, grid: tuple) -> tuple:
    """(column, row) of the grid cell containing a normalised centre."""
    hg, wg = grid
    return min(int(np.floor(cx * wg)), wg - 1), min(int(np.floor(cy * hg)), hg - 1)


def best_anchor(w: float, h: float, anchors: Sequence) -> int:
    ious = [shape_iou(w, h, pw, ph) for pw, ph in anchors]
    return int(np.argmax(ious))


def assign_targets(gts: Sequence[DetTargets], grid: tuple, anchors: Sequence,
                   num_classes: int, dtype=np.float32) -> AssignedTargets:
    """One responsible (cell, anchor) per GT box; a later box landing on the
    same slot overwrites the earlier one and is counted as a collision."""
    hg, wg = grid
    n, a = len(gts), len(anchors)
    coords = np.zeros((n, a, 4, hg, wg), dtype=dtype)
    resp = np.zeros((n, a, hg, wg), dtype=dtype)
    onehot = np.zeros((n, a, num_classes, hg, wg), dtype=dtype)
    collisions = 0
    for i, gt in enumerate(gts):
        gt.validate(num_classes)
        for cls, cx, cy, w, h in gt.boxes:
            col, row = responsible_cell(cx, cy, grid)
            gw, gh = w * wg, h * hg
            k = best_anchor(gw, gh, anchors)
            if resp[i, k, row, col]:
                collisions += 1
                onehot[i, k, :, row, col] = 0
            pw, ph = anchors[k]
            coords[i, k, :, row, col] = (cx * wg - col, cy * hg - row, np.log(gw / pw), np.log(gh / ph))
            resp[i, k, row, col] = 1
            onehot[i, k, int(cls), row, col] = 1
    return AssignedTargets(coords, resp, onehot, collisions)


def seg_loss(logits: Tensor, labels: np.ndarray, valid_mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean pixel cross-entropy over valid pixels (label != 255 and mask set)."""
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != IGNORE_LABEL
    if valid_mask is not None:
        valid &= np.asarray(valid_mask, dtype=bool)
    if np.any(labels[valid] >= c) or np.any(labels[valid] < 0):
        raise ValueError("label index out of range")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("seg_loss: no valid pixels")
    onehot = np.zeros((n, c, h, w), dtype=logits.dtype)
    ni, yi, xi = np.nonzero(valid)
    onehot[ni, labels[valid].astype(np.intp), yi, xi] = 1
    picked = T.sum(T.mul(T.log_softmax(logits, axis=1), onehot))
    return T.mul(picked, -1.0 / count)


def det_loss(raw: Tensor, targets: AssignedTargets, num_classes: int,
             lambda_coord: float = 5.0, lambda_noobj: float = 0.5) -> Tensor:
    """Sum-squared YOLO loss, divided by the batch size."""
    n, ch, hg, wg = raw.shape
    per = 5 + num_classes
    if ch % per:
        raise ValueError(f"channel count {ch} is not a multiple of {per}")
    a = ch // per
    if targets.resp.shape != (n, a, hg, wg):
        raise ValueError(f"target shape {targets.resp.shape} does not match raw {raw.shape}")
    dt = raw.dtype
    resp = targets.resp.astype(dt)
    r = T.reshape(raw, (n, a, per, hg, wg))

    xy = T.sigmoid(r[:, :, 0:2])
    wh = r[:, :, 2:4]
    obj = T.sigmoid(r[:, :, 4])
    cls = T.softmax(r[:, :, 5:], axis=2)

    m4 = resp[:, :, None]
    coord = T.sum(T.mul(T.square(T.sub(xy, targets.coords[:, :, 0:2].astype(dt))), np.broadcast_to(m4, xy.shape).copy()))
    coord = T.add(coord, T.sum(T.mul(T.square(T.sub(wh, targets.coords[:, :, 2:4].astype(dt))),
                                     np.broadcast_to(m4, wh.shape).copy())))
    obj_pos = T.sum(T.mul(T.square(T.sub(obj, 1.0)), resp))
    obj_neg = T.sum(T.mul(T.square(obj), 1.0 - resp))
    cls_err = T.sum(T.mul(T.square(T.sub(cls, targets.onehot.astype(dt))),
                          np.broadcast_to(m4, cls.shape).copy()))
    total = T.add(T.add(T.mul(coord, lambda_coord), obj_pos), T.add(T.mul(obj_neg, lambda_noobj), cls_err))
    return T.mul(total, 1.0 / n)


def mtl_loss(l_seg: Optional[Tensor], l_det: Optional[Tensor], w: LossWeights) -> Tensor:
    """``w_seg * l_seg + w_det * l_det``; a missing task contributes nothing."""
    terms = []
    if l_seg is not None:
        terms.append(T.mul(l_seg, w.w_seg))
    if l_det is not None:
        terms.append(T.mul(l_det, w.w_det))
    if not terms:
        raise ValueError("mtl_loss needs at least one task loss")
    return terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
