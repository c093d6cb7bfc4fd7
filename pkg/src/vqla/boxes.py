"""Axis-aligned box geometry: conversions, IoU/GIoU and the box losses.

Plain functions take anything array-like with a trailing axis of 4 and are
vectorized over leading axes.  ``giou_loss`` and ``l1_box_loss`` operate on
:class:`~vqla.tensor.Tensor` predictions so they can be trained through.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


class BoxXYXY(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float


class BoxCXCYWH(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


def cxcywh_to_xyxy(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    if (b[..., 2:] < 0).any():
        raise ValueError("box width and height must be nonnegative")
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    wh = b[..., 2:] - b[..., :2]
    if (wh < 0).any():
        raise ValueError("box has x_min > x_max or y_min > y_max")
    return np.concatenate([b[..., :2] + wh / 2, wh], axis=-1)


def convert(box, target: str):
    """Convert a single box to ``"xyxy"`` or ``"cxcywh"``.

    The source convention is taken from the box type; plain sequences are
    assumed to be in the opposite convention of ``target``.
    """
    if target == "xyxy":
        if isinstance(box, BoxXYXY):
            return box
        return BoxXYXY(*cxcywh_to_xyxy(box).tolist())
    if target == "cxcywh":
        if isinstance(box, BoxCXCYWH):
            return box
        return BoxCXCYWH(*xyxy_to_cxcywh(box).tolist())
    raise ValueError(f"unknown box convention {target!r}")


def box_area(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def enclosing_box(a, b) -> np.ndarray:
    """Smallest axis-aligned box containing both ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([np.minimum(a[..., :2], b[..., :2]),
                           np.maximum(a[..., 2:], b[..., 2:])], axis=-1)


def _overlap(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lo = np.maximum(a[..., :2], b[..., :2])
    hi = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(hi - lo, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a) + box_area(b) - inter
    return inter, union


def iou(a, b):
    """Intersection over union; 0 when the union has zero area."""
    inter, union = _overlap(a, b)
    out = np.divide(inter, union, out=np.zeros_like(union), where=union > 0)
    return float(out) if out.ndim == 0 else out


def giou(a, b):
    """Generalized IoU in [-1, 1]; 0 when the enclosing box has zero area."""
    inter, union = _overlap(a, b)
    hull = box_area(enclosing_box(a, b))
    ratio = np.divide(inter, union, out=np.zeros_like(union), where=union > 0)
    empty = np.divide(hull - union, hull, out=np.zeros_like(hull), where=hull > 0)
    out = np.where(hull > 0, ratio - empty, 0.0)
    return float(out) if out.ndim == 0 else out


# -- differentiable losses ---------------------------------------------------

def cxcywh_to_xyxy_tensor(boxes: Tensor) -> Tensor:
    """Differentiable conversion of ``[B, 4]`` center-size boxes; w, h clamped at 0."""
    c = boxes[:, 0:2]
    half = T.clamp(boxes[:, 2:4], 0.0, None) * 0.5
    return T.concat([c - half, c + half], axis=1)


def giou_tensor(pred_xyxy: Tensor, gt_xyxy: Tensor) -> Tensor:
    """Per-row GIoU of ``[B, 4]`` corner boxes."""
    px0, py0, px1, py1 = (pred_xyxy[:, i] for i in range(4))
    gx0, gy0, gx1, gy1 = (gt_xyxy[:, i] for i in range(4))
    area_p = (px1 - px0) * (py1 - py0)
    area_g = (gx1 - gx0) * (gy1 - gy0)
    iw = T.clamp(T.minimum(px1, gx1) - T.maximum(px0, gx0), 0.0, None)
    ih = T.clamp(T.minimum(py1, gy1) - T.maximum(py0, gy0), 0.0, None)
    inter = iw * ih
    union = area_p + area_g - inter
    hull = (T.maximum(px1, gx1) - T.minimum(px0, gx0)) * (T.maximum(py1, gy1) - T.minimum(py0, gy0))
    return T.safe_div(inter, union) - T.safe_div(hull - union, hull)


def giou_loss(pred: Tensor, gt) -> Tensor:
    """Mean of ``1 - GIoU`` over a batch of normalized center-size boxes."""
    pred = _as_rows(pred)
    gt = _as_rows(T._as_tensor(gt, pred.dtype))
    g = giou_tensor(cxcywh_to_xyxy_tensor(pred), cxcywh_to_xyxy_tensor(gt))
    return T.mean(1.0 - g)


def l1_box_loss(pred: Tensor, gt) -> Tensor:
    """Mean absolute difference over the 4 components, averaged over the batch."""
    pred = _as_rows(pred)
    gt = _as_rows(T._as_tensor(gt, pred.dtype))
    return T.mean(T.abs_(pred - gt))


def _as_rows(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    return x.reshape(1, 4) if x.ndim == 1 else x


# -- rasterization oracle ----------------------------------------------------

def rasterized_iou_oracle(a, b, grid: int = 512) -> tuple[float, float]:
    """Estimate (IoU, GIoU) by counting cell centers on a grid over the enclosing box.

    Independent of the analytic formulas: areas are never computed from
    coordinates, only from cell counts.
    """
    if grid < 64:
        raise ValueError("grid must be at least 64")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x0, y0 = min(a[0], b[0]), min(a[1], b[1])
    x1, y1 = max(a[2], b[2]), max(a[3], b[3])
    if x1 <= x0 or y1 <= y0:
        return 0.0, 0.0
    xs = x0 + (np.arange(grid) + 0.5) * (x1 - x0) / grid
    ys = y0 + (np.arange(grid) + 0.5) * (y1 - y0) / grid
    in_a = ((xs >= a[0]) & (xs <= a[2]))[None, :] & ((ys >= a[1]) & (ys <= a[3]))[:, None]
    in_b = ((xs >= b[0]) & (xs <= b[2]))[None, :] & ((ys >= b[1]) & (ys <= b[3]))[:, None]
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    total = grid * grid
    iou_est = inter / union if union else 0.0
    return iou_est, iou_est - (total - union) / total
