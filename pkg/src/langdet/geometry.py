"""Box representations, IoU/GIoU and the L1+GIoU regression cost.

Scalar entry points (``Box``, ``iou``, ``giou``, ``box_cost``) operate on
single boxes; the ``*_arrays`` helpers are the vectorized forms used for
cost matrices and training, and carry analytic gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np


@dataclass(frozen=True)
class Box:
    """Center-format box in normalized image coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside [0,1]: {vals}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size outside (0,1]: {vals}")

    @classmethod
    def from_array(cls, a) -> "Box":
        cx, cy, w, h = (float(x) for x in a)
        return cls(cx, cy, w, h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class BoxCorners:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"inverted corners {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class MatchWeights:
    """Weights of the matching cost: classification, L1 and GIoU terms."""

    mu_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0

    def __post_init__(self):
        for name in ("mu_cls", "lambda_l1", "lambda_giou"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def to_corners(b: Box) -> BoxCorners:
    return BoxCorners(b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)


def _as_corners(b) -> np.ndarray:
    if isinstance(b, BoxCorners):
        return b.as_array()
    if isinstance(b, Box):
        return to_corners(b).as_array()
    return np.asarray(b, dtype=np.float64)


def iou(a: BoxCorners, b: BoxCorners) -> float:
    return float(iou_arrays(_as_corners(a), _as_corners(b)))


def giou(a: BoxCorners, b: BoxCorners) -> float:
    return float(giou_arrays(_as_corners(a), _as_corners(b))[0])


def box_cost(pred: Box, gt: Box, weights: MatchWeights = MatchWeights()) -> float:
    return float(box_cost_arrays(pred.as_array(), gt.as_array(), weights)[0][0])


# ---------------------------------------------------------------------------
# vectorized forms; arrays have a trailing dimension of 4


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def iou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of corner boxes, broadcasting over leading dimensions."""
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(len(a), len(b)) IoU matrix of corner boxes."""
    return iou_arrays(np.asarray(a)[:, None, :], np.asarray(b)[None, :, :])


def giou_arrays(p: np.ndarray, g: np.ndarray):
    """GIoU of corner boxes and its gradient with respect to ``p``.

    Returns ``(giou, dgiou_dp)``. Subgradients at max/min ties follow ``p``.
    """
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    p, g = np.broadcast_arrays(p, g)
    px1, py1, px2, py2 = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    gx1, gy1, gx2, gy2 = g[..., 0], g[..., 1], g[..., 2], g[..., 3]

    ix1_p = px1 >= gx1
    ix2_p = px2 <= gx2
    iy1_p = py1 >= gy1
    iy2_p = py2 <= gy2
    iw_raw = np.where(ix2_p, px2, gx2) - np.where(ix1_p, px1, gx1)
    ih_raw = np.where(iy2_p, py2, gy2) - np.where(iy1_p, py1, gy1)
    iw_pos = iw_raw > 0
    ih_pos = ih_raw > 0
    iw = np.where(iw_pos, iw_raw, 0.0)
    ih = np.where(ih_pos, ih_raw, 0.0)
    inter = iw * ih

    pw, ph = px2 - px1, py2 - py1
    area_p = pw * ph
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter

    ex1_p = px1 <= gx1
    ex2_p = px2 >= gx2
    ey1_p = py1 <= gy1
    ey2_p = py2 >= gy2
    ew = np.where(ex2_p, px2, gx2) - np.where(ex1_p, px1, gx1)
    eh = np.where(ey2_p, py2, gy2) - np.where(ey1_p, py1, gy1)
    encl = ew * eh

    value = inter / union - 1.0 + union / encl

    d_inter = 1.0 / union + inter / union**2 - 1.0 / encl
    d_area_p = -inter / union**2 + 1.0 / encl
    d_encl = -union / encl**2

    gate_w = ih * iw_pos
    gate_h = iw * ih_pos
    grad = np.empty(p.shape, dtype=np.float64)
    grad[..., 0] = -(d_inter * gate_w * ix1_p + d_area_p * ph + d_encl * eh * ex1_p)
    grad[..., 2] = d_inter * gate_w * ix2_p + d_area_p * ph + d_encl * eh * ex2_p
    grad[..., 1] = -(d_inter * gate_h * iy1_p + d_area_p * pw + d_encl * ew * ey1_p)
    grad[..., 3] = d_inter * gate_h * iy2_p + d_area_p * pw + d_encl * ew * ey2_p
    return value, grad


def _corner_grad_to_center(gc: np.ndarray) -> np.ndarray:
    out = np.empty_like(gc)
    out[..., 0] = gc[..., 0] + gc[..., 2]
    out[..., 1] = gc[..., 1] + gc[..., 3]
    out[..., 2] = (gc[..., 2] - gc[..., 0]) / 2
    out[..., 3] = (gc[..., 3] - gc[..., 1]) / 2
    return out


def box_cost_arrays(pred: np.ndarray, gt: np.ndarray, weights: MatchWeights = MatchWeights()):
    """L1 (center form) plus ``1 - GIoU`` cost, with gradient w.r.t. ``pred``.

    ``pred`` and ``gt`` are center-format arrays broadcast against each other.
    Returns ``(cost, dcost_dpred)`` where cost has the broadcast leading shape.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    diff = pred - gt
    l1 = np.abs(diff).sum(axis=-1)
    g, dg_corners = giou_arrays(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt))
    cost = weights.lambda_l1 * l1 + weights.lambda_giou * (1.0 - g)
    grad = weights.lambda_l1 * np.sign(diff) - weights.lambda_giou * _corner_grad_to_center(dg_corners)
    return np.atleast_1d(cost), grad


def pairwise_box_cost(pred: np.ndarray, gt: np.ndarray, weights: MatchWeights = MatchWeights()) -> np.ndarray:
    """(len(gt), len(pred)) box-cost matrix; rows are ground truths."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if len(pred) == 0 or len(gt) == 0:
        return np.zeros((len(gt), len(pred)))
    cost, _ = box_cost_arrays(pred[None, :, :], gt[:, None, :], weights)
    return cost
