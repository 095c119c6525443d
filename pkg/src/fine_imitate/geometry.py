"""Boxes, anchor lattices and IOU.

Grid arrays are stored row-major as ``(H, W, K, ...)``: the anchor of cell
``(i, j)`` (``i`` along x, ``j`` along y) and template ``k`` lives at
``[j, i, k]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = -1

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU between ``(..., 4)`` box arrays; result ``a.shape[:-1] + b.shape[:-1]``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lead_a = a.shape[:-1]
    lead_b = b.shape[:-1]
    a = a.reshape(-1, 4)[:, None, :]
    b = b.reshape(-1, 4)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    out = np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out.reshape(lead_a + lead_b)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.stack([b.as_array() for b in boxes])


@dataclass(frozen=True)
class AnchorGrid:
    feat_w: int
    feat_h: int
    stride: int
    scales: tuple
    ratios: tuple
    anchors: np.ndarray = field(repr=False, compare=False)  # (H, W, K, 4)

    @property
    def num_anchors(self) -> int:
        """K, templates per cell."""
        return len(self.scales) * len(self.ratios)

    @property
    def flat(self) -> np.ndarray:
        return self.anchors.reshape(-1, 4)

    def anchor(self, i: int, j: int, k: int) -> Box:
        return Box(*self.anchors[j, i, k])


def anchor_templates(scales: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """(K, 2) widths/heights, scale-major: ``k = scale_idx * len(ratios) + ratio_idx``."""
    sizes = []
    for s in scales:
        for r in ratios:
            sizes.append((s / math.sqrt(r), s * math.sqrt(r)))
    return np.array(sizes, dtype=np.float64)


def build_anchor_grid(feat_w: int, feat_h: int, stride: int,
                      scales: Sequence[float], ratios: Sequence[float]) -> AnchorGrid:
    if feat_w < 1 or feat_h < 1 or stride < 1:
        raise ValueError(f"feat_w, feat_h and stride must be >= 1, got {feat_w}, {feat_h}, {stride}")
    if not scales or not ratios:
        raise ValueError("scales and ratios must be non-empty")
    if any(s <= 0 for s in scales) or any(r <= 0 for r in ratios):
        raise ValueError("scales and ratios must be positive")
    wh = anchor_templates(scales, ratios)
    cx = (np.arange(feat_w) + 0.5) * stride
    cy = (np.arange(feat_h) + 0.5) * stride
    cxg = cx[None, :, None]
    cyg = cy[:, None, None]
    half_w = wh[None, None, :, 0] / 2
    half_h = wh[None, None, :, 1] / 2
    anchors = np.stack(np.broadcast_arrays(cxg - half_w, cyg - half_h, cxg + half_w, cyg + half_h), axis=-1)
    anchors = np.ascontiguousarray(anchors)
    anchors.setflags(write=False)
    return AnchorGrid(feat_w, feat_h, stride, tuple(scales), tuple(ratios), anchors)


@dataclass
class IouMap:
    values: np.ndarray  # (H, W, K)
    gt_index: int = 0


def iou_map(gt: Box, grid: AnchorGrid, gt_index: int = 0) -> IouMap:
    return IouMap(iou_matrix(grid.anchors, gt.as_array()[None])[..., 0], gt_index)


def clip_box_array(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = boxes.copy()
    out[..., 0::2] = np.clip(out[..., 0::2], 0, width)
    out[..., 1::2] = np.clip(out[..., 1::2], 0, height)
    return out


def scale_boxes(boxes: List[Box], factor: float) -> List[Box]:
    return [Box(b.x1 * factor, b.y1 * factor, b.x2 * factor, b.y2 * factor, b.class_id) for b in boxes]
