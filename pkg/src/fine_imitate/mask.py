"""Near-object imitation masks.

All masks are boolean ``(H, W)`` arrays over the feature lattice; cell
``(i, j)`` is ``values[j, i]``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .geometry import AnchorGrid, Box, boxes_to_array, iou_matrix

logger = logging.getLogger(__name__)

Rect = Tuple[float, float, float, float]


@dataclass
class ImitationMask:
    values: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=bool)

    @property
    def n_positive(self) -> int:
        return int(np.count_nonzero(self.values))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def cells(self) -> List[Tuple[int, int]]:
        """Set cells as ``(i, j)`` pairs in row-major order."""
        js, is_ = np.nonzero(self.values)
        return [(int(i), int(j)) for j, i in zip(js, is_)]

    def __or__(self, other: "ImitationMask") -> "ImitationMask":
        return ImitationMask(self.values | other.values)


@dataclass(frozen=True)
class MaskConfig:
    psi: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError(f"psi must lie in [0, 1], got {self.psi}")


@dataclass
class GtTrace:
    gt_index: int
    max_iou: float
    threshold: float
    kept_count: int


@dataclass
class MaskTrace:
    per_gt: List[GtTrace] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


def _gt_ious(gts: Sequence[Box], grid: AnchorGrid) -> np.ndarray:
    """IOU of every anchor with every gt, shape (G, H, W, K)."""
    if not gts:
        return np.zeros((0, grid.feat_h, grid.feat_w, grid.num_anchors))
    ious = iou_matrix(grid.anchors, boxes_to_array(gts))  # (H, W, K, G)
    return np.moveaxis(ious, -1, 0)


def estimate_mask(gts: Sequence[Box], grid: AnchorGrid, cfg: MaskConfig = MaskConfig()
                  ) -> Tuple[ImitationMask, MaskTrace]:
    """Adaptive per-object mask: keep cells where some anchor beats ``psi * max IOU``.

    ``psi == 0`` selects every cell (plain full-feature imitation).
    """
    shape = (grid.feat_h, grid.feat_w)
    trace = MaskTrace()
    ious = _gt_ious(gts, grid)
    if cfg.psi == 0.0:
        for g, m in enumerate(ious):
            trace.per_gt.append(GtTrace(g, float(m.max()), 0.0, shape[0] * shape[1]))
        return ImitationMask(np.ones(shape, dtype=bool)), trace

    out = np.zeros(shape, dtype=bool)
    for g, m in enumerate(ious):
        best = float(m.max())
        thresh = cfg.psi * best
        keep = (m > thresh).any(axis=-1)
        if best == 0.0:
            msg = f"gt {g} overlaps no anchor; it contributes no imitation cells"
            trace.warnings.append(msg)
            logger.warning(msg)
        trace.per_gt.append(GtTrace(g, best, thresh, int(keep.sum())))
        out |= keep
    return ImitationMask(out), trace


def estimate_mask_hard(gts: Sequence[Box], grid: AnchorGrid, f_const: float) -> ImitationMask:
    """Fixed-threshold variant: keep cells where some anchor IOU exceeds ``f_const``."""
    if not 0.0 <= f_const <= 1.0:
        raise ValueError(f"f_const must lie in [0, 1], got {f_const}")
    ious = _gt_ious(gts, grid)
    keep = (ious > f_const).any(axis=-1).any(axis=0) if len(gts) else np.zeros(
        (grid.feat_h, grid.feat_w), dtype=bool)
    return ImitationMask(keep)


def gt_projection_mask(gts: Sequence[Box], stride: int, feat_w: int, feat_h: int) -> ImitationMask:
    """Cells whose footprint overlaps (positive area) a gt box scaled by ``1/stride``."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    out = np.zeros((feat_h, feat_w), dtype=bool)
    cells_x = np.arange(feat_w)
    cells_y = np.arange(feat_h)
    for b in gts:
        in_x = (cells_x < b.x2 / stride) & (cells_x + 1 > b.x1 / stride)
        in_y = (cells_y < b.y2 / stride) & (cells_y + 1 > b.y1 / stride)
        out |= in_y[:, None] & in_x[None, :]
    return ImitationMask(out)


def empty_mask(feat_w: int, feat_h: int) -> ImitationMask:
    return ImitationMask(np.zeros((feat_h, feat_w), dtype=bool))


def mask_to_overlay(mask: ImitationMask, stride: int, image_w: float, image_h: float) -> List[Rect]:
    rects = []
    for i, j in mask.cells():
        x1, y1 = i * stride, j * stride
        x2, y2 = min((i + 1) * stride, image_w), min((j + 1) * stride, image_h)
        if x1 < image_w and y1 < image_h:
            rects.append((float(x1), float(y1), float(x2), float(y2)))
    return rects


def overlay_to_json(rects: Sequence[Rect]) -> str:
    return json.dumps([{"x1": r[0], "y1": r[1], "x2": r[2], "y2": r[3]} for r in rects])


def render_overlay(image: np.ndarray, rects: Sequence[Rect], gts: Sequence[Box] = (),
                   alpha: float = 0.45, color=(255, 64, 0)):
    """Blend highlighted cells onto a grayscale ``(H, W)`` or ``(H, W, 1)`` image in ``[0, 1]``.

    Returns a ``PIL.Image`` (RGB); gt boxes are outlined in green.
    """
    from PIL import Image, ImageDraw

    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., 0]
    rgb = np.repeat((np.clip(img, 0, 1) * 255)[..., None], 3, axis=2)
    hl = np.zeros(img.shape, dtype=bool)
    for x1, y1, x2, y2 in rects:
        hl[int(y1):int(np.ceil(y2)), int(x1):int(np.ceil(x2))] = True
    rgb[hl] = (1 - alpha) * rgb[hl] + alpha * np.array(color, dtype=np.float64)
    pil = Image.fromarray(np.round(rgb).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(pil)
    for b in gts:
        draw.rectangle([b.x1, b.y1, b.x2 - 1, b.y2 - 1], outline=(0, 220, 0))
    return pil
