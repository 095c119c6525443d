"""Single-stage anchor detector: plain conv backbone, class-aware 1x1 heads.

Head outputs are reshaped to ``(N, H, W, K, num_classes + 1)`` logits (index
0 is background) and ``(N, H, W, K, 4)`` box deltas, matching the anchor
layout of :class:`~fine_imitate.geometry.AnchorGrid`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (AnchorGrid, Box, boxes_to_array, build_anchor_grid,
                       clip_box_array, iou_matrix)
from .numerics import (LayerParams, Params, ShapeError, conv_backward,
                       conv_forward, init_layer, relu_backward, relu_forward)

IGNORE = -1
BACKGROUND = 0
DELTA_CLAMP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class DetectorConfig:
    backbone_widths: Tuple[int, ...] = (16, 32, 64, 64)
    total_stride: int = 8
    num_classes: int = 3
    in_channels: int = 1
    anchor_scales: Tuple[float, ...] = (12.0, 20.0, 32.0)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    sample_cap: int = 64
    neg_per_pos: int = 3
    smooth_l1_beta: float = 1.0 / 9.0
    reg_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))
        object.__setattr__(self, "anchor_scales", tuple(float(s) for s in self.anchor_scales))
        object.__setattr__(self, "anchor_ratios", tuple(float(r) for r in self.anchor_ratios))
        if not self.backbone_widths or any(w < 1 for w in self.backbone_widths):
            raise ValueError(f"backbone widths must be positive, got {self.backbone_widths}")
        n_down = self.total_stride.bit_length() - 1
        if self.total_stride < 1 or 2 ** n_down != self.total_stride:
            raise ValueError(f"total_stride must be a power of two, got {self.total_stride}")
        if len(self.backbone_widths) < n_down:
            raise ValueError(f"{len(self.backbone_widths)} stages cannot reach stride {self.total_stride}")
        if not self.pos_iou > self.neg_iou:
            raise ValueError(f"pos_iou ({self.pos_iou}) must exceed neg_iou ({self.neg_iou})")

    @property
    def strides(self) -> Tuple[int, ...]:
        n_down = self.total_stride.bit_length() - 1
        return tuple(2 if i < n_down else 1 for i in range(len(self.backbone_widths)))

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def feature_channels(self) -> int:
        return self.backbone_widths[-1]

    def grid(self, image_w: int, image_h: int) -> AnchorGrid:
        return build_anchor_grid(image_w // self.total_stride, image_h // self.total_stride,
                                 self.total_stride, self.anchor_scales, self.anchor_ratios)

    def to_dict(self) -> dict:
        return asdict(self)


def layer_names(cfg: DetectorConfig) -> List[str]:
    return [f"backbone/conv{i}" for i in range(len(cfg.backbone_widths))] + ["head/cls", "head/reg"]


def init_params(cfg: DetectorConfig, seed: int) -> Params:
    """He init for the backbone, N(0, 0.01^2) for the heads; biases zero."""
    seeds = np.random.SeedSequence(seed).spawn(len(cfg.backbone_widths) + 2)
    params: Params = {}
    cin = cfg.in_channels
    for i, w in enumerate(cfg.backbone_widths):
        layer = init_layer(3, 3, cin, w, seeds[i])
        params[f"backbone/conv{i}/w"], params[f"backbone/conv{i}/b"] = layer.kernels, layer.biases
        cin = w
    k = cfg.num_anchors
    for name, cout, ss in (("head/cls", k * (cfg.num_classes + 1), seeds[-2]),
                           ("head/reg", k * 4, seeds[-1])):
        rng = np.random.default_rng(ss)
        params[name + "/w"] = rng.standard_normal((1, 1, cin, cout)) * 0.01
        params[name + "/b"] = np.zeros(cout)
    return params


def _layer(params: Params, name: str) -> LayerParams:
    return LayerParams(params[name + "/w"], params[name + "/b"])


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]  # input to each backbone conv
    pre_acts: List[np.ndarray]  # conv outputs before ReLU
    guided: np.ndarray


def backbone_forward(images: np.ndarray, cfg: DetectorConfig, params: Params) -> ForwardCache:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
        raise ShapeError(f"images must be (N, H, W, {cfg.in_channels}), got {x.shape}")
    if x.shape[1] % cfg.total_stride or x.shape[2] % cfg.total_stride:
        raise ShapeError(f"image dims {x.shape[1:3]} not divisible by total stride {cfg.total_stride}")
    inputs, pre = [], []
    for i, s in enumerate(cfg.strides):
        inputs.append(x)
        z = conv_forward(x, _layer(params, f"backbone/conv{i}"), s)
        pre.append(z)
        x = relu_forward(z)
    return ForwardCache(inputs, pre, x)


def heads_forward(guided: np.ndarray, cfg: DetectorConfig, params: Params) -> Tuple[np.ndarray, np.ndarray]:
    n, h, w, _ = guided.shape
    k = cfg.num_anchors
    cls = conv_forward(guided, _layer(params, "head/cls"), 1).reshape(n, h, w, k, cfg.num_classes + 1)
    reg = conv_forward(guided, _layer(params, "head/reg"), 1).reshape(n, h, w, k, 4)
    return cls, reg


def forward(images: np.ndarray, cfg: DetectorConfig, params: Params, return_cache: bool = False):
    """Return ``(guided_feature, cls_logits, reg_preds)`` (plus the cache if asked)."""
    cache = backbone_forward(images, cfg, params)
    cls, reg = heads_forward(cache.guided, cfg, params)
    if return_cache:
        return cache.guided, cls, reg, cache
    return cache.guided, cls, reg


def backward(cache: ForwardCache, cfg: DetectorConfig, params: Params,
             d_cls: np.ndarray, d_reg: np.ndarray,
             d_guided_extra: Optional[np.ndarray] = None) -> Params:
    """Gradients of all detector parameters.

    ``d_guided_extra`` is added to the gradient reaching the guided feature
    (this is where imitation gradients enter the backbone).
    """
    n, h, w, _ = cache.guided.shape
    grads: Params = {}
    d_guided = np.zeros_like(cache.guided)
    for name, d in (("head/cls", d_cls), ("head/reg", d_reg)):
        gx, gl = conv_backward(cache.guided, _layer(params, name), d.reshape(n, h, w, -1), 1)
        d_guided += gx
        grads[name + "/w"], grads[name + "/b"] = gl.kernels, gl.biases
    if d_guided_extra is not None:
        d_guided = d_guided + d_guided_extra
    g = d_guided
    for i in reversed(range(len(cfg.backbone_widths))):
        g = relu_backward(cache.pre_acts[i], g)
        gx, gl = conv_backward(cache.inputs[i], _layer(params, f"backbone/conv{i}"), g, cfg.strides[i])
        grads[f"backbone/conv{i}/w"], grads[f"backbone/conv{i}/b"] = gl.kernels, gl.biases
        g = gx
    return grads


# ---------------------------------------------------------------- box deltas

def encode(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Deltas ``(tx, ty, tw, th)`` of ``gt`` relative to ``anchors`` (both ``(..., 4)`` corners)."""
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    ax = anchors[..., 0] + 0.5 * aw
    ay = anchors[..., 1] + 0.5 * ah
    gw = gt[..., 2] - gt[..., 0]
    gh = gt[..., 3] - gt[..., 1]
    gx = gt[..., 0] + 0.5 * gw
    gy = gt[..., 1] + 0.5 * gh
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    ax = anchors[..., 0] + 0.5 * aw
    ay = anchors[..., 1] + 0.5 * ah
    cx = deltas[..., 0] * aw + ax
    cy = deltas[..., 1] * ah + ay
    w = aw * np.exp(np.minimum(deltas[..., 2], DELTA_CLAMP))
    h = ah * np.exp(np.minimum(deltas[..., 3], DELTA_CLAMP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


# ---------------------------------------------------------- target assignment

@dataclass
class TargetAssignment:
    """Per-anchor training targets over an ``(H, W, K)`` grid.

    ``labels``: -1 ignore, 0 background, ``c + 1`` for gt class ``c``.
    ``sampled``: anchors that enter the loss (``None`` means every
    non-ignored anchor).
    """
    labels: np.ndarray
    reg_targets: np.ndarray
    matched_gt: np.ndarray
    sampled: Optional[np.ndarray] = None

    @property
    def positives(self) -> np.ndarray:
        return self.labels > 0

    @property
    def negatives(self) -> np.ndarray:
        return self.labels == BACKGROUND

    def loss_mask(self) -> np.ndarray:
        return self.labels != IGNORE if self.sampled is None else self.sampled


def assign_targets(grid: AnchorGrid, gts: Sequence[Box], pos_iou: float = 0.7,
                   neg_iou: float = 0.3) -> TargetAssignment:
    shape = grid.anchors.shape[:3]
    labels = np.full(shape, IGNORE, dtype=np.int64)
    reg = np.zeros(shape + (4,))
    matched = np.full(shape, -1, dtype=np.int64)
    if not gts:
        labels[:] = BACKGROUND
        return TargetAssignment(labels, reg, matched)

    gt_arr = boxes_to_array(gts)
    ious = iou_matrix(grid.anchors, gt_arr)  # (H, W, K, G)
    best_gt = ious.argmax(axis=-1)
    best_iou = ious.max(axis=-1)
    labels[best_iou < neg_iou] = BACKGROUND
    pos = best_iou > pos_iou
    matched[pos] = best_gt[pos]
    # every gt keeps its best anchor(s), even below pos_iou
    for g in range(len(gts)):
        top = ious[..., g].max()
        if top > 0:
            forced = ious[..., g] == top
            matched[forced] = g
            pos |= forced
    cls_ids = np.array([b.class_id for b in gts], dtype=np.int64)
    labels[pos] = cls_ids[matched[pos]] + 1
    reg[pos] = encode(gt_arr[matched[pos]], grid.anchors[pos])
    return TargetAssignment(labels, reg, matched)


def sample_targets(assignment: TargetAssignment, rng: np.random.Generator, cap: int = 64,
                   neg_per_pos: int = 3) -> TargetAssignment:
    """Sample positives and negatives at ``1 : neg_per_pos``, at most ``cap`` in total.

    An image without positives still contributes ``neg_per_pos`` negatives.
    """
    pos_idx = np.flatnonzero(assignment.positives)
    neg_idx = np.flatnonzero(assignment.negatives)
    n_pos = min(len(pos_idx), cap // (1 + neg_per_pos))
    n_neg = min(len(neg_idx), neg_per_pos * max(n_pos, 1), cap - n_pos)
    chosen = []
    if n_pos:
        chosen.append(rng.choice(pos_idx, size=n_pos, replace=False))
    if n_neg:
        chosen.append(rng.choice(neg_idx, size=n_neg, replace=False))
    sampled = np.zeros(assignment.labels.size, dtype=bool)
    if chosen:
        sampled[np.concatenate(chosen)] = True
    return TargetAssignment(assignment.labels, assignment.reg_targets, assignment.matched_gt,
                            sampled.reshape(assignment.labels.shape))


# ---------------------------------------------------------------------- loss

def smooth_l1(x: np.ndarray, beta: float) -> Tuple[np.ndarray, np.ndarray]:
    ax = np.abs(x)
    small = ax < beta
    val = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.where(small, x / beta, np.sign(x))
    return val, grad


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def detection_loss(cls_logits: np.ndarray, reg_preds: np.ndarray,
                   assignments, cfg: DetectorConfig = DetectorConfig()
                   ) -> Tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy on sampled anchors plus smooth-L1 on sampled positives.

    Each image's loss is divided by its sampled-anchor count; a batch
    returns the mean over images.  Returns ``(loss, d_cls, d_reg)``.
    """
    single = cls_logits.ndim == 4
    if single:
        cls_logits, reg_preds, assignments = cls_logits[None], reg_preds[None], [assignments]
    n = cls_logits.shape[0]
    if len(assignments) != n:
        raise ShapeError(f"{len(assignments)} assignments for a batch of {n}")
    if reg_preds.shape[:4] != cls_logits.shape[:4]:
        raise ShapeError(f"reg shape {reg_preds.shape} inconsistent with cls shape {cls_logits.shape}")

    d_cls = np.zeros_like(cls_logits)
    d_reg = np.zeros_like(reg_preds)
    total = 0.0
    for b, asg in enumerate(assignments):
        if asg.labels.shape != cls_logits.shape[1:4]:
            raise ShapeError(f"assignment shape {asg.labels.shape} != head grid {cls_logits.shape[1:4]}")
        use = asg.loss_mask()
        count = int(use.sum())
        if count == 0:
            continue
        logits = cls_logits[b][use]
        labels = asg.labels[use]
        logp = log_softmax(logits)
        ce = -logp[np.arange(count), labels]
        p = np.exp(logp)
        p[np.arange(count), labels] -= 1.0
        d_cls[b][use] = p / count

        pos = use & (asg.labels > 0)
        reg_val, reg_grad = smooth_l1(reg_preds[b][pos] - asg.reg_targets[pos], cfg.smooth_l1_beta)
        d_reg[b][pos] = cfg.reg_weight * reg_grad / count
        total += (ce.sum() + cfg.reg_weight * reg_val.sum()) / count
    d_cls /= n
    d_reg /= n
    loss = total / n
    return float(loss), (d_cls[0] if single else d_cls), (d_reg[0] if single else d_reg)


# ----------------------------------------------------------------- inference

@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def to_json(self, image_id: str) -> dict:
        return {"image_id": image_id, "class_id": self.class_id, "score": self.score,
                "x1": self.box.x1, "y1": self.box.y1, "x2": self.box.x2, "y2": self.box.y2}


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> List[int]:
    """Greedy NMS; returns kept indices in descending score order (ties by index)."""
    order = np.argsort(-scores, kind="stable")
    keep: List[int] = []
    alive = np.ones(len(order), dtype=bool)
    ious = iou_matrix(boxes, boxes) if len(boxes) else np.zeros((0, 0))
    for pos, idx in enumerate(order):
        if not alive[pos]:
            continue
        keep.append(int(idx))
        rest = order[pos + 1:]
        alive[pos + 1:] &= ious[idx, rest] <= iou_thresh
    return keep


def decode_and_nms(cls_logits: np.ndarray, reg_preds: np.ndarray, grid: AnchorGrid,
                   score_thresh: float = 0.05, nms_iou: float = 0.5,
                   image_size: Optional[Tuple[float, float]] = None,
                   pre_nms_top: int = 200, max_dets: int = 100) -> List[Detection]:
    """Turn one image's head outputs into per-class NMS-filtered detections."""
    if not (0 <= score_thresh <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("score_thresh and nms_iou must lie in [0, 1]")
    if image_size is None:
        image_size = (grid.feat_w * grid.stride, grid.feat_h * grid.stride)
    probs = np.exp(log_softmax(cls_logits)).reshape(-1, cls_logits.shape[-1])
    boxes = decode(reg_preds.reshape(-1, 4), grid.flat)
    boxes = clip_box_array(boxes, *image_size)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    dets: List[Detection] = []
    for c in range(1, probs.shape[1]):
        s = probs[:, c]
        cand = np.flatnonzero(valid & (s >= score_thresh))
        if cand.size == 0:
            continue
        cand = cand[np.argsort(-s[cand], kind="stable")[:pre_nms_top]]
        for k in nms(boxes[cand], s[cand], nms_iou):
            i = cand[k]
            dets.append(Detection(Box(*boxes[i], class_id=c - 1), c - 1, float(s[i])))
    dets.sort(key=lambda d: -d.score)
    return dets[:max_dets]


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolated area under the precision envelope."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


@dataclass
class APResult:
    per_class: Dict[int, float] = field(default_factory=dict)
    mean_ap: float = 0.0

    def to_dict(self) -> dict:
        return {"per_class": {str(k): v for k, v in self.per_class.items()}, "mAP": self.mean_ap}


def evaluate_ap(detections: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Box]],
                iou_thresh: float = 0.5, num_classes: Optional[int] = None) -> APResult:
    """Per-class AP with greedy score-ordered matching; mAP over classes that have gts.

    A detection is a true positive when its best-overlapping still-unmatched
    gt of the same class has ``IOU >= iou_thresh``.
    """
    if len(detections) != len(gts):
        raise ValueError(f"{len(detections)} detection lists for {len(gts)} images")
    classes = sorted({b.class_id for img in gts for b in img})
    if num_classes is not None:
        classes = [c for c in range(num_classes) if any(b.class_id == c for img in gts for b in img)]
    result = APResult()
    for c in classes:
        cand = [(d.score, img, d) for img, dets in enumerate(detections) for d in dets if d.class_id == c]
        cand.sort(key=lambda t: -t[0])  # stable: ties keep image order
        gt_boxes = [boxes_to_array([b for b in img if b.class_id == c]) for img in gts]
        used = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
        n_gt = sum(len(g) for g in gt_boxes)
        tp = np.zeros(len(cand))
        for rank, (_, img, d) in enumerate(cand):
            g = gt_boxes[img]
            if len(g) == 0:
                continue
            ov = iou_matrix(d.box.as_array()[None], g)[0]
            ov[used[img]] = -1.0
            best = int(np.argmax(ov))
            if ov[best] >= iou_thresh:
                used[img][best] = True
                tp[rank] = 1.0
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(cand) + 1)
        result.per_class[c] = average_precision(recall, precision) if len(cand) else 0.0
    result.mean_ap = float(np.mean(list(result.per_class.values()))) if result.per_class else 0.0
    return result


def write_detections_jsonl(path, detections: Sequence[Sequence[Detection]], image_ids: Sequence[str]) -> None:
    with open(path, "w") as fh:
        for image_id, dets in zip(image_ids, detections):
            for d in dets:
                fh.write(json.dumps(d.to_json(image_id)) + "\n")


def detect(images: np.ndarray, cfg: DetectorConfig, params: Params, score_thresh: float = 0.05,
           nms_iou: float = 0.5, batch_size: int = 50) -> List[List[Detection]]:
    images = np.asarray(images, dtype=np.float64)
    grid = cfg.grid(images.shape[2], images.shape[1])
    out: List[List[Detection]] = []
    for start in range(0, len(images), batch_size):
        _, cls, reg = forward(images[start:start + batch_size], cfg, params)
        for b in range(cls.shape[0]):
            out.append(decode_and_nms(cls[b], reg[b], grid, score_thresh, nms_iou,
                                      image_size=(images.shape[2], images.shape[1])))
    return out
