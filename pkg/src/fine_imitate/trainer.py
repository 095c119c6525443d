"""Teacher training, width-multiplied students and the imitation training loop."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import detector as det
from .data import Sample, stack_images
from .geometry import AnchorGrid
from .imitation import (ADAPT_PREFIX, AdaptationLayer, DistillConfig, adapt,
                        adapt_backward, imitation_loss, total_loss)
from .mask import (MaskConfig, empty_mask, estimate_mask, estimate_mask_hard,
                   gt_projection_mask)
from .numerics import (NonFiniteError, Params, load_checkpoint, params_digest,
                       save_checkpoint, sgd_step)

logger = logging.getLogger(__name__)

THREADS_ENV = "FINE_IMITATE_THREADS"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iterations: int = 2000
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 0  # 0: evaluate only at the end
    lr_decay_at: float = 0.75
    lr_decay: float = 0.1
    threads: int = 0  # 0: read FINE_IMITATE_THREADS, default serial
    distill: Optional[DistillConfig] = None

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError(f"iterations must be > 0, got {self.iterations}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be > 0, got {self.batch_size}")
        if isinstance(self.distill, dict):
            object.__setattr__(self, "distill", DistillConfig(**self.distill))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    config: dict
    losses: List[dict] = field(default_factory=list)
    evals: List[dict] = field(default_factory=list)
    checkpoint: Optional[str] = None
    params_sha256: Optional[str] = None
    params: Optional[Params] = field(default=None, repr=False)
    adaptation: Optional[Params] = field(default=None, repr=False)

    @property
    def final_map(self) -> float:
        return self.evals[-1]["mAP"] if self.evals else float("nan")

    def to_dict(self) -> dict:
        return {"config": self.config, "losses": self.losses, "evals": self.evals,
                "checkpoint": self.checkpoint, "params_sha256": self.params_sha256}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunRecord":
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["config"], d["losses"], d["evals"], d.get("checkpoint"), d.get("params_sha256"))


def make_student(teacher_cfg: det.DetectorConfig, width_mult: float) -> det.DetectorConfig:
    if not 0 < width_mult <= 1:
        raise ValueError(f"width_mult must lie in (0, 1], got {width_mult}")
    widths = tuple(max(1, int(round(width_mult * w))) for w in teacher_cfg.backbone_widths)
    return replace(teacher_cfg, backbone_widths=widths)


def resolve_threads(cfg: TrainConfig) -> int:
    if cfg.threads > 0:
        return cfg.threads
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def build_mask(kind: DistillConfig, gts, grid: AnchorGrid) -> np.ndarray:
    if kind.mask == "adaptive":
        return estimate_mask(gts, grid, MaskConfig(kind.psi))[0].values
    if kind.mask == "hard":
        return estimate_mask_hard(gts, grid, kind.hard_threshold).values
    if kind.mask == "gt_projection":
        return gt_projection_mask(gts, grid.stride, grid.feat_w, grid.feat_h).values
    return empty_mask(grid.feat_w, grid.feat_h).values


def evaluate(params: Params, cfg: det.DetectorConfig, samples: Sequence[Sample],
             iou_thresh: float = 0.5) -> det.APResult:
    dets = det.detect(stack_images(samples), cfg, params)
    return det.evaluate_ap(dets, [s.gts for s in samples], iou_thresh, cfg.num_classes)


@dataclass
class _Teacher:
    cfg: det.DetectorConfig
    params: Params


def _chunk_grads(images, assignments, masks, cfg, params, adapt_layer, teacher, distill):
    """Mean losses and gradients over one chunk of images."""
    guided, cls, reg, cache = det.forward(images, cfg, params, return_cache=True)
    l_gt, d_cls, d_reg = det.detection_loss(cls, reg, assignments, cfg)
    l_im = 0.0
    d_extra = None
    adapt_grads = None
    if distill is not None:
        t_feat = det.backbone_forward(images, teacher.cfg, teacher.params).guided
        adapted = adapt(guided, adapt_layer)
        l_im, d_adapted = imitation_loss(adapted, t_feat, masks)
        d_extra, g_adapt = adapt_backward(guided, adapt_layer, distill.lam * d_adapted)
        adapt_grads = {ADAPT_PREFIX + "w": g_adapt.kernels, ADAPT_PREFIX + "b": g_adapt.biases}
    grads = det.backward(cache, cfg, params, d_cls, d_reg, d_extra)
    return l_gt, l_im, grads, adapt_grads


def _reduce(parts, weights):
    out = {}
    for part, w in zip(parts, weights):
        if part is None:
            return None
        for k, v in part.items():
            out[k] = out[k] + w * v if k in out else w * v
    return out


def _apply_weight_decay(grads: Params, params: Params, wd: float) -> Params:
    if wd == 0:
        return grads
    return {k: g + wd * params[k] if k.endswith("/w") else g for k, g in grads.items()}


def train(cfg: det.DetectorConfig, train_cfg: TrainConfig, train_set: Sequence[Sample],
          test_set: Sequence[Sample] = (), teacher: Optional[Tuple[det.DetectorConfig, Params]] = None,
          out_dir: Optional[str] = None, init: Optional[Params] = None) -> RunRecord:
    """SGD on the detection loss, plus imitation when ``train_cfg.distill`` is set.

    Parameter init, batch order and anchor sampling use independent streams
    derived from ``train_cfg.seed``; the adaptation layer has its own stream,
    so runs that differ only in imitation settings start identically.
    """
    distill = train_cfg.distill
    if distill is not None and teacher is None:
        raise ValueError("distillation requires a teacher")
    images = stack_images(train_set)
    gts = [s.gts for s in train_set]
    grid = cfg.grid(images.shape[2], images.shape[1])

    params = {k: v.copy() for k, v in init.items()} if init is not None else det.init_params(cfg, train_cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]))
    adapt_layer = t = None
    adapt_params: Params = {}
    if distill is not None:
        t = _Teacher(*teacher)
        probe = images[:1]
        t_shape = det.backbone_forward(probe, t.cfg, t.params).guided.shape
        s_shape = det.backbone_forward(probe, cfg, params).guided.shape
        if t_shape[1:3] != s_shape[1:3]:
            raise ValueError(f"teacher feature {t_shape[1:3]} and student feature {s_shape[1:3]} spatial dims differ")
        seed_adapt = np.random.SeedSequence([train_cfg.seed, 2])
        adapt_layer = AdaptationLayer.create(cfg.feature_channels, t_shape[-1], seed_adapt)
        adapt_params = adapt_layer.state()

    threads = resolve_threads(train_cfg)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    record = RunRecord(config={"detector": cfg.to_dict(), "train": train_cfg.to_dict()})
    velocity: Params = {}
    adapt_velocity: Params = {}
    order = np.empty(0, dtype=np.int64)
    decay_step = int(train_cfg.lr_decay_at * train_cfg.iterations)
    last_good = {k: v.copy() for k, v in params.items()}

    try:
        for it in range(1, train_cfg.iterations + 1):
            if len(order) < train_cfg.batch_size:
                order = np.concatenate([order, rng.permutation(len(images))])
            idx, order = order[:train_cfg.batch_size], order[train_cfg.batch_size:]
            assignments = [det.sample_targets(det.assign_targets(grid, gts[i], cfg.pos_iou, cfg.neg_iou),
                                              rng, cfg.sample_cap, cfg.neg_per_pos) for i in idx]
            masks = None
            if distill is not None:
                masks = np.stack([build_mask(distill, gts[i], grid) for i in idx])
            if adapt_layer is not None:
                adapt_layer = AdaptationLayer.from_state(adapt_params)

            if pool is None:
                l_gt, l_im, grads, a_grads = _chunk_grads(images[idx], assignments, masks, cfg, params,
                                                          adapt_layer, t, distill)
            else:
                chunks = [c for c in np.array_split(np.arange(len(idx)), threads) if len(c)]
                jobs = [pool.submit(_chunk_grads, images[idx[c]], [assignments[j] for j in c],
                                    None if masks is None else masks[c], cfg, params, adapt_layer, t, distill)
                        for c in chunks]
                results = [j.result() for j in jobs]
                weights = [len(c) / len(idx) for c in chunks]
                l_gt = float(sum(w * r[0] for w, r in zip(weights, results)))
                l_im = float(sum(w * r[1] for w, r in zip(weights, results)))
                grads = _reduce([r[2] for r in results], weights)
                a_grads = _reduce([r[3] for r in results], weights)

            breakdown = total_loss(l_gt, l_im, distill or DistillConfig(lam=0.0))
            record.losses.append({"iteration": it, **asdict(breakdown)})
            lr = train_cfg.lr * (train_cfg.lr_decay if it > decay_step else 1.0)
            last_good = {k: v.copy() for k, v in params.items()}
            sgd_step(params, _apply_weight_decay(grads, params, train_cfg.weight_decay), velocity,
                     lr, train_cfg.momentum)
            if a_grads is not None:
                sgd_step(adapt_params, _apply_weight_decay(a_grads, adapt_params, train_cfg.weight_decay),
                         adapt_velocity, lr, train_cfg.momentum)
            if test_set and train_cfg.eval_every and it % train_cfg.eval_every == 0 and it < train_cfg.iterations:
                record.evals.append({"iteration": it, **evaluate(params, cfg, test_set).to_dict()})
    except NonFiniteError as exc:
        if out_dir is not None:
            path = os.path.join(out_dir, "last_good.npz")
            save_checkpoint(path, last_good)
            record.checkpoint = path
        record.params = last_good
        raise TrainingDiverged(f"training diverged at iteration {it}: {exc}", record) from exc
    finally:
        if pool is not None:
            pool.shutdown()

    if test_set:
        record.evals.append({"iteration": train_cfg.iterations, **evaluate(params, cfg, test_set).to_dict()})
    record.params = params
    record.adaptation = adapt_params or None
    record.params_sha256 = params_digest(params)
    if out_dir is not None:
        path = os.path.join(out_dir, "checkpoint.npz")
        save_checkpoint(path, {**params, **adapt_params})
        record.checkpoint = path
    return record


def train_teacher(cfg: det.DetectorConfig, train_cfg: TrainConfig, train_set, test_set=(),
                  out_dir=None) -> RunRecord:
    if train_cfg.distill is not None:
        train_cfg = replace(train_cfg, distill=None)
    return train(cfg, train_cfg, train_set, test_set, out_dir=out_dir)


def load_detector(path) -> Params:
    """Load a checkpoint, dropping adaptation-layer entries (inference export)."""
    return {k: v for k, v in load_checkpoint(path).items() if not k.startswith(ADAPT_PREFIX)}


def distill_train(teacher_ckpt, teacher_cfg: det.DetectorConfig, student_cfg: det.DetectorConfig,
                  train_cfg: TrainConfig, train_set, test_set=(), out_dir=None) -> RunRecord:
    """Train ``student_cfg`` on gt plus masked imitation of a frozen teacher.

    ``teacher_ckpt`` is a checkpoint path or an in-memory parameter dict.
    """
    if train_cfg.distill is None:
        train_cfg = replace(train_cfg, distill=DistillConfig())
    t_params = load_detector(teacher_ckpt) if isinstance(teacher_ckpt, (str, os.PathLike)) else teacher_ckpt
    before = params_digest(t_params)
    frozen = {k: v.copy() for k, v in t_params.items()}
    for v in frozen.values():
        v.setflags(write=False)
    record = train(student_cfg, train_cfg, train_set, test_set, teacher=(teacher_cfg, frozen), out_dir=out_dir)
    if params_digest(frozen) != before:
        raise RuntimeError("teacher parameters changed during distillation")
    record.config["teacher_sha256"] = before
    return record
