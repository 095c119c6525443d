"""Threshold sweeps, mask-variant comparisons and per-channel feature variance."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import detector as det
from .data import Sample, stack_images
from .imitation import DistillConfig
from .mask import MaskConfig, estimate_mask
from .numerics import Params
from .trainer import TrainConfig, TrainingDiverged, distill_train

logger = logging.getLogger(__name__)

# Columns of the CSV files written by this module.
SWEEP_COLUMNS = ("psi", "mean_map", "n_ok", "per_seed_map")
VARIANCE_COLUMNS = ("channel", "var_in", "var_out", "in_lt_out")
COMPARISON_COLUMNS = ("variant", "mean_map", "n_ok", "per_seed_map")

VARIANTS = {
    "no_imitation": dict(mask="none"),
    "fine_grained": dict(mask="adaptive", psi=0.5),
    "full_feature": dict(mask="adaptive", psi=0.0),
    "gt_projection": dict(mask="gt_projection"),
}
MASK_FIELDS = frozenset({"train.distill.mask", "train.distill.psi"})


def _mean(values):
    ok = [v for v in values if v is not None]
    return float(np.mean(ok)) if ok else float("nan")


def _fmt_maps(maps):
    return ";".join("nan" if m is None else repr(m) for m in maps)


def _parse_maps(text):
    return [None if t == "nan" else float(t) for t in text.split(";") if t]


@dataclass
class SweepPoint:
    psi: float
    maps: List[Optional[float]]  # None marks a diverged run

    @property
    def mean_map(self) -> float:
        return _mean(self.maps)


@dataclass
class SweepResult:
    points: List[SweepPoint]
    seeds: List[int]
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        psis = [p.psi for p in self.points]
        if any(b <= a for a, b in zip(psis, psis[1:])):
            raise ValueError(f"psi values must be strictly increasing, got {psis}")

    def mean_map(self, psi: float) -> float:
        for p in self.points:
            if p.psi == psi:
                return p.mean_map
        raise KeyError(psi)

    def to_json(self) -> str:
        return json.dumps({"seeds": self.seeds, "config": self.config,
                           "points": [asdict(p) for p in self.points]}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SweepResult":
        d = json.loads(text)
        return cls([SweepPoint(p["psi"], p["maps"]) for p in d["points"]], d["seeds"], d["config"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for p in self.points:
            w.writerow([repr(p.psi), repr(p.mean_map), sum(m is not None for m in p.maps), _fmt_maps(p.maps)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, seeds: Sequence[int] = (), config: Optional[dict] = None) -> "SweepResult":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([SweepPoint(float(r["psi"]), _parse_maps(r["per_seed_map"])) for r in rows],
                   list(seeds), config or {})


@dataclass
class Experiment:
    """Everything a sweep or comparison run shares apart from the mask settings."""
    teacher_cfg: det.DetectorConfig
    teacher_params: Params
    student_cfg: det.DetectorConfig
    train_cfg: TrainConfig
    train_set: Sequence[Sample]
    test_set: Sequence[Sample]

    def run_config(self, distill: DistillConfig, seed: int) -> dict:
        return {"detector": self.student_cfg.to_dict(),
                "train": replace(self.train_cfg, seed=seed, distill=distill).to_dict()}

    def snapshot(self) -> dict:
        return {"teacher": self.teacher_cfg.to_dict(), "student": self.student_cfg.to_dict(),
                "train": self.train_cfg.to_dict(),
                "n_train": len(self.train_set), "n_test": len(self.test_set)}

    def run(self, distill: DistillConfig, seed: int) -> Optional[float]:
        cfg = replace(self.train_cfg, seed=seed, distill=distill)
        try:
            rec = distill_train(self.teacher_params, self.teacher_cfg, self.student_cfg, cfg,
                                self.train_set, self.test_set)
        except TrainingDiverged as exc:
            logger.warning("run %s seed %d diverged: %s", distill, seed, exc)
            return None
        return rec.final_map


def _base_distill(exp: Experiment) -> DistillConfig:
    return exp.train_cfg.distill or DistillConfig()


def psi_sweep(psis: Sequence[float], seeds: Sequence[int], exp: Experiment) -> SweepResult:
    """One imitation run per (psi, seed); diverged runs are kept as missing entries."""
    if not seeds:
        raise ValueError("need at least one seed")
    psis = sorted(float(p) for p in psis)
    for p in psis:
        MaskConfig(p)
    base = replace(_base_distill(exp), mask="adaptive")
    points = []
    for psi in psis:
        maps = [exp.run(replace(base, psi=psi), s) for s in seeds]
        logger.info("psi=%g mAP %s", psi, maps)
        points.append(SweepPoint(psi, maps))
    return SweepResult(points, list(seeds), exp.snapshot())


def config_diff(a, b, prefix="") -> List[str]:
    """Dotted keys whose values differ between two nested dicts."""
    keys = sorted(set(a) | set(b))
    out = []
    for k in keys:
        va, vb = a.get(k), b.get(k)
        name = f"{prefix}{k}"
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(config_diff(va, vb, name + "."))
        elif va != vb:
            out.append(name)
    return out


@dataclass
class ComparisonResult:
    maps: Dict[str, List[Optional[float]]]
    seeds: List[int]
    config: dict = field(default_factory=dict)
    varied: List[str] = field(default_factory=list)

    def mean_map(self, variant: str) -> float:
        return _mean(self.maps[variant])

    def to_json(self) -> str:
        return json.dumps({"maps": self.maps, "seeds": self.seeds, "config": self.config,
                           "varied": self.varied, "means": {v: self.mean_map(v) for v in self.maps}},
                          indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for v, maps in self.maps.items():
            w.writerow([v, repr(self.mean_map(v)), sum(m is not None for m in maps), _fmt_maps(maps)])
        return buf.getvalue()


def baseline_comparison(seeds: Sequence[int], exp: Experiment,
                        variants: Sequence[str] = tuple(VARIANTS)) -> ComparisonResult:
    """Train each mask variant with an identical budget and report mean mAP.

    The no-imitation variant uses an empty mask, so its imitation gradient is
    zero and it trains exactly like the plain student.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    base = _base_distill(exp)
    configs = {v: replace(base, **VARIANTS[v]) for v in variants}
    ref = exp.run_config(configs[variants[0]], seeds[0])
    varied = set()
    for cfg in configs.values():
        diff = set(config_diff(ref, exp.run_config(cfg, seeds[0])))
        if not diff <= MASK_FIELDS:
            raise AssertionError(f"variants differ beyond the mask settings: {sorted(diff - MASK_FIELDS)}")
        varied |= diff
    maps = {}
    for v in variants:
        maps[v] = [exp.run(configs[v], s) for s in seeds]
        logger.info("%s mAP %s", v, maps[v])
    return ComparisonResult(maps, list(seeds), exp.snapshot(), sorted(varied))


@dataclass
class VarianceReport:
    var_in: np.ndarray  # (C,), nan where the mask is empty everywhere
    var_out: np.ndarray
    num_images: int
    num_in: int
    num_out: int
    psi: Optional[float] = None

    @property
    def fraction_in_lt_out(self) -> float:
        ok = ~(np.isnan(self.var_in) | np.isnan(self.var_out))
        if not ok.any():
            return float("nan")
        return float(np.mean(self.var_in[ok] < self.var_out[ok]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(VARIANCE_COLUMNS)
        for c, (a, b) in enumerate(zip(self.var_in, self.var_out)):
            w.writerow([c, repr(float(a)), repr(float(b)), int(a < b)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"psi": self.psi, "num_images": self.num_images, "num_in": self.num_in,
                "num_out": self.num_out, "channels": int(len(self.var_in)),
                "fraction_in_lt_out": self.fraction_in_lt_out}


def _pooled_var(x: np.ndarray, c: int) -> np.ndarray:
    if len(x) == 0:
        return np.full(c, np.nan)
    mean = x.mean(axis=0)
    return ((x - mean) ** 2).mean(axis=0)


def variance_from_features(features: np.ndarray, masks: np.ndarray, psi=None) -> VarianceReport:
    """Population variance per channel, pooled over all images' in/out locations."""
    features = np.asarray(features, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if features.ndim == 3:
        features, masks = features[None], masks[None]
    if masks.shape != features.shape[:3]:
        raise ValueError(f"mask shape {masks.shape} does not match features {features.shape}")
    c = features.shape[-1]
    inside, outside = features[masks], features[~masks]
    if len(inside) == 0:
        logger.warning("imitation mask empty on every image; var_in undefined")
    return VarianceReport(_pooled_var(inside, c), _pooled_var(outside, c), len(features),
                          len(inside), len(outside), psi)


def per_channel_variance(teacher_params: Params, teacher_cfg: det.DetectorConfig,
                         samples: Sequence[Sample], psi: float = 0.5) -> VarianceReport:
    if len(samples) < 1:
        raise ValueError("need at least one image")
    images = stack_images(samples)
    feats = det.backbone_forward(images, teacher_cfg, teacher_params).guided
    grid = teacher_cfg.grid(images.shape[2], images.shape[1])
    masks = np.stack([estimate_mask(s.gts, grid, MaskConfig(psi))[0].values for s in samples])
    return variance_from_features(feats, masks, psi)


def sample_images(samples: Sequence[Sample], n: int, seed: int) -> List[Sample]:
    """Pick ``n`` distinct samples that have at least one gt box."""
    pool = [s for s in samples if s.gts]
    if len(pool) < n:
        raise ValueError(f"only {len(pool)} annotated images, need {n}")
    idx = np.random.default_rng(seed).choice(len(pool), n, replace=False)
    return [pool[i] for i in sorted(idx)]


def is_missing(x) -> bool:
    return x is None or (isinstance(x, float) and math.isnan(x))
