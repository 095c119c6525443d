"""Adaptation layer and masked feature-imitation loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .mask import ImitationMask
from .numerics import (LayerParams, NonFiniteError, ShapeError, conv_backward,
                       conv_forward, init_layer)

ADAPT_PREFIX = "adapt/"

MaskLike = Union[ImitationMask, np.ndarray]


@dataclass
class AdaptationLayer:
    params: LayerParams  # 3x3, C_student -> C_teacher, stride 1

    @classmethod
    def create(cls, c_student: int, c_teacher: int, seed: int, kernel: int = 3) -> "AdaptationLayer":
        return cls(init_layer(kernel, kernel, c_student, c_teacher, seed))

    @property
    def c_student(self) -> int:
        return self.params.cin

    @property
    def c_teacher(self) -> int:
        return self.params.cout

    def state(self) -> dict:
        return {ADAPT_PREFIX + "w": self.params.kernels, ADAPT_PREFIX + "b": self.params.biases}

    @classmethod
    def from_state(cls, state: dict) -> "AdaptationLayer":
        return cls(LayerParams(state[ADAPT_PREFIX + "w"], state[ADAPT_PREFIX + "b"]))


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 1.0
    psi: float = 0.5
    # adaptive | gt_projection | hard | none
    mask: str = "adaptive"
    hard_threshold: float = 0.5

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError(f"psi must lie in [0, 1], got {self.psi}")
        if self.mask not in ("adaptive", "gt_projection", "hard", "none"):
            raise ValueError(f"unknown mask generator {self.mask!r}")


@dataclass(frozen=True)
class LossBreakdown:
    l_gt: float
    l_imitation: float
    l_total: float


def adapt(student_feat: np.ndarray, layer: AdaptationLayer) -> np.ndarray:
    if student_feat.shape[-1] != layer.c_student:
        raise ShapeError(
            f"student feature has {student_feat.shape[-1]} channels, adaptation layer expects {layer.c_student}")
    return conv_forward(student_feat, layer.params, stride=1)


def adapt_backward(student_feat: np.ndarray, layer: AdaptationLayer,
                   upstream: np.ndarray) -> Tuple[np.ndarray, LayerParams]:
    return conv_backward(student_feat, layer.params, upstream, stride=1)


def imitation_loss(adapted: np.ndarray, teacher: np.ndarray, mask: MaskLike) -> Tuple[float, np.ndarray]:
    """Masked half squared error normalised by the positive-cell count.

    For a single ``(H, W, C)`` map::

        loss = sum_ijc I_ij (a_ijc - t_ijc)^2 / (2 N_p),   N_p = sum_ij I_ij

    and ``loss = 0`` with zero gradient when ``N_p == 0``.  A batch
    ``(N, H, W, C)`` with ``(N, H, W)`` masks returns the mean of the
    per-image losses.  ``teacher`` is treated as a constant.
    """
    m = mask.values if isinstance(mask, ImitationMask) else np.asarray(mask, dtype=bool)
    a = np.asarray(adapted, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    if a.shape != t.shape:
        raise ShapeError(f"adapted shape {a.shape} != teacher shape {t.shape}")
    single = a.ndim == 3
    if single:
        a, t, m = a[None], t[None], m[None]
    if m.shape != a.shape[:3]:
        raise ShapeError(f"mask shape {m.shape} does not match feature spatial dims {a.shape[:3]}")

    n = a.shape[0]
    n_pos = m.reshape(n, -1).sum(axis=1).astype(np.float64)
    safe = np.where(n_pos > 0, n_pos, 1.0)
    resid = (a - t) * m[..., None]
    per_image = 0.5 * np.einsum("nhwc,nhwc->n", resid, resid) / safe
    per_image = np.where(n_pos > 0, per_image, 0.0)
    grad = resid / safe[:, None, None, None]
    if single:
        return float(per_image[0]), grad[0]
    return float(per_image.mean()), grad / n


def total_loss(l_gt: float, l_imitation: float, cfg: DistillConfig) -> LossBreakdown:
    if not (math.isfinite(l_gt) and math.isfinite(l_imitation)):
        raise NonFiniteError(f"non-finite loss terms: l_gt={l_gt}, l_imitation={l_imitation}")
    return LossBreakdown(l_gt, l_imitation, l_gt + cfg.lam * l_imitation)
