"""Dense float64 layers with hand-written backward passes.

Memory order: activations are ``(N, H, W, C)`` arrays (a single ``(H, W, C)``
map is accepted wherever a batch is); convolution kernels are
``(kh, kw, Cin, Cout)``.  Spatial padding is zero padding of ``k // 2`` on
every side, so a stride-``s`` layer maps ``H`` to ``ceil(H / s)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
CHECKPOINT_VERSION = 1

Params = Dict[str, np.ndarray]


class ShapeError(ValueError):
    """Raised when array extents do not agree."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


@dataclass
class LayerParams:
    kernels: np.ndarray  # (kh, kw, Cin, Cout)
    biases: np.ndarray  # (Cout,)
    init_seed: Optional[int] = None

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=DTYPE)
        self.biases = np.asarray(self.biases, dtype=DTYPE)
        if self.kernels.ndim != 4:
            raise ShapeError(f"kernels must be 4-D (kh, kw, Cin, Cout), got {self.kernels.shape}")
        kh, kw, _, cout = self.kernels.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel spatial extents must be odd, got {kh}x{kw}")
        if self.biases.shape != (cout,):
            raise ShapeError(f"biases shape {self.biases.shape} does not match Cout={cout}")

    @property
    def cin(self) -> int:
        return self.kernels.shape[2]

    @property
    def cout(self) -> int:
        return self.kernels.shape[3]


@dataclass
class GradientReport:
    max_rel_error: float
    worst_param_index: Tuple[str, Tuple[int, ...]]
    eps: float
    num_checked: int = 0


def init_layer(kh: int, kw: int, cin: int, cout: int, seed: int) -> LayerParams:
    """He (fan-in) normal init with zero biases."""
    rng = np.random.default_rng(seed)
    std = np.sqrt(2.0 / (kh * kw * cin))
    kernels = rng.standard_normal((kh, kw, cin, cout)) * std
    return LayerParams(kernels, np.zeros(cout), init_seed=seed)


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected (H, W, C) or (N, H, W, C) input, got shape {x.shape}")
    return x, False


def conv_output_size(size: int, stride: int) -> int:
    return -(-size // stride)


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Zero-padded sliding windows, shape (N, Ho, Wo, Cin, kh, kw)."""
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _check_conv(x: np.ndarray, params: LayerParams, stride: int) -> None:
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.shape[-1] != params.cin:
        raise ShapeError(
            f"input shape {x.shape} has {x.shape[-1]} channels but kernel shape "
            f"{params.kernels.shape} expects Cin={params.cin}"
        )


def conv_forward(x: np.ndarray, params: LayerParams, stride: int = 1) -> np.ndarray:
    xb, squeeze = _as_batch(x)
    _check_conv(xb, params, stride)
    kh, kw = params.kernels.shape[:2]
    win = _windows(xb, kh, kw, stride)
    # (Cin, kh, kw, Cout) so the contraction axes line up with the window axes
    w = params.kernels.transpose(2, 0, 1, 3)
    out = np.tensordot(win, w, axes=([3, 4, 5], [0, 1, 2])) + params.biases
    return out[0] if squeeze else out


def conv_backward(
    x: np.ndarray, params: LayerParams, upstream: np.ndarray, stride: int = 1
) -> Tuple[np.ndarray, LayerParams]:
    """Return ``(grad_input, grad_params)`` for ``conv_forward(x, params, stride)``."""
    xb, squeeze = _as_batch(x)
    _check_conv(xb, params, stride)
    g = np.asarray(upstream, dtype=DTYPE)
    if squeeze:
        g = g[None]
    n, h, w_, _ = xb.shape
    kh, kw = params.kernels.shape[:2]
    expected = (n, conv_output_size(h, stride), conv_output_size(w_, stride), params.cout)
    if g.shape != expected:
        raise ShapeError(f"upstream gradient shape {g.shape} != forward output shape {expected}")

    win = _windows(xb, kh, kw, stride)
    gk = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    gb = g.sum(axis=(0, 1, 2))

    ph, pw = kh // 2, kw // 2
    ho, wo = g.shape[1:3]
    gxp = np.zeros((n, h + 2 * ph, w_ + 2 * pw, params.cin))
    for a in range(kh):
        for b in range(kw):
            gxp[:, a:a + stride * ho:stride, b:b + stride * wo:stride, :] += g @ params.kernels[a, b].T
    gx = gxp[:, ph:ph + h, pw:pw + w_, :]
    if squeeze:
        gx = gx[0]
    return gx, LayerParams(gk, gb)


def conv_naive(x: np.ndarray, params: LayerParams, stride: int = 1) -> np.ndarray:
    """Direct nested-loop convolution; slow reference for tests."""
    xb, squeeze = _as_batch(x)
    _check_conv(xb, params, stride)
    n, h, w, cin = xb.shape
    kh, kw, _, cout = params.kernels.shape
    ph, pw = kh // 2, kw // 2
    ho, wo = conv_output_size(h, stride), conv_output_size(w, stride)
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    acc = params.biases[co]
                    for dy in range(kh):
                        for dx in range(kw):
                            iy = oy * stride + dy - ph
                            ix = ox * stride + dx - pw
                            if 0 <= iy < h and 0 <= ix < w:
                                for ci in range(cin):
                                    acc += xb[b, iy, ix, ci] * params.kernels[dy, dx, ci, co]
                    out[b, oy, ox, co] = acc
    return out[0] if squeeze else out


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(x) > 0, upstream, 0.0)


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{name}: {bad} non-finite value(s)")


def sgd_step(
    params: Params,
    grads: Mapping[str, np.ndarray],
    velocity: Params,
    lr: float,
    momentum: float = 0.0,
) -> Params:
    """In-place momentum SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``.

    Keys are visited in sorted order.  ``velocity`` is filled lazily.
    """
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    for name in sorted(grads):
        check_finite(f"gradient of {name}", grads[name])
    for name in sorted(grads):
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name} shape {params[name].shape}")
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        params[name] -= lr * v
    return params


def grad_check(
    params: Params,
    loss_fn: Callable[[], Tuple[float, Mapping[str, np.ndarray]]],
    eps: float = 1e-6,
    num_samples: int = 200,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradientReport:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` must evaluate the loss and its gradients at the *current*
    contents of ``params``; entries are perturbed in place and restored.
    At least ``num_samples`` entries are checked (all of them when fewer
    exist), picked uniformly over the concatenated parameter vector.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps must be in [1e-6, 1e-2], got {eps}")
    _, grads = loss_fn()
    grads = {k: np.array(v, copy=True) for k, v in grads.items()}
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    if total <= num_samples:
        flat_ids = np.arange(total)
    else:
        flat_ids = np.sort(rng.choice(total, size=num_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst, worst_at = 0.0, ("", ())
    for fid in flat_ids:
        k = int(np.searchsorted(offsets, fid, side="right") - 1)
        name = names[k]
        idx = np.unravel_index(int(fid - offsets[k]), params[name].shape)
        orig = params[name][idx]
        params[name][idx] = orig + eps
        lp, _ = loss_fn()
        params[name][idx] = orig - eps
        lm, _ = loss_fn()
        params[name][idx] = orig
        numeric = (lp - lm) / (2 * eps)
        analytic = grads[name][idx] if name in grads else 0.0
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if err > worst:
            worst, worst_at = float(err), (name, tuple(int(i) for i in idx))
    return GradientReport(worst, worst_at, eps, len(flat_ids))


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays to an ``.npz`` container (lossless)."""
    arrays = {name: np.asarray(v, dtype=DTYPE) for name, v in params.items()}
    arrays["__format_version__"] = np.array(CHECKPOINT_VERSION)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Params:
    with np.load(path) as data:
        version = int(data["__format_version__"]) if "__format_version__" in data else None
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        return {k: data[k].copy() for k in data.files if k != "__format_version__"}


def params_digest(params: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and raw bytes, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=DTYPE)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
