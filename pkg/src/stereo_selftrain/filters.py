"""Consistency-aware soft filtering of teacher pseudo-labels.

Two reliability cues are computed from teacher predictions:

* multi-resolution consistency: per-pixel variance of the predictions made on
  upscaled, original and downscaled inputs (after resizing back);
* iterative consistency: mean absolute change between consecutive late
  refinement iterates.

Each cue goes through a soft-threshold (sigmoid) mapping to a weight in
(0, 1); the two weights are multiplied and used to scale a per-pixel L1
self-training loss.

All functions take torch tensors (numpy arrays and ``DisparityMap`` are
converted) with disparity in the last two dims, and are batch-agnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .core import DisparityMap, MultiScalePredictions, PredictionTrace, resize_disparity_tensor

DECREASING = "decreasing"
AS_PRINTED = "as_printed"


@dataclass
class SoftThresholdParams:
    epsilon: float
    tau: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class CsfConfig:
    mrpcf: SoftThresholdParams = field(default_factory=lambda: SoftThresholdParams(5.0, 2.0))
    ipcf: SoftThresholdParams = field(default_factory=lambda: SoftThresholdParams(10.0, 0.5))
    enable_mrpcf: bool = True
    enable_ipcf: bool = True
    # "soft": weighted loss; "hard": binary mask at hard_threshold; "none": plain ST
    mode: str = "soft"
    hard_threshold: float = 0.5
    sigmoid_sign: str = DECREASING

    def __post_init__(self):
        if isinstance(self.mrpcf, dict):
            self.mrpcf = SoftThresholdParams(**self.mrpcf)
        if isinstance(self.ipcf, dict):
            self.ipcf = SoftThresholdParams(**self.ipcf)
        if self.mode not in ("soft", "hard", "none"):
            raise ValueError(f"unknown filter mode {self.mode!r}")
        if self.mode != "none" and not (self.enable_mrpcf or self.enable_ipcf):
            raise ValueError("filtering requested but both filters are disabled")
        if not 0.0 <= self.hard_threshold <= 1.0:
            raise ValueError("hard_threshold must be in [0, 1]")
        if self.sigmoid_sign not in (DECREASING, AS_PRINTED):
            raise ValueError(f"unknown sigmoid_sign {self.sigmoid_sign!r}")


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, DisparityMap):
        x = x.values
    return torch.as_tensor(np.array(x))


def multi_resolution_variance(p_high, p_orig, p_low) -> torch.Tensor:
    """Population variance across three scale predictions, at p_orig's resolution.

    ``p_high`` and ``p_low`` are resized (with disparity rescaling) to the
    original shape if they are not already there.
    """
    p_orig = _tensor(p_orig)
    h, w = p_orig.shape[-2:]
    resized = []
    for p in (_tensor(p_high), p_orig, _tensor(p_low)):
        if p.shape[-2:] != p_orig.shape[-2:]:
            p = resize_disparity_tensor(p, w, h)
        resized.append(p)
    stacked = torch.stack(resized)
    if stacked.shape[1:] != p_orig.shape:
        raise RuntimeError(f"shape mismatch after resizing: {[tuple(r.shape) for r in resized]}")
    return stacked.var(dim=0, unbiased=False)


def multiscale_variance(ms: MultiScalePredictions) -> torch.Tensor:
    return multi_resolution_variance(ms.p_high, ms.p_orig, ms.p_low)


def soft_threshold(x, params: SoftThresholdParams, sign: str = DECREASING) -> torch.Tensor:
    """Sigmoid mapping ``1 / (1 + exp(eps * (x - tau)))``.

    Larger inconsistency gives a smaller weight. ``sign="as_printed"`` flips
    the exponent for fidelity experiments, making the map increasing in x.
    """
    x = _tensor(x)
    if not torch.is_floating_point(x):
        x = x.double()
    z = params.epsilon * (x - params.tau)
    if sign == AS_PRINTED:
        z = -z
    elif sign != DECREASING:
        raise ValueError(f"unknown sigmoid sign {sign!r}")
    # sigmoid(-z) == 1 / (1 + exp(z)) without overflowing exp for large z
    return torch.sigmoid(-z)


def iterative_delta(trace) -> torch.Tensor:
    """Mean |P^{k+1} - P^k| over k = ceil(n/2) .. n-1 (1-based iterates).

    ``trace`` is a ``PredictionTrace``, a sequence of maps, or a tensor whose
    first dim indexes iterates.
    """
    if isinstance(trace, PredictionTrace):
        preds = torch.from_numpy(np.array(trace.stack()))
    elif isinstance(trace, torch.Tensor):
        preds = trace
    else:
        preds = torch.stack([_tensor(p) for p in trace])
    n = preds.shape[0]
    if n < 2:
        raise ValueError(f"iterative delta needs n >= 2 iterates, got {n}")
    start = math.ceil(n / 2)
    # 1-based k in [start, n-1] pairs (P^k, P^{k+1}) -> 0-based rows k-1, k
    late = preds[start - 1:]
    return (late[1:] - late[:-1]).abs().mean(dim=0)


def combine_weights(w_rc: Optional[torch.Tensor], w_ic: Optional[torch.Tensor]) -> torch.Tensor:
    """Elementwise product; a disabled filter (None) contributes all-ones."""
    if w_rc is None and w_ic is None:
        raise ValueError("at least one weight map is required")
    if w_rc is None:
        return _tensor(w_ic).clone()
    if w_ic is None:
        return _tensor(w_rc).clone()
    w_rc, w_ic = _tensor(w_rc), _tensor(w_ic)
    if w_rc.shape != w_ic.shape:
        raise ValueError(f"weight shapes differ: {tuple(w_rc.shape)} vs {tuple(w_ic.shape)}")
    return w_rc * w_ic


def soft_weighted_loss(student_pred, pseudo_label, w_soft, valid=None) -> torch.Tensor:
    """Mean over valid pixels of ``w_soft * |student_pred - pseudo_label|``.

    Inputs shaped (H, W) give the per-image value; batched inputs (B, [1,] H, W)
    take a valid-pixel mean per image and then average over the batch. Weights
    and pseudo-labels are detached. Returns 0 when nothing is valid.
    """
    pred = _tensor(student_pred)
    label = _tensor(pseudo_label).detach().to(pred.dtype)
    w = _tensor(w_soft).detach().to(pred.dtype)
    if pred.shape != label.shape or pred.shape != w.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)}, label {tuple(label.shape)}, "
            f"weights {tuple(w.shape)}"
        )
    if valid is None:
        valid = torch.ones_like(pred, dtype=torch.bool)
    else:
        valid = _tensor(valid).to(torch.bool)
        if valid.shape != pred.shape:
            raise ValueError("valid mask shape mismatch")
    per_pixel = w * (pred - label).abs() * valid
    if pred.dim() <= 2:
        count = valid.sum()
        return per_pixel.sum() / count if count > 0 else per_pixel.sum() * 0.0
    dims = tuple(range(1, pred.dim()))
    count = valid.sum(dim=dims)
    per_image = per_pixel.sum(dim=dims) / count.clamp(min=1)
    has_valid = count > 0
    if not has_valid.any():
        return per_pixel.sum() * 0.0
    return per_image[has_valid].mean()


def hard_filter(w, threshold: float) -> torch.Tensor:
    """Binary keep mask: 1 where ``w >= threshold`` (ties keep), else 0."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    w = _tensor(w)
    return (w >= threshold).to(w.dtype if torch.is_floating_point(w) else torch.float32)


def csf_weights(p_high, p_orig, p_low, trace, config: CsfConfig) -> dict:
    """Full filter pipeline; returns sigma, delta, w_rc, w_ic and the training weight.

    ``weight`` is what multiplies the L1 loss: w_soft for soft mode, its
    binarisation for hard mode, all-ones for mode "none".
    """
    sigma = multi_resolution_variance(p_high, p_orig, p_low)
    delta = iterative_delta(trace)
    w_rc = soft_threshold(sigma, config.mrpcf, config.sigmoid_sign) if config.enable_mrpcf else None
    w_ic = soft_threshold(delta, config.ipcf, config.sigmoid_sign) if config.enable_ipcf else None
    if w_rc is None and w_ic is None:
        w_soft = torch.ones_like(sigma)
    else:
        w_soft = combine_weights(w_rc, w_ic)
    if config.mode == "none":
        weight = torch.ones_like(w_soft)
    elif config.mode == "hard":
        weight = hard_filter(w_soft, config.hard_threshold)
    else:
        weight = w_soft
    return {
        "sigma": sigma,
        "delta": delta,
        "w_rc": w_rc if w_rc is not None else torch.ones_like(sigma),
        "w_ic": w_ic if w_ic is not None else torch.ones_like(sigma),
        "w_soft": w_soft,
        "weight": weight,
    }
