"""Shared stereo domain types and resolution-aware resizing.

Images are float arrays shaped (H, W, C) with values in [0, 1]. Disparity is
the horizontal offset ``x_left - x_right`` in pixels of the map's own
resolution, so it scales with image width whenever a map is resized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class DisparityMap:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError(f"disparity map must be 2-D, got shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    gt_disparity: Optional[DisparityMap] = None
    validity: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        left = np.asarray(self.left, dtype=np.float32)
        right = np.asarray(self.right, dtype=np.float32)
        if left.ndim == 2:
            left = left[..., None]
        if right.ndim == 2:
            right = right[..., None]
        if left.shape != right.shape:
            raise ValueError(f"left {left.shape} and right {right.shape} differ")
        if (self.gt_disparity is None) != (self.validity is None):
            raise ValueError("gt_disparity and validity must be given together")
        validity = None
        if self.gt_disparity is not None:
            if self.gt_disparity.shape != left.shape[:2]:
                raise ValueError(
                    f"gt shape {self.gt_disparity.shape} != image shape {left.shape[:2]}"
                )
            validity = np.asarray(self.validity, dtype=bool)
            if validity.shape != left.shape[:2]:
                raise ValueError("validity mask shape does not match image")
            validity.setflags(write=False)
        for a in (left, right):
            a.setflags(write=False)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        object.__setattr__(self, "validity", validity)

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[:2]

    @property
    def has_gt(self) -> bool:
        return self.gt_disparity is not None


@dataclass(frozen=True)
class PredictionTrace:
    """Every refinement iterate of one inference, at the input's resolution."""

    predictions: tuple[DisparityMap, ...]

    def __post_init__(self):
        preds = tuple(self.predictions)
        if len(preds) < 2:
            raise ValueError("a prediction trace needs at least 2 iterates")
        if len({p.shape for p in preds}) != 1:
            raise ValueError("trace iterates must share one shape")
        object.__setattr__(self, "predictions", preds)

    @property
    def n(self) -> int:
        return len(self.predictions)

    @property
    def final(self) -> DisparityMap:
        return self.predictions[-1]

    def stack(self) -> np.ndarray:
        """Iterates as an (n, H, W) array."""
        return np.stack([p.values for p in self.predictions])


@dataclass(frozen=True)
class MultiScalePredictions:
    p_high: DisparityMap
    p_orig: DisparityMap
    p_low: DisparityMap
    scale_high: float
    scale_low: float

    def __post_init__(self):
        for name, pred, s in (("p_high", self.p_high, self.scale_high),
                              ("p_low", self.p_low, self.scale_low)):
            expect = scaled_size(self.p_orig.shape, s)
            if pred.shape != expect:
                raise ValueError(f"{name} has shape {pred.shape}, expected {expect}")


@dataclass(frozen=True)
class ReliabilityMap:
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(~np.isfinite(w)) or w.min(initial=0.0) < 0.0 or w.max(initial=0.0) > 1.0:
            raise ValueError("reliability weights must lie in [0, 1]")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


def scaled_size(shape: Sequence[int], factor: float) -> tuple[int, int]:
    h, w = shape[:2]
    return max(1, int(round(factor * h))), max(1, int(round(factor * w)))


def _as_nchw(x: torch.Tensor) -> tuple[torch.Tensor, int]:
    nd = x.dim()
    if nd == 2:
        return x[None, None], nd
    if nd == 3:
        return x[None], nd
    return x, nd


def _from_nchw(x: torch.Tensor, nd: int) -> torch.Tensor:
    if nd == 2:
        return x[0, 0]
    if nd == 3:
        return x[0]
    return x


def bilinear_resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Corner-aligned bilinear resize of the last two dims of a 2/3/4-D tensor."""
    x4, nd = _as_nchw(x)
    if tuple(x4.shape[-2:]) == tuple(size):
        return x
    out = F.interpolate(x4, size=size, mode="bilinear", align_corners=True)
    return _from_nchw(out, nd)


def resize_image(image, factor: float):
    """Bilinear resample of an (H, W, C) image by ``factor``.

    Accepts numpy (H, W, C) or (H, W) arrays, or torch tensors laid out
    (B, C, H, W). Output dims are ``round(factor * input dims)``.
    """
    if not factor > 0:
        raise ValueError(f"resize factor must be positive, got {factor}")
    if isinstance(image, torch.Tensor):
        return bilinear_resize(image, scaled_size(image.shape[-2:], factor))
    arr = np.asarray(image, dtype=np.float32)
    size = scaled_size(arr.shape, factor)
    t = torch.from_numpy(np.array(arr))
    if arr.ndim == 3:
        t = t.permute(2, 0, 1)
    out = bilinear_resize(t, size)
    if arr.ndim == 3:
        out = out.permute(1, 2, 0)
    return out.numpy().copy()


def resize_disparity_tensor(disp: torch.Tensor, target_w: int, target_h: int) -> torch.Tensor:
    """Resize a disparity tensor (.., H, W) and rescale values by the width ratio."""
    if target_w <= 0 or target_h <= 0:
        raise ValueError("target dims must be positive")
    src_w = disp.shape[-1]
    return bilinear_resize(disp, (target_h, target_w)) * (target_w / src_w)


def resize_disparity(disp: DisparityMap, target_w: int, target_h: int) -> DisparityMap:
    t = torch.from_numpy(np.array(disp.values, dtype=np.float32))
    return DisparityMap(resize_disparity_tensor(t, target_w, target_h).numpy())
