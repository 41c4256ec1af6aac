"""Strong photometric and occlusion augmentation for the student's input.

Nothing here moves pixels: pseudo-labels computed on the clean pair stay
aligned with the augmented pair.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import StereoSample


def _ordered(pair, name):
    lo, hi = pair
    if lo > hi:
        raise ValueError(f"{name} range must be ordered, got {pair}")
    return (lo, hi)


@dataclass
class AugmentConfig:
    saturation_range: tuple = (0.0, 1.4)
    brightness_range: tuple = (0.8, 1.2)
    occlusion_count_range: tuple = (0, 2)
    # rectangle side lengths in px at a 256-px wide image; scaled with width
    occlusion_size_range: tuple = (20, 60)
    gaussian_noise_std_range: tuple = (0.0, 0.02)
    gaussian_blur_sigma_range: tuple = (0.0, 1.0)
    p_saturation: float = 0.5
    p_brightness: float = 0.5
    p_occlusion: float = 0.5
    p_noise: float = 0.5
    p_blur: float = 0.5

    def __post_init__(self):
        for name in ("saturation_range", "brightness_range", "occlusion_count_range",
                     "occlusion_size_range", "gaussian_noise_std_range",
                     "gaussian_blur_sigma_range"):
            setattr(self, name, _ordered(tuple(getattr(self, name)), name))
        for name in ("p_saturation", "p_brightness", "p_occlusion", "p_noise", "p_blur"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_saturation=0.0, p_brightness=0.0, p_occlusion=0.0, p_noise=0.0, p_blur=0.0)


def adjust_saturation(image: np.ndarray, factor: float) -> np.ndarray:
    gray = image.mean(axis=-1, keepdims=True)
    return gray + factor * (image - gray)


def occlude(image: np.ndarray, y0: int, x0: int, h: int, w: int) -> np.ndarray:
    """Replace a rectangle with its own per-channel mean."""
    out = image.copy()
    region = out[y0:y0 + h, x0:x0 + w]
    if region.size:
        region[...] = region.mean(axis=(0, 1), keepdims=True)
    return out


def strong_augment(sample: StereoSample, config: AugmentConfig, rng) -> StereoSample:
    """Augmented copy of ``sample``; ``rng`` is a numpy Generator or an int seed."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    left, right = sample.left, sample.right
    # one draw per decision, in a fixed order, so the stream is reproducible
    draws = rng.uniform(size=5)
    if draws[0] < config.p_saturation and left.shape[-1] == 3:
        s = rng.uniform(*config.saturation_range)
        left, right = adjust_saturation(left, s), adjust_saturation(right, s)
    if draws[1] < config.p_brightness:
        b = rng.uniform(*config.brightness_range)
        left, right = left * b, right * b
    if draws[2] < config.p_occlusion:
        H, W = right.shape[:2]
        lo, hi = config.occlusion_count_range
        count = int(rng.integers(lo, hi + 1))
        scale = W / 256.0
        for _ in range(count):
            h = max(1, int(round(rng.uniform(*config.occlusion_size_range) * scale)))
            w = max(1, int(round(rng.uniform(*config.occlusion_size_range) * scale)))
            y0 = int(rng.integers(0, max(H - h, 0) + 1))
            x0 = int(rng.integers(0, max(W - w, 0) + 1))
            right = occlude(right, y0, x0, h, w)
    if draws[3] < config.p_noise:
        views = []
        for img in (left, right):
            std = rng.uniform(*config.gaussian_noise_std_range)
            views.append(img + rng.normal(0.0, std, img.shape) if std > 0 else img)
        left, right = views
    if draws[4] < config.p_blur:
        views = []
        for img in (left, right):
            sigma = rng.uniform(*config.gaussian_blur_sigma_range)
            views.append(gaussian_filter(img, sigma=(sigma, sigma, 0)) if sigma > 0 else img)
        left, right = views
    if left is not sample.left:
        left = np.clip(left, 0.0, 1.0)
    if right is not sample.right:
        right = np.clip(right, 0.0, 1.0)
    return replace(sample, left=left, right=right)
