"""Image augmentation: unconditional resize plus light stochastic transforms.

Augmentation never touches labels. The stochastic path takes an explicit
generator so data loading can run in parallel workers with disjoint streams;
the deterministic path (``prepare_image``) is what inference uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentationConfig:
    resize_hw: tuple[int, int] = (224, 224)
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.5
    p_color: float = 0.5
    rotation_range_deg: float = 15.0
    brightness_range: float = 0.2
    saturation_range: float = 0.2
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_hflip", "p_vflip", "p_rotate", "p_color"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if min(self.resize_hw) < 1:
            raise ValueError("resize_hw must be positive")


def _as_float_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {getattr(img, 'shape', None)}")
    if img.dtype == np.uint8:
        return img.astype(np.float32) / 255.0
    return np.clip(img.astype(np.float32), 0.0, 1.0)


def resize_bilinear(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Pixel-center-aligned bilinear resize; exact no-op at identical size."""
    h, w = image.shape[:2]
    th, tw = out_hw
    if (h, w) == (th, tw):
        return image.astype(np.float32, copy=False)
    ys = np.clip((np.arange(th) + 0.5) * h / th - 0.5, 0, h - 1)
    xs = np.clip((np.arange(tw) + 0.5) * w / tw - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None, None]
    wx = (xs - x0).astype(np.float32)[None, :, None]
    img = image.astype(np.float32, copy=False)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def prepare_image(image: np.ndarray, resize_hw: tuple[int, int]) -> np.ndarray:
    """Deterministic inference preprocessing: to float [0, 1] and resize only."""
    return resize_bilinear(_as_float_image(image), resize_hw)


def augment_frame(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """One stochastic augmentation pass; output is float32, resize_hw x 3.

    Each transform fires independently with its configured probability.
    Deterministic for a fixed generator state.
    """
    img = prepare_image(image, config.resize_hw)
    if rng.random() < config.p_hflip:
        img = img[:, ::-1]
    if rng.random() < config.p_vflip:
        img = img[::-1]
    if rng.random() < config.p_rotate:
        angle = rng.uniform(-config.rotation_range_deg, config.rotation_range_deg)
        img = ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    if rng.random() < config.p_color:
        brightness = 1.0 + rng.uniform(-config.brightness_range, config.brightness_range)
        saturation = 1.0 + rng.uniform(-config.saturation_range, config.saturation_range)
        gray = img.mean(axis=2, keepdims=True)
        img = (gray + (img - gray) * saturation) * brightness
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0), dtype=np.float32)
