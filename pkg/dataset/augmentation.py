"""
Training-time augmentation of point clouds and images.
"""
import math

import numpy as np

from config import AugmentationConfig

MAX_ERASE_TRIES = 10


def augment_cloud(points: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Jitter, random point removal and cuboid erasing; never returns an empty cloud."""
    points = np.asarray(points, dtype=np.float32)
    if not cfg.enabled or len(points) == 0:
        return points.copy()
    out = points
    if cfg.jitter_sigma > 0:
        out = np.clip(out + rng.normal(0.0, cfg.jitter_sigma, size=out.shape), -1.0, 1.0).astype(np.float32)
    if cfg.point_drop_prob > 0:
        keep = rng.random(len(out)) >= cfg.point_drop_prob
        if np.any(keep):
            out = out[keep]
    if cfg.cuboid_erase_prob > 0 and rng.random() < cfg.cuboid_erase_prob:
        out = erase_cuboid(out, cfg, rng)
    return out.copy() if out is points else out


def erase_cuboid(points: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Remove the points inside a random axis-aligned cuboid; retried when it would empty the cloud."""
    lo, hi = cfg.cuboid_scale
    for _ in range(MAX_ERASE_TRIES):
        center = rng.uniform(-1.0, 1.0, size=3)
        half = rng.uniform(lo, hi, size=3)
        inside = np.all(np.abs(points - center) <= half, axis=1)
        if not np.all(inside):
            return points[~inside]
    return points


def augment_image(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Photometric jitter, random crop resized back, and random erasing. [3, H, W] uint8 in and out."""
    image = np.asarray(image)
    if not cfg.enabled:
        return image.copy()
    img = image.astype(np.float64) / 255.0
    img = _photometric(img, cfg, rng)
    if cfg.crop_fraction < 1.0:
        img = _crop_resize(img, cfg.crop_fraction, rng)
    if cfg.image_erase_prob > 0 and rng.random() < cfg.image_erase_prob:
        img = _random_erase(img, cfg, rng)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _photometric(img: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.brightness > 0:
        img = img + rng.uniform(-cfg.brightness, cfg.brightness)
    if cfg.contrast > 0:
        mean = img.mean()
        img = (img - mean) * (1.0 + rng.uniform(-cfg.contrast, cfg.contrast)) + mean
    if cfg.saturation > 0:
        gray = img.mean(axis=0, keepdims=True)
        img = (img - gray) * (1.0 + rng.uniform(-cfg.saturation, cfg.saturation)) + gray
    return np.clip(img, 0.0, 1.0)


def _crop_resize(img: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = img[:, top:top + ch, left:left + cw]
    rows = (np.arange(h) * ch) // h
    cols = (np.arange(w) * cw) // w
    return crop[:, rows][:, :, cols]


def _random_erase(img: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    lo_area, hi_area = cfg.erase_area
    lo_aspect, hi_aspect = cfg.erase_aspect
    for _ in range(MAX_ERASE_TRIES):
        area = rng.uniform(lo_area, hi_area) * h * w
        aspect = math.exp(rng.uniform(math.log(lo_aspect), math.log(hi_aspect)))
        eh = int(round(math.sqrt(area * aspect)))
        ew = int(round(math.sqrt(area / aspect)))
        if 0 < eh <= h and 0 < ew <= w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            out = img.copy()
            out[:, top:top + eh, left:left + ew] = rng.random((img.shape[0], eh, ew))
            return out
    return img
