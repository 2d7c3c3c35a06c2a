"""Retinal foreground estimation and patch eligibility grids."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.morphology import disk

from .core_types import FundusImage, ValidationError

logger = logging.getLogger(__name__)

ABSOLUTE_FLOOR = 0.06
OTSU_FACTOR = 0.5
CLOSING_RADIUS = 5
MIN_COVERAGE = 0.20
FALLBACK_RADIUS_FRACTION = 0.47
MASK_SUFFIX = ".retina.png"
_HASH_KEY = "content_sha256"


@dataclass(frozen=True, eq=False)
class EligibilityGrid:
    grid: np.ndarray  # (G, G) bool
    coverage_threshold: float

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    @property
    def indices(self) -> np.ndarray:
        """Flat row-major indices of eligible patches."""
        return np.flatnonzero(self.grid.ravel())

    @property
    def count(self) -> int:
        return int(self.grid.sum())


def luminance(pixels: np.ndarray) -> np.ndarray:
    px = np.asarray(pixels, dtype=np.float64)
    return 0.299 * px[..., 0] + 0.587 * px[..., 1] + 0.114 * px[..., 2]


def inscribed_circle(height: int, width: int, radius_fraction: float = FALLBACK_RADIUS_FRACTION) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    cy, cx = height / 2.0, width / 2.0
    r = radius_fraction * width
    return (((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2) <= r * r).astype(np.uint8)


def estimate_retina_mask(image) -> np.ndarray:
    """Binary (H, W) uint8 mask of the circular retinal foreground.

    Accepts a FundusImage or a raw (H, W, 3) array.
    """
    pixels = image.pixels if isinstance(image, FundusImage) else np.asarray(image)
    h, w = pixels.shape[:2]
    lum = luminance(pixels)
    if np.ptp(lum) > 0:
        otsu = float(threshold_otsu(lum))
    else:
        otsu = float(lum.flat[0])
    thresh = max(ABSOLUTE_FLOOR, otsu * OTSU_FACTOR)
    fg = lum > thresh

    labels, n = ndimage.label(fg)
    if n == 0:
        return inscribed_circle(h, w)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    comp = labels == int(np.argmax(sizes))

    pad = CLOSING_RADIUS + 1
    padded = np.pad(comp, pad, mode="constant")
    closed = ndimage.binary_closing(padded, structure=disk(CLOSING_RADIUS).astype(bool))
    comp = ndimage.binary_fill_holes(closed[pad:-pad, pad:-pad])

    if comp.mean() < MIN_COVERAGE:
        return inscribed_circle(h, w)
    return comp.astype(np.uint8)


def patch_eligibility(mask: np.ndarray, patch_size: int = 16, coverage_threshold: float = 0.5) -> EligibilityGrid:
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % patch_size or w % patch_size:
        raise ValidationError(f"mask shape {mask.shape} is not divisible by patch size {patch_size}")
    if not (0.0 < coverage_threshold <= 1.0):
        raise ValidationError(f"coverage_threshold must lie in (0, 1], got {coverage_threshold}")
    gh, gw = h // patch_size, w // patch_size
    coverage = (
        mask.astype(np.float64).reshape(gh, patch_size, gw, patch_size).sum(axis=(1, 3)) / patch_size**2
    )
    grid = coverage >= coverage_threshold
    if not grid.any():
        grid = np.zeros_like(grid)
        grid.flat[int(np.argmax(coverage))] = True
    return EligibilityGrid(grid=grid, coverage_threshold=coverage_threshold)


def content_hash(pixels: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(pixels, dtype=np.float32).tobytes()).hexdigest()


def mask_cache_path(image_path) -> Path:
    return Path(str(image_path) + MASK_SUFFIX)


def cached_retina_mask(image_path, pixels: np.ndarray) -> np.ndarray:
    """Mask for ``pixels``, read from or written to ``<image_path>.retina.png``.

    The cache entry is reused only when its stored content hash matches.
    """
    cache = mask_cache_path(image_path)
    digest = content_hash(pixels)
    if cache.exists():
        try:
            with Image.open(cache) as im:
                if im.text.get(_HASH_KEY) == digest:
                    return (np.asarray(im.convert("L")) > 0).astype(np.uint8)
        except OSError:
            logger.warning("unreadable mask cache %s, recomputing", cache)
    mask = estimate_retina_mask(pixels)
    info = PngImagePlugin.PngInfo()
    info.add_text(_HASH_KEY, digest)
    try:
        Image.fromarray(mask.astype(bool)).convert("1").save(cache, pnginfo=info)
    except OSError:
        logger.warning("could not write mask cache %s", cache)
    return mask
