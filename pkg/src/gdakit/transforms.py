"""Class-destructive block shuffling and the stochastic two-view augmentation pipeline.

The block shuffle partitions an image into a g x g grid and permutes the
blocks uniformly at random, destroying local (class-bearing) structure while
preserving every global pixel statistic exactly. `make_views` builds the two
augmented views used by the contrastive pretraining stage.

All randomness flows through explicit numpy Generators so that per-sample
streams can be derived from (global_seed, sample_index) and results are
independent of execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

_AUGMENT_OPS = ("random_crop", "grayscale", "gaussian_blur")


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Deterministic generator derived from a seed and integer subkeys."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class GridSpec:
    """Grid partitions per side; the shuffle acts on g*g equal blocks."""

    g: int = 3

    def __post_init__(self):
        if self.g < 1:
            raise ValueError(f"grid partitions must be >= 1, got {self.g}")


@dataclass(frozen=True)
class AugmentConfig:
    """Stochastic augmentation settings applied after the block shuffle.

    Operations run in the order listed by `enabled_ops`, each with its own
    draw from the sample's rng stream. The crop picks an area fraction
    uniformly from `crop_scale_range` and resamples back to the input size.
    """

    crop_scale_range: tuple[float, float] = (0.5, 1.0)
    grayscale_probability: float = 0.2
    blur_probability: float = 1.0
    blur_sigma_range: tuple[float, float] = (0.8, 2.0)
    enabled_ops: tuple[str, ...] = ("random_crop", "grayscale", "gaussian_blur")

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        for name, p in (("grayscale_probability", self.grayscale_probability),
                        ("blur_probability", self.blur_probability)):
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        blo, bhi = self.blur_sigma_range
        if not (0.0 < blo <= bhi):
            raise ValueError(f"blur_sigma_range must be positive and ordered, got {self.blur_sigma_range}")
        unknown = set(self.enabled_ops) - set(_AUGMENT_OPS)
        if unknown:
            raise ValueError(f"unknown augment ops: {sorted(unknown)}")


def nearest_multiple(n: int, g: int) -> int:
    """Closest positive multiple of g to n, ties rounded up."""
    lower = (n // g) * g
    upper = lower + g
    if lower == 0:
        return upper
    return lower if (n - lower) < (upper - n) else upper


def nn_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resampling with pixel-center alignment."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.intp)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.intp)
    return image[np.ix_(rows, cols)]


def block_shuffle(image: np.ndarray, grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """Partition the image into g x g blocks and permute them uniformly at random.

    When g divides both sides the pixel multiset is preserved exactly.
    Otherwise the image is resampled (nearest neighbor) to the nearest
    multiple of g per side, shuffled, and resampled back.
    """
    g = grid.g
    h, w = image.shape[:2]
    if g > min(h, w):
        raise ValueError(f"grid g={g} exceeds image size {h}x{w}")
    if g == 1:
        return image.copy()

    if h % g == 0 and w % g == 0:
        return _shuffle_divisible(image, g, rng)

    h2, w2 = nearest_multiple(h, g), nearest_multiple(w, g)
    resized = nn_resize(image, h2, w2)
    shuffled = _shuffle_divisible(resized, g, rng)
    return nn_resize(shuffled, h, w)


def _shuffle_divisible(image: np.ndarray, g: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    bh, bw = h // g, w // g
    squeeze = image.ndim == 2
    arr = image[:, :, None] if squeeze else image
    c = arr.shape[2]
    blocks = arr.reshape(g, bh, g, bw, c).transpose(0, 2, 1, 3, 4).reshape(g * g, bh, bw, c)
    perm = rng.permutation(g * g)
    out = blocks[perm].reshape(g, g, bh, bw, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)
    return out[:, :, 0] if squeeze else out


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the enabled augmentations in order with independent draws."""
    out = image
    for op in cfg.enabled_ops:
        if op == "random_crop":
            out = _random_crop(out, cfg, rng)
        elif op == "grayscale":
            if rng.random() < cfg.grayscale_probability:
                out = _to_grayscale(out)
        elif op == "gaussian_blur":
            if rng.random() < cfg.blur_probability:
                sigma = rng.uniform(*cfg.blur_sigma_range)
                out = _blur(out, sigma)
    return out.copy() if out is image else out


def _random_crop(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    frac = rng.uniform(*cfg.crop_scale_range)
    side = math.sqrt(frac)
    ch = max(1, int(round(h * side)))
    cw = max(1, int(round(w * side)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = image[top:top + ch, left:left + cw]
    return nn_resize(crop, h, w)


def _to_grayscale(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2 or image.shape[2] == 1:
        return image
    lum = image.mean(axis=2, keepdims=True)
    return np.broadcast_to(lum, image.shape).copy()


def _blur(image: np.ndarray, sigma: float) -> np.ndarray:
    # Separable Gaussian, kernel radius ceil(3*sigma), edge values extended.
    radius = int(math.ceil(3.0 * sigma))
    out = gaussian_filter1d(image, sigma, axis=0, mode="nearest", radius=radius)
    return gaussian_filter1d(out, sigma, axis=1, mode="nearest", radius=radius)


def make_views(
    image: np.ndarray,
    grid: GridSpec,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Build the two contrastive views: independent shuffle + augmentation each."""
    view_a = augment(block_shuffle(image, grid, rng), cfg, rng)
    view_b = augment(block_shuffle(image, grid, rng), cfg, rng)
    return view_a, view_b
