"""ShapeDomains: a deterministic multi-domain image generator.

The class signal is a glyph shape (a spatial arrangement of strokes); the
domain signal is global appearance (background/foreground levels, channel
tint, noise level). Block-shuffling an image therefore destroys the class
signal while leaving the domain signal intact, which is exactly the regime
the estimation stage assumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GdaDataset, Sample, save_dataset
from .transforms import rng_stream

# Reference design grid; glyph geometry is expressed in these units and
# scaled to the configured image size.
_REF = 32.0


# Each glyph is an arrangement of four identical square dots on a 4x4 tile
# grid (tiles of 8 reference units, matching the g=4 block partition). Every
# class therefore shares the same pixel area, the same per-block content
# multiset, and the same global statistics; class identity lives purely in
# the spatial arrangement, which is precisely what the block shuffle destroys
# and what survives at g=1.
_GLYPH_TILES: dict[str, tuple[tuple[int, int], ...]] = {
    "row": ((1, 0), (1, 1), (1, 2), (1, 3)),
    "column": ((0, 1), (1, 1), (2, 1), (3, 1)),
    "diagonal": ((0, 0), (1, 1), (2, 2), (3, 3)),
    "square": ((1, 1), (1, 2), (2, 1), (2, 2)),
    "corners": ((0, 0), (0, 3), (3, 0), (3, 3)),
    "zigzag": ((0, 1), (1, 2), (2, 1), (3, 2)),
    "tee": ((0, 0), (0, 1), (0, 2), (1, 1)),
    "ell": ((0, 0), (1, 0), (2, 0), (2, 1)),
}

GLYPH_NAMES = tuple(_GLYPH_TILES)
GLYPHS = tuple(_GLYPH_TILES.values())

_TILE = _REF / 4.0        # tile side in reference units
_DOT_HALF = 3.0           # dot half-width: 6x6 dots inside 8x8 tiles


def glyph_mask(class_index: int, size: int, dy: float = 0.0, dx: float = 0.0) -> np.ndarray:
    """Boolean glyph mask at the given size, shifted by (dy, dx) pixels."""
    scale = _REF / size
    yy, xx = np.mgrid[0:size, 0:size]
    y = (yy + 0.5 - dy) * scale
    x = (xx + 0.5 - dx) * scale
    mask = np.zeros((size, size), dtype=bool)
    for r, c in GLYPHS[class_index]:
        cy = (r + 0.5) * _TILE
        cx = (c + 0.5) * _TILE
        mask |= (np.abs(y - cy) < _DOT_HALF) & (np.abs(x - cx) < _DOT_HALF)
    return mask


@dataclass(frozen=True)
class DomainStyle:
    background_level: float
    foreground_level: float
    channel_gains: tuple[float, float, float]
    noise_sigma: float = 0.02


DEFAULT_STYLES = (
    DomainStyle(0.10, 0.90, (1.00, 0.85, 0.70)),
    DomainStyle(0.80, 0.20, (0.70, 0.85, 1.00)),
    DomainStyle(0.45, 0.95, (0.80, 1.00, 0.80)),
    DomainStyle(0.95, 0.45, (1.00, 0.75, 1.00)),
    DomainStyle(0.30, 0.75, (0.85, 0.70, 1.00)),
    DomainStyle(0.65, 0.15, (1.00, 1.00, 0.80)),
)

_MIN_CONTRAST = 0.3
_MIN_DOMAIN_SEPARATION = 0.1


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    num_domains: int = 2
    samples_per_cell: int = 100
    image_size: int = 32
    domain_styles: tuple[DomainStyle, ...] | None = None
    jitter: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(GLYPHS):
            raise ValueError(f"num_classes must be in [1, {len(GLYPHS)}], got {self.num_classes}")
        styles = self.styles
        if len(styles) != self.num_domains:
            raise ValueError(f"need {self.num_domains} domain styles, got {len(styles)}")
        if self.samples_per_cell < 1 or self.image_size < 16:
            raise ValueError("samples_per_cell must be >= 1 and image_size >= 16")
        if self.jitter < 0 or self.jitter > self.image_size // 8:
            raise ValueError("jitter must be small relative to the image size")
        for s in styles:
            if abs(s.foreground_level - s.background_level) < _MIN_CONTRAST:
                raise ValueError(
                    f"foreground/background must differ by >= {_MIN_CONTRAST}, got {s}"
                )
        gains = [s.channel_gains for s in styles]
        if len(set(gains)) != len(gains):
            raise ValueError("channel_gains must be pairwise distinct across domains")
        means = self._expected_means()
        for i in range(len(styles)):
            for j in range(i + 1, len(styles)):
                sep = float(np.max(np.abs(means[i] - means[j])))
                if sep < _MIN_DOMAIN_SEPARATION:
                    raise ValueError(
                        f"domains {i} and {j} have expected channel means only {sep:.3f} apart "
                        f"(need >= {_MIN_DOMAIN_SEPARATION}); pick more distinct styles"
                    )

    @property
    def styles(self) -> tuple[DomainStyle, ...]:
        if self.domain_styles is not None:
            return self.domain_styles
        if self.num_domains > len(DEFAULT_STYLES):
            raise ValueError(
                f"only {len(DEFAULT_STYLES)} built-in styles; pass domain_styles explicitly"
            )
        return DEFAULT_STYLES[: self.num_domains]

    def _expected_means(self) -> list[np.ndarray]:
        areas = [glyph_mask(c, self.image_size).mean() for c in range(self.num_classes)]
        af = float(np.mean(areas))
        out = []
        for s in self.styles:
            base = s.background_level * (1.0 - af) + s.foreground_level * af
            out.append(base * np.asarray(s.channel_gains))
        return out


def render_sample(cfg: SynthConfig, class_index: int, domain_index: int,
                  rng: np.random.Generator) -> np.ndarray:
    """One image: glyph at a jittered position on the domain's background."""
    style = cfg.styles[domain_index]
    size = cfg.image_size
    dy, dx = (rng.integers(-cfg.jitter, cfg.jitter + 1, size=2) if cfg.jitter > 0
              else np.zeros(2, dtype=int))
    canvas = np.full((size, size), style.background_level, dtype=float)
    canvas[glyph_mask(class_index, size, float(dy), float(dx))] = style.foreground_level
    img = canvas[:, :, None] * np.asarray(style.channel_gains)[None, None, :]
    img = img + rng.normal(0.0, style.noise_sigma, img.shape)
    img = np.clip(img, 0.0, 1.0)
    # Quantize to the 8-bit grid so the in-memory dataset round-trips through PNG exactly.
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def generate(cfg: SynthConfig, out_dir: str | Path | None = None) -> tuple[GdaDataset, Path | None]:
    """Deterministically generate the dataset; optionally write PNGs plus a manifest.

    All ground-truth labels are recorded and every visibility flag starts at 1;
    masking is the scenario stage's job.
    """
    samples = []
    index = 0
    for d in range(cfg.num_domains):
        for c in range(cfg.num_classes):
            for _ in range(cfg.samples_per_cell):
                img = render_sample(cfg, c, d, rng_stream(cfg.seed, index))
                samples.append(Sample(image=img, class_label=c, domain_label=d))
                index += 1
    dataset = GdaDataset(samples)
    manifest = save_dataset(dataset, out_dir) if out_dir is not None else None
    return dataset, manifest
