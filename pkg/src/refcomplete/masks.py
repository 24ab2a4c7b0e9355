"""Binary mask generation and resampling.

A mask is a 2D ``uint8`` array with values in {0, 1}; 1 marks the region to
complete (source masks) or the region to attend to (reference masks).

Two mask families are provided for training: unions of random rectangles
("grid" masks, 1..30 repeats by default) and figure-silhouette masks, mixed
by :func:`sample_training_mask` according to a configurable ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

Mask = np.ndarray  # (H, W) uint8 in {0, 1}


def validate_mask(m: np.ndarray) -> Mask:
    """Check the {0,1} 2D contract and return the mask as uint8."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise InvalidArgumentError(f"mask must be 2D, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise InvalidArgumentError("mask values must be 0 or 1")
    return m.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class MaskSpec:
    """Parameters of the training-time mask mixture.

    ``random_ratio`` is the probability of drawing a grid mask; otherwise a
    body-shape mask is drawn. ``grid_cell_fraction`` scales each rectangle
    side relative to min(H, W).
    """

    mode: str = "mixture"  # "grid" | "body_shape" | "mixture"
    repeats_range: tuple[int, int] = (1, 30)
    grid_cell_fraction: float = 0.15
    random_ratio: float = 0.5

    def __post_init__(self) -> None:
        lo, hi = self.repeats_range
        if lo < 0 or hi < lo:
            raise InvalidArgumentError(f"bad repeats_range {self.repeats_range}")
        if not 0.0 <= self.random_ratio <= 1.0:
            raise InvalidArgumentError(f"random_ratio must be in [0,1], got {self.random_ratio}")
        if not 0.0 < self.grid_cell_fraction <= 1.0:
            raise InvalidArgumentError(
                f"grid_cell_fraction must be in (0,1], got {self.grid_cell_fraction}"
            )


def sample_grid_rects(
    h: int,
    w: int,
    rng: np.random.Generator,
    repeats_range: tuple[int, int] = (1, 30),
    cell_fraction: float = 0.15,
) -> list[tuple[int, int, int, int]]:
    """Draw the rectangle stream behind :func:`random_grid_mask`.

    Returns ``(r0, c0, r1, c1)`` half-open pixel boxes, clamped to bounds.
    Exposed so tests can re-rasterize the identical stream independently.
    """
    if h <= 0 or w <= 0:
        raise InvalidArgumentError(f"image dims must be positive, got {(h, w)}")
    lo, hi = repeats_range
    if lo < 0 or hi < lo:
        raise InvalidArgumentError(f"bad repeats_range {repeats_range}")
    if not 0.0 < cell_fraction <= 1.0:
        raise InvalidArgumentError(f"cell_fraction must be in (0,1], got {cell_fraction}")

    base = cell_fraction * min(h, w)
    rects = []
    k = int(rng.integers(lo, hi + 1))
    for _ in range(k):
        side_h = rng.uniform(0.5, 1.5) * base
        side_w = rng.uniform(0.5, 1.5) * base
        cy = rng.uniform(0.0, h)
        cx = rng.uniform(0.0, w)
        r0 = int(np.clip(round(cy - side_h / 2), 0, h - 1))
        r1 = int(np.clip(round(cy + side_h / 2), r0 + 1, h))
        c0 = int(np.clip(round(cx - side_w / 2), 0, w - 1))
        c1 = int(np.clip(round(cx + side_w / 2), c0 + 1, w))
        rects.append((r0, c0, r1, c1))
    return rects


def random_grid_mask(
    h: int,
    w: int,
    rng: np.random.Generator,
    repeats_range: tuple[int, int] = (1, 30),
    cell_fraction: float = 0.15,
) -> Mask:
    """Union of k random rectangles, k drawn uniformly from ``repeats_range``."""
    m = np.zeros((h, w), dtype=np.uint8)
    for r0, c0, r1, c1 in sample_grid_rects(h, w, rng, repeats_range, cell_fraction):
        m[r0:r1, c0:c1] = 1
    return m


def body_shape_mask(
    segmentation: Mask,
    rng: np.random.Generator,
    dilate_px: int = 0,
    subbox: bool | None = None,
) -> Mask:
    """Mask derived from a figure silhouette.

    With probability 0.5 (or forced via ``subbox``) the full silhouette is
    returned; otherwise a random sub-box of it covering at least 25% of the
    silhouette area. Optionally dilated by ``dilate_px``.
    """
    seg = validate_mask(segmentation)
    area = int(seg.sum())
    if area == 0:
        raise InvalidArgumentError("segmentation is empty")

    if subbox is None:
        subbox = rng.random() < 0.5
    m = seg.copy()
    if subbox:
        rows = np.flatnonzero(seg.any(axis=1))
        cols = np.flatnonzero(seg.any(axis=0))
        r0s, r1s = rows[0], rows[-1] + 1
        c0s, c1s = cols[0], cols[-1] + 1
        # Rejection-sample a box until it keeps >= 25% of the silhouette;
        # fall back to the full silhouette if we get unlucky.
        for _ in range(50):
            ra = sorted(rng.integers(r0s, r1s + 1, size=2))
            ca = sorted(rng.integers(c0s, c1s + 1, size=2))
            box = np.zeros_like(seg)
            box[ra[0] : ra[1], ca[0] : ca[1]] = 1
            cand = seg & box
            if cand.sum() >= 0.25 * area:
                m = cand
                break
        else:
            m = seg.copy()
    if dilate_px > 0:
        m = ndimage.binary_dilation(m, iterations=dilate_px).astype(np.uint8)
    return m


def sample_training_mask(
    segmentation: Mask,
    rng: np.random.Generator,
    spec: MaskSpec,
) -> Mask:
    """Grid mask with probability ``spec.random_ratio``, else body-shape mask."""
    h, w = segmentation.shape
    if spec.mode == "grid":
        use_grid = True
    elif spec.mode == "body_shape":
        use_grid = False
    else:
        use_grid = rng.random() < spec.random_ratio
    if use_grid:
        return random_grid_mask(h, w, rng, spec.repeats_range, spec.grid_cell_fraction)
    return body_shape_mask(segmentation, rng)


def footprint_coverage(m: Mask, factor: int) -> np.ndarray:
    """Fraction of masked pixels inside each factor x factor cell."""
    m = validate_mask(m)
    h, w = m.shape
    if factor <= 0 or h % factor or w % factor:
        raise InvalidArgumentError(
            f"mask shape {(h, w)} not divisible by factor {factor}"
        )
    blocks = m.reshape(h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(1, 3))


def downsample_mask(m: Mask, factor: int) -> Mask:
    """Latent-resolution mask: cell is 1 iff >= 50% of its pixel footprint is 1."""
    return (footprint_coverage(m, factor) >= 0.5).astype(np.uint8)


def apply_mask(image: np.ndarray, m: Mask, fill: float) -> np.ndarray:
    """Replace pixels under the mask with ``fill``; leave the rest untouched."""
    m = validate_mask(m)
    image = np.asarray(image)
    if image.shape[:2] != m.shape:
        raise InvalidArgumentError(
            f"image {image.shape} and mask {m.shape} disagree"
        )
    sel = m.astype(bool)
    out = image.copy()
    out[sel] = fill
    return out
