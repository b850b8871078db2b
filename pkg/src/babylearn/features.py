"""Hand-crafted region and frame descriptors.

Region descriptor: the context-padded box is split into a ``grid x grid`` cell
layout; every cell carries an 8-bin unsigned gradient-orientation histogram
and its mean RGB color. Gradient and color blocks are L2-normalized
separately, weighted, concatenated and normalized again, so the output is
always unit length.

Cell pooling goes through an integral image evaluated at fractional
coordinates, which is exact area resampling of the padded crop onto the
cell grid. One integral image per frame serves every proposal in it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BoundingBox, boxes_to_array

EPS = 1e-8
DEFAULT_CONTEXT_PAD = 16.0 / 227.0
MIN_RASTER_SIDE = 16


@dataclass(frozen=True)
class DescriptorConfig:
    grid: int = 6
    orientation_bins: int = 8
    context_pad_fraction: float = DEFAULT_CONTEXT_PAD
    gradient_weight: float = 1.0
    color_weight: float = 1.0
    frame_grid: int = 8
    frame_orientation_cells: int = 2
    frame_orientation_bins: int = 4

    @property
    def dim(self) -> int:
        return self.grid * self.grid * (self.orientation_bins + 3)

    @property
    def frame_dim(self) -> int:
        return self.frame_grid ** 2 + self.frame_orientation_cells ** 2 * self.frame_orientation_bins


DEFAULT_DESCRIPTOR = DescriptorConfig()


def check_raster(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) raster, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < MIN_RASTER_SIDE or w < MIN_RASTER_SIDE:
        raise ValueError(f"raster must be at least {MIN_RASTER_SIDE}x{MIN_RASTER_SIDE}, got {w}x{h}")
    return image


def luminance(image: np.ndarray) -> np.ndarray:
    return image @ np.array([0.299, 0.587, 0.114])


def _gradients(lum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.gradient(lum)
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    return mag, ang


def orientation_channels(lum: np.ndarray, n_bins: int) -> np.ndarray:
    """Per-pixel gradient magnitude split linearly between adjacent orientation bins."""
    mag, ang = _gradients(lum)
    pos = ang / np.pi * n_bins - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % n_bins
    hi = (lo + 1) % n_bins
    w_lo = mag * (1.0 - frac)
    w_hi = mag * frac
    bins = np.arange(n_bins)
    return (w_lo[..., None] * (lo[..., None] == bins)
            + w_hi[..., None] * (hi[..., None] == bins))


def _integral(channels: np.ndarray) -> np.ndarray:
    h, w, c = channels.shape
    ii = np.zeros((h + 1, w + 1, c))
    ii[1:, 1:] = channels.cumsum(0).cumsum(1)
    return ii


def _sample_integral(ii: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an integral image at fractional (y, x) positions."""
    hmax, wmax = ii.shape[0] - 1, ii.shape[1] - 1
    ys = np.clip(ys, 0, hmax)
    xs = np.clip(xs, 0, wmax)
    y0 = np.minimum(np.floor(ys).astype(np.int64), hmax - 1)
    x0 = np.minimum(np.floor(xs).astype(np.int64), wmax - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    return ((1 - fy) * (1 - fx) * ii[y0, x0] + (1 - fy) * fx * ii[y0, x0 + 1]
            + fy * (1 - fx) * ii[y0 + 1, x0] + fy * fx * ii[y0 + 1, x0 + 1])


class FrameFeatures:
    """Per-frame cache that turns boxes into region descriptors."""

    def __init__(self, image: np.ndarray, cfg: DescriptorConfig = DEFAULT_DESCRIPTOR):
        image = check_raster(image)
        self.cfg = cfg
        self.height, self.width = image.shape[:2]
        grads = orientation_channels(luminance(image), cfg.orientation_bins)
        self._ii = _integral(np.concatenate([grads, image], axis=2))

    def padded_extent(self, boxes: np.ndarray) -> np.ndarray:
        """Context-padded, image-clamped corners ``(x1, y1, x2, y2)`` per box."""
        pad = self.cfg.context_pad_fraction
        cx, cy, w, h = boxes.T
        pw, ph = w * (1 + 2 * pad), h * (1 + 2 * pad)
        x1 = np.clip(cx - pw / 2, 0, self.width)
        x2 = np.clip(cx + pw / 2, 0, self.width)
        y1 = np.clip(cy - ph / 2, 0, self.height)
        y2 = np.clip(cy + ph / 2, 0, self.height)
        if np.any(x2 - x1 <= 0) or np.any(y2 - y1 <= 0):
            raise ValueError("region out of frame")
        return np.stack([x1, y1, x2, y2], axis=1)

    def cell_means(self, boxes: np.ndarray) -> np.ndarray:
        """Mean channel values per grid cell, shape ``(R, grid, grid, C)``."""
        ext = self.padded_extent(boxes)
        g = self.cfg.grid
        t = np.linspace(0.0, 1.0, g + 1)
        xs = ext[:, 0:1] + (ext[:, 2:3] - ext[:, 0:1]) * t  # (R, g+1)
        ys = ext[:, 1:2] + (ext[:, 3:4] - ext[:, 1:2]) * t
        grid_y = np.broadcast_to(ys[:, :, None], (len(boxes), g + 1, g + 1))
        grid_x = np.broadcast_to(xs[:, None, :], (len(boxes), g + 1, g + 1))
        s = _sample_integral(self._ii, grid_y, grid_x)
        sums = s[:, 1:, 1:] - s[:, 1:, :-1] - s[:, :-1, 1:] + s[:, :-1, :-1]
        area = ((ext[:, 2] - ext[:, 0]) * (ext[:, 3] - ext[:, 1]) / (g * g))[:, None, None, None]
        return sums / area

    def describe(self, boxes: Sequence[BoundingBox] | np.ndarray) -> np.ndarray:
        arr = boxes if isinstance(boxes, np.ndarray) else boxes_to_array(boxes)
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, 4)
        if len(arr) == 0:
            return np.zeros((0, self.cfg.dim))
        cells = self.cell_means(arr)
        nb = self.cfg.orientation_bins
        grad = cells[..., :nb].reshape(len(arr), -1)
        color = cells[..., nb:].reshape(len(arr), -1)
        grad = grad / np.sqrt(np.sum(grad ** 2, axis=1, keepdims=True) + EPS)
        color = color / np.sqrt(np.sum(color ** 2, axis=1, keepdims=True) + EPS)
        v = np.concatenate([self.cfg.gradient_weight * grad, self.cfg.color_weight * color], axis=1)
        sq = np.sum(v ** 2, axis=1, keepdims=True)
        v = v / np.sqrt(sq + EPS)
        flat = sq[:, 0] < EPS
        if np.any(flat):
            # an all-black crop carries no signal; give it a fixed unit vector
            v[flat] = 1.0 / np.sqrt(v.shape[1])
        return v


def region_descriptors(image: np.ndarray, boxes: Sequence[BoundingBox] | np.ndarray,
                       cfg: DescriptorConfig = DEFAULT_DESCRIPTOR) -> np.ndarray:
    return FrameFeatures(image, cfg).describe(boxes)


def region_descriptor(image: np.ndarray, box: BoundingBox,
                      cfg: DescriptorConfig = DEFAULT_DESCRIPTOR) -> np.ndarray:
    return region_descriptors(image, [box], cfg)[0]


def gradient_part(descriptor: np.ndarray, cfg: DescriptorConfig = DEFAULT_DESCRIPTOR) -> np.ndarray:
    return np.asarray(descriptor)[..., : cfg.grid * cfg.grid * cfg.orientation_bins]


def frame_descriptor(image: np.ndarray, cfg: DescriptorConfig = DEFAULT_DESCRIPTOR) -> np.ndarray:
    """Global frame signature: block-mean luminance plus coarse orientation energy.

    The luminance part is scaled by ``1 / frame_grid`` so that the distance
    between two frames is the RMS difference of their block means.
    """
    image = check_raster(image)
    h, w = image.shape[:2]
    lum = luminance(image)
    ii_lum = _integral(lum[:, :, None])
    ii_ori = _integral(orientation_channels(lum, cfg.frame_orientation_bins))

    def block_means(ii, n):
        ys = np.linspace(0, h, n + 1)
        xs = np.linspace(0, w, n + 1)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        s = _sample_integral(ii, gy, gx)
        sums = s[1:, 1:] - s[1:, :-1] - s[:-1, 1:] + s[:-1, :-1]
        return sums / (h * w / (n * n))

    lum_part = block_means(ii_lum, cfg.frame_grid).ravel() / cfg.frame_grid
    ori_part = block_means(ii_ori, cfg.frame_orientation_cells).ravel()
    return np.concatenate([lum_part, ori_part])


def descriptor_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"descriptor dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))
