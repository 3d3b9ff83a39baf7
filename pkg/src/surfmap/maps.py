"""Raster-aligned value types shared by the renderer, losses and fitter.

The raster frame has x rightward, y downward, origin at the top-left
corner; the center of pixel (row i, column j) is at (j + 0.5, i + 0.5).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SurfaceMap", "Mask", "DepthMap", "SilhouetteMap", "pixel_centers"]


def pixel_centers(height, width):
    """(h, w, 2) array of pixel-center coordinates (x, y)."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs + 0.5, ys + 0.5], axis=-1).astype(float)


@dataclass
class SurfaceMap:
    """Per-pixel unit surface directions plus foreground probability."""

    dirs: np.ndarray      # (h, w, 3) unit vectors
    fg_prob: np.ndarray   # (h, w) in [0, 1]

    def __post_init__(self):
        self.dirs = np.asarray(self.dirs, dtype=float)
        self.fg_prob = np.asarray(self.fg_prob, dtype=float)
        if self.dirs.ndim != 3 or self.dirs.shape[2] != 3:
            raise ValueError("dirs must be (h, w, 3)")
        if self.fg_prob.shape != self.dirs.shape[:2]:
            raise ValueError("fg_prob must match dirs spatially")

    def validate(self, tol=1e-6):
        norms = np.linalg.norm(self.dirs, axis=-1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ValueError("surface directions must be unit vectors")
        if self.fg_prob.min() < 0.0 or self.fg_prob.max() > 1.0:
            raise ValueError("fg_prob must lie in [0, 1]")
        return self

    @property
    def height(self):
        return self.dirs.shape[0]

    @property
    def width(self):
        return self.dirs.shape[1]


@dataclass
class Mask:
    """Foreground mask; hard {0,1} or soft [0,1] values."""

    fg: np.ndarray        # (h, w)

    def __post_init__(self):
        self.fg = np.asarray(self.fg, dtype=float)
        if self.fg.ndim != 2:
            raise ValueError("mask must be 2-D")
        if self.fg.min() < 0.0 or self.fg.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")

    @property
    def height(self):
        return self.fg.shape[0]

    @property
    def width(self):
        return self.fg.shape[1]

    @property
    def bool_fg(self):
        return self.fg >= 0.5


@dataclass
class DepthMap:
    """Camera-frame depth per pixel; background is +inf."""

    depth: np.ndarray     # (h, w)

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        if self.depth.ndim != 2:
            raise ValueError("depth must be 2-D")

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def coverage(self):
        return np.isfinite(self.depth)


@dataclass
class SilhouetteMap:
    """Soft occupancy in [0, 1], optionally with camera-parameter gradients.

    ``dalpha_dcam`` has shape (h, w, 6) over (s, tx, ty, r1, r2, r3) when the
    render was asked for gradients.
    """

    alpha: np.ndarray
    dalpha_dcam: np.ndarray = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.alpha.ndim != 2:
            raise ValueError("alpha must be 2-D")

    @property
    def height(self):
        return self.alpha.shape[0]

    @property
    def width(self):
        return self.alpha.shape[1]
