"""Dense correspondence and keypoint transfer between fitted surface maps.

A source pixel transfers to the target foreground pixel whose mapped
template point is nearest in 3-D.  Distances above the threshold tau mark
non-correspondence (the source point is not visible in the target); the
confidence is ``1 / (1 + distance)``, monotone in the template distance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from surfmap import template as tpl_mod

__all__ = ["TransferResult", "default_tau", "transfer", "transfer_set"]

#: distance threshold as a fraction of the template bounding-sphere radius
TAU_RADIUS_FRACTION = 0.1


@dataclass
class TransferResult:
    """Outcome of transferring one source pixel into a target image."""

    target_pixel: np.ndarray   # (2,) center coordinates of the argmin pixel
    distance_3d: float
    confidence: float
    corresponds: bool
    valid: bool = True         # False when the target foreground was empty


def default_tau(template):
    return TAU_RADIUS_FRACTION * template.bounding_radius


def _no_candidates():
    return TransferResult(np.full(2, np.nan), math.inf, 0.0, False, valid=False)


class _TargetIndex:
    """Precomputed mapped template points over a target foreground."""

    def __init__(self, target_map, target_mask, template):
        fg = target_mask.bool_fg
        iy, ix = np.nonzero(fg)
        self.empty = len(ix) == 0
        if self.empty:
            return
        self.pixels = np.stack([ix + 0.5, iy + 0.5], axis=1).astype(float)
        self.points = tpl_mod.phi(template, target_map.dirs[fg]).position

    def nearest(self, point):
        d2 = ((self.points - point) ** 2).sum(axis=1)
        k = int(np.argmin(d2))     # raster-order tie break: first minimum
        return self.pixels[k], float(np.sqrt(d2[k]))


def _result(pixel, dist, tau):
    return TransferResult(pixel, dist, 1.0 / (1.0 + dist), dist <= tau)


def transfer(source_map, target_map, target_mask, p_source, template, tau=None):
    """Transfer one source pixel; ``p_source`` is an (x, y) pixel index pair.

    The source pixel must lie on the source foreground (callers decide what
    the source foreground is); the argmin runs over the target mask.
    """
    tau = default_tau(template) if tau is None else tau
    index = _TargetIndex(target_map, target_mask, template)
    if index.empty:
        return _no_candidates()
    x, y = int(p_source[0]), int(p_source[1])
    src_dir = source_map.dirs[y, x]
    src_point = tpl_mod.phi(template, src_dir).position
    pixel, dist = index.nearest(src_point)
    return _result(pixel, dist, tau)


def transfer_set(source_map, target_map, target_mask, keypoints, template,
                 tau=None, source_mask=None, snap_radius=3.0):
    """Batched transfer of (x, y) keypoints; one target pass is shared.

    Keypoint coordinates are continuous; each maps to the pixel containing
    it, snapped to the nearest source-foreground pixel within
    ``snap_radius`` when a source mask is supplied (keypoints that land
    just off the mask boundary otherwise read background directions).
    Returns one TransferResult per keypoint.
    """
    tau = default_tau(template) if tau is None else tau
    index = _TargetIndex(target_map, target_mask, template)
    keypoints = np.asarray(keypoints, dtype=float).reshape(-1, 2)
    if index.empty:
        return [_no_candidates() for _ in keypoints]
    h, w = source_map.height, source_map.width
    snap = None
    if source_mask is not None:
        iy, ix = np.nonzero(source_mask.bool_fg)
        if len(ix):
            snap = (np.stack([ix + 0.5, iy + 0.5], axis=1).astype(float), ix, iy)
    out = []
    for kp in keypoints:
        x = int(np.clip(np.floor(kp[0]), 0, w - 1))
        y = int(np.clip(np.floor(kp[1]), 0, h - 1))
        if snap is not None and not source_mask.bool_fg[y, x]:
            centers, sx, sy = snap
            d2 = ((centers - kp) ** 2).sum(axis=1)
            k = int(np.argmin(d2))
            if d2[k] > snap_radius ** 2:
                out.append(_no_candidates())
                continue
            x, y = int(sx[k]), int(sy[k])
        src_point = tpl_mod.phi(template, source_map.dirs[y, x]).position
        pixel, dist = index.nearest(src_point)
        out.append(_result(pixel, dist, tau))
    return out
