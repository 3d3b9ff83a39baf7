"""Software rasterization of templates under weak-perspective cameras.

Provides the hard z-buffer depth render used as the visibility reference,
a differentiable soft silhouette (distance-sigmoid product aggregation)
with analytic camera-parameter gradients, and ground-truth surface
direction renders for synthetic scenes.  Depth follows the camera module's
convention (``s * (R P)_z``, smaller = nearer); background pixels are +inf.
"""
from __future__ import annotations

import numpy as np

from surfmap import camera as cam_mod
from surfmap.maps import DepthMap, Mask, SilhouetteMap, SurfaceMap

__all__ = [
    "render_depth",
    "render_soft_silhouette",
    "render_surface_directions",
]


def _ragged_boxes(x0, x1, y0, y1):
    """Flatten per-face pixel boxes into (face_id, px, py) index arrays.

    Boxes are half-open in neither sense: x0..x1 and y0..y1 are inclusive
    pixel index ranges; empty boxes (x1 < x0 etc.) drop out.
    """
    w = x1 - x0 + 1
    h = y1 - y0 + 1
    counts = np.maximum(w, 0) * np.maximum(h, 0)
    valid = counts > 0
    idx = np.nonzero(valid)[0]
    counts = counts[valid]
    total = int(counts.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty
    fid = np.repeat(idx, counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    k = np.arange(total) - np.repeat(starts, counts)
    wrep = np.repeat(w[valid], counts)
    px = x0[fid] + k % wrep
    py = y0[fid] + k // wrep
    return fid, px, py


def _project_mesh(template, cam):
    pix, depth = cam_mod.project(cam, template.vertices)
    return pix[template.faces], depth[template.faces]   # (f,3,2), (f,3)


def _face_boxes(tri, height, width, pad):
    x0 = np.ceil(tri[:, :, 0].min(axis=1) - pad - 0.5).astype(np.int64)
    x1 = np.floor(tri[:, :, 0].max(axis=1) + pad - 0.5).astype(np.int64)
    y0 = np.ceil(tri[:, :, 1].min(axis=1) - pad - 0.5).astype(np.int64)
    y1 = np.floor(tri[:, :, 1].max(axis=1) + pad - 0.5).astype(np.int64)
    np.clip(x0, 0, width - 1, out=x0)
    np.clip(x1, -1, width - 1, out=x1)
    np.clip(y0, 0, height - 1, out=y0)
    np.clip(y1, -1, height - 1, out=y1)
    return x0, x1, y0, y1


def _screen_barycentrics(tri, fid, qx, qy):
    """Affine barycentrics of query points in their projected triangles."""
    a = tri[fid, 0]
    e1 = tri[fid, 1] - a
    e2 = tri[fid, 2] - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    ok = np.abs(det) > 1e-12
    det = np.where(ok, det, 1.0)
    dx = qx - a[:, 0]
    dy = qy - a[:, 1]
    w1 = (dx * e2[:, 1] - dy * e2[:, 0]) / det
    w2 = (dy * e1[:, 0] - dx * e1[:, 1]) / det
    w0 = 1.0 - w1 - w2
    return np.stack([w0, w1, w2], axis=1), ok


def _covering_pairs(template, cam, height, width):
    """(face, pixel, barycentric, depth) tuples for all covered pixels."""
    tri, zdepth = _project_mesh(template, cam)
    x0, x1, y0, y1 = _face_boxes(tri, height, width, 0.0)
    fid, px, py = _ragged_boxes(x0, x1, y0, y1)
    if len(fid) == 0:
        return fid, px, py, np.empty((0, 3)), np.empty(0)
    bary, ok = _screen_barycentrics(tri, fid, px + 0.5, py + 0.5)
    inside = ok & (bary >= 0.0).all(axis=1)
    fid, px, py, bary = fid[inside], px[inside], py[inside], bary[inside]
    depth = np.einsum("nk,nk->n", bary, zdepth[fid])
    return fid, px, py, bary, depth


def render_depth(template, cam, height, width):
    """Hard z-buffer depth of the template; +inf where nothing renders."""
    fid, px, py, bary, depth = _covering_pairs(template, cam, height, width)
    buf = np.full(height * width, np.inf)
    np.minimum.at(buf, py * width + px, depth)
    return DepthMap(buf.reshape(height, width))


def render_surface_directions(template, cam, height, width):
    """Ground-truth per-pixel surface directions plus hard coverage mask.

    Each covered pixel receives the barycentric interpolation of the
    front-most face's sphere coordinates, renormalized to unit length.
    Ties at equal depth resolve to the lowest face index, so the output is
    independent of face ordering.
    """
    fid, px, py, bary, depth = _covering_pairs(template, cam, height, width)
    dirs = np.zeros((height, width, 3))
    dirs[..., 2] = 1.0
    fg = np.zeros((height, width))
    if len(fid):
        pixid = py * width + px
        order = np.lexsort((fid, depth, pixid))
        pixid, fid, bary = pixid[order], fid[order], bary[order]
        first = np.concatenate([[True], pixid[1:] != pixid[:-1]])
        pixid, fid, bary = pixid[first], fid[first], bary[first]
        n = np.einsum("nk,nkj->nj", bary, template.sphere_coords[template.faces[fid]])
        n /= np.linalg.norm(n, axis=1)[:, None]
        dirs.reshape(-1, 3)[pixid] = n
        fg.reshape(-1)[pixid] = 1.0
    return SurfaceMap(dirs, fg.copy()), Mask(fg)


def _silhouette_segments(template, tri):
    """Projected outline segments: mesh edges between front- and back-facing.

    For a closed mesh under orthographic projection the boundary of the
    covered region lies on edges whose two adjacent faces have opposite
    projected winding.
    """
    area2 = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    front = area2 > 0.0
    ef = template.edge_faces
    sil = front[ef[:, 0]] != front[ef[:, 1]]
    return template.edge_vertices[sil]


def _segment_distance_field(p0, p1, qx, qy):
    """Min distance from query points to a set of segments, with argmin data.

    Returns ``(dist, edge index, t parameter, (ux, uy) unit toward query)``.
    """
    n = len(qx)
    best = np.full(n, np.inf)
    bidx = np.zeros(n, dtype=np.int64)
    bt = np.zeros(n)
    ex = p1[:, 0] - p0[:, 0]
    ey = p1[:, 1] - p0[:, 1]
    ee = np.maximum(ex * ex + ey * ey, 1e-300)
    for k in range(len(p0)):
        dx = qx - p0[k, 0]
        dy = qy - p0[k, 1]
        t = np.clip((dx * ex[k] + dy * ey[k]) / ee[k], 0.0, 1.0)
        rx = dx - t * ex[k]
        ry = dy - t * ey[k]
        d = np.hypot(rx, ry)
        closer = d < best
        best[closer] = d[closer]
        bidx[closer] = k
        bt[closer] = t[closer]
    rx = qx - (p0[bidx, 0] + bt * ex[bidx])
    ry = qy - (p0[bidx, 1] + bt * ey[bidx])
    safe = np.maximum(best, 1e-300)
    return best, bidx, bt, rx / safe, ry / safe


def render_soft_silhouette(template, cam, height, width, gamma=1.0,
                           with_gradients=True, coverage=None):
    """Differentiable silhouette: sigmoid of the signed outline distance.

    ``alpha(p) = sigmoid(d(p) / gamma)`` where d is the 2-D Euclidean
    distance from the pixel center to the projected silhouette outline,
    positive for covered pixels.  The 0.5 level therefore coincides with
    the hard coverage boundary at every gamma, alpha tends to 1 deep
    inside and 0 far outside, and the gamma -> 0 limit is the hard mask.
    When ``with_gradients`` is set the result carries per-pixel
    d(alpha)/d(s,t,r1..r3), computed analytically through the nearest
    outline segment's projected endpoints.  ``coverage`` optionally reuses
    a hard coverage mask rendered for the same camera.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    tri, _ = _project_mesh(template, cam)
    covered = (coverage if coverage is not None
               else render_depth(template, cam, height, width).coverage)
    segs = _silhouette_segments(template, tri)
    if len(segs) == 0:
        alpha = covered.astype(float)
        grad = np.zeros((height, width, 6)) if with_gradients else None
        return SilhouetteMap(alpha, grad)

    pix, _ = cam_mod.project(cam, template.vertices)
    p0 = pix[segs[:, 0]]
    p1 = pix[segs[:, 1]]
    centers = np.mgrid[0:height, 0:width].reshape(2, -1) + 0.5
    qy, qx = centers[0], centers[1]
    dist, eidx, tpar, ux, uy = _segment_distance_field(p0, p1, qx, qy)
    sgn = np.where(covered.reshape(-1), 1.0, -1.0)
    x = sgn * dist / gamma
    alpha = np.empty_like(x)
    pos = x >= 0
    alpha[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    alpha[~pos] = ex / (1.0 + ex)
    sil_alpha = alpha.reshape(height, width)

    if not with_gradients:
        return SilhouetteMap(sil_alpha, None)

    _, _, dpix_dcam, _ = cam_mod.project_jacobians(cam, template.vertices)
    j0 = dpix_dcam[segs[eidx, 0]]          # (npix, 2, 6)
    j1 = dpix_dcam[segs[eidx, 1]]
    w0 = (1.0 - tpar)[:, None]
    w1 = tpar[:, None]
    # d(dist)/d(endpoints) by the envelope rule at the fixed projection foot
    du = (ux[:, None] * (w0 * j0[:, 0, :] + w1 * j1[:, 0, :])
          + uy[:, None] * (w0 * j0[:, 1, :] + w1 * j1[:, 1, :]))
    dd = -sgn[:, None] * du
    sigp = (alpha * (1.0 - alpha) / gamma)[:, None]
    grad = (sigp * dd).reshape(height, width, 6)
    return SilhouetteMap(sil_alpha, grad)
