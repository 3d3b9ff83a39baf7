"""Training objectives with analytic gradients.

Every loss returns its scalar and the gradients with respect to the free
variables it touches: the per-pixel surface-direction field (gradients are
tangent to the sphere at each direction), the per-pixel foreground
probability, the camera parameter vectors (s, tx, ty, r1, r2, r3) and the
hypothesis logits.  Per-pixel losses are normalized by the number of
pixels they sum over, so weights are image-size independent.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from surfmap import camera as cam_mod
from surfmap import rasterizer
from surfmap import template as tpl_mod
from surfmap.maps import Mask, pixel_centers

__all__ = [
    "LossConfig",
    "LossBreakdown",
    "loss_cyc",
    "loss_vis",
    "loss_mask",
    "loss_fg",
    "loss_div",
    "loss_total",
]

log = logging.getLogger(__name__)

FG_PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    """Weights, ablation switches and rendering knobs for the objective."""

    w_cyc: float = 1.0
    w_vis: float = 1.0
    w_mask: float = 1.0
    w_fg: float = 1.0
    w_div: float = 1.0
    lambda_div: float = 0.1
    gamma: float = 1.0
    vis_margin: float = 0.0
    enable_vis: bool = True
    restrict_to_mask: bool = True
    known_pose: bool = False

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class LossBreakdown:
    """Scalar loss parts plus gradient buffers for one evaluation.

    ``cyc``, ``vis`` and ``mask`` are probability-weighted across
    hypotheses; ``total`` equals the weighted sum of the five parts.
    """

    cyc: float
    vis: float
    mask: float
    div: float
    fg: float
    total: float
    grad_dirs: np.ndarray = None       # (h, w, 3), tangent at each dir
    grad_fg_prob: np.ndarray = None    # (h, w)
    grad_cams: np.ndarray = None       # (n_hyp, 6)
    grad_logits: np.ndarray = None     # (n_hyp,)
    face_hints: np.ndarray = None      # located faces over counted pixels
    warnings: list = field(default_factory=list)

    def scalars(self):
        return {"cyc": self.cyc, "vis": self.vis, "mask": self.mask,
                "div": self.div, "fg": self.fg, "total": self.total}


# ---------------------------------------------------------------------------
# shared pieces

def _camera_terms(cam, X):
    """Projection of points X plus jacobians w.r.t. camera parameters."""
    R, dR = cam_mod.rotation_and_derivs(cam.r)
    Q = X @ R.T
    pix = cam.s * Q[:, :2] + cam.t
    z = cam.s * Q[:, 2]
    dQ = np.einsum("kij,nj->nik", dR, X)          # (n, 3xyz, 3angles)
    n = len(X)
    dpix_dcam = np.zeros((n, 2, 6))
    dpix_dcam[:, :, 0] = Q[:, :2]
    dpix_dcam[:, 0, 1] = 1.0
    dpix_dcam[:, 1, 2] = 1.0
    dpix_dcam[:, :, 3:] = cam.s * dQ[:, :2, :]
    dz_dcam = np.zeros((n, 6))
    dz_dcam[:, 0] = Q[:, 2]
    dz_dcam[:, 3:] = cam.s * dQ[:, 2, :]
    return pix, z, dpix_dcam, dz_dcam, cam.s * R


def sample_depth_bilinear(depth, pts):
    """Bilinearly sample a depth buffer at continuous raster points.

    Background (+inf) entries are clamped to the largest finite depth
    before interpolation.  Returns ``(values, d(value)/d(x,y), inside)``
    where ``inside`` marks points within the image rectangle; values and
    gradients for outside points are zeroed.
    """
    h, w = depth.shape
    finite = np.isfinite(depth)
    npts = len(pts)
    if not finite.any():
        return np.zeros(npts), np.zeros((npts, 2)), np.zeros(npts, dtype=bool)
    dmap = np.where(finite, depth, depth[finite].max())
    x, y = pts[:, 0], pts[:, 1]
    inside = (x >= 0) & (x < w) & (y >= 0) & (y < h)
    u = np.clip(x - 0.5, 0.0, w - 1.0)
    v = np.clip(y - 0.5, 0.0, h - 1.0)
    j0 = np.minimum(np.floor(u).astype(np.int64), w - 2) if w > 1 else np.zeros(npts, np.int64)
    i0 = np.minimum(np.floor(v).astype(np.int64), h - 2) if h > 1 else np.zeros(npts, np.int64)
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    fu = u - j0
    fv = v - i0
    d00 = dmap[i0, j0]
    d01 = dmap[i0, j1]
    d10 = dmap[i1, j0]
    d11 = dmap[i1, j1]
    val = (1 - fv) * ((1 - fu) * d00 + fu * d01) + fv * ((1 - fu) * d10 + fu * d11)
    gx = (1 - fv) * (d01 - d00) + fv * (d11 - d10)
    gy = (1 - fu) * (d10 - d00) + fu * (d11 - d01)
    # clamped sample coordinates have zero spatial gradient
    gx *= (x - 0.5 > 0) & (x - 0.5 < w - 1)
    gy *= (y - 0.5 > 0) & (y - 0.5 < h - 1)
    grad = np.stack([gx, gy], axis=1)
    val = np.where(inside, val, 0.0)
    grad[~inside] = 0.0
    return val, grad, inside


def _foreground(mask, restrict):
    fg = mask.bool_fg if restrict else np.ones_like(mask.fg, dtype=bool)
    iy, ix = np.nonzero(fg)
    pixels = np.stack([ix + 0.5, iy + 0.5], axis=1).astype(float)
    return fg, pixels


def _cyc_eval(X, jac, cam, pixels):
    n = len(X)
    pix, _, dpix_dcam, _, sR = _camera_terms(cam, X)
    e = pix - pixels
    value = float((e * e).sum() / n)
    grad_X = (2.0 / n) * (e @ sR[:2, :])
    grad_n = np.einsum("na,naj->nj", grad_X, jac)
    grad_cam = (2.0 / n) * np.einsum("ni,nic->c", e, dpix_dcam)
    return value, grad_n, grad_cam


def _vis_eval(X, jac, cam, pixels, depth, margin):
    n = len(X)
    pix, z, dpix_dcam, dz_dcam, sR = _camera_terms(cam, X)
    dhat, dgrad, inside = sample_depth_bilinear(depth, pix)
    hinge = z - dhat + margin
    active = inside & (hinge > 0)
    value = float(hinge[active].sum() / n)
    grad_n = np.zeros((n, 3))
    grad_cam = np.zeros(6)
    if active.any():
        a = active
        dh_dX = sR[2, :][None, :] - dgrad[a] @ sR[:2, :]
        grad_n[a] = np.einsum("na,naj->nj", dh_dX, jac[a]) / n
        grad_cam = (dz_dcam[a].sum(axis=0)
                    - np.einsum("ni,nic->c", dgrad[a], dpix_dcam[a])) / n
    off = int((~inside).sum())
    return value, grad_n, grad_cam, off


# ---------------------------------------------------------------------------
# public losses

def loss_cyc(surface_map, mask, cam, template, restrict_to_mask=True):
    """Reprojection cycle loss: lifted pixels must project back onto themselves.

    Mean over counted pixels of the squared pixel distance between p and
    the projection of the template point the pixel maps to.  Returns
    ``(value, grads)`` with ``grads['dirs']`` (h, w, 3) and
    ``grads['cam']`` (6,).
    """
    fg, pixels = _foreground(mask, restrict_to_mask)
    grads = {"dirs": np.zeros_like(surface_map.dirs), "cam": np.zeros(6)}
    if len(pixels) == 0:
        log.warning("cycle loss: empty foreground")
        return 0.0, grads
    _, _, X, jac, _ = tpl_mod.phi_with_jacobian(template, surface_map.dirs[fg])
    value, grad_n, grad_cam = _cyc_eval(X, jac, cam, pixels)
    grads["dirs"][fg] = grad_n
    grads["cam"] = grad_cam
    return value, grads


def loss_vis(surface_map, mask, cam, template, depth_map, margin=0.0,
             restrict_to_mask=True):
    """Visibility hinge: mapped points must not sit behind the rendered depth.

    Per counted pixel, ``max(0, z - D[p_hat] + margin)`` where z is the
    camera depth of the mapped template point and D is sampled bilinearly
    at the reprojected location.  No gradient flows into the depth map
    itself; reprojections outside the image contribute nothing.
    """
    fg, pixels = _foreground(mask, restrict_to_mask)
    grads = {"dirs": np.zeros_like(surface_map.dirs), "cam": np.zeros(6)}
    if len(pixels) == 0:
        log.warning("visibility loss: empty foreground")
        return 0.0, grads
    _, _, X, jac, _ = tpl_mod.phi_with_jacobian(template, surface_map.dirs[fg])
    value, grad_n, grad_cam, off = _vis_eval(
        X, jac, cam, pixels, depth_map.depth, margin)
    if off:
        log.debug("visibility loss: %d reprojections off-raster", off)
    grads["dirs"][fg] = grad_n
    grads["cam"] = grad_cam
    return value, grads


def loss_mask(silhouette, mask):
    """Mean squared difference between a soft silhouette and the mask.

    Camera gradients chain through the silhouette's stored per-pixel
    d(alpha)/d(camera) buffer when present.
    """
    diff = silhouette.alpha - mask.fg
    npix = diff.size
    value = float((diff * diff).sum() / npix)
    grads = {"cam": None}
    if silhouette.dalpha_dcam is not None:
        grads["cam"] = (2.0 / npix) * np.einsum(
            "hw,hwc->c", diff, silhouette.dalpha_dcam)
    return value, grads


def loss_fg(fg_prob, mask):
    """Mean binary cross-entropy of foreground probabilities vs the mask."""
    q = np.clip(fg_prob, FG_PROB_CLAMP, 1.0 - FG_PROB_CLAMP)
    m = mask.fg
    npix = q.size
    value = float(-(m * np.log(q) + (1 - m) * np.log1p(-q)).sum() / npix)
    grad = (-m / q + (1 - m) / (1 - q)) / npix
    grad[q != fg_prob] = 0.0
    return value, {"fg_prob": grad}


def loss_div(hyp, lambda_div=0.1):
    """Pose-diversity regularizer: probability entropy plus rotation spread.

    ``sum_i c_i log c_i - lambda * sum_{i != j} dist(r_i, r_j)``; minimizing
    it maximizes hypothesis entropy and pairwise rotation distance.
    Returns gradients for the logits and each camera's Euler angles.
    """
    n = len(hyp)
    c = hyp.probs
    ent = float((c * np.log(c)).sum())
    grad_logits = c * (np.log(c) - ent)
    rots = [cam.r for cam in hyp.cameras]
    pair = 0.0
    grad_rots = np.zeros((n, 3))
    if n > 1:
        mats = [cam_mod.rotation_and_derivs(r) for r in rots]
        for i in range(n):
            Ri, dRi = mats[i]
            for j in range(i + 1, n):
                Rj, _ = mats[j]
                u = (np.trace(Ri.T @ Rj) - 1.0) / 2.0
                uc = np.clip(u, -1.0, 1.0)
                pair += 2.0 * float(np.arccos(uc))
                if abs(uc) >= 1.0 - 1e-12:
                    continue
                dacos = -0.5 / np.sqrt(1.0 - uc * uc)
                gi = dacos * np.einsum("kab,ab->k", dRi, Rj)
                Rj_, dRj = mats[j]
                gj = dacos * np.einsum("kab,ab->k", dRj, Ri)
                # each unordered pair appears twice in the ordered sum
                grad_rots[i] += 2.0 * gi
                grad_rots[j] += 2.0 * gj
    value = ent - lambda_div * pair
    return value, {"logits": grad_logits, "rots": -lambda_div * grad_rots}


def loss_total(surface_map, mask, template, hyp, config=None, depth_maps=None,
               phi_hints=None):
    """Full objective over a hypothesis bank: Eq.-style expected loss.

    ``div + fg + sum_i c_i (cyc_i + vis_i + mask_i)``, each part multiplied
    by its configured weight.  With ``known_pose`` the bank must hold a
    single fixed camera and the objective collapses to cyc + vis + fg.
    ``depth_maps`` optionally injects pre-rendered depth maps (one per
    hypothesis); ``phi_hints`` warm-starts point location with the faces
    located on the previous evaluation (returned as ``face_hints``).
    """
    config = config or LossConfig()
    if config.known_pose and len(hyp) != 1:
        raise ValueError("known_pose requires exactly one hypothesis")
    h_img, w_img = mask.height, mask.width
    fg, pixels = _foreground(mask, config.restrict_to_mask)
    warnings = []
    n_hyp = len(hyp)
    faces = None

    have_fg = len(pixels) > 0
    if have_fg:
        faces, _, X, jac, _ = tpl_mod.phi_with_jacobian(
            template, surface_map.dirs[fg], hints=phi_hints)
    else:
        warnings.append("empty foreground")

    fg_value, fg_grads = loss_fg(surface_map.fg_prob, mask)

    grad_dirs = np.zeros_like(surface_map.dirs)
    grad_cams = np.zeros((n_hyp, 6))
    grad_logits = np.zeros(n_hyp)

    if config.known_pose:
        cam = hyp.cameras[0]
        cyc_v = vis_v = 0.0
        if have_fg:
            cyc_v, g_n, g_cam = _cyc_eval(X, jac, cam, pixels)
            acc_n = config.w_cyc * g_n
            if config.enable_vis:
                if depth_maps is not None:
                    depth = depth_maps[0].depth
                else:
                    depth = rasterizer.render_depth(template, cam, h_img, w_img).depth
                vis_v, gv_n, _, off = _vis_eval(
                    X, jac, cam, pixels, depth, config.vis_margin)
                acc_n += config.w_vis * gv_n
                if off:
                    warnings.append(f"{off} reprojections off-raster")
            grad_dirs[fg] = acc_n
        total = (config.w_cyc * cyc_v + config.w_vis * vis_v
                 + config.w_fg * fg_value)
        return LossBreakdown(
            cyc=cyc_v, vis=vis_v, mask=0.0, div=0.0, fg=fg_value, total=total,
            grad_dirs=grad_dirs, grad_fg_prob=config.w_fg * fg_grads["fg_prob"],
            grad_cams=grad_cams, grad_logits=grad_logits, face_hints=faces,
            warnings=warnings)

    probs = hyp.probs
    cyc_i = np.zeros(n_hyp)
    vis_i = np.zeros(n_hyp)
    mask_i = np.zeros(n_hyp)
    for i, cam in enumerate(hyp.cameras):
        acc_n = None
        if depth_maps is not None:
            depth_map = depth_maps[i]
        else:
            depth_map = rasterizer.render_depth(template, cam, h_img, w_img)
        if have_fg:
            cyc_i[i], g_n, g_cam = _cyc_eval(X, jac, cam, pixels)
            acc_n = config.w_cyc * g_n
            grad_cams[i] += config.w_cyc * g_cam
            if config.enable_vis:
                vis_i[i], gv_n, gv_cam, off = _vis_eval(
                    X, jac, cam, pixels, depth_map.depth, config.vis_margin)
                acc_n += config.w_vis * gv_n
                grad_cams[i] += config.w_vis * gv_cam
                if off:
                    warnings.append(f"hyp {i}: {off} reprojections off-raster")
        sil = rasterizer.render_soft_silhouette(
            template, cam, h_img, w_img, gamma=config.gamma,
            with_gradients=True, coverage=depth_map.coverage)
        mask_i[i], m_grads = loss_mask(sil, mask)
        grad_cams[i] += config.w_mask * m_grads["cam"]
        grad_cams[i] *= probs[i]
        if acc_n is not None:
            grad_dirs[fg] += probs[i] * acc_n

    div_v, div_grads = loss_div(hyp, config.lambda_div)
    for i in range(n_hyp):
        grad_cams[i, 3:] += config.w_div * div_grads["rots"][i]

    per_hyp = (config.w_cyc * cyc_i + config.w_vis * vis_i
               + config.w_mask * mask_i)
    expected = float((probs * per_hyp).sum())
    grad_logits = (config.w_div * div_grads["logits"]
                   + probs * (per_hyp - expected))

    cyc_bar = float((probs * cyc_i).sum())
    vis_bar = float((probs * vis_i).sum())
    mask_bar = float((probs * mask_i).sum())
    total = (config.w_div * div_v + config.w_fg * fg_value + expected)
    return LossBreakdown(
        cyc=cyc_bar, vis=vis_bar, mask=mask_bar, div=div_v, fg=fg_value,
        total=total, grad_dirs=grad_dirs,
        grad_fg_prob=config.w_fg * fg_grads["fg_prob"],
        grad_cams=grad_cams, grad_logits=grad_logits, face_hints=faces,
        warnings=warnings)
