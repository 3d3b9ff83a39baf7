"""Finite-difference verification of every analytic gradient.

Each suite samples seeded random configurations away from the known
nonsmooth sets (face boundaries, hinge kinks, bilinear cell edges, clamp
boundaries), compares analytic gradients against central differences and
reports the worst relative error.  The kink suite deliberately probes the
visibility hinge at its boundary to demonstrate the detector notices.
"""
from __future__ import annotations

import numpy as np

from surfmap import camera as cam_mod
from surfmap import rasterizer
from surfmap import template as tpl_mod
from surfmap.losses import (LossConfig, loss_cyc, loss_div, loss_fg,
                            loss_mask, loss_total, loss_vis)
from surfmap.maps import Mask, SurfaceMap
from surfmap.template import phi_with_jacobian

__all__ = ["run_gradcheck", "rel_err", "central_diff"]


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def central_diff(f, h):
    """Derivative of a scalar function of a scalar offset at zero."""
    return (f(h) - f(-h)) / (2.0 * h)


def _random_unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1)[:, None]


def _smooth_dirs(template, rng, n, margin=1e-3):
    """Unit directions well clear of spherical-triangle edges."""
    out = np.empty((0, 3))
    while len(out) < n:
        cand = _random_unit(rng, 2 * n)
        _, margins = tpl_mod._scan_faces(template, cand)
        out = np.concatenate([out, cand[margins > margin]])
    return out[:n]


def _random_camera(rng, scale=20.0, offset=32.0):
    return cam_mod.Camera(scale * rng.uniform(0.7, 1.3),
                          offset + rng.normal(size=2),
                          rng.uniform(-np.pi, np.pi, size=3))


def _perturb_camera(cam, k, h):
    p = cam.params()
    p[k] += h
    return cam_mod.Camera(p[0], p[1:3], p[3:6])


def _suite_phi_jacobian(rng, report):
    template = tpl_mod.make_icosphere_template(2, "blob", [0.3, 0.2])
    dirs = _smooth_dirs(template, rng, 100)
    _, _, _, jac, _ = phi_with_jacobian(template, dirs)
    h = 1e-5
    worst = 0.0
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        pp = tpl_mod.phi(template, dirs + e).position
        pm = tpl_mod.phi(template, dirs - e).position
        fd = (pp - pm) / (2 * h)
        # phi is scale invariant in its direction argument, so the plain
        # coordinate difference probes the tangent-projected jacobian
        worst = max(worst, rel_err(fd, jac[:, :, k],
                                   floor=1e-3 * np.abs(jac).max()))
    report("phi_jacobian", worst, 1e-4, 300)


def _suite_projection(rng, report):
    h = 1e-6
    worst = 0.0
    for _ in range(200):
        cam = _random_camera(rng)
        P = rng.normal(size=3) * 2.0
        dpix_dP, dz_dP, dpix_dc, dz_dc = cam_mod.project_jacobians(cam, P)
        fd_pix_P = np.empty((2, 3))
        fd_z_P = np.empty(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            p1, z1 = cam_mod.project(cam, P + e)
            p0, z0 = cam_mod.project(cam, P - e)
            fd_pix_P[:, k] = (p1 - p0) / (2 * h)
            fd_z_P[k] = (z1 - z0) / (2 * h)
        fd_pix_c = np.empty((2, 6))
        fd_z_c = np.empty(6)
        for k in range(6):
            p1, z1 = cam_mod.project(_perturb_camera(cam, k, h), P)
            p0, z0 = cam_mod.project(_perturb_camera(cam, k, -h), P)
            fd_pix_c[:, k] = (p1 - p0) / (2 * h)
            fd_z_c[k] = (z1 - z0) / (2 * h)
        scale = max(cam.s * 2, 1.0)
        worst = max(worst,
                    rel_err(fd_pix_P, dpix_dP, floor=1e-6 * scale),
                    rel_err(fd_z_P, dz_dP, floor=1e-6 * scale),
                    rel_err(fd_pix_c, dpix_dc, floor=1e-6 * scale),
                    rel_err(fd_z_c, dz_dc, floor=1e-6 * scale))
    report("projection_jacobians", worst, 1e-5, 200)


def _disk_mask(size, radius_frac=0.4):
    ys, xs = np.mgrid[0:size, 0:size]
    r = np.hypot(xs + 0.5 - size / 2, ys + 0.5 - size / 2)
    return Mask((r <= radius_frac * size).astype(float))


def _test_scene(rng, size=24):
    template = tpl_mod.make_icosphere_template(2, "blob", [0.3, 0.2])
    mask = _disk_mask(size)
    fg = mask.bool_fg
    dirs = np.tile([0.0, 0.0, 1.0], (size, size, 1)).astype(float)
    dirs[fg] = _smooth_dirs(template, rng, int(fg.sum()), margin=2e-3)
    smap = SurfaceMap(dirs, np.full((size, size), 0.5))
    cam = cam_mod.Camera(0.35 * size, np.full(2, size / 2.0),
                         rng.uniform(-0.3, 0.3, size=3))
    return template, mask, smap, cam


def _suite_cyc(rng, report):
    template, mask, smap, cam = _test_scene(rng)
    value, grads = loss_cyc(smap, mask, cam, template)
    fg = mask.bool_fg
    iy, ix = np.nonzero(fg)
    worst = 0.0
    gscale = max(np.abs(grads["dirs"]).max(), 1e-8)
    h = 1e-6
    for probe in range(50):
        k = rng.integers(0, len(ix))
        y, x = iy[k], ix[k]
        n0 = smap.dirs[y, x].copy()
        tau = rng.normal(size=3)
        tau -= tau.dot(n0) * n0
        tau /= np.linalg.norm(tau)

        def at(offset):
            d = smap.dirs.copy()
            d[y, x] = n0 + offset * tau
            d[y, x] /= np.linalg.norm(d[y, x])
            v, _ = loss_cyc(SurfaceMap(d, smap.fg_prob), mask, cam, template)
            return v

        fd = central_diff(at, h)
        an = grads["dirs"][y, x].dot(tau)
        worst = max(worst, rel_err(fd, an, floor=1e-4 * gscale))
    for k in range(6):
        def at_cam(offset, k=k):
            v, _ = loss_cyc(smap, mask, _perturb_camera(cam, k, offset),
                            template)
            return v
        fd = central_diff(at_cam, 1e-6)
        worst = max(worst, rel_err(fd, grads["cam"][k],
                                   floor=1e-4 * np.abs(grads["cam"]).max()))
    report("loss_cyc", worst, 1e-4, 56)


def _vis_setup(rng):
    template, mask, smap, cam = _test_scene(rng)
    depth = rasterizer.render_depth(template, cam, mask.height, mask.width)
    return template, mask, smap, cam, depth


def _hinge_values(smap, mask, cam, template, depth):
    from surfmap.losses import _camera_terms, _foreground, sample_depth_bilinear
    fg, pixels = _foreground(mask, True)
    _, _, X, _, _ = phi_with_jacobian(template, smap.dirs[fg])
    pix, z, _, _, _ = _camera_terms(cam, X)
    dhat, _, inside = sample_depth_bilinear(depth.depth, pix)
    return z - dhat, inside, fg


def _suite_vis(rng, report, at_kink=False):
    template, mask, smap, cam, depth = _vis_setup(rng)
    if at_kink:
        # ground-truth directions sit exactly on the depth surface: the
        # hinge argument is ~0 everywhere and finite differences straddle it
        gt, gt_mask = rasterizer.render_surface_directions(
            template, cam, mask.height, mask.width)
        both = mask.bool_fg & gt_mask.bool_fg
        dirs = smap.dirs.copy()
        dirs[both] = gt.dirs[both]
        smap = SurfaceMap(dirs, smap.fg_prob)
    value, grads = loss_vis(smap, mask, cam, template, depth)
    hinge, inside, fgidx = _hinge_values(smap, mask, cam, template, depth)
    iy, ix = np.nonzero(fgidx)
    clear = np.abs(hinge) > 1e-2 if not at_kink else np.abs(hinge) < 1e-3
    candidates = np.nonzero(clear & inside)[0]
    worst = 0.0
    gscale = max(np.abs(grads["dirs"]).max(), 1e-8)
    probes = 0
    for probe in range(80):
        if len(candidates) == 0:
            break
        k = candidates[rng.integers(0, len(candidates))]
        y, x = iy[k], ix[k]
        n0 = smap.dirs[y, x].copy()
        tau = rng.normal(size=3)
        tau -= tau.dot(n0) * n0
        tau /= np.linalg.norm(tau)

        def at(offset):
            d = smap.dirs.copy()
            d[y, x] = n0 + offset * tau
            d[y, x] /= np.linalg.norm(d[y, x])
            v, _ = loss_vis(SurfaceMap(d, smap.fg_prob), mask, cam,
                            template, depth)
            return v

        fd = central_diff(at, 1e-6)
        an = grads["dirs"][y, x].dot(tau)
        worst = max(worst, rel_err(fd, an, floor=1e-4 * gscale))
        probes += 1
    if not at_kink:
        for k in range(6):
            def at_cam(offset, k=k):
                v, _ = loss_vis(smap, mask, _perturb_camera(cam, k, offset),
                                template, depth)
                return v
            fd = central_diff(at_cam, 1e-6)
            worst = max(worst, rel_err(
                fd, grads["cam"][k], floor=1e-4 * np.abs(grads["cam"]).max()))
            probes += 1
    name = "loss_vis_at_kink" if at_kink else "loss_vis"
    report(name, worst, 1e-4, probes)


def _suite_mask(rng, report):
    template = tpl_mod.make_icosphere_template(1, "blob", [0.3, 0.2])
    size = 32
    mask = _disk_mask(size)
    worst = 0.0
    for _ in range(3):
        cam = cam_mod.Camera(0.3 * size * rng.uniform(0.8, 1.2),
                             np.full(2, size / 2.0) + rng.normal(size=2),
                             rng.uniform(-np.pi, np.pi, size=3))
        sil = rasterizer.render_soft_silhouette(template, cam, size, size)
        value, grads = loss_mask(sil, mask)
        # translation probed at the coarse 1e-3 px step; scale and rotation
        # steps stay below the scale at which the outline edge set changes
        steps = (1e-5, 1e-3, 1e-3, 1e-5, 1e-5, 1e-5)
        for k in range(6):
            def at(offset, k=k):
                s2 = rasterizer.render_soft_silhouette(
                    template, _perturb_camera(cam, k, offset), size, size,
                    with_gradients=False)
                v, _ = loss_mask(s2, mask)
                return v
            fd = central_diff(at, steps[k])
            worst = max(worst, rel_err(fd, grads["cam"][k],
                                       floor=1e-3 * np.abs(grads["cam"]).max()))
    report("loss_mask", worst, 1e-2, 18)


def _suite_fg(rng, report):
    size = 16
    mask = _disk_mask(size)
    prob = rng.uniform(0.05, 0.95, size=(size, size))
    value, grads = loss_fg(prob, mask)
    worst = 0.0
    for _ in range(30):
        y, x = rng.integers(0, size, size=2)

        def at(offset):
            p = prob.copy()
            p[y, x] += offset
            v, _ = loss_fg(p, mask)
            return v

        fd = central_diff(at, 1e-6)
        worst = max(worst, rel_err(fd, grads["fg_prob"][y, x]))
    report("loss_fg", worst, 1e-6, 30)


def _random_hypotheses(rng, n):
    cams = []
    for _ in range(n):
        cams.append(_random_camera(rng, scale=8.0, offset=12.0))
    return cam_mod.HypothesisSet(cams, rng.normal(size=n))


def _suite_div(rng, report):
    hyp = _random_hypotheses(rng, 8)
    value, grads = loss_div(hyp, lambda_div=0.1)
    worst_logit = 0.0
    for k in range(8):
        def at(offset, k=k):
            logits = hyp.logits.copy()
            logits[k] += offset
            v, _ = loss_div(cam_mod.HypothesisSet(hyp.cameras, logits), 0.1)
            return v
        fd = central_diff(at, 1e-6)
        worst_logit = max(worst_logit, rel_err(fd, grads["logits"][k]))
    report("loss_div_logits", worst_logit, 1e-6, 8)
    worst_rot = 0.0
    for i in range(8):
        for k in range(3):
            def at(offset, i=i, k=k):
                cams = list(hyp.cameras)
                r = cams[i].r.copy()
                r[k] += offset
                cams[i] = cam_mod.Camera(cams[i].s, cams[i].t, r)
                v, _ = loss_div(cam_mod.HypothesisSet(cams, hyp.logits), 0.1)
                return v
            fd = central_diff(at, 1e-6)
            worst_rot = max(worst_rot, rel_err(fd, grads["rots"][i, k],
                                               floor=1e-6))
    report("loss_div_rotations", worst_rot, 1e-4, 24)


def _suite_total_logits(rng, report):
    size = 24
    template = tpl_mod.make_icosphere_template(1, "blob", [0.3, 0.2])
    mask = _disk_mask(size)
    fg = mask.bool_fg
    dirs = np.tile([0.0, 0.0, 1.0], (size, size, 1)).astype(float)
    dirs[fg] = _smooth_dirs(template, rng, int(fg.sum()), margin=2e-3)
    smap = SurfaceMap(dirs, np.full((size, size), 0.5))
    cams = [cam_mod.Camera(0.3 * size, np.full(2, size / 2.0) + rng.normal(size=2),
                           rng.uniform(-np.pi, np.pi, size=3))
            for _ in range(4)]
    hyp = cam_mod.HypothesisSet(cams, rng.normal(size=4))
    config = LossConfig()
    bd = loss_total(smap, mask, template, hyp, config)
    worst = 0.0
    for k in range(4):
        def at(offset, k=k):
            logits = hyp.logits.copy()
            logits[k] += offset
            b = loss_total(smap, mask, template,
                           cam_mod.HypothesisSet(cams, logits), config)
            return b.total
        fd = central_diff(at, 1e-5)
        worst = max(worst, rel_err(fd, bd.grad_logits[k],
                                   floor=1e-6 * np.abs(bd.grad_logits).max()))
    report("loss_total_logits", worst, 1e-4, 4)


def run_gradcheck(seed=0, perturb_kinks=False):
    """Run every finite-difference suite; returns the report dict."""
    rng = np.random.default_rng(seed)
    suites = {}

    def report(name, worst, tol, probes):
        suites[name] = {
            "max_rel_err": worst,
            "tolerance": tol,
            "probes": probes,
            "pass": bool(worst <= tol),
        }

    _suite_phi_jacobian(rng, report)
    _suite_projection(rng, report)
    _suite_cyc(rng, report)
    _suite_vis(rng, report)
    _suite_mask(rng, report)
    _suite_fg(rng, report)
    _suite_div(rng, report)
    _suite_total_logits(rng, report)
    if perturb_kinks:
        _suite_vis(rng, report, at_kink=True)
    ok = all(s["pass"] for s in suites.values())
    return {"seed": int(seed), "perturb_kinks": bool(perturb_kinks),
            "suites": suites, "pass": ok}
