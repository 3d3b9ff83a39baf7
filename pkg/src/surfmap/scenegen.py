"""Synthetic scene factory: rendered views with exact ground truth.

Generates template views under known cameras together with masks, depth
maps, ground-truth surface-direction maps and a set of well-separated
surface keypoints with per-view projections and visibility bits — the
full input/oracle bundle the fitting and transfer experiments consume.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from surfmap import camera as cam_mod
from surfmap import formats, rasterizer
from surfmap import template as tpl_mod
from surfmap.losses import sample_depth_bilinear

__all__ = ["SyntheticScene", "generate", "keypoint_projections",
           "save_scene", "load_scene"]

N_KEYPOINTS = 14
VISIBILITY_SLACK = 1e-4
CAMERA_LAWS = ("ring", "random")

#: fraction of the smaller image dimension the template's bounding radius
#: is scaled to occupy.
VIEW_FILL = 0.35


@dataclass
class Keypoint:
    name: str
    face: int
    bary: np.ndarray
    position: np.ndarray


@dataclass
class SyntheticScene:
    template: object
    template_spec: dict
    cameras: list
    masks: list
    depth_maps: list
    gt_maps: list
    keypoints: list
    projections: np.ndarray      # (n_views, n_kp, 2)
    visibility: np.ndarray       # (n_views, n_kp) bool
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self):
        return len(self.cameras)


def _farthest_point_vertices(template, count, seed):
    verts = template.vertices
    rng = np.random.default_rng([seed, 14])
    chosen = [int(rng.integers(0, len(verts)))]
    d2 = ((verts - verts[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < count:
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((verts - verts[nxt]) ** 2).sum(axis=1))
    return chosen


def _keypoints_from_vertices(template, vertex_ids):
    out = []
    for k, vid in enumerate(vertex_ids):
        fidx = int(np.nonzero((template.faces == vid).any(axis=1))[0][0])
        corner = int(np.nonzero(template.faces[fidx] == vid)[0][0])
        bary = np.zeros(3)
        bary[corner] = 1.0
        out.append(Keypoint(f"kp{k:02d}", fidx, bary,
                            template.vertices[vid].astype(float)))
    return out


def _scene_cameras(template, n_views, seed, height, width, camera_law, fill):
    if camera_law not in CAMERA_LAWS:
        raise ValueError(
            f"unknown camera_law {camera_law!r} (expected one of {CAMERA_LAWS})")
    s = fill * min(height, width) / template.bounding_radius
    t = np.array([width / 2.0, height / 2.0])
    cams = []
    if camera_law == "ring":
        for k in range(n_views):
            azim = 2.0 * math.pi * k / n_views
            cams.append(cam_mod.Camera(s, t, np.array([0.0, azim, 0.0])))
    else:
        rng = np.random.default_rng([seed, 7])
        for _ in range(n_views):
            azim = rng.uniform(0.0, 2.0 * math.pi)
            elev = rng.uniform(-math.pi / 6.0, math.pi / 6.0)
            cams.append(cam_mod.Camera(s, t, np.array([elev, azim, 0.0])))
    return cams


def generate(template, n_views, seed, height, width, camera_law="ring",
             fill=VIEW_FILL, template_spec=None):
    """Render a deterministic multi-view scene with exact ground truth.

    ``camera_law`` is ``ring`` (even azimuth circle at zero elevation, the
    first view being the identity rotation) or ``random`` (uniform azimuth,
    elevation within +-30 degrees); ``fill`` sets the projected bounding
    radius as a fraction of the smaller image dimension.  Fourteen
    keypoints are chosen by farthest-point sampling over the template
    vertices; a keypoint is visible in a view when its camera depth is
    within a small slack of the rendered depth at its projection.
    """
    cams = _scene_cameras(template, n_views, seed, height, width, camera_law,
                          fill)
    kps = _keypoints_from_vertices(
        template, _farthest_point_vertices(template, N_KEYPOINTS, seed))
    masks, depths, gts = [], [], []
    projections = np.zeros((n_views, len(kps), 2))
    visibility = np.zeros((n_views, len(kps)), dtype=bool)
    positions = np.stack([k.position for k in kps])
    for v, cam in enumerate(cams):
        gt_map, mask = rasterizer.render_surface_directions(
            template, cam, height, width)
        depth = rasterizer.render_depth(template, cam, height, width)
        masks.append(mask)
        depths.append(depth)
        gts.append(gt_map)
        pix, z = cam_mod.project(cam, positions)
        dhat, _, inside = sample_depth_bilinear(depth.depth, pix)
        projections[v] = pix
        visibility[v] = inside & (z <= dhat + VISIBILITY_SLACK)
    meta = {"seed": int(seed), "height": int(height), "width": int(width),
            "camera_law": camera_law, "n_views": int(n_views)}
    return SyntheticScene(template, template_spec or {}, cams, masks, depths,
                          gts, kps, projections, visibility, meta)


def keypoint_projections(scene, view):
    """Keypoint CSV rows (name, x, y, visible) for one view."""
    if not 0 <= view < scene.n_views:
        raise IndexError(f"view {view} out of range")
    rows = []
    for k, kp in enumerate(scene.keypoints):
        x, y = scene.projections[view, k]
        rows.append((kp.name, float(x), float(y), bool(scene.visibility[view, k])))
    return rows


def save_scene(scene, outdir):
    """Write the scene directory: template, cameras, per-view rasters and CSVs."""
    os.makedirs(outdir, exist_ok=True)
    tpl_mod.save_template(scene.template,
                          os.path.join(outdir, "template.obj"),
                          os.path.join(outdir, "template.sph"))
    with open(os.path.join(outdir, "cameras.json"), "w") as fh:
        json.dump([c.to_dict() for c in scene.cameras], fh, indent=2)
        fh.write("\n")
    for v in range(scene.n_views):
        formats.save_mask_pgm(scene.masks[v],
                              os.path.join(outdir, f"mask_{v}.pgm"))
        formats.save_depth_pgm(scene.depth_maps[v],
                               os.path.join(outdir, f"depth_{v}.pgm"))
        formats.save_surface_map(scene.gt_maps[v],
                                 os.path.join(outdir, f"gt_{v}.csmuv"))
        formats.write_keypoints_csv(keypoint_projections(scene, v),
                                    os.path.join(outdir, f"keypoints_{v}.csv"))
    manifest = dict(scene.meta)
    manifest["template"] = scene.template_spec
    manifest["keypoints"] = [
        {"name": kp.name, "face": int(kp.face), "bary": list(map(float, kp.bary)),
         "position": list(map(float, kp.position))}
        for kp in scene.keypoints]
    manifest["files"] = sorted(
        f for f in os.listdir(outdir) if not f.endswith("manifest.json"))
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scene(indir):
    """Reload a saved scene directory (keypoint metadata from the manifest)."""
    template = tpl_mod.load_template(os.path.join(indir, "template.obj"),
                                     os.path.join(indir, "template.sph"))
    with open(os.path.join(indir, "manifest.json")) as fh:
        manifest = json.load(fh)
    with open(os.path.join(indir, "cameras.json")) as fh:
        cams = [cam_mod.Camera.from_dict(d) for d in json.load(fh)]
    n_views = manifest["n_views"]
    masks, depths, gts = [], [], []
    kp_rows = []
    for v in range(n_views):
        masks.append(formats.load_mask_pgm(os.path.join(indir, f"mask_{v}.pgm")))
        depths.append(formats.load_depth_pgm(os.path.join(indir, f"depth_{v}.pgm")))
        gts.append(formats.load_surface_map(os.path.join(indir, f"gt_{v}.csmuv")))
        kp_rows.append(formats.read_keypoints_csv(
            os.path.join(indir, f"keypoints_{v}.csv")))
    kps = [Keypoint(d["name"], d["face"], np.asarray(d["bary"]),
                    np.asarray(d["position"]))
           for d in manifest["keypoints"]]
    projections = np.zeros((n_views, len(kps), 2))
    visibility = np.zeros((n_views, len(kps)), dtype=bool)
    for v, rows in enumerate(kp_rows):
        for k, (_, x, y, vis) in enumerate(rows):
            projections[v, k] = (x, y)
            visibility[v, k] = bool(vis)
    meta = {k: manifest[k] for k in ("seed", "height", "width",
                                     "camera_law", "n_views")}
    return SyntheticScene(template, manifest.get("template", {}), cams, masks,
                          depths, gts, kps, projections, visibility, meta)
