"""Direct per-image optimization of surface maps and cameras.

Instead of amortized predictors, every image owns free variables — a
surface-direction field, a foreground-probability field and a bank of
camera hypotheses — driven by the full objective with Adam.  Directions
are renormalized to unit length after every step (a retraction onto the
sphere), scale is optimized as log(s) to stay positive, and images are
fitted independently, so results are bit-reproducible for a fixed seed
regardless of worker count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from surfmap import camera as cam_mod
from surfmap import rasterizer
from surfmap.losses import LossConfig, loss_total
from surfmap.maps import Mask, SurfaceMap, pixel_centers

__all__ = [
    "FitConfig",
    "FitState",
    "FitResult",
    "FitError",
    "init_state",
    "adam_step",
    "fit",
    "select_camera",
]

INIT_NOISE_SIGMA = 0.05


class FitError(RuntimeError):
    """Numerical failure during fitting (e.g. non-finite gradients)."""


@dataclass
class FitConfig:
    iterations: int = 2000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_hypotheses: int = 8
    seed: int = 0
    threads: int = 1
    init_mode: str = "heuristic"     # or "random": uniform seeded directions
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.n_hypotheses < 1:
            raise ValueError("need at least one hypothesis")
        if self.loss.known_pose and self.n_hypotheses != 1:
            raise ValueError("known_pose requires n_hypotheses == 1")
        if self.init_mode not in ("heuristic", "random"):
            raise ValueError("init_mode must be 'heuristic' or 'random'")


@dataclass
class _ImageState:
    mask: Mask
    known_camera: object
    dirs: np.ndarray
    fg_prob: np.ndarray
    cam_params: np.ndarray      # (n_hyp, 6): log s, tx, ty, r1, r2, r3
    logits: np.ndarray
    moments: dict
    step: int = 0
    history: list = field(default_factory=list)

    def hypothesis_set(self):
        if self.known_camera is not None:
            return cam_mod.HypothesisSet([self.known_camera], np.zeros(1))
        cams = [cam_mod.Camera(np.exp(p[0]), p[1:3], p[3:6])
                for p in self.cam_params]
        return cam_mod.HypothesisSet(cams, self.logits.copy())


@dataclass
class FitState:
    images: list
    config: FitConfig
    iteration: int = 0


@dataclass
class FitResult:
    maps: list          # SurfaceMap per image
    hypotheses: list    # HypothesisSet per image
    history: list       # per image: list of per-iteration scalar dicts


def _projected_hull_area(template, r):
    pix, _ = cam_mod.project(cam_mod.Camera(1.0, np.zeros(2), r),
                             template.vertices)
    return float(ConvexHull(pix).volume)


def _init_dirs(mask, rng):
    h, w = mask.height, mask.width
    fg = mask.bool_fg
    iy, ix = np.nonzero(fg)
    area = len(ix)
    cx = (ix + 0.5).mean()
    cy = (iy + 0.5).mean()
    rho = max(np.sqrt(area / np.pi), 1.0)
    centers = pixel_centers(h, w)
    off = (centers - np.array([cx, cy])) / rho
    rr = np.linalg.norm(off, axis=-1)
    shrink = np.minimum(1.0, 0.999 / np.maximum(rr, 1e-12))
    off = off * shrink[..., None]
    zz = -np.sqrt(np.maximum(1.0 - (off ** 2).sum(axis=-1), 0.0))
    dirs = np.concatenate([off, zz[..., None]], axis=-1)
    dirs = dirs + rng.normal(0.0, INIT_NOISE_SIGMA, size=dirs.shape)
    dirs /= np.linalg.norm(dirs, axis=-1)[..., None]
    return dirs, (cx, cy), area


def init_state(images, template, config):
    """Build the optimization state for a batch of (mask, camera) images.

    Directions start from the image-plane heuristic (normalized offset from
    the mask centroid lifted to the camera-facing hemisphere) plus seeded
    noise, or uniformly at random with ``init_mode='random'``; hypothesis
    rotations come from the deterministic wide spread, scale from matching
    mask area to the template's projected hull area, translation from the
    mask centroid, and logits start uniform.
    """
    states = []
    for idx, item in enumerate(images):
        mask, known_cam = item if isinstance(item, tuple) else (item, None)
        if config.loss.known_pose and known_cam is None:
            raise ValueError(f"image {idx}: known_pose fit requires a camera")
        if not mask.bool_fg.any():
            raise ValueError(f"image {idx}: empty mask")
        rng = np.random.default_rng([config.seed, idx])
        dirs, centroid, area = _init_dirs(mask, rng)
        if config.init_mode == "random":
            dirs = rng.normal(size=dirs.shape)
            dirs /= np.linalg.norm(dirs, axis=-1)[..., None]
        fg_prob = np.full((mask.height, mask.width), 0.5)
        n_hyp = 1 if config.loss.known_pose else config.n_hypotheses
        cam_params = np.zeros((n_hyp, 6))
        if not config.loss.known_pose:
            for i, rot in enumerate(cam_mod.spread_rotations(n_hyp)):
                hull = _projected_hull_area(template, rot)
                s = np.sqrt(area / hull)
                cam_params[i] = [np.log(s), centroid[0], centroid[1], *rot]
        moments = {}
        blocks = {"dirs": dirs.shape, "fg_prob": fg_prob.shape,
                  "logits": (n_hyp,)}
        if not config.loss.known_pose:
            blocks["cams"] = cam_params.shape
        for name, shape in blocks.items():
            moments[name] = (np.zeros(shape), np.zeros(shape))
        states.append(_ImageState(
            mask=mask,
            known_camera=known_cam if config.loss.known_pose else None,
            dirs=dirs, fg_prob=fg_prob, cam_params=cam_params,
            logits=np.zeros(n_hyp), moments=moments))
    return FitState(states, config)


def _adam_update(x, g, m, v, t, config):
    m[...] = config.beta1 * m + (1.0 - config.beta1) * g
    v[...] = config.beta2 * v + (1.0 - config.beta2) * g * g
    mhat = m / (1.0 - config.beta1 ** t)
    vhat = v / (1.0 - config.beta2 ** t)
    x -= config.lr * mhat / (np.sqrt(vhat) + config.eps)


def _apply_gradients(img, grads, config):
    img.step += 1
    t = img.step
    for name, g in grads.items():
        if name not in img.moments:
            continue
        if not np.all(np.isfinite(g)):
            raise FitError(f"non-finite gradient in variable block '{name}'")
        m, v = img.moments[name]
        target = {"dirs": img.dirs, "fg_prob": img.fg_prob,
                  "cams": img.cam_params, "logits": img.logits}[name]
        _adam_update(target, g, m, v, t, config)
    img.dirs /= np.linalg.norm(img.dirs, axis=-1)[..., None]
    np.clip(img.fg_prob, 1e-6, 1.0 - 1e-6, out=img.fg_prob)


def adam_step(state, gradients, config=None):
    """Apply one bias-corrected Adam step per image.

    ``gradients`` is one dict per image with any of the blocks ``dirs``,
    ``fg_prob``, ``cams`` (in log-scale parametrization) and ``logits``.
    Directions are renormalized and probabilities clipped afterwards.
    """
    config = config or state.config
    for img, grads in zip(state.images, gradients):
        _apply_gradients(img, grads, config)
    state.iteration += 1
    return state


def _cam_grads_to_params(breakdown, img):
    g = breakdown.grad_cams.copy()
    scales = np.exp(img.cam_params[:, 0])
    g[:, 0] *= scales        # d/d(log s) = s * d/ds
    return g


def _fit_one(img, template, config):
    known = config.loss.known_pose
    depth_cache = None
    if known and config.loss.enable_vis:
        cam = img.known_camera
        depth_cache = [rasterizer.render_depth(
            template, cam, img.mask.height, img.mask.width)]
    hints = None
    for _ in range(config.iterations):
        hyp = img.hypothesis_set()
        smap = SurfaceMap(img.dirs, img.fg_prob)
        bd = loss_total(smap, img.mask, template, hyp, config.loss,
                        depth_maps=depth_cache, phi_hints=hints)
        hints = bd.face_hints
        img.history.append(bd.scalars())
        grads = {"dirs": bd.grad_dirs, "fg_prob": bd.grad_fg_prob}
        if not known:
            grads["cams"] = _cam_grads_to_params(bd, img)
            grads["logits"] = bd.grad_logits
        _apply_gradients(img, grads, config)
    return img


def fit(images, template, config=None):
    """Fit surface maps (and cameras unless pose is known) to masked images.

    ``images`` is a list of ``Mask`` or ``(Mask, Camera)`` items; with
    ``known_pose`` every image must carry its camera.  Images are
    independent; ``config.threads`` caps worker parallelism across them.
    Returns per-image surface maps, hypothesis banks and loss histories.
    """
    config = config or FitConfig()
    state = init_state(images, template, config)
    workers = max(1, int(config.threads))
    if workers == 1 or len(state.images) <= 1:
        for img in state.images:
            _fit_one(img, template, config)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda im: _fit_one(im, template, config),
                          state.images))
    state.iteration = config.iterations
    maps = [SurfaceMap(img.dirs.copy(), img.fg_prob.copy())
            for img in state.images]
    hyps = [img.hypothesis_set() for img in state.images]
    history = [img.history for img in state.images]
    return FitResult(maps, hyps, history)


def select_camera(hyp):
    """Inference-time camera: the highest-probability hypothesis.

    Ties resolve to the lowest index; invariant under logit shifts.
    """
    return hyp.cameras[int(np.argmax(hyp.probs))]
