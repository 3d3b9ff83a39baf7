"""Command-line interface: scene generation, fitting, transfer, evaluation
and gradient self-checks.

Exit codes: 0 success, 2 usage/validation error, 3 numerical failure.
Options may come from a ``key=value`` config file via ``--config``;
explicit flags override the file, unknown keys are rejected.  The worker
cap falls back to the CSM_THREADS environment variable when ``--threads``
is not given anywhere.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from surfmap import camera as cam_mod
from surfmap import correspondence, formats, metrics, rasterizer, scenegen
from surfmap import template as tpl_mod
from surfmap.fitter import FitConfig, FitError, fit, select_camera
from surfmap.gradcheck import run_gradcheck
from surfmap.losses import LossConfig
from surfmap.maps import Mask

__all__ = ["main", "entry"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class _UsageError(ValueError):
    pass


def _add_common(parser):
    parser.add_argument("--seed", type=int, help="RNG seed (default 0)")
    parser.add_argument("--threads", type=int,
                        help="worker cap (default: CSM_THREADS or 1)")
    parser.add_argument("--config", type=str,
                        help="key=value file supplying defaults for flags")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="surfmap",
        description="dense surface mapping by direct loss optimization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenegen", help="generate a synthetic scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--subdiv", type=int, help="icosphere subdivisions (default 3)")
    p.add_argument("--profile", type=str, help="sphere|ellipsoid|blob (default blob)")
    p.add_argument("--params", type=str, help="comma-separated profile parameters")
    p.add_argument("--views", type=int, help="number of views (default 8)")
    p.add_argument("--size", type=int, help="square image size (default 128)")
    p.add_argument("--camera-law", type=str, help="ring|random (default ring)")
    p.add_argument("--fill", type=float,
                   help="bounding radius as a fraction of image size (default 0.35)")
    _add_common(p)

    p = sub.add_parser("fit", help="fit surface maps and cameras to a scene")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hypotheses", type=int, help="camera hypotheses (default 8)")
    p.add_argument("--gamma", type=float, help="silhouette softness in pixels")
    p.add_argument("--known-pose", action="store_true", default=None,
                   help="use the scene cameras; optimize maps only")
    p.add_argument("--no-vis", action="store_true", default=None,
                   help="ablation: disable the visibility loss")
    p.add_argument("--no-mask-restrict", action="store_true", default=None,
                   help="ablation: apply cyc/vis on all pixels")
    p.add_argument("--init", type=str,
                   help="direction init: heuristic|random (default heuristic)")
    _add_common(p)

    p = sub.add_parser("transfer", help="transfer keypoints between two views")
    p.add_argument("--scene", required=True)
    p.add_argument("--source-view", type=int, required=True)
    p.add_argument("--target-view", type=int, required=True)
    p.add_argument("--maps-dir", type=str,
                   help="directory of fitted map_<k>.csmuv (default: scene ground truth)")
    p.add_argument("--out", required=True, help="transfers CSV path")
    p.add_argument("--tau", type=float,
                   help="non-correspondence threshold (default 0.1 x bounding radius)")
    p.add_argument("--alpha", type=float, help="PCK radius fraction (default 0.1)")
    p.add_argument("--eval-out", type=str, help="write PCK summary JSON here")
    _add_common(p)

    p = sub.add_parser("eval", help="PCK/APK metrics from a records CSV")
    p.add_argument("--records", required=True)
    p.add_argument("--alpha", type=float, help="PCK radius fraction (default 0.1)")
    p.add_argument("--n-pair", type=int,
                   help="ground-truth correspondence count (default: gt-present records)")
    p.add_argument("--out-json", required=True)
    p.add_argument("--out-pr", required=True)
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient self-check")
    p.add_argument("--out", type=str, help="report JSON path (default stdout)")
    p.add_argument("--perturb-kinks", action="store_true", default=None,
                   help="probe the visibility hinge at its kink (must fail)")
    _add_common(p)
    return parser


_DEFAULTS = {
    "scenegen": {"subdiv": 3, "profile": "blob", "params": "0.3,0.2",
                 "views": 8, "size": 128, "camera_law": "ring", "fill": 0.35},
    "fit": {"iterations": 2000, "lr": 1e-4, "hypotheses": 8, "gamma": 1.0,
            "known_pose": False, "no_vis": False, "no_mask_restrict": False,
            "init": "heuristic"},
    "transfer": {"maps_dir": None, "tau": None, "alpha": 0.1, "eval_out": None},
    "eval": {"alpha": 0.1, "n_pair": None},
    "gradcheck": {"out": None, "perturb_kinks": False},
}
_COMMON_DEFAULTS = {"seed": 0, "threads": None, "config": None}
_BOOL_KEYS = {"known_pose", "no_vis", "no_mask_restrict", "perturb_kinks"}


def _parse_config_file(path, allowed):
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise _UsageError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key = key.strip().replace("-", "_")
            raw = raw.strip()
            if key not in allowed:
                raise _UsageError(f"{path}:{lineno}: unknown key '{key}'")
            if key in _BOOL_KEYS:
                values[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                values[key] = raw
    return values


def _coerce(key, value, defaults):
    if value is None or not isinstance(value, str):
        return value
    ref = defaults.get(key)
    if key in _BOOL_KEYS:
        return bool(value)
    if isinstance(ref, int) and not isinstance(ref, bool):
        return int(value)
    if isinstance(ref, float):
        return float(value)
    if key in ("seed", "threads", "views", "size", "subdiv", "iterations",
               "hypotheses", "n_pair", "source_view", "target_view"):
        return int(value)
    if key in ("lr", "gamma", "tau", "alpha", "fill"):
        return float(value)
    return value


def _resolve_options(args):
    """Merge built-in defaults, the optional config file and CLI flags."""
    defaults = dict(_COMMON_DEFAULTS)
    defaults.update(_DEFAULTS.get(args.command, {}))
    merged = dict(defaults)
    if getattr(args, "config", None):
        allowed = set(defaults) | {"source_view", "target_view", "scene",
                                   "out", "records", "out_json", "out_pr",
                                   "maps_dir"}
        file_values = _parse_config_file(args.config, allowed)
        for key, val in file_values.items():
            merged[key] = _coerce(key, val, defaults)
    for key, val in vars(args).items():
        if key in ("command", "config"):
            continue
        if val is not None:
            merged[key] = val
    if merged.get("threads") is None:
        env = os.environ.get("CSM_THREADS")
        merged["threads"] = int(env) if env else 1
    if merged["threads"] < 1:
        raise _UsageError("--threads must be >= 1")
    return argparse.Namespace(command=args.command, **merged)


def _limit_blas_threads(n):
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        pass


# ---------------------------------------------------------------------------
# commands

def _cmd_scenegen(opts):
    params = [float(x) for x in opts.params.split(",") if x.strip() != ""]
    template = tpl_mod.make_icosphere_template(opts.subdiv, opts.profile, params)
    scene = scenegen.generate(
        template, opts.views, opts.seed, opts.size, opts.size,
        camera_law=opts.camera_law, fill=opts.fill,
        template_spec={"subdiv": opts.subdiv, "profile": opts.profile,
                       "params": params})
    scenegen.save_scene(scene, opts.out)
    print(f"scene written to {opts.out} ({opts.views} views, "
          f"{opts.size}x{opts.size})")
    return EXIT_OK


def _visualization(mask, smap):
    h, w = mask.height, mask.width
    panel = np.zeros((h, 2 * w, 3))
    panel[:, :w, :] = mask.fg[..., None]
    rgb = (smap.dirs + 1.0) / 2.0
    rgb = rgb * (smap.fg_prob >= 0.5)[..., None]
    panel[:, w:, :] = rgb
    return panel


def _cmd_fit(opts):
    scene = scenegen.load_scene(opts.scene)
    if opts.known_pose and opts.hypotheses not in (None, 1, 8):
        raise _UsageError("--known-pose is incompatible with --hypotheses")
    loss_cfg = LossConfig(
        gamma=opts.gamma,
        enable_vis=not opts.no_vis,
        restrict_to_mask=not opts.no_mask_restrict,
        known_pose=opts.known_pose)
    config = FitConfig(
        iterations=opts.iterations, lr=opts.lr,
        n_hypotheses=1 if opts.known_pose else opts.hypotheses,
        seed=opts.seed, threads=opts.threads, init_mode=opts.init,
        loss=loss_cfg)
    if opts.known_pose:
        images = [(scene.masks[v], scene.cameras[v])
                  for v in range(scene.n_views)]
    else:
        images = list(scene.masks)
    result = fit(images, scene.template, config)

    os.makedirs(opts.out, exist_ok=True)
    for v, smap in enumerate(result.maps):
        formats.save_surface_map(smap, os.path.join(opts.out, f"map_{v}.csmuv"))
        formats.save_ppm(_visualization(scene.masks[v], smap),
                         os.path.join(opts.out, f"viz_{v}.ppm"))
    with open(os.path.join(opts.out, "hypotheses.json"), "w") as fh:
        json.dump([h.to_dict() for h in result.hypotheses], fh, indent=2)
        fh.write("\n")
    if config.iterations > 0:
        mean_history = []
        for it in range(config.iterations):
            row = {k: float(np.mean([result.history[v][it][k]
                                     for v in range(len(result.history))]))
                   for k in ("cyc", "vis", "mask", "div", "fg", "total")}
            mean_history.append(row)
        formats.write_loss_history(
            mean_history, os.path.join(opts.out, "losses.csv"))
        print(f"fit: {len(result.maps)} images, {config.iterations} iterations, "
              f"final total {mean_history[-1]['total']:.6g}")
    else:
        formats.write_loss_history([], os.path.join(opts.out, "losses.csv"))
        print(f"fit: {len(result.maps)} images, 0 iterations (init copied)")
    return EXIT_OK


def _load_view_map(opts, scene, view):
    if opts.maps_dir:
        return formats.load_surface_map(
            os.path.join(opts.maps_dir, f"map_{view}.csmuv"))
    return scene.gt_maps[view]


def _cmd_transfer(opts):
    scene = scenegen.load_scene(opts.scene)
    for v in (opts.source_view, opts.target_view):
        if not 0 <= v < scene.n_views:
            raise _UsageError(f"view {v} out of range (scene has {scene.n_views})")
    src_map = _load_view_map(opts, scene, opts.source_view)
    tgt_map = _load_view_map(opts, scene, opts.target_view)
    src_mask = scene.masks[opts.source_view]
    tgt_mask = scene.masks[opts.target_view]
    tau = opts.tau if opts.tau is not None else correspondence.default_tau(scene.template)

    kp_rows = scenegen.keypoint_projections(scene, opts.source_view)
    src_visible = [r for r in kp_rows if r[3]]
    points = [(r[1], r[2]) for r in src_visible]
    results = correspondence.transfer_set(
        src_map, tgt_map, tgt_mask, points, scene.template, tau=tau,
        source_mask=src_mask)

    rows = []
    for (name, _, _, _), res in zip(src_visible, results):
        rows.append((name, res.target_pixel[0], res.target_pixel[1],
                     res.distance_3d, res.confidence, res.corresponds))
    formats.write_transfers_csv(rows, opts.out)

    if opts.eval_out:
        tgt_rows = {r[0]: r for r in scenegen.keypoint_projections(
            scene, opts.target_view)}
        records = []
        h, w = tgt_mask.height, tgt_mask.width
        hidden_flagged = hidden_total = 0
        for (name, _, _, _), res in zip(src_visible, results):
            gt_row = tgt_rows[name]
            gt_visible = bool(gt_row[3])
            gt = (gt_row[1], gt_row[2]) if gt_visible else None
            records.append(metrics.EvalRecord(
                name, res.target_pixel, res.confidence, gt, h, w))
            if not gt_visible:
                hidden_total += 1
                hidden_flagged += int(not res.corresponds)
        summary = {"tau": tau, "alpha": opts.alpha,
                   "n_keypoints": len(records),
                   "hidden_total": hidden_total,
                   "hidden_flagged_non_corresponding": hidden_flagged}
        present = [r for r in records if r.gt is not None]
        if present:
            summary["pck"] = metrics.pck(present, opts.alpha)
        with open(opts.eval_out, "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
    print(f"transfer: {len(rows)} keypoints "
          f"{opts.source_view}->{opts.target_view}, tau={tau:.4g}")
    return EXIT_OK


def _cmd_eval(opts):
    records = formats.read_records_csv(opts.records)
    if not records:
        raise _UsageError("records file is empty")
    n_pair = opts.n_pair
    if n_pair is None:
        n_pair = sum(1 for r in records if r.gt is not None)
    try:
        curve, ap = metrics.apk(records, opts.alpha, n_pair)
        pck_value = metrics.pck(records, opts.alpha)
    except metrics.MetricsError as exc:
        raise _UsageError(str(exc))
    metrics.write_pr_curve(curve, opts.out_pr)
    with open(opts.out_json, "w") as fh:
        json.dump({"pck": pck_value, "ap": ap, "alpha": opts.alpha,
                   "n_pair": n_pair, "n_records": len(records)}, fh, indent=2)
        fh.write("\n")
    print(f"eval: PCK@{opts.alpha}={pck_value:.4f} APK={ap:.4f} "
          f"({len(records)} records, n_pair={n_pair})")
    return EXIT_OK


def _cmd_gradcheck(opts):
    report = run_gradcheck(seed=opts.seed, perturb_kinks=opts.perturb_kinks)
    text = json.dumps(report, indent=2)
    if opts.out:
        with open(opts.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    for name, suite in report["suites"].items():
        status = "ok" if suite["pass"] else "FAIL"
        print(f"gradcheck {name}: max_rel_err={suite['max_rel_err']:.3g} "
              f"tol={suite['tolerance']:.0e} [{status}]", file=sys.stderr)
    return EXIT_OK if report["pass"] else EXIT_NUMERIC


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        opts = _resolve_options(args)
        _limit_blas_threads(opts.threads)
        handler = {
            "scenegen": _cmd_scenegen,
            "fit": _cmd_fit,
            "transfer": _cmd_transfer,
            "eval": _cmd_eval,
            "gradcheck": _cmd_gradcheck,
        }[opts.command]
        return handler(opts)
    except (_UsageError, tpl_mod.TemplateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FitError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
