"""On-disk formats: surface maps, 16-bit PGM rasters, CSV tables.

Surface maps use the CSMUV1 container: the magic bytes ``CSMUV1\\0``,
little-endian u32 height and width, then row-major float32 unit vectors
(h*w*3) followed by float32 foreground probabilities (h*w).  Rasters are
binary 16-bit PGM with an affine value scale recorded in a JSON sidecar.
"""
from __future__ import annotations

import csv
import json

import numpy as np

from surfmap.maps import DepthMap, Mask, SilhouetteMap, SurfaceMap

__all__ = [
    "save_surface_map",
    "load_surface_map",
    "save_pgm16",
    "load_pgm16",
    "save_depth_pgm",
    "load_depth_pgm",
    "save_mask_pgm",
    "load_mask_pgm",
    "save_ppm",
    "write_loss_history",
    "write_keypoints_csv",
    "read_keypoints_csv",
    "write_transfers_csv",
    "read_records_csv",
    "write_records_csv",
]

CSMUV_MAGIC = b"CSMUV1\x00"


def save_surface_map(smap, path):
    with open(path, "wb") as fh:
        fh.write(CSMUV_MAGIC)
        h, w = smap.height, smap.width
        fh.write(np.array([h, w], dtype="<u4").tobytes())
        fh.write(smap.dirs.astype("<f4").tobytes())
        fh.write(smap.fg_prob.astype("<f4").tobytes())


def load_surface_map(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CSMUV_MAGIC))
        if magic != CSMUV_MAGIC:
            raise ValueError(f"{path}: not a CSMUV1 surface map")
        h, w = np.frombuffer(fh.read(8), dtype="<u4")
        h, w = int(h), int(w)
        dirs = np.frombuffer(fh.read(h * w * 3 * 4), dtype="<f4")
        fg = np.frombuffer(fh.read(h * w * 4), dtype="<f4")
        if dirs.size != h * w * 3 or fg.size != h * w:
            raise ValueError(f"{path}: truncated surface map")
    dirs = dirs.reshape(h, w, 3).astype(float)
    norms = np.linalg.norm(dirs, axis=-1)
    dirs = dirs / np.maximum(norms, 1e-12)[..., None]
    return SurfaceMap(dirs, fg.reshape(h, w).astype(float)).validate()


# ---------------------------------------------------------------------------
# PGM rasters (16-bit, big-endian samples per the netpbm spec)

def save_pgm16(values, path, sidecar=None, lo=None, hi=None, background=None):
    """Affine-scale a float raster into 16-bit PGM plus JSON sidecar.

    Non-finite entries map to the reserved sample 65535 and are recorded
    as ``background`` in the sidecar.
    """
    values = np.asarray(values, dtype=float)
    finite = np.isfinite(values)
    if lo is None:
        lo = float(values[finite].min()) if finite.any() else 0.0
    if hi is None:
        hi = float(values[finite].max()) if finite.any() else 1.0
    span = hi - lo if hi > lo else 1.0
    scaled = np.zeros_like(values)
    scaled[finite] = np.clip((values[finite] - lo) / span, 0.0, 1.0)
    samples = np.round(scaled * 65534.0).astype("<u2")
    samples[~finite] = 65535
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n65535\n" % (w, h))
        fh.write(samples.astype(">u2").tobytes())
    meta = {"min": lo, "max": hi, "background": 65535}
    with open(sidecar or str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_pgm16(path, sidecar=None):
    """Inverse of :func:`save_pgm16`; background samples come back as +inf."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P5" or fields[3] != b"65535":
        raise ValueError(f"{path}: expected 16-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    samples = np.frombuffer(data[pos:pos + 2 * w * h], dtype=">u2")
    samples = samples.reshape(h, w).astype(float)
    with open(sidecar or str(path) + ".json") as fh:
        meta = json.load(fh)
    values = meta["min"] + (samples / 65534.0) * (meta["max"] - meta["min"])
    values[samples == meta.get("background", 65535)] = np.inf
    return values, meta


def save_depth_pgm(depth_map, path):
    save_pgm16(depth_map.depth, path)


def load_depth_pgm(path):
    values, _ = load_pgm16(path)
    return DepthMap(values)


def save_mask_pgm(mask, path):
    save_pgm16(mask.fg, path, lo=0.0, hi=1.0)


def load_mask_pgm(path):
    values, _ = load_pgm16(path)
    values[~np.isfinite(values)] = 0.0
    return Mask(np.clip(values, 0.0, 1.0))


def save_ppm(rgb, path):
    """8-bit binary PPM from float RGB in [0, 1]."""
    rgb = np.asarray(rgb, dtype=float)
    h, w, _ = rgb.shape
    samples = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(samples.tobytes())


# ---------------------------------------------------------------------------
# CSV tables

def write_loss_history(history, path):
    """Per-iteration scalar losses: iteration, cyc, vis, mask, div, fg, total."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "cyc", "vis", "mask", "div", "fg", "total"])
        for i, row in enumerate(history):
            writer.writerow([i] + [repr(float(row[k]))
                                   for k in ("cyc", "vis", "mask", "div", "fg", "total")])


def write_keypoints_csv(rows, path):
    """Rows of (name, x, y, visible)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "x", "y", "visible"])
        for name, x, y, vis in rows:
            writer.writerow([name, repr(float(x)), repr(float(y)), int(vis)])


def read_keypoints_csv(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["name", "x", "y", "visible"]:
            raise ValueError(f"{path}: unrecognized keypoint header")
        for row in reader:
            out.append((row[0], float(row[1]), float(row[2]), int(row[3])))
    return out


def write_transfers_csv(rows, path):
    """Rows of (name, x, y, distance, confidence, corresponds)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "x", "y", "distance", "confidence", "corresponds"])
        for name, x, y, dist, conf, corr in rows:
            writer.writerow([name, repr(float(x)), repr(float(y)),
                             repr(float(dist)), repr(float(conf)), int(corr)])


def write_records_csv(records, path):
    """Evaluation records: id, pred_x, pred_y, confidence, gt_x, gt_y, gt_present."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "pred_x", "pred_y", "confidence",
                         "gt_x", "gt_y", "gt_present", "height", "width"])
        for r in records:
            gt = r.gt if r.gt is not None else (float("nan"), float("nan"))
            writer.writerow([r.keypoint_id, repr(float(r.pred[0])),
                             repr(float(r.pred[1])), repr(float(r.confidence)),
                             repr(float(gt[0])), repr(float(gt[1])),
                             int(r.gt is not None), r.height, r.width])


def read_records_csv(path):
    from surfmap.metrics import EvalRecord
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:7] != ["id", "pred_x", "pred_y", "confidence",
                          "gt_x", "gt_y", "gt_present"]:
            raise ValueError(f"{path}: unrecognized records header")
        for row in reader:
            present = bool(int(row[6]))
            gt = (float(row[4]), float(row[5])) if present else None
            h = int(row[7]) if len(row) > 7 else 0
            w = int(row[8]) if len(row) > 8 else 0
            out.append(EvalRecord(row[0], (float(row[1]), float(row[2])),
                                  float(row[3]), gt, h, w))
    return out
