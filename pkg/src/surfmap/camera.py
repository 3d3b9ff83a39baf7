"""Weak-perspective (scaled orthographic) cameras.

A camera is ``(s, t, r)``: positive scale in pixels per template unit, 2D
pixel translation, and three Euler angles composed intrinsically as
``R = Rz(r3) @ Ry(r2) @ Rx(r1)``.  Projection of a point P is
``s * (R @ P)[:2] + t`` with camera-frame depth ``s * (R @ P)[2]``; smaller
depth is nearer.  Camera-parameter vectors are ordered ``(s, tx, ty, r1,
r2, r3)`` everywhere jacobians appear.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Camera",
    "HypothesisSet",
    "rotation_matrix",
    "rotation_and_derivs",
    "project",
    "project_jacobians",
    "geodesic_distance",
    "spread_rotations",
    "softmax",
]


@dataclass
class Camera:
    s: float
    t: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.s = float(self.s)
        self.t = np.asarray(self.t, dtype=float).reshape(2)
        self.r = np.asarray(self.r, dtype=float).reshape(3)
        if not (self.s > 0 and math.isfinite(self.s)):
            raise ValueError("camera scale must be positive and finite")
        if not np.all(np.isfinite(self.t)) or not np.all(np.isfinite(self.r)):
            raise ValueError("camera parameters must be finite")

    def canonicalized(self):
        """Copy with angles unwrapped to (-pi, pi]."""
        r = np.mod(self.r + math.pi, 2.0 * math.pi) - math.pi
        r[r == -math.pi] = math.pi
        return Camera(self.s, self.t.copy(), r)

    def params(self):
        """Parameter vector (s, tx, ty, r1, r2, r3)."""
        return np.concatenate([[self.s], self.t, self.r])

    def to_dict(self):
        return {"s": self.s, "t": list(self.t), "r": list(self.r)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["s"], np.asarray(d["t"]), np.asarray(d["r"]))


def _axis_rotations(r):
    c, s = np.cos(r), np.sin(r)
    rx = np.array([[1, 0, 0], [0, c[0], -s[0]], [0, s[0], c[0]]])
    ry = np.array([[c[1], 0, s[1]], [0, 1, 0], [-s[1], 0, c[1]]])
    rz = np.array([[c[2], -s[2], 0], [s[2], c[2], 0], [0, 0, 1]])
    drx = np.array([[0, 0, 0], [0, -s[0], -c[0]], [0, c[0], -s[0]]])
    dry = np.array([[-s[1], 0, c[1]], [0, 0, 0], [-c[1], 0, -s[1]]])
    drz = np.array([[-s[2], -c[2], 0], [c[2], -s[2], 0], [0, 0, 0]])
    return rx, ry, rz, drx, dry, drz


def rotation_matrix(r):
    """Orthonormal rotation for Euler angles ``r = (r1, r2, r3)``."""
    r = np.asarray(r, dtype=float).reshape(3)
    rx, ry, rz, _, _, _ = _axis_rotations(r)
    return rz @ ry @ rx


def rotation_and_derivs(r):
    """Rotation matrix plus its three partials ``dR[k] = dR/dr_k``."""
    r = np.asarray(r, dtype=float).reshape(3)
    rx, ry, rz, drx, dry, drz = _axis_rotations(r)
    R = rz @ ry @ rx
    dR = np.stack([rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx])
    return R, dR


def project(cam, P):
    """Project points to pixels; returns ``(pixel, depth)``.

    ``P`` may be ``(3,)`` or ``(n, 3)``; outputs match.
    """
    P = np.asarray(P, dtype=float)
    R = rotation_matrix(cam.r)
    Q = P @ R.T
    pixel = cam.s * Q[..., :2] + cam.t
    depth = cam.s * Q[..., 2]
    return pixel, depth


def project_jacobians(cam, P):
    """Analytic jacobians of :func:`project` at each point.

    Returns ``(dpix_dP, ddepth_dP, dpix_dcam, ddepth_dcam)`` with shapes
    ``(..., 2, 3)``, ``(..., 3)``, ``(..., 2, 6)`` and ``(..., 6)``; the
    camera axis is ordered (s, tx, ty, r1, r2, r3).
    """
    P = np.asarray(P, dtype=float)
    single = P.ndim == 1
    P2 = np.atleast_2d(P)
    n = len(P2)
    R, dR = rotation_and_derivs(cam.r)
    Q = P2 @ R.T
    dQ = np.einsum("kij,nj->nki", dR, P2)       # (n, 3angles, 3xyz)

    dpix_dP = np.broadcast_to(cam.s * R[:2, :], (n, 2, 3)).copy()
    ddepth_dP = np.broadcast_to(cam.s * R[2, :], (n, 3)).copy()

    dpix_dcam = np.zeros((n, 2, 6))
    dpix_dcam[:, :, 0] = Q[:, :2]
    dpix_dcam[:, 0, 1] = 1.0
    dpix_dcam[:, 1, 2] = 1.0
    dpix_dcam[:, :, 3:] = cam.s * np.swapaxes(dQ[:, :, :2], 1, 2)

    ddepth_dcam = np.zeros((n, 6))
    ddepth_dcam[:, 0] = Q[:, 2]
    ddepth_dcam[:, 3:] = cam.s * dQ[:, :, 2]

    if single:
        return dpix_dP[0], ddepth_dP[0], dpix_dcam[0], ddepth_dcam[0]
    return dpix_dP, ddepth_dP, dpix_dcam, ddepth_dcam


def geodesic_distance(r_a, r_b):
    """Geodesic distance in radians between two Euler-angle rotations."""
    Ra = rotation_matrix(r_a)
    Rb = rotation_matrix(r_b)
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def spread_rotations(n):
    """Deterministic wide-spread rotation seeds.

    Azimuths step evenly around the vertical axis with alternating +-30
    degree elevation; n=1 gives the identity and n=2 antipodal azimuths.
    For n=8 the minimum pairwise geodesic distance exceeds pi/4.
    """
    n = int(n)
    if n < 1:
        raise ValueError("need at least one rotation")
    if n > 24:
        raise ValueError("spread construction is defined for n <= 24")
    if n == 1:
        return [np.zeros(3)]
    out = []
    for i in range(n):
        azim = 2.0 * math.pi * i / n
        elev = math.pi / 6.0 * (1.0 if i % 2 == 0 else -1.0)
        out.append(np.array([elev, azim, 0.0]))
    return out


def softmax(logits):
    """Shift-invariant softmax (max subtraction)."""
    z = np.asarray(logits, dtype=float)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class HypothesisSet:
    """A bank of candidate cameras with softmax selection probabilities."""

    cameras: list
    logits: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.logits is None:
            self.logits = np.zeros(len(self.cameras))
        self.logits = np.asarray(self.logits, dtype=float).reshape(-1)
        if len(self.logits) != len(self.cameras):
            raise ValueError("one logit per camera required")
        if len(self.cameras) < 1:
            raise ValueError("need at least one hypothesis")

    def __len__(self):
        return len(self.cameras)

    @property
    def probs(self):
        return softmax(self.logits)

    def to_dict(self):
        return {
            "cameras": [c.to_dict() for c in self.cameras],
            "logits": list(self.logits),
            "probs": list(self.probs),
        }

    @classmethod
    def from_dict(cls, d):
        return cls([Camera.from_dict(c) for c in d["cameras"]],
                   np.asarray(d["logits"]))
