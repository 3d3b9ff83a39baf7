"""Category template meshes and their unit-sphere parametrization.

A template is a closed genus-0 triangle mesh plus one unit vector per
vertex placing that vertex on the sphere.  The sphere triangulation is
what point location runs on; the mesh vertices are what the surface map
interpolates.  All query functions accept a single direction ``(3,)`` or
a batch ``(n, 3)`` and vectorize over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TemplateShape",
    "SurfacePoint",
    "make_icosphere_template",
    "load_template",
    "save_template",
    "uv_to_sphere",
    "sphere_to_uv",
    "locate",
    "phi",
    "phi_jacobian",
    "phi_with_jacobian",
]

#: uv components are kept strictly inside (0, 1) by clamping at this margin.
UV_EPS = 1e-6

#: queries closer than this to a spherical-triangle edge are flagged nonsmooth.
EDGE_SMOOTH_MARGIN = 1e-6

_LOCATE_CHUNK = 1024


class TemplateError(ValueError):
    """Raised for invalid template meshes or parametrization files."""


def _as_unit_rows(a, tol, what):
    a = np.asarray(a, dtype=float)
    norms = np.linalg.norm(a, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise TemplateError(f"non-unit {what} (|v| deviates more than {tol:g})")
    if np.abs(norms - 1.0).max() <= 1e-9:
        return a
    return a / norms[..., None]


class TemplateShape:
    """Closed triangle mesh with a per-vertex unit-sphere direction.

    Parameters
    ----------
    vertices : (v, 3) array
        Template surface points, object-centered, template units.
    faces : (f, 3) int array
        Vertex-index triples; consistent winding, every edge shared by
        exactly two faces.
    sphere_coords : (v, 3) array
        Unit directions, one per vertex, same connectivity as ``faces``.
        Their triangles must tile the sphere without overlap.
    """

    def __init__(self, vertices, faces, sphere_coords):
        vertices = np.asarray(vertices, dtype=float)
        faces = np.asarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise TemplateError("vertices must be (n, 3)")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise TemplateError("non-triangular face list (faces must be (m, 3))")
        sphere_coords = _as_unit_rows(sphere_coords, 1e-6, "sphere coordinate")
        if len(sphere_coords) != len(vertices):
            raise TemplateError(
                "vertex count mismatch: %d vertices vs %d sphere coordinates"
                % (len(vertices), len(sphere_coords))
            )
        if faces.min(initial=0) < 0 or faces.max(initial=-1) >= len(vertices):
            raise TemplateError("face index out of range")
        if np.any(faces[:, 0] == faces[:, 1]) or np.any(faces[:, 1] == faces[:, 2]) \
                or np.any(faces[:, 0] == faces[:, 2]):
            raise TemplateError("degenerate face (repeated vertex index)")

        edge_vertices, edge_faces = _edge_adjacency(faces)
        faces = _orient_outward(faces, sphere_coords)

        self.vertices = vertices
        self.faces = faces
        self.sphere_coords = sphere_coords
        self.edge_vertices = edge_vertices    # (e, 2) vertex ids
        self.edge_faces = edge_faces          # (e, 2) adjacent face ids
        for a in (self.vertices, self.faces, self.sphere_coords,
                  self.edge_vertices, self.edge_faces):
            a.setflags(write=False)
        self._build_caches()

    def _build_caches(self):
        sph = self.sphere_coords[self.faces]        # (f, 3corner, 3)
        self._face_sphere = sph
        self._face_vertices = self.vertices[self.faces]
        # inward edge-plane normals: edge k runs corner k -> k+1, the third
        # corner lies on the positive side.
        normals = np.cross(sph, sph[:, [1, 2, 0], :])
        nl = np.linalg.norm(normals, axis=-1)
        if np.any(nl < 1e-12):
            raise TemplateError("degenerate spherical triangle (collinear corners)")
        self._edge_normals = normals / nl[..., None]
        dets = np.einsum("fi,fi->f", normals[:, 0, :], sph[:, 2, :])
        if np.any(dets <= 1e-12):
            raise TemplateError("inverted or overlapping sphere triangulation")
        # columns of sph^T are the corner directions; alpha = inv @ n gives
        # the central-projection barycentrics w.r.t. the face chord plane.
        self._sphere_inv = np.linalg.inv(np.swapaxes(sph, 1, 2))
        # transposed edge-normal blocks laid out for the locate matmuls
        self._edge_normals_t = [
            np.ascontiguousarray(self._edge_normals[:, k, :].T) for k in range(3)
        ]

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def bounding_radius(self):
        """Radius of the origin-centered bounding sphere of the vertices."""
        return float(np.linalg.norm(self.vertices, axis=1).max())


def _edge_adjacency(faces):
    """Undirected edge list with adjacent faces; errors on open meshes."""
    seen = {}
    directed = set()
    for fidx, (a, b, c) in enumerate(faces):
        for u, v in ((a, b), (b, c), (c, a)):
            if (int(u), int(v)) in directed:
                raise TemplateError(
                    "open mesh (directed edge %d-%d repeated: inconsistent "
                    "winding)" % (u, v))
            directed.add((int(u), int(v)))
            key = (int(u), int(v)) if u < v else (int(v), int(u))
            entry = seen.setdefault(key, [])
            entry.append(fidx)
            if len(entry) > 2:
                raise TemplateError(
                    "open mesh (edge %d-%d shared by %d faces)"
                    % (key[0], key[1], len(entry)))
    edge_vertices = np.empty((len(seen), 2), dtype=np.int64)
    edge_faces = np.empty((len(seen), 2), dtype=np.int64)
    for k, (key, facelist) in enumerate(sorted(seen.items())):
        if len(facelist) != 2:
            raise TemplateError(
                "open mesh (edge %d-%d shared by one face)" % key)
        edge_vertices[k] = key
        edge_faces[k] = facelist
    return edge_vertices, edge_faces


def _orient_outward(faces, sphere_coords):
    sph = sphere_coords[faces]
    dets = np.linalg.det(sph)
    if np.all(dets < 0):
        faces = faces[:, ::-1].copy()
    return faces


@dataclass
class SurfacePoint:
    """A point on the template surface: face, barycentric weights, position.

    Fields hold batched arrays when the query was batched.
    """

    face: np.ndarray
    bary: np.ndarray
    position: np.ndarray


def uv_to_sphere(uv):
    """Map (u, v) in the unit square to a unit direction.

    Azimuth is ``2*pi*u - pi``, polar angle ``pi*v``; u, v are clamped to
    (UV_EPS, 1-UV_EPS) first.
    """
    uv = np.clip(np.asarray(uv, dtype=float), UV_EPS, 1.0 - UV_EPS)
    a = 2.0 * math.pi * uv[..., 0] - math.pi
    b = math.pi * uv[..., 1]
    sb = np.sin(b)
    return np.stack([np.cos(a) * sb, np.sin(a) * sb, np.cos(b)], axis=-1)


def sphere_to_uv(n):
    """Inverse of :func:`uv_to_sphere`.

    At the poles the azimuth is undefined and u is canonicalized to 0.5.
    """
    n = np.asarray(n, dtype=float)
    b = np.arccos(np.clip(n[..., 2], -1.0, 1.0))
    a = np.arctan2(n[..., 1], n[..., 0])
    u = (a + math.pi) / (2.0 * math.pi)
    v = b / math.pi
    at_pole = np.abs(n[..., 2]) >= 1.0 - 1e-12
    u = np.where(at_pole, 0.5, u)
    return np.clip(np.stack([u, v], axis=-1), UV_EPS, 1.0 - UV_EPS)


def _scan_faces(template, dirs, hints=None):
    """Containment scan: most-interior face per query direction.

    Returns (face indices, margins); the margin is the smallest signed
    distance to the located face's three edge planes (non-negative means
    contained).  Ties on an edge resolve to the lowest face index.  When
    ``hints`` holds a previous face per query, each hint is verified by
    the exact containment test and only misses fall back to the full scan.
    """
    if hints is not None:
        m = np.einsum("qkj,qj->qk",
                      template._edge_normals[hints], dirs).min(axis=1)
        contained = m >= 0.0
        faces = hints.copy()
        margins = m
        if not contained.all():
            miss = ~contained
            faces[miss], margins[miss] = _scan_faces(template, dirs[miss])
        return faces, margins
    e0, e1, e2 = template._edge_normals_t
    n = dirs.shape[0]
    faces = np.empty(n, dtype=np.int64)
    margins = np.empty(n, dtype=float)
    for lo in range(0, n, _LOCATE_CHUNK):
        hi = min(lo + _LOCATE_CHUNK, n)
        chunk = dirs[lo:hi]
        m = chunk @ e0
        np.minimum(m, chunk @ e1, out=m)
        np.minimum(m, chunk @ e2, out=m)
        idx = np.argmax(m, axis=1)
        faces[lo:hi] = idx
        margins[lo:hi] = m[np.arange(hi - lo), idx]
    return faces, margins


def _bary_in_face(template, faces, dirs):
    """Chord-plane barycentrics of unit directions within given faces."""
    alpha = np.einsum("nij,nj->ni", template._sphere_inv[faces], dirs)
    s = alpha.sum(axis=1)
    w = alpha / s[:, None]
    w = np.maximum(w, 0.0)
    return w / w.sum(axis=1)[:, None]


def locate(template, n):
    """Find the spherical triangle containing each unit direction.

    Returns ``(face, bary)``: the face index and barycentric weights of the
    central projection of ``n`` onto that face's chord plane.  Weights are
    non-negative and sum to 1; negatives from roundoff are clamped.
    """
    n = np.asarray(n, dtype=float)
    single = n.ndim == 1
    dirs = np.atleast_2d(n)
    faces, _ = _scan_faces(template, dirs)
    bary = _bary_in_face(template, faces, dirs)
    if single:
        return int(faces[0]), bary[0]
    return faces, bary


def phi(template, n):
    """Map unit directions onto the template surface (piecewise linear)."""
    n = np.asarray(n, dtype=float)
    single = n.ndim == 1
    dirs = np.atleast_2d(n)
    faces, _ = _scan_faces(template, dirs)
    bary = _bary_in_face(template, faces, dirs)
    pos = np.einsum("nk,nkj->nj", bary, template._face_vertices[faces])
    if single:
        return SurfacePoint(int(faces[0]), bary[0], pos[0])
    return SurfacePoint(faces, bary, pos)


def phi_with_jacobian(template, n, hints=None):
    """Surface point plus d(position)/d(direction) for batched queries.

    Returns ``(faces, bary, position, jac, nonsmooth)`` with ``jac`` of
    shape (n, 3, 3).  The jacobian annihilates the radial direction (it is
    composed with the tangent projector at ``n``); ``nonsmooth`` marks
    queries within EDGE_SMOOTH_MARGIN of a face boundary, where the
    piecewise-linear map has no classical derivative.
    """
    dirs = np.atleast_2d(np.asarray(n, dtype=float))
    faces, margins = _scan_faces(template, dirs, hints)
    inv = template._sphere_inv[faces]                      # (n, 3, 3)
    alpha = np.einsum("nij,nj->ni", inv, dirs)
    s = alpha.sum(axis=1)
    w = alpha / s[:, None]
    colsum = inv.sum(axis=1)                               # (n, 3)
    dw = (inv - w[:, :, None] * colsum[:, None, :]) / s[:, None, None]
    verts = template._face_vertices[faces]                 # (n, 3corner, 3)
    jac = np.einsum("nka,nkj->naj", verts, dw)
    proj = -dirs[:, :, None] * dirs[:, None, :]
    proj[:, np.arange(3), np.arange(3)] += 1.0
    jac = jac @ proj
    wc = np.maximum(w, 0.0)
    wc /= wc.sum(axis=1)[:, None]
    pos = np.einsum("nk,nkj->nj", wc, verts)
    nonsmooth = margins < EDGE_SMOOTH_MARGIN
    return faces, wc, pos, jac, nonsmooth


def phi_jacobian(template, n):
    """Jacobian of :func:`phi`; returns ``(jac, nonsmooth flag)``."""
    n = np.asarray(n, dtype=float)
    single = n.ndim == 1
    _, _, _, jac, nonsmooth = phi_with_jacobian(template, n)
    if single:
        return jac[0], bool(nonsmooth[0])
    return jac, nonsmooth


# ---------------------------------------------------------------------------
# icosphere generation

def _icosahedron():
    # pole-aligned icosahedron: vertex 0 at +z, two pentagonal rings, vertex
    # 11 at -z; faces wound counterclockwise seen from outside.
    zr = 1.0 / math.sqrt(5.0)
    rr = 2.0 / math.sqrt(5.0)
    verts = [np.array([0.0, 0.0, 1.0])]
    for k in range(5):
        a = 2.0 * math.pi * k / 5.0
        verts.append(np.array([rr * math.cos(a), rr * math.sin(a), zr]))
    for k in range(5):
        a = 2.0 * math.pi * (k + 0.5) / 5.0
        verts.append(np.array([rr * math.cos(a), rr * math.sin(a), -zr]))
    verts.append(np.array([0.0, 0.0, -1.0]))
    faces = []
    for k in range(5):
        k2 = (k + 1) % 5
        faces.append([0, 1 + k, 1 + k2])
        faces.append([1 + k, 6 + k, 1 + k2])
        faces.append([1 + k2, 6 + k, 6 + k2])
        faces.append([6 + k, 11, 6 + k2])
    return np.array(verts), np.array(faces, dtype=np.int64)


def _subdivide(verts, faces):
    verts = [v for v in verts]
    cache = {}

    def midpoint(i, j):
        key = (i, j) if i < j else (j, i)
        if key in cache:
            return cache[key]
        m = verts[i] + verts[j]
        m /= np.linalg.norm(m)
        verts.append(m)
        cache[key] = len(verts) - 1
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
    return np.array(verts), np.array(out, dtype=np.int64)


_PROFILES = ("sphere", "ellipsoid", "blob")


def _radial_displacement(profile, params, n):
    if profile == "sphere":
        if len(params) != 0:
            raise TemplateError("sphere profile takes no parameters")
        return n.copy()
    if profile == "ellipsoid":
        if len(params) != 3 or min(params) <= 0:
            raise TemplateError("ellipsoid profile needs three positive semi-axes")
        return n * np.asarray(params, dtype=float)
    if profile == "blob":
        if len(params) != 2:
            raise TemplateError("blob profile needs two parameters")
        a, b = float(params[0]), float(params[1])
        if abs(a) + abs(b) >= 1.0:
            raise TemplateError("non-star-shaped blob parameters (|a|+|b| must be < 1)")
        r = 1.0 + a * n[:, 0] + b * n[:, 0] * n[:, 2]
        return n * r[:, None]
    raise TemplateError(f"unknown radial profile {profile!r} (expected one of {_PROFILES})")


def make_icosphere_template(subdivisions, radial_profile, params=()):
    """Build a template by radially displacing a subdivided icosahedron.

    The undisplaced icosphere vertices double as the sphere coordinates, so
    the parametrization is exact by construction.  ``radial_profile`` is one
    of ``sphere`` (identity), ``ellipsoid`` (three semi-axes) or ``blob``
    (asymmetric smooth radius ``1 + a*nx + b*nx*nz``, star-shaped for
    ``|a|+|b| < 1``).
    """
    if not 0 <= int(subdivisions) <= 5:
        raise TemplateError("subdivisions must be in [0, 5]")
    verts, faces = _icosahedron()
    for _ in range(int(subdivisions)):
        verts, faces = _subdivide(verts, faces)
    displaced = _radial_displacement(radial_profile, params, verts)
    return TemplateShape(displaced, faces, verts)


# ---------------------------------------------------------------------------
# OBJ + sphere-sidecar files

def save_template(template, mesh_path, sphere_path):
    """Write the mesh as ASCII OBJ and the sphere directions as a sidecar.

    The sidecar holds one ``vs x y z`` line per vertex, in OBJ ``v`` order.
    Coordinates are written at full precision.
    """
    with open(mesh_path, "w") as fh:
        for v in template.vertices:
            fh.write("v %.17g %.17g %.17g\n" % tuple(v))
        for f in template.faces:
            fh.write("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))
    with open(sphere_path, "w") as fh:
        for v in template.sphere_coords:
            fh.write("vs %.17g %.17g %.17g\n" % tuple(v))


def load_template(mesh_path, sphere_path):
    """Load an OBJ triangle mesh plus its sphere sidecar as a template."""
    verts, faces = [], []
    with open(mesh_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                if len(idx) != 3:
                    raise TemplateError(
                        "non-triangular face (%d indices)" % len(idx)
                    )
                faces.append(idx)
    sphere = []
    with open(sphere_path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "vs":
                sphere.append([float(x) for x in parts[1:4]])
    if len(sphere) != len(verts):
        raise TemplateError(
            "vertex count mismatch: %d OBJ vertices vs %d sphere lines"
            % (len(verts), len(sphere))
        )
    if not verts:
        raise TemplateError("empty mesh")
    return TemplateShape(np.array(verts), np.array(faces, dtype=np.int64), np.array(sphere))
