import math

import numpy as np
import pytest

from surfmap.template import (
    TemplateError,
    TemplateShape,
    load_template,
    locate,
    make_icosphere_template,
    phi,
    phi_jacobian,
    phi_with_jacobian,
    save_template,
    sphere_to_uv,
    uv_to_sphere,
)

from conftest import random_unit


def naive_locate(template, n):
    """Test oracle: per-face python loop with raw edge-plane sign tests."""
    best_face, best_margin = -1, -np.inf
    for f, (i, j, k) in enumerate(template.faces):
        a, b, c = (template.sphere_coords[i], template.sphere_coords[j],
                   template.sphere_coords[k])
        margins = []
        for u, v in ((a, b), (b, c), (c, a)):
            e = np.cross(u, v)
            margins.append(np.dot(n, e / np.linalg.norm(e)))
        m = min(margins)
        if m > best_margin:
            best_face, best_margin = f, m
    return best_face, best_margin


class TestIcosphere:
    def test_subdiv3_counts(self):
        t = make_icosphere_template(3, "sphere")
        assert t.n_vertices == 642
        assert t.n_faces == 1280

    def test_sphere_profile_is_identity_displacement(self):
        t = make_icosphere_template(3, "sphere")
        assert np.array_equal(t.vertices, t.sphere_coords)

    def test_ellipsoid_scales_axes(self):
        t = make_icosphere_template(0, "ellipsoid", [2, 1, 1])
        assert t.n_vertices == 12
        # pole-aligned icosahedron has a vertex at +z, fixed by diag(2,1,1)
        top = np.argmax(t.sphere_coords[:, 2])
        assert np.allclose(t.sphere_coords[top], [0, 0, 1])
        assert np.allclose(t.vertices[top], [0, 0, 1])
        # the vertex nearest +x is stretched to twice its x-coordinate
        nearest = np.argmax(t.sphere_coords[:, 0])
        expected = t.sphere_coords[nearest] * np.array([2.0, 1.0, 1.0])
        assert np.allclose(t.vertices[nearest], expected)

    def test_blob_is_valid_closed_mesh(self):
        t = make_icosphere_template(3, "blob", [0.3, 0.2])
        assert t.n_vertices == 642
        norms = np.linalg.norm(t.sphere_coords, axis=1)
        assert np.abs(norms - 1).max() < 1e-9
        # every edge shared by exactly two faces
        assert len(t.edge_vertices) == t.n_faces * 3 // 2

    def test_non_star_shaped_blob_rejected(self):
        with pytest.raises(TemplateError, match="star-shaped"):
            make_icosphere_template(2, "blob", [0.7, 0.5])

    @pytest.mark.parametrize("subdiv", [-1, 6])
    def test_subdivision_bounds(self, subdiv):
        with pytest.raises(TemplateError):
            make_icosphere_template(subdiv, "sphere")

    def test_unknown_profile(self):
        with pytest.raises(TemplateError, match="profile"):
            make_icosphere_template(1, "cube")

    def test_sphere_triangulation_covers_every_direction(self, blob_template, rng):
        # spec invariant: every unit direction lies in exactly one face,
        # verified by the raw sign test over all faces
        dirs = random_unit(rng, 100_000)
        e = blob_template._edge_normals
        counts = np.zeros(len(dirs), dtype=int)
        for f in range(blob_template.n_faces):
            inside = (dirs @ e[f].T >= 0).all(axis=1)
            counts += inside
        assert (counts >= 1).all()
        # points on shared edges register in both adjacent faces; strictly
        # interior points (the complement of a measure-zero set) in exactly one
        assert (counts <= 2).all()
        assert (counts == 1).mean() > 0.999


class TestUVSphere:
    @pytest.mark.parametrize("uv,expected", [
        ((0.5, 0.5), (1, 0, 0)),
        ((0.75, 0.5), (0, 1, 0)),
        ((0.5, 1e-9), (0, 0, 1)),
    ])
    def test_reference_points(self, uv, expected):
        n = uv_to_sphere(np.array(uv))
        assert np.allclose(n, expected, atol=2e-5)

    def test_south_pole_canonicalizes_u(self):
        uv = sphere_to_uv(np.array([0.0, 0.0, -1.0]))
        assert uv[0] == 0.5
        assert uv[1] > 1 - 1e-5

    def test_round_trip_uv(self, rng):
        uv = rng.uniform(0.05, 0.95, size=(10_000, 2))
        back = sphere_to_uv(uv_to_sphere(uv))
        assert np.abs(back - uv).max() < 1e-9

    def test_round_trip_sphere(self, rng):
        n = random_unit(rng, 10_000)
        n = n[np.abs(n[:, 2]) < 0.99]          # away from poles
        back = uv_to_sphere(sphere_to_uv(n))
        assert np.abs(back - n).max() < 1e-9


class TestLocate:
    def test_vertex_query_gives_unit_weight(self, blob_template):
        t = blob_template
        for vid in (0, 17, 600):
            face, bary = locate(t, t.sphere_coords[vid])
            corner = list(t.faces[face]).index(vid)
            assert bary[corner] == pytest.approx(1.0, abs=1e-9)
            assert bary.sum() == pytest.approx(1.0, abs=1e-12)

    def test_edge_midpoint_symmetric_weights(self):
        t = make_icosphere_template(0, "sphere")
        a, b = t.faces[0][0], t.faces[0][1]
        mid = t.sphere_coords[a] + t.sphere_coords[b]
        mid /= np.linalg.norm(mid)
        face, bary = locate(t, mid)
        w = np.sort(bary)
        assert w[0] == pytest.approx(0.0, abs=1e-6)
        assert w[1] == pytest.approx(0.5, abs=1e-6)
        assert w[2] == pytest.approx(0.5, abs=1e-6)

    def test_matches_naive_scan(self, small_blob_template, rng):
        t = small_blob_template
        dirs = random_unit(rng, 300)
        faces, _ = t, None
        got, _ = __import__("surfmap.template", fromlist=["_scan_faces"])._scan_faces(t, dirs)
        for k in range(len(dirs)):
            expected, _ = naive_locate(t, dirs[k])
            assert got[k] == expected

    def test_containment_sign_test(self, blob_template, rng):
        t = blob_template
        dirs = random_unit(rng, 100_000)
        faces, bary = locate(t, dirs)
        e = t._edge_normals[faces]
        margins = np.einsum("nkj,nj->nk", e, dirs)
        assert margins.min() > -1e-12

    def test_hint_path_matches_full_scan(self, blob_template, rng):
        from surfmap.template import _scan_faces
        t = blob_template
        dirs = random_unit(rng, 500)
        faces, margins = _scan_faces(t, dirs)
        # correct hints short-circuit, wrong hints fall back
        wrong = np.roll(faces, 1)
        f2, m2 = _scan_faces(t, dirs, hints=wrong)
        interior = margins > 1e-9
        assert np.array_equal(f2[interior], faces[interior])
        assert np.allclose(m2[interior], margins[interior])


class TestPhi:
    def test_identity_at_vertices_sphere_profile(self, sphere_template):
        t = sphere_template
        pos = phi(t, t.sphere_coords[::37]).position
        assert np.abs(pos - t.sphere_coords[::37]).max() < 1e-12

    def test_chord_error_at_edge_midpoints_sphere_profile(self, sphere_template):
        # piecewise-linear phi reaches only the chord, so the deviation at
        # an edge midpoint equals 1 - cos(half the edge arc)
        t = sphere_template
        a = t.sphere_coords[t.edge_vertices[:, 0]]
        b = t.sphere_coords[t.edge_vertices[:, 1]]
        mids = a + b
        mids /= np.linalg.norm(mids, axis=1)[:, None]
        pos = phi(t, mids).position
        err = np.linalg.norm(pos - mids, axis=1)
        cos_half = np.einsum("ij,ij->i", a, b)
        chord_bound = 1.0 - np.sqrt((1.0 + cos_half) / 2.0)
        assert err.max() <= chord_bound.max() + 1e-9
        assert err.max() < 4e-3

    def test_ellipsoid_vertices_exact(self):
        t = make_icosphere_template(2, "ellipsoid", [2, 1, 1])
        d = t.sphere_coords[::11]
        pos = phi(t, d).position
        assert np.allclose(pos, d * np.array([2.0, 1.0, 1.0]), atol=1e-12)

    def test_matches_bruteforce_barycentric(self, small_blob_template, rng):
        t = small_blob_template
        dirs = random_unit(rng, 100)
        got = phi(t, dirs).position
        for k in range(len(dirs)):
            f, _ = naive_locate(t, dirs[k])
            corners = t.sphere_coords[t.faces[f]]
            alpha = np.linalg.solve(corners.T, dirs[k])
            w = alpha / alpha.sum()
            expected = w @ t.vertices[t.faces[f]]
            assert np.allclose(got[k], expected, atol=1e-9)

    def test_continuity_across_edges(self, blob_template, rng):
        t = blob_template
        eps = 1e-8
        worst = 0.0
        for _ in range(1000):
            eidx = rng.integers(0, len(t.edge_vertices))
            va = t.sphere_coords[t.edge_vertices[eidx, 0]]
            vb = t.sphere_coords[t.edge_vertices[eidx, 1]]
            m = va * (1 - 0.37) + vb * 0.37
            m /= np.linalg.norm(m)
            nrm = np.cross(va, vb)
            nrm /= np.linalg.norm(nrm)
            left = (m + eps * nrm) / np.linalg.norm(m + eps * nrm)
            right = (m - eps * nrm) / np.linalg.norm(m - eps * nrm)
            jump = np.linalg.norm(phi(t, left).position - phi(t, right).position)
            worst = max(worst, jump)
        assert worst < 1e-6


class TestPhiJacobian:
    def test_tangency(self, blob_template, rng):
        dirs = random_unit(rng, 200)
        jac, _ = phi_jacobian(blob_template, dirs)
        radial = np.einsum("nij,nj->ni", jac, dirs)
        assert np.abs(radial).max() < 1e-9

    def test_sphere_profile_near_tangent_projector(self, sphere_template, rng):
        # the stated identity J = I - n n^T holds only in the fine-mesh
        # limit; at subdivision 3 the measured deviation is ~0.07
        dirs = random_unit(rng, 200)
        jac, nonsmooth = phi_jacobian(sphere_template, dirs)
        eye = np.eye(3)
        proj = eye[None] - dirs[:, :, None] * dirs[:, None, :]
        dev = np.abs(jac - proj).max(axis=(1, 2))
        assert dev.max() < 0.12
        # and the deviation shrinks with subdivision
        coarse = make_icosphere_template(1, "sphere")
        jc, _ = phi_jacobian(coarse, dirs)
        assert np.median(np.abs(jc - proj).max(axis=(1, 2))) > np.median(dev)

    def test_finite_differences(self, blob_template, rng):
        t = blob_template
        dirs = random_unit(rng, 150)
        faces, bary, pos, jac, nonsmooth = phi_with_jacobian(t, dirs)
        keep = ~nonsmooth
        dirs, jac = dirs[keep][:100], jac[keep][:100]
        h = 1e-5
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd = (phi(t, dirs + e).position - phi(t, dirs - e).position) / (2 * h)
            scale = np.abs(jac[:, :, k]).max()
            assert np.abs(fd - jac[:, :, k]).max() <= 1e-4 * max(scale, 1.0)

    def test_nonsmooth_flag_on_edges(self, blob_template):
        t = blob_template
        va = t.sphere_coords[t.edge_vertices[0, 0]]
        vb = t.sphere_coords[t.edge_vertices[0, 1]]
        mid = (va + vb) / np.linalg.norm(va + vb)
        _, flag = phi_jacobian(t, mid)
        assert flag


class TestTemplateValidation:
    def test_vertex_count_mismatch(self):
        t = make_icosphere_template(0, "sphere")
        with pytest.raises(TemplateError, match="count mismatch"):
            TemplateShape(t.vertices[:-1], t.faces, t.sphere_coords)

    def test_non_unit_sphere_coord(self):
        t = make_icosphere_template(0, "sphere")
        bad = t.sphere_coords.copy()
        bad[3] *= 0.5
        with pytest.raises(TemplateError, match="non-unit"):
            TemplateShape(t.vertices, t.faces, bad)

    def test_open_mesh_rejected(self):
        t = make_icosphere_template(0, "sphere")
        with pytest.raises(TemplateError, match="open mesh"):
            TemplateShape(t.vertices, t.faces[:-1], t.sphere_coords)

    def test_face_index_out_of_range(self):
        t = make_icosphere_template(0, "sphere")
        bad = t.faces.copy()
        bad[0, 0] = 99
        with pytest.raises(TemplateError):
            TemplateShape(t.vertices, bad, t.sphere_coords)


class TestTemplateIO:
    def test_round_trip_at_nine_digits(self, tmp_path, blob_template):
        mesh = tmp_path / "t.obj"
        sph = tmp_path / "t.sph"
        save_template(blob_template, mesh, sph)
        loaded = load_template(mesh, sph)
        save_template(loaded, tmp_path / "t2.obj", tmp_path / "t2.sph")

        def nine(a):
            return ["%.9g" % x for x in np.asarray(a).ravel()]

        assert nine(loaded.vertices) == nine(blob_template.vertices)
        assert nine(loaded.sphere_coords) == nine(blob_template.sphere_coords)
        assert np.array_equal(loaded.faces, blob_template.faces)

    def test_quad_face_rejected(self, tmp_path):
        mesh = tmp_path / "bad.obj"
        mesh.write_text("v 0 0 1\nv 0 1 0\nv 1 0 0\nv 1 1 1\nf 1 2 3 4\n")
        sph = tmp_path / "bad.sph"
        sph.write_text("vs 0 0 1\nvs 0 1 0\nvs 1 0 0\nvs 1 1 1\n")
        with pytest.raises(TemplateError, match="non-triangular"):
            load_template(mesh, sph)

    def test_non_unit_sidecar_rejected(self, tmp_path, sphere_template):
        mesh = tmp_path / "t.obj"
        sph = tmp_path / "t.sph"
        save_template(sphere_template, mesh, sph)
        lines = sph.read_text().splitlines()
        lines[0] = "vs 0.5 0 0"
        sph.write_text("\n".join(lines) + "\n")
        with pytest.raises(TemplateError, match="non-unit"):
            load_template(mesh, sph)

    def test_count_mismatch_rejected(self, tmp_path, sphere_template):
        mesh = tmp_path / "t.obj"
        sph = tmp_path / "t.sph"
        save_template(sphere_template, mesh, sph)
        lines = sph.read_text().splitlines()
        sph.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(TemplateError, match="count mismatch"):
            load_template(mesh, sph)
