import math

import numpy as np
import pytest

from surfmap.camera import (
    Camera,
    HypothesisSet,
    geodesic_distance,
    project,
    project_jacobians,
    rotation_matrix,
    softmax,
    spread_rotations,
)


def rand_camera(rng):
    return Camera(rng.uniform(5, 40), rng.normal(size=2) * 10,
                  rng.uniform(-math.pi, math.pi, 3))


class TestRotation:
    def test_identity(self):
        assert np.allclose(rotation_matrix([0, 0, 0]), np.eye(3))

    def test_rz_quarter_turn(self):
        R = rotation_matrix([0, 0, math.pi / 2])
        assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)

    def test_orthonormal_and_proper(self, rng):
        for _ in range(100):
            R = rotation_matrix(rng.uniform(-10, 10, 3))
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
            assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


class TestProject:
    def test_identity_camera(self):
        cam = Camera(1.0, [0, 0], [0, 0, 0])
        pix, depth = project(cam, np.array([0.3, -0.2, 0.5]))
        assert np.allclose(pix, [0.3, -0.2])
        assert depth == pytest.approx(0.5)

    def test_scale_translation(self):
        cam = Camera(2.0, [10, 20], [0, 0, 0])
        pix, depth = project(cam, np.array([1.0, 1.0, 1.0]))
        assert np.allclose(pix, [12, 22])
        assert depth == pytest.approx(2.0)

    def test_rz_quarter(self):
        cam = Camera(1.0, [0, 0], [0, 0, math.pi / 2])
        pix, depth = project(cam, np.array([1.0, 0.0, 0.0]))
        assert np.allclose(pix, [0, 1], atol=1e-12)
        assert depth == pytest.approx(0.0, abs=1e-12)

    def test_rz_equivariance(self, rng):
        # composing an extra Rz equals pre-rotating the point
        for _ in range(100):
            cam = rand_camera(rng)
            alpha = rng.uniform(-math.pi, math.pi)
            P = rng.normal(size=3)
            r2 = cam.r.copy()
            Rz = rotation_matrix([0, 0, alpha])
            base = rotation_matrix(cam.r) @ Rz
            pix1 = cam.s * (base @ P)[:2] + cam.t
            pix2, _ = project(cam, Rz @ P)
            assert np.allclose(pix1, pix2, atol=1e-9)

    def test_batched(self, rng):
        cam = rand_camera(rng)
        pts = rng.normal(size=(17, 3))
        pix, depth = project(cam, pts)
        for k in range(17):
            p1, d1 = project(cam, pts[k])
            assert np.allclose(pix[k], p1)
            assert depth[k] == pytest.approx(d1)


class TestJacobians:
    def test_identity_rotation_blocks(self):
        cam = Camera(3.0, [1, 2], [0, 0, 0])
        dpix_dP, dz_dP, dpix_dc, dz_dc = project_jacobians(cam, np.array([1., 2., 3.]))
        assert np.allclose(dpix_dP, 3.0 * np.array([[1, 0, 0], [0, 1, 0]]))
        assert np.allclose(dpix_dc[:, 1:3], np.eye(2))

    def test_translation_block_always_identity(self, rng):
        for _ in range(20):
            cam = rand_camera(rng)
            _, _, dpix_dc, dz_dc = project_jacobians(cam, rng.normal(size=3))
            assert np.allclose(dpix_dc[:, 1:3], np.eye(2))
            assert np.allclose(dz_dc[1:3], 0.0)

    def test_finite_differences(self, rng):
        h = 1e-6
        for _ in range(200):
            cam = rand_camera(rng)
            P = rng.normal(size=3) * 2
            dpix_dP, dz_dP, dpix_dc, dz_dc = project_jacobians(cam, P)
            scale = max(cam.s * float(np.linalg.norm(P)), 1.0)
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                p1, z1 = project(cam, P + e)
                p0, z0 = project(cam, P - e)
                assert np.abs((p1 - p0) / (2 * h) - dpix_dP[:, k]).max() <= 1e-5 * scale
                assert abs((z1 - z0) / (2 * h) - dz_dP[k]) <= 1e-5 * scale
            for k in range(6):
                pars = cam.params()
                pp, pm = pars.copy(), pars.copy()
                pp[k] += h
                pm[k] -= h
                cp = Camera(pp[0], pp[1:3], pp[3:6])
                cm = Camera(pm[0], pm[1:3], pm[3:6])
                p1, z1 = project(cp, P)
                p0, z0 = project(cm, P)
                assert np.abs((p1 - p0) / (2 * h) - dpix_dc[:, k]).max() <= 1e-5 * scale
                assert abs((z1 - z0) / (2 * h) - dz_dc[k]) <= 1e-5 * scale


class TestGeodesic:
    def test_zero_for_equal(self, rng):
        r = rng.uniform(-3, 3, 3)
        assert geodesic_distance(r, r) == pytest.approx(0.0, abs=1e-7)

    def test_half_turn(self):
        assert geodesic_distance([0, 0, 0], [0, 0, math.pi]) == pytest.approx(math.pi)

    def test_symmetric_and_triangle_inequality(self, rng):
        for _ in range(1000):
            ra, rb, rc = (rng.uniform(-math.pi, math.pi, 3) for _ in range(3))
            dab = geodesic_distance(ra, rb)
            dba = geodesic_distance(rb, ra)
            assert dab == pytest.approx(dba, abs=1e-12)
            assert dab <= geodesic_distance(ra, rc) + geodesic_distance(rc, rb) + 1e-9


class TestSpreadRotations:
    def test_single_is_identity(self):
        (r,) = spread_rotations(1)
        assert np.allclose(r, 0.0)

    def test_two_antipodal_azimuths(self):
        a, b = spread_rotations(2)
        assert abs(abs(b[1] - a[1]) - math.pi) < 1e-12

    def test_eight_wide_spread(self):
        rots = spread_rotations(8)
        dmin = min(geodesic_distance(rots[i], rots[j])
                   for i in range(8) for j in range(i + 1, 8))
        assert dmin >= math.pi / 4

    def test_too_many_rejected(self):
        with pytest.raises(ValueError):
            spread_rotations(25)


class TestHypothesisSet:
    def test_probs_sum_to_one(self, rng):
        cams = [rand_camera(rng) for _ in range(8)]
        h = HypothesisSet(cams, rng.normal(size=8) * 5)
        assert h.probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert (h.probs >= 0).all()

    def test_shift_invariance(self, rng):
        logits = rng.normal(size=8)
        assert np.allclose(softmax(logits), softmax(logits + 123.4))

    def test_round_trip_dict(self, rng):
        cams = [rand_camera(rng) for _ in range(3)]
        h = HypothesisSet(cams, np.array([0.1, -0.2, 0.3]))
        h2 = HypothesisSet.from_dict(h.to_dict())
        assert np.allclose(h2.logits, h.logits)
        for a, b in zip(h.cameras, h2.cameras):
            assert a.s == pytest.approx(b.s)
            assert np.allclose(a.t, b.t)
            assert np.allclose(a.r, b.r)

    def test_canonicalized_angles(self):
        cam = Camera(1.0, [0, 0], [3 * math.pi, -3 * math.pi, math.pi])
        c = cam.canonicalized()
        assert np.all(c.r > -math.pi - 1e-12)
        assert np.all(c.r <= math.pi + 1e-12)
        assert np.allclose(rotation_matrix(c.r), rotation_matrix(cam.r), atol=1e-12)
