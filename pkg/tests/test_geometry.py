import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grazing import geometry
from grazing.errors import ConvexityViolation, DomainError, InvalidInputError, SchemaError

from conftest import custom_ellipsoid, exterior_points


class TestLevelset:
    def test_unit_sphere_values(self, unit_sphere):
        xi, g, h = geometry.levelset_eval(unit_sphere, (2, 0, 0))
        assert xi == -3.0
        np.testing.assert_array_equal(g, [-4, 0, 0])
        np.testing.assert_array_equal(h, -2 * np.eye(3))

    def test_boundary_zero(self, unit_sphere):
        assert geometry.levelset_eval(unit_sphere, (1, 0, 0))[0] == 0.0

    def test_custom_ellipsoid_boundary_and_fd(self):
        o = custom_ellipsoid()
        x = np.array([0.0, 0.0, 3.0])
        xi, g, _ = geometry.levelset_eval(o, x)
        assert abs(xi) < 1e-15
        h = 1e-5
        fd = np.array([(o.xi(x + h * e) - o.xi(x - h * e)) / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(g, fd, atol=1e-9)
        np.testing.assert_allclose(g, [0, 0, -2 / 3], atol=1e-15)

    def test_nonfinite_rejected(self, unit_sphere):
        with pytest.raises(InvalidInputError):
            geometry.levelset_eval(unit_sphere, (np.nan, 0, 0))

    @pytest.mark.parametrize("make", [geometry.sphere, lambda: geometry.ellipsoid((0.1, -0.2, 0.3), (1, 2, 3))])
    def test_grad_hess_against_fd(self, make, rng):
        o = make()
        for x in rng.uniform(-3, 3, size=(100, 3)):
            _, g, H = geometry.levelset_eval(o, x)
            h = 1e-6
            fd = np.array([(o.xi(x + h * e) - o.xi(x - h * e)) / (2 * h) for e in np.eye(3)])
            assert np.max(np.abs(g - fd)) / (1 + np.linalg.norm(g)) < 1e-6
            h = 1e-4
            fdh = np.array([(o.grad(x + h * e) - o.grad(x - h * e)) / (2 * h) for e in np.eye(3)]).T
            assert np.max(np.abs(H - fdh)) / (1 + np.abs(H).max()) < 1e-4
            np.testing.assert_allclose(H, H.T, atol=1e-12)


class TestDistance:
    def test_sphere_cases(self, unit_sphere):
        d, bp = geometry.distance_to_boundary(unit_sphere, (2, 0, 0))
        assert d == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(bp.position, [1, 0, 0], atol=1e-15)
        assert abs(np.linalg.norm(bp.normal) - 1) < 1e-12
        assert geometry.distance_to_boundary(unit_sphere, (0, 0, 5))[0] == pytest.approx(4.0, abs=1e-14)

    def test_inside_rejected(self, unit_sphere):
        with pytest.raises(DomainError):
            geometry.distance_to_boundary(unit_sphere, (0.2, 0, 0))

    @pytest.mark.parametrize("x", [(5.0, 0.0, 0.0), (1.3, 2.1, -0.7), (0.4, -0.3, 3.5)])
    def test_ellipsoid_dense_sampling_oracle(self, ell123, x):
        d, bp = geometry.distance_to_boundary(ell123, x)
        rng = np.random.default_rng(7)
        u = rng.normal(size=(1_000_000, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        y = ell123.axes * u
        d_sample = np.min(np.linalg.norm(y - np.asarray(x), axis=1))
        assert d <= d_sample + 1e-12
        assert d_sample - d < 1e-4
        seg = (np.asarray(x) - bp.position) / d
        assert np.linalg.norm(np.cross(seg, bp.normal)) < 1e-8 and seg @ bp.normal < 0

    def test_custom_projection_matches_closed_form(self, ell123, rng):
        co = custom_ellipsoid()
        xs = exterior_points(ell123, rng, 20)
        d_q, z_q = geometry.distance_batch(ell123, xs)
        d_c, z_c = geometry.distance_batch(co, xs)
        np.testing.assert_allclose(d_c, d_q, atol=1e-9)

    def test_no_boundary_sample_beats_minimum(self, ell123, rng):
        ys = ell123.axes * rng.normal(size=(1000, 3))
        ys /= np.linalg.norm(ys / ell123.axes, axis=1, keepdims=True)
        for x in exterior_points(ell123, rng, 10):
            d, _ = geometry.distance_to_boundary(ell123, x)
            assert np.min(np.linalg.norm(ys - x, axis=1)) >= d - 1e-6


class TestConvexity:
    def test_sphere_exact(self, unit_sphere):
        assert geometry.verify_uniform_convexity(unit_sphere, 64, 0) == pytest.approx(2.0, abs=1e-12)

    def test_ellipsoid(self, ell123):
        assert geometry.verify_uniform_convexity(ell123, 256, 1) == pytest.approx(2 / 9, abs=1e-12)

    def test_saddle_rejected(self):
        lv = geometry.CustomLevelSet(
            xi=lambda x: 1 - x[..., 0] ** 2 + x[..., 1] ** 2 - x[..., 2] ** 2,
            grad=lambda x: np.stack([-2 * x[..., 0], 2 * x[..., 1], -2 * x[..., 2]], -1),
            hess=lambda x: np.broadcast_to(np.diag([-2.0, 2.0, -2.0]), np.shape(x)[:-1] + (3, 3)),
        )
        o = geometry.custom(lv, 5.0, 1.0)
        rng = np.random.default_rng(0)
        with pytest.raises(ConvexityViolation) as exc:
            geometry.verify_uniform_convexity(o, 16, 3)
        z = exc.value.witness_zeta
        assert z @ (-o.hess(exc.value.witness_x)) @ z < 0

    def test_bad_count(self, unit_sphere):
        with pytest.raises(InvalidInputError):
            geometry.verify_uniform_convexity(unit_sphere, 0)


class TestPlanarSlice:
    def test_equator(self, unit_sphere):
        c = geometry.planar_slice(unit_sphere, (0, 0, 0), (1, 0, 0), (0, 1, 0))
        np.testing.assert_allclose(c.curvature, 1.0, atol=1e-12)
        np.testing.assert_allclose(c.n_par_norm, 1.0, atol=1e-12)

    def test_offset_circle(self, unit_sphere):
        c = geometry.planar_slice(unit_sphere, (0, 0, 0.5), (1, 0, 0), (0, 1, 0))
        np.testing.assert_allclose(np.linalg.norm(c.points[:, :2], axis=1), np.sqrt(3) / 2, atol=1e-10)
        assert c.n_par_max - c.n_par_min < 1e-12

    def test_empty_and_tangent(self, unit_sphere):
        assert geometry.planar_slice(unit_sphere, (0, 0, 2), (1, 0, 0), (0, 1, 0)) is None
        assert geometry.planar_slice(unit_sphere, (0, 0, 1), (1, 0, 0), (0, 1, 0)) is None

    def test_dependent_spans(self, unit_sphere):
        with pytest.raises(InvalidInputError):
            geometry.planar_slice(unit_sphere, (0, 0, 0), (1, 0, 0), (2, 0, 0))

    def test_ellipsoid_ratio_bracket_stable(self, ell123):
        # n_par comparability: the ratio max/min stays in one bracket over many slices
        rng = np.random.default_rng(3)
        ratios = []
        for _ in range(12):
            q = rng.normal(size=3)
            q /= np.linalg.norm(q)
            s1 = np.cross(q, rng.normal(size=3))
            s2 = np.cross(q, s1)
            c = geometry.planar_slice(ell123, 0.5 * rng.uniform(-1, 1) * q, s1, s2)
            if c is not None:
                ratios.append(c.n_par_max / c.n_par_min)
        ratios = np.array(ratios)
        assert len(ratios) >= 8
        # dense-sampling oracle on one slice
        c_dense = geometry.planar_slice(ell123, (0.2, 0.1, 0.3), (1, 0.2, 0), (0, 0.3, 1), n_points=100_000)
        c_coarse = geometry.planar_slice(ell123, (0.2, 0.1, 0.3), (1, 0.2, 0), (0, 0.3, 1))
        assert c_coarse.n_par_max / c_coarse.n_par_min == pytest.approx(c_dense.n_par_max / c_dense.n_par_min, rel=1e-3)
        assert np.all(ratios >= 1.0) and np.all(ratios < 10.0)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-0.95, 0.95))
    def test_sphere_slices_constant(self, h):
        c = geometry.planar_slice(geometry.sphere(), (0, 0, h), (1, 0, 0), (0, 1, 0))
        assert c.n_par_max - c.n_par_min < 1e-10
        np.testing.assert_allclose(c.curvature, 1 / np.sqrt(1 - h * h), rtol=1e-8)


class TestJson:
    def test_roundtrip(self, ell123):
        o = geometry.obstacle_from_json(json.dumps(ell123.to_json()))
        np.testing.assert_array_equal(o.axes, ell123.axes)

    def test_sphere_doc(self):
        o = geometry.obstacle_from_json({"kind": "sphere", "center": [0, 0, 0], "radius": 1.0})
        assert o.theta_omega == 2.0 and o.bounding_radius == 1.0

    @pytest.mark.parametrize("doc", [{"kind": "cube"}, {"kind": "sphere", "radius": 1, "color": 3},
                                     {"kind": "sphere", "radius": -1}, [1, 2]])
    def test_bad_docs(self, doc):
        with pytest.raises(SchemaError):
            geometry.obstacle_from_json(doc)
