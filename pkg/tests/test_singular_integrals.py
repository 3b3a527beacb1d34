import math

import numpy as np
import pytest
from scipy import integrate as sci

from grazing import geometry, singular_integrals as si
from grazing.errors import BoundViolation, DomainError, InvalidInputError

from conftest import custom_ellipsoid

DIST_GRID = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0]


class TestCircleIntegral:
    def test_identity_value_R1_x2(self):
        res = si.circle_grazing_integral(1.0, 1.0)
        assert res.identity_value == pytest.approx(0.5 * math.log(3.0), abs=1e-12)
        assert res.identity_value == pytest.approx(0.549306, abs=1e-6)

    def test_alpha_g(self):
        assert si.circle_grazing_integral(1.0, 1.0).alpha_g == pytest.approx(math.pi / 6, abs=1e-15)

    def test_bound_at_four_radii(self):
        for R in (0.5, 1.0, 2.0):
            assert si.circle_grazing_integral(R, 4 * R).bound == pytest.approx(math.log(1.5) / R, rel=1e-14)

    @pytest.mark.parametrize("R", [0.5, 1.0, 2.0])
    @pytest.mark.parametrize("dist", DIST_GRID)
    def test_identity_and_bound_grid(self, R, dist):
        res = si.circle_grazing_integral(R, dist)
        assert abs(res.identity_value - 0.5 * math.log1p(2 * R / dist)) < 1e-8
        assert res.quad.value <= res.bound + res.quad.abs_error_est

    @pytest.mark.parametrize("R,dist", [(1.0, 1.0), (2.0, 0.1), (0.5, 3.0)])
    def test_grazing_part_against_scipy(self, R, dist):
        # unsubstituted integrand handled by QUADPACK's endpoint extrapolation
        X = R + dist
        a = math.asin(R / X)
        ref, _ = sci.quad(lambda th: 1.0 / math.sqrt(R * R - X * X * math.sin(th) ** 2), a / 2, a,
                          epsabs=1e-13, epsrel=1e-12, limit=200)
        assert si.circle_grazing_integral(R, dist).quad.value == pytest.approx(ref, rel=1e-9)

    def test_invalid_distance(self):
        with pytest.raises(InvalidInputError):
            si.circle_grazing_integral(1.0, 0.0)


class TestChordBound:
    def test_d_equals_R(self):
        lhs, rhs = si.chord_bound_check(1.0, 1.0)
        assert lhs == pytest.approx(math.log(3.0), rel=1e-15)
        assert rhs == pytest.approx(2 * math.log(3.0), rel=1e-15)

    @pytest.mark.parametrize("R", [0.5, 1.0, 2.0])
    def test_sweep(self, R):
        for d in np.concatenate([10.0 ** np.arange(-8, 1), [100 * R]]):
            lhs, rhs = si.chord_bound_check(R, float(d))
            assert lhs <= rhs


class TestPlanarCurves:
    def test_standard_curves_validate(self):
        for curve in si.standard_curves().values():
            assert curve.check() < 1e-8

    def test_bad_curvature_rejected(self):
        c = si.parabola_curve()
        bad = si.PlanarConvexGraph("bad", c.f, c.fp, c.fpp, lambda s: np.ones(np.shape(s)), 2.0, 1.0)
        with pytest.raises(InvalidInputError):
            bad.check()

    def test_parabola_closest_point(self):
        res = si.closest_point_slope(si.parabola_curve(), 1.0)
        roots = np.roots([2.0, 0.0, 1.0, -1.0])
        real = float(roots[np.argmin(np.abs(roots.imag))].real)
        assert res.p_star == pytest.approx(real, abs=1e-12)
        s = np.linspace(0.0, 1.0, 10**6 + 1)
        scan = s[np.argmin((s - 1.0) ** 2 + s**4)]
        assert abs(res.p_star - scan) < 2e-6
        assert res.slope == pytest.approx(real**2 / (1.0 - real), rel=1e-12)

    @pytest.mark.parametrize("radius", [1.0, 2.0])
    def test_circle_slope_constant(self, radius):
        curve = si.circle_curve(radius)
        vals = [si.closest_point_slope(curve, x1).slope * x1 for x1 in (0.1, 1.0, 4.0, 64.0)]
        assert np.allclose(vals, radius, rtol=1e-9)

    @pytest.mark.parametrize("name", ["parabola", "cosh", "circle1"])
    def test_large_x1_stays_above_eps(self, name):
        curve = si.standard_curves()[name]
        for x1 in 2.0 ** np.arange(0, 7):
            res = si.closest_point_slope(curve, float(x1))
            assert res.p_star <= x1
            assert res.slope * x1 >= res.eps_curve * (1 - 1e-9)

    def test_circle_comparison_holds(self):
        curve = si.circle_curve(1.0)
        for delta in (1e-2, 1e-3, 1e-4):
            res = si.angle_compare(curve, 0.5, delta)
            assert res.asserted and res.holds
            assert res.A_q <= res.A_p

    @pytest.mark.parametrize("delta", [1e-2, 1e-3, 1e-4, 1e-5, 1e-6])
    def test_parabola_small_delta(self, delta):
        res = si.angle_compare(si.parabola_curve(), 1.0, delta)
        assert res.asserted and res.A_q <= res.A_p
        curve = si.parabola_curve()
        # direct recomputation from the crossings
        assert curve.f(np.array(res.p)) == pytest.approx((1.0 - res.p) * math.tan(delta), rel=1e-12)
        assert curve.fm(np.array(res.q)) == pytest.approx((1.0 - res.q) * math.tan(delta), rel=1e-10)

    def test_above_threshold_passthrough(self):
        curve = si.parabola_curve()
        eps = si.locate_angle_threshold(curve)
        delta = math.atan(2.0 * eps)
        res = si.angle_compare(curve, 1.0, delta)
        assert res.intersects and not res.asserted
        assert res.A_p is not None and res.A_q is not None

    def test_no_intersection(self):
        curve = si.circle_curve(1.0)
        res = si.angle_compare(curve, 50.0, 1.2)
        assert not res.intersects

    @pytest.mark.parametrize("name", list(si.standard_curves()))
    def test_suite_below_threshold(self, name):
        curve = si.standard_curves()[name]
        eps = si.locate_angle_threshold(curve)
        for x1 in (0.25, 1.0, 3.0):
            for delta in np.geomspace(1e-6, 1.4, 25):
                if x1 * math.tan(delta) < eps:
                    res = si.angle_compare(curve, x1, float(delta))
                    assert not res.intersects or res.holds


def _mc_static_sphere(x_norm, v, k, n, rng, c=si.KERNEL_C, chunk=10**6):
    """Monte Carlo over (phi, w, r) with theta = theta_g - w^2 and r ~ Gamma(2, 2)."""
    th_g = math.asin(1.0 / x_norm)
    x = np.array([x_norm, 0.0, 0.0])
    total, total2, m = 0.0, 0.0, 0
    while m < n:
        b = min(chunk, n - m)
        phi = rng.uniform(0, 2 * math.pi, b)
        w = rng.uniform(0, math.sqrt(th_g), b)
        r = rng.gamma(2.0, 2.0, b)
        th = th_g - w * w
        om = np.stack([np.cos(th), np.sin(th) * np.cos(phi), np.sin(th) * np.sin(phi)], axis=1)
        # exit point from the plain quadratic, grazing from the gradient
        B = om @ x
        tb = B - np.sqrt(B * B - (x_norm**2 - 1.0))
        xb = x - tb[:, None] * om
        gdot = np.abs(np.sum(-2.0 * xb * om, axis=1))
        u = r[:, None] * om
        z = np.linalg.norm(u - v, axis=1)
        K = np.exp(-0.5 * c * z * z) / z + z * np.exp(-r * r / 8)
        dens_r = r * np.exp(-r / 2) / 4.0
        val = (2 * math.pi) * math.sqrt(th_g) * 2 * w * np.sin(th) / gdot * r ** (2 - k) * K / dens_r
        total += val.sum()
        total2 += (val * val).sum()
        m += b
    mean = total / n
    return mean, math.sqrt(max(total2 / n - mean * mean, 0.0) / n)


class TestStaticIntegral:
    def test_sphere_closed_form(self):
        res = si.static_singular_integral(geometry.sphere(), [2, 0, 0], [0, 0, 0], 0.0)
        # radial moments 8 + 32, angular (pi/|x|) * (1/2) ln 3
        assert res.quad.value == pytest.approx(40 * (math.pi / 2) * 0.5 * math.log(3.0), rel=1e-6)
        assert res.ratio == pytest.approx(res.quad.value / (2 * (math.log(2) + 1)), rel=1e-14)

    def test_sphere_monte_carlo(self):
        rng = np.random.default_rng(7)
        mean, se = _mc_static_sphere(2.0, np.zeros(3), 0.0, 10**7, rng)
        res = si.static_singular_integral(geometry.sphere(), [2, 0, 0], [0, 0, 0], 0.0)
        assert abs(res.quad.value - mean) < 0.01 * mean
        assert se < 0.003 * mean

    @pytest.mark.parametrize("v,k", [((1.0, 0.0, 0.0), 1.0), ((0.0, 4.0, 0.0), 1.5), ((-1.0, 1.0, 0.5), -1.0)])
    def test_moving_v_monte_carlo(self, v, k):
        rng = np.random.default_rng(11)
        mean, se = _mc_static_sphere(1.1, np.array(v), k, 2 * 10**6, rng)
        res = si.static_singular_integral(geometry.sphere(), [1.1, 0, 0], v, k, nodes=32)
        assert abs(res.quad.value - mean) < 4 * se + 0.005 * mean

    def test_distance_sweep_bracket(self):
        sp = geometry.sphere()
        ratios = []
        for d in 10.0 ** -np.arange(1, 7):
            ratios.append(si.static_singular_integral(sp, [1 + d, 0, 0], [0, 1, 0], 0.0).ratio)
        ratios = np.array(ratios)
        assert np.all(np.isfinite(ratios))
        assert ratios.max() / ratios.min() < 3.0

    def test_refinement_stable(self):
        sp = geometry.sphere()
        a = si.static_singular_integral(sp, [0, 1 + 1e-4, 0], [0.5, -4, 1], 1.5, nodes=16).quad.value
        b = si.static_singular_integral(sp, [0, 1 + 1e-4, 0], [0.5, -4, 1], 1.5, nodes=32).quad.value
        assert abs(a - b) < 0.01 * b

    def test_k_scaling_direction(self):
        sp = geometry.sphere()
        r0 = si.static_singular_integral(sp, [1.01, 0, 0], [0, 1, 0], 0.0)
        r32 = si.static_singular_integral(sp, [1.01, 0, 0], [0, 1, 0], 1.5)
        assert 1.0 / (2 - 1.5) + 1 > 1.0 / 2 + 1
        assert r32.bound > r0.bound

    def test_boundary_point_domain_error(self):
        with pytest.raises(DomainError):
            si.static_singular_integral(geometry.sphere(), [1, 0, 0], [0, 0, 0], 0.0)

    def test_k_too_large(self):
        with pytest.raises(InvalidInputError):
            si.static_singular_integral(geometry.sphere(), [2, 0, 0], [0, 0, 0], 2.0)

    def test_ellipsoid_custom_agree(self):
        ell = geometry.ellipsoid(semi_axes=(1, 2, 3))
        cus = custom_ellipsoid((1, 2, 3))
        x, v = [1.3, 0.4, 0.2], [0.3, 0.2, -1.0]
        a = si.static_singular_integral(ell, x, v, 0.0, nodes=8)
        b = si.static_singular_integral(cus, x, v, 0.0, nodes=8)
        assert a.quad.value == pytest.approx(b.quad.value, rel=1e-6)

    def test_const_violation_raises(self):
        with pytest.raises(BoundViolation):
            si.static_singular_integral(geometry.sphere(), [2, 0, 0], [0, 0, 0], 0.0, const=1e-3)


def _riemann(obstacle, t, x, v, varpi, n, graded=False):
    from grazing import billiard
    b = billiard.backward_exit(obstacle, np.asarray(x, float), np.asarray(v, float))
    u = (np.arange(n) + 0.5) / n
    s, w = (t * u * u, t * 2 * u / n) if graded else (t * u, np.full(n, t / n))
    X, _ = billiard.trajectory_batch(obstacle, t, b.x, b.v, s, b)
    d = np.linalg.norm(X, axis=1) - 1.0
    rate = varpi * (1 + float(np.dot(v, v)))
    return float(np.sum(w * np.exp(-rate * (t - s)) * np.log1p(1 / d)))


class TestDynamicalIntegral:
    def test_far_trajectory_riemann(self):
        sp = geometry.sphere()
        res = si.dynamical_singular_integral(sp, 1.0, [10, 0, 0], [0, 1, 0], 2.0)
        ref = _riemann(sp, 1.0, [10, 0, 0], [0, 1, 0], 2.0, 10**6)
        assert res.quad.value == pytest.approx(ref, rel=1e-6)
        assert res.t1 is None

    def test_head_on_bounce_riemann(self):
        sp = geometry.sphere()
        res = si.dynamical_singular_integral(sp, 1.0, [2, 0, 0], [1, 0, 0], 2.0)
        ref = _riemann(sp, 1.0, [2, 0, 0], [1, 0, 0], 2.0, 10**6, graded=True)
        assert res.t1 == pytest.approx(0.0, abs=1e-15)
        assert math.isfinite(res.quad.value)
        assert res.quad.value == pytest.approx(ref, rel=1e-6)

    def test_interior_bounce_against_scipy(self):
        from grazing import billiard
        sp = geometry.sphere()
        x, v = np.array([1.5, 0.3, 0.0]), np.array([1.0, 0.0, 0.0])
        res = si.dynamical_singular_integral(sp, 1.0, x, v, 8.0)
        b = billiard.backward_exit(sp, x, v)

        def f(s):
            X = billiard.trajectory_eval(sp, 1.0, x, v, s, b).X
            return math.exp(-16.0 * (1 - s)) * math.log1p(1 / (np.linalg.norm(X) - 1))

        ref = sum(sci.quad(f, a, c, epsabs=1e-13, epsrel=1e-11, limit=200)[0]
                  for a, c in ((0.0, res.t1), (res.t1, 1.0)))
        assert res.quad.value == pytest.approx(ref, rel=1e-8)

    def test_monotone_in_varpi(self):
        sp = geometry.sphere()
        vals = [si.dynamical_singular_integral(sp, 1.0, [1.5, 0.3, 0], [1, 0, 0], w).quad.value for w in (2, 4, 8)]
        assert vals[0] > vals[1] > vals[2]

    def test_far_bound_only_when_separated(self):
        sp = geometry.sphere()
        assert si.dynamical_singular_integral(sp, 1.0, [1.1, 0, 0], [0, 1, 0], 2.0, eps=0.5).bound_far is None
        assert si.dynamical_singular_integral(sp, 1.0, [2.0, 0, 0], [0, 1, 0], 2.0, eps=0.5).bound_far is not None

    def test_ellipsoid_runs(self):
        ell = geometry.ellipsoid(semi_axes=(1, 2, 3))
        res = si.dynamical_singular_integral(ell, 1.0, [1.2, 0.5, 0.3], [1, 0.2, 0.1], 4.0)
        assert math.isfinite(res.ratio_near) and res.quad.value > 0

    @pytest.mark.parametrize("t,varpi", [(0.0, 2.0), (1.5, 2.0), (0.5, 1.0)])
    def test_invalid_parameters(self, t, varpi):
        with pytest.raises(InvalidInputError):
            si.dynamical_singular_integral(geometry.sphere(), t, [2, 0, 0], [1, 0, 0], varpi)
