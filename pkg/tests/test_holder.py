import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grazing import billiard, geometry as g, holder as h
from grazing.errors import DomainError, InvalidInputError, SingularWeightError

EPS = 10.0 ** -np.arange(3.0, 8.01, 0.25)


def random_pair(rng, obstacle, max_step=1.0):
    while True:
        x = rng.normal(size=3)
        x *= (1 + rng.uniform(0.01, 1.5)) / np.linalg.norm(x)
        v = rng.normal(size=3)
        d = rng.normal(size=6)
        d *= rng.uniform(1e-4, max_step) / np.linalg.norm(d)
        xb = x + d[:3]
        if obstacle.xi(x) < 0 and obstacle.xi(xb) < 0:
            return x, v, xb, v + d[3:]


class TestWeights:
    def setup_method(self):
        self.sp = g.sphere()
        self.p = h.WeightParams(eps=0.5, delta=0.5, varpi=2.0)

    def test_far_from_boundary(self):
        w = h.evaluate_weights([3, 0, 0], [1, 0, 0], [0, 3, 0], [0, 0, 1], self.p, self.sp)
        assert (w.G_xv, w.G_xbvb, w.W) == (1.0, 1.0, 1.0)

    def test_unit_speed_near(self):
        w = h.evaluate_weights([1.2, 0, 0], [0, 1, 0], [3, 0, 0], [1, 0, 0], self.p, self.sp)
        assert w.G_xv == pytest.approx(math.log(2) + 1, rel=1e-15)
        assert w.W == pytest.approx(2.0)

    def test_symmetry(self):
        a = h.evaluate_weights([1.2, 0, 0], [0, 0.3, 0], [1.1, 0.1, 0], [0.2, 0, 0], self.p, self.sp)
        b = h.evaluate_weights([1.1, 0.1, 0], [0.2, 0, 0], [1.2, 0, 0], [0, 0.3, 0], self.p, self.sp)
        assert a.W == b.W

    def test_singular(self):
        with pytest.raises(SingularWeightError):
            h.evaluate_weights([1.2, 0, 0], [0, 0, 0], [3, 0, 0], [1, 0, 0], self.p, self.sp)

    def test_zero_speed_far_is_fine(self):
        assert h.evaluate_weights([3, 0, 0], [0, 0, 0], [3, 0, 0], [0, 0, 0], self.p, self.sp).W == 1.0

    @given(st.floats(1e-6, 10), st.floats(1.01, 2.0))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_speed(self, speed, factor):
        x = [1.2, 0, 0]
        slow = h.evaluate_weights(x, [speed / factor, 0, 0], [3, 0, 0], [1, 0, 0], self.p, self.sp)
        fast = h.evaluate_weights(x, [speed, 0, 0], [3, 0, 0], [1, 0, 0], self.p, self.sp)
        assert slow.G_xv > fast.G_xv and slow.W > fast.W

    @pytest.mark.parametrize("kw", [dict(eps=0), dict(eps=1), dict(delta=1.5), dict(varpi=1.0)])
    def test_bad_params(self, kw):
        with pytest.raises(InvalidInputError):
            h.WeightParams(**kw)


class TestFit:
    def test_exact_power(self):
        a, C, rms, frms, n, knee = h.fit_power_law(EPS, 3 * EPS**0.5)
        assert a == pytest.approx(0.5, abs=1e-12) and C == pytest.approx(3, rel=1e-10)
        assert rms < 1e-12 and frms > 0.5 and not knee

    def test_knee_dropped(self):
        diffs = np.where(EPS > 1e-5, EPS, EPS**0.5 * 10**-2.5)
        a, *_, knee = h.fit_power_law(EPS, diffs)
        assert knee and a == pytest.approx(0.5, abs=1e-9)

    def test_too_few(self):
        with pytest.raises(InvalidInputError):
            h.fit_power_law([1e-3, 1e-4], [1, 2])


class TestHolderSweep:
    def test_embedded_circle(self):
        sp = g.sphere(center=(0, 1, 0))
        f = h.holder_sweep("xb", [1, 0, 0], [1, 0, 0], [0, 1, 0, 0, 0, 0], EPS, sp)
        assert f.exponent == pytest.approx(0.5, abs=0.02)
        b0 = billiard.backward_exit(sp, [1, 0, 0], [1, 0, 0], tangent_as_hit=True)
        for e in (1e-3, 1e-5, 1e-8):
            b = billiard.backward_exit(sp, [1, e, 0], [1, 0, 0])
            d = b.x_b - b0.x_b
            # the horizontal offset is sqrt(2e - e^2); the vertical one adds e
            assert abs(d[0]) == pytest.approx(math.sqrt(2 * e - e * e), rel=1e-6)
            assert np.linalg.norm(d) == pytest.approx(math.sqrt(2 * e), rel=1e-6)

    def test_head_on(self):
        f = h.holder_sweep("xb", [2, 0, 0], [1, 0.1, 0], [0, 1, 0, 0, 0, 0], EPS, g.sphere())
        assert f.exponent == pytest.approx(1.0, abs=0.02)

    def test_head_on_matches_derivative(self):
        x, v, e = np.array([2.0, 0, 0]), np.array([1.0, 0.1, 0]), np.array([0, 1.0, 0])
        der = billiard.exit_time_derivatives(g.sphere(), x, v)
        f = h.holder_sweep("tb", x, v, np.r_[e, 0, 0, 0], EPS, g.sphere())
        assert f.diffs[-1] / EPS[-1] == pytest.approx(abs(der.grad_x_tb @ e), rel=1e-6)

    def test_unbounced_translation(self):
        x, v = np.array([3.0, 0, 0]), np.array([-1.0, 0, 0])
        f = h.holder_sweep("X_at_s", x, v, [0, 0, 1, 0, 0, 0], EPS, g.sphere(), t=1.0, s=0.5)
        assert f.exponent == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(f.diffs, EPS[: len(f.diffs)], rtol=1e-9)

    @pytest.mark.parametrize("obstacle", [g.sphere(), g.ellipsoid(semi_axes=(1.0, 1.5, 0.7))],
                             ids=["sphere", "ellipsoid"])
    def test_grazing_bases(self, obstacle):
        rng = np.random.default_rng(7)
        for _ in range(20):
            gb = h.grazing_base(obstacle, rng)
            f = h.holder_sweep("xb", gb.x, gb.v, gb.direction, EPS, obstacle)
            assert 0.45 <= f.exponent <= 0.55
            assert f.residual < 0.05
            assert f.forced_residual >= 5 * f.residual

    def test_crossing_reported(self):
        # starting 1e-4 inside the tangent line, pushing outward loses the hit past eps = 1e-4
        sp = g.sphere(center=(0, 1, 0))
        grid = 10.0 ** np.arange(-8.0, -2.9, 0.5)
        f = h.holder_sweep("xb", [1, 1e-4, 0], [1, 0, 0], [0, -1, 0, 0, 0, 0], grid, sp)
        assert f.crossing == pytest.approx(10**-3.5)
        assert len(f.diffs) == 9

    def test_crossing_at_start(self):
        sp = g.sphere(center=(0, 1, 0))
        with pytest.raises(DomainError):
            h.holder_sweep("xb", [1, 0, 0], [1, 0, 0], [0, -1, 0, 0, 0, 0], [1e-3, 1e-4, 1e-5], sp)

    def test_undefined_base(self):
        with pytest.raises(DomainError):
            h.holder_sweep("xb", [2, 0, 0], [-1, 0, 0], [0, 1, 0, 0, 0, 0], EPS, g.sphere())

    @pytest.mark.parametrize("kw", [dict(map_id="nope"), dict(direction=[0] * 6), dict(eps_grid=[1e-4, 1e-3, 1e-5]), dict(eps_grid=[1e-3, 0.0]),
                                    dict(map_id="X_at_s")])
    def test_invalid(self, kw):
        args = dict(map_id="xb", x=[2, 0, 0], v=[1, 0, 0], direction=[0, 1, 0, 0, 0, 0], eps_grid=EPS,
                    obstacle=g.sphere())
        args.update(kw)
        with pytest.raises(InvalidInputError):
            h.holder_sweep(**args)

    def test_solution_field(self):
        f0 = lambda x, v: np.sqrt(abs(x[1]))  # noqa: E731
        f = h.holder_sweep("solution_field", [2, 0, 0], [1, 0, 0], [0, 1, 0, 0, 0, 0], EPS, g.sphere(), field_fn=f0)
        assert f.exponent == pytest.approx(0.5, abs=1e-9)


class TestDifferenceReport:
    def test_colinear_time_shift(self):
        # x~ and xbar on the same line along v share the exit point
        sp = g.sphere()
        v = np.array([1.0, 0.1, 0.15])
        x = np.array([1.5, 0.2, 0.3])
        xbar = x + 0.3 * v / np.linalg.norm(v)
        rep = h.trajectory_difference_report(x, v, xbar, v, 1.0, [0.0, 0.5, 1.0], sp)
        row = [r for r in rep.rows if (r.lemma, r.item) == ("nonsingular_x", "1")]
        assert row and row[0].ratio < 1e-10

    def test_random_sweep(self):
        sp = g.sphere()
        rng = np.random.default_rng(3)
        worst, idents, uncovered = {}, 0.0, 0
        for _ in range(300):
            x, v, xb, vb = random_pair(rng, sp)
            rep = h.trajectory_difference_report(x, v, xb, vb, 1.0, np.linspace(0, 1, 6), sp, nodes=16)
            idents = max(idents, rep.identity_error())
            uncovered += len(rep.uncovered_s)
            for r in rep.rows:
                if r.kind == "inequality":
                    worst[(r.lemma, r.item)] = max(worst.get((r.lemma, r.item), 0.0), r.ratio)
        assert idents < 1e-10
        assert all(np.isfinite(list(worst.values())))
        # the square-root trajectory estimate holds with a unit constant on this sample
        assert worst[("sqrt_bound", "2")] <= 1.0
        # triangle-inequality bound of the nonsingular spatial leg is sharp
        assert worst[("nonsingular_x", "2")] <= 1 + 1e-9
        assert worst[("nonsingular_v", "2")] <= 1 + 1e-9

    def test_non_v_stated_form_can_fail(self):
        # the exact relation pairs each exit time with the other speed
        sp = g.sphere()
        rng = np.random.default_rng(3)
        exceed = 0
        for _ in range(200):
            x, v, xb, vb = random_pair(rng, sp)
            rep = h.trajectory_difference_report(x, v, x, vb, 1.0, [1.0], sp, nodes=16)
            for r in rep.rows:
                if r.lemma == "nonsingular_v" and r.item == "1-exact":
                    assert r.ratio < 1e-10
                if r.lemma == "nonsingular_v" and r.item == "1" and r.ratio > 1 + 1e-9:
                    exceed += 1
        assert exceed > 0

    def test_far_apart_rejected(self):
        with pytest.raises(InvalidInputError):
            h.trajectory_difference_report([3, 0, 0], [1, 0, 0], [5, 0, 0], [1, 0, 0], 1.0, [0.5], g.sphere())

    def test_bad_s(self):
        with pytest.raises(InvalidInputError):
            h.trajectory_difference_report([3, 0, 0], [1, 0, 0], [3, 0.1, 0], [1, 0, 0], 1.0, [1.5], g.sphere())


class TestInitialDatum:
    def test_constant(self):
        c = lambda x, v: 2.0  # noqa: E731
        est = h.initial_holder_seminorm(c, [([0, 0, 0], [0.5, 0, 0], [1, 0, 0])], [([0, 0, 0], [1, 0, 0], [1.5, 0, 0])])
        assert est.total == 0.0

    def test_maxwellian_against_bound(self):
        rng = np.random.default_rng(0)
        bound = h.maxwellian_A_half_bound()
        vs = rng.normal(scale=2.0, size=(4000, 3))
        dirs = rng.normal(size=(4000, 3))
        dirs *= (rng.uniform(1e-3, 1, 4000) / np.linalg.norm(dirs, axis=1))[:, None]
        v_pairs = [(np.zeros(3), v, v + d) for v, d in zip(vs, dirs)]
        x_pairs = [(np.zeros(3), np.array([0.3, 0, 0]), v) for v in vs[:50]]
        est = h.initial_holder_seminorm(h.maxwellian, x_pairs, v_pairs)
        assert est.x_part == 0.0
        assert 0.7 * bound < est.v_part <= bound

    def test_analytic_bound_value(self):
        # sup_r <r>^2 max_{|rho - r| <= 1} rho/2 exp(-rho^2/4), checked against a dense direct scan
        r = np.linspace(0, 20, 4001)[:, None]
        rho = np.clip(r + np.linspace(-1, 1, 801)[None, :], 0, None)
        direct = np.max((1 + r[:, 0] ** 2) * np.max(0.5 * rho * np.exp(-rho**2 / 4), axis=1))
        assert h.maxwellian_A_half_bound() == pytest.approx(direct, rel=1e-4)

    def test_jump_grows(self):
        jump = lambda x, v: float(x[0] > 0)  # noqa: E731
        q = [h.initial_holder_seminorm(jump, [([-d / 2, 0, 0], [d / 2, 0, 0], [0, 0, 0])]).x_part
             for d in (1e-2, 1e-4)]
        assert q[1] > q[0]

    def test_radial_datum(self):
        sp = g.sphere()
        A = h.maxwellian_A_half_bound()
        rows = h.initial_trajectory_holder_check([1.5, 0.1, 0], [1, 0.2, 0], [1.4, 0.1, 0], [1, 0.2, 0], 1.0,
                                                 h.maxwellian, sp, A, 1.0)
        assert rows[0].branch == "s0_shift_x"
        assert all(r.lhs == pytest.approx(0.0, abs=1e-15) for r in rows)
        assert all(r.compat_residual < 1e-15 for r in rows)

    def test_lipschitz_sweep(self):
        sp = g.sphere()
        f0 = lambda x, v: math.sin(x[0] + 2 * x[1]) * math.exp(-float(v @ v) / 4)  # noqa: E731
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(100):
            x, v, xb, vb = random_pair(rng, sp, 0.5)
            for r in h.initial_trajectory_holder_check(x, v, xb, vb, 1.0, f0, sp, 3.0, 1.0, nodes=16):
                worst = max(worst, r.ratio)
        assert np.isfinite(worst)

    def test_velocity_branch(self):
        rows = h.initial_trajectory_holder_check([1.5, 0, 0], [1, 0.2, 0], [1.5, 0, 0], [1, 0.3, 0], 1.0,
                                                 lambda x, v: x[1], g.sphere(), 1.0, 1.0)
        assert rows[0].branch == "s0_shift_v" and np.isfinite(rows[0].ratio)
