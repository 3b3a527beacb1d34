import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grazing import billiard, geometry
from grazing.errors import DomainError, InvalidInputError, NearGrazingError, NoHitError

from conftest import custom_ellipsoid, exterior_points


def hitting_states(obstacle, rng, n):
    """Random exterior (x, v) whose backward ray hits, away from grazing."""
    out = []
    while len(out) < n:
        x = exterior_points(obstacle, rng, 1)[0]
        v = (x - obstacle.center) + 0.6 * rng.normal(size=3) * np.linalg.norm(x)
        v *= rng.uniform(0.2, 3.0) / np.linalg.norm(v)
        b = billiard.backward_exit(obstacle, x, v)
        if b.hit and b.cos_incidence > 0.05:
            out.append((x, v))
    return out


class TestBackwardExit:
    def test_head_on(self, unit_sphere):
        b = billiard.backward_exit(unit_sphere, (2, 0, 0), (1, 0, 0))
        assert b.t_b == 1.0 and b.grazing == -2.0
        np.testing.assert_array_equal(b.x_b, [1, 0, 0])
        assert b.t1(3.0) == 2.0

    def test_miss_is_sentinel(self, unit_sphere):
        b = billiard.backward_exit(unit_sphere, (2, 0, 0), (-1, 0, 0))
        assert b.t_b is None and b.t1(5.0) is None and not b.hit

    def test_grazing_cone(self, unit_sphere):
        # alpha_g = asin(R/|x|) = pi/6, located by bisection on the cone angle
        d = billiard.grazing_direction(unit_sphere, (2, 0, 0), (1, 0, 0), (0, 1, 0))
        assert np.arctan2(d[1], d[0]) == pytest.approx(np.pi / 6, abs=1e-12)
        b = billiard.backward_exit(unit_sphere, (2, 0, 0), d, tangent_as_hit=True)
        assert abs(b.grazing) < 1e-6
        # square-root growth of the grazing measure inside the cone
        g = []
        for eta in (1e-4, 1e-6):
            inside = np.array([np.cos(np.pi / 6 - eta), np.sin(np.pi / 6 - eta), 0])
            b = billiard.backward_exit(unit_sphere, (2, 0, 0), inside)
            assert b.hit
            g.append(abs(b.grazing))
        assert g[0] / g[1] == pytest.approx(10.0, rel=1e-3)

    def test_exact_tangent_is_miss(self, unit_sphere):
        assert billiard.backward_exit(unit_sphere, (2, 1, 0), (1, 0, 0)).t_b is None
        b = billiard.backward_exit(unit_sphere, (2, 1, 0), (1, 0, 0), tangent_as_hit=True)
        assert b.t_b == 2.0 and b.grazing == 0.0

    def test_errors(self, unit_sphere):
        with pytest.raises(InvalidInputError):
            billiard.backward_exit(unit_sphere, (2, 0, 0), (0, 0, 0))
        with pytest.raises(DomainError):
            billiard.backward_exit(unit_sphere, (0.5, 0, 0), (1, 0, 0))

    def test_boundary_launch(self, unit_sphere):
        assert billiard.backward_exit(unit_sphere, (1, 0, 0), (1, 0, 0)).t_b == 0.0
        assert billiard.backward_exit(unit_sphere, (1, 0, 0), (-1, 0, 0)).t_b is None

    @pytest.mark.parametrize("which", ["sphere", "ellipsoid", "custom"])
    def test_hit_invariants(self, which, rng):
        o = {"sphere": geometry.sphere((0.1, 0, -0.2), 1.3),
             "ellipsoid": geometry.ellipsoid((0, 0.3, 0), (1, 2, 3)),
             "custom": custom_ellipsoid()}[which]
        for x, v in hitting_states(o, rng, 50):
            b = billiard.backward_exit(o, x, v)
            assert abs(o.xi(b.x_b)) <= 1e-10
            s = np.linspace(0, b.t_b, 33)[:-1]
            assert np.all(o.xi(x[None] - s[:, None] * v[None]) < 1e-12)
            g = o.grad(b.x_b)
            cos = abs(v @ g) / (np.linalg.norm(v) * np.linalg.norm(g))
            assert abs(abs(b.grazing) - np.linalg.norm(g) * np.linalg.norm(v) * cos) < 1e-10

    def test_closed_form_vs_root_finder(self, rng):
        o = geometry.ellipsoid(semi_axes=(1, 2, 3))
        co = custom_ellipsoid()
        for x, v in hitting_states(o, rng, 100):
            assert billiard.exit_time(o, x, v) == pytest.approx(billiard.exit_time(co, x, v), abs=1e-12)

    def test_batch_matches_scalar(self, ell123, rng):
        st_ = hitting_states(ell123, rng, 20)
        X = np.array([s[0] for s in st_])
        V = np.array([s[1] for s in st_])
        tb, _ = billiard.quadric_exit_batch(ell123, X, V)
        np.testing.assert_allclose(tb, [billiard.exit_time(ell123, x, v) for x, v in st_], rtol=0, atol=0)


class TestReflect:
    def test_examples(self):
        np.testing.assert_array_equal(billiard.specular_reflect((1, 0, 0), (-1, 0, 0)), [-1, 0, 0])
        v = np.array([1, 1, 0]) / np.sqrt(2)
        np.testing.assert_array_equal(billiard.specular_reflect(v, (0, 0, 1)), v)

    def test_non_unit(self):
        with pytest.raises(InvalidInputError):
            billiard.specular_reflect((1, 0, 0), (0, 0, 2))

    @settings(max_examples=200)
    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3),
           st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda n: np.linalg.norm(n) > 0.1))
    def test_involution_isometry(self, v, n):
        n = np.asarray(n) / np.linalg.norm(n)
        r = billiard.specular_reflect(v, n)
        assert abs(np.linalg.norm(r) - np.linalg.norm(v)) <= 1e-13 * (1 + np.linalg.norm(v))
        np.testing.assert_allclose(billiard.specular_reflect(r, n), v, atol=1e-14 * (1 + np.linalg.norm(v)))


class TestTrajectory:
    def test_hand_trace(self, unit_sphere):
        p = billiard.trajectory_eval(unit_sphere, 3.0, (2, 0, 0), (1, 0, 0), 0.0)
        np.testing.assert_allclose(p.X, [3, 0, 0], atol=1e-15)
        np.testing.assert_array_equal(p.V, [-1, 0, 0])
        assert p.bounced

    def test_terminal_and_free(self, unit_sphere):
        p = billiard.trajectory_eval(unit_sphere, 2.0, (2, 0, 0), (1, 0, 0), 2.0)
        np.testing.assert_array_equal(p.X, [2, 0, 0])
        x, v = np.array([2.0, 0, 0]), np.array([-1.0, 0.5, 0])
        p = billiard.trajectory_eval(unit_sphere, 2.0, x, v, 0.5)
        np.testing.assert_array_equal(p.X, x - 1.5 * v)
        assert not p.bounced

    def test_bad_s(self, unit_sphere):
        with pytest.raises(InvalidInputError):
            billiard.trajectory_eval(unit_sphere, 1.0, (2, 0, 0), (1, 0, 0), 1.5)

    def test_energy_and_one_bounce(self, ell123):
        rng = np.random.default_rng(99)
        x = exterior_points(ell123, rng, 200_000, 1.01, 4.0)
        v = rng.normal(size=x.shape)
        tb, _ = billiard.quadric_exit_batch(ell123, x, v)
        idx = np.flatnonzero(np.isfinite(tb))[:10_000]
        assert idx.size == 10_000
        for i in idx:
            b = billiard.backward_exit(ell123, x[i], v[i])
            t = b.t_b + rng.uniform(0.1, 3.0)
            s = np.linspace(0, b.t1(t), 12)[:-1]
            X, V = billiard.trajectory_batch(ell123, t, x[i], v[i], s, bounce=b)
            speed = np.linalg.norm(v[i])
            assert np.all(np.abs(np.linalg.norm(V, axis=1) - speed) <= 1e-14 * max(1, speed))
            assert np.all(ell123.xi(X) < 0)

    @pytest.mark.parametrize("r_side", ["before", "after"])
    def test_semigroup(self, unit_sphere, rng, r_side):
        for x, v in hitting_states(unit_sphere, rng, 30):
            b = billiard.backward_exit(unit_sphere, x, v)
            t = b.t_b + 1.0
            t1 = b.t1(t)
            r = t1 * 0.5 if r_side == "before" else t1 + 0.5 * (t - t1)
            s = 0.3 * r
            mid = billiard.trajectory_eval(unit_sphere, t, x, v, r)
            relaunched = billiard.trajectory_eval(unit_sphere, r, mid.X, mid.V, s)
            direct = billiard.trajectory_eval(unit_sphere, t, x, v, s)
            np.testing.assert_allclose(relaunched.X, direct.X, atol=1e-10)
            np.testing.assert_allclose(relaunched.V, direct.V, atol=1e-10)

    def test_specular_compatibility(self, unit_sphere, rng):
        for x, v in hitting_states(unit_sphere, rng, 20):
            b = billiard.backward_exit(unit_sphere, x, v)
            rv = billiard.specular_reflect(v, b.normal)
            for s in (0.0, 0.4, 0.9):
                p1 = billiard.trajectory_eval(unit_sphere, 1.0, b.x_b, v, s)
                p2 = billiard.trajectory_eval(unit_sphere, 1.0, b.x_b, rv, s)
                np.testing.assert_allclose(p1.X, p2.X, atol=1e-12)
                np.testing.assert_allclose(p1.V, p2.V, atol=1e-12)


def fd_exit(obstacle, x, v, h=1e-6):
    def pack(xx, vv):
        b = billiard.backward_exit(obstacle, xx, vv)
        return np.concatenate([[b.t_b], b.x_b])
    jx = np.array([(pack(x + h * e, v) - pack(x - h * e, v)) / (2 * h) for e in np.eye(3)]).T
    jv = np.array([(pack(x, v + h * e) - pack(x, v - h * e)) / (2 * h) for e in np.eye(3)]).T
    return jx[0], jv[0], jx[1:], jv[1:]


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


class TestDerivatives:
    def test_head_on(self, unit_sphere):
        d = billiard.exit_time_derivatives(unit_sphere, (2, 0, 0), (1, 0, 0))
        np.testing.assert_allclose(d.grad_x_tb, [1, 0, 0], atol=1e-15)
        np.testing.assert_allclose(d.grad_v_tb, [-1, 0, 0], atol=1e-15)

    def test_near_grazing_refused(self, unit_sphere):
        with pytest.raises(NearGrazingError):
            billiard.exit_time_derivatives(unit_sphere, (2, 1, 0), (1, 0, 0))
        with pytest.raises(NoHitError):
            billiard.exit_time_derivatives(unit_sphere, (2, 1.5, 0), (1, 0, 0))

    @pytest.mark.parametrize("make", [geometry.sphere, lambda: geometry.ellipsoid((0.2, 0, 0), (1, 2, 3)),
                                      custom_ellipsoid])
    def test_fd_oracle(self, make, rng):
        o = make()
        for x, v in hitting_states(o, rng, 40):
            d = billiard.exit_time_derivatives(o, x, v)
            jx_tb, jv_tb, jx_xb, jv_xb = fd_exit(o, x, v)
            assert rel(d.grad_x_tb, jx_tb) < 1e-5
            assert rel(d.grad_v_tb, jv_tb) < 1e-5
            assert rel(d.grad_x_xb, jx_xb) < 1e-5
            assert rel(d.grad_v_xb, jv_xb) < 1e-5
            # normal field derivative at x_b, and the chain rule through x_b
            xb = billiard.backward_exit(o, x, v).x_b
            h = 1e-6
            fdn = np.array([(o.normal(xb + h * e) - o.normal(xb - h * e)) / (2 * h) for e in np.eye(3)]).T
            assert rel(d.grad_x_n, fdn) < 1e-5
            chain = np.array([(billiard.backward_exit(o, x + h * e, v).normal
                               - billiard.backward_exit(o, x - h * e, v).normal) / (2 * h) for e in np.eye(3)]).T
            assert rel(d.grad_x_n @ d.grad_x_xb, chain) < 1e-5

    def test_companion_identities(self, ell123, rng):
        for x, v in hitting_states(ell123, rng, 10):
            d = billiard.exit_time_derivatives(ell123, x, v)
            tb = billiard.exit_time(ell123, x, v)
            np.testing.assert_allclose(d.grad_v_tb, -tb * d.grad_x_tb, rtol=1e-15)
            np.testing.assert_allclose(d.grad_v_xb, -tb * d.grad_x_xb, rtol=1e-15)
