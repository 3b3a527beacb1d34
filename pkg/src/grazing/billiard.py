"""Backward exit data, specular reflection and the one-bounce characteristic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DomainError, InvalidInputError, NearGrazingError, NoHitError
from .geometry import BOUNDARY_TOL, ConvexObstacle, _vec3

TANGENT_TOL = 1e-14
GRAZING_FLOOR = 1e-9


@dataclass(frozen=True)
class BounceInfo:
    """Backward exit data.  ``t_b is None`` encodes a miss (infinite exit time)."""

    x: np.ndarray
    v: np.ndarray
    t_b: float | None
    x_b: np.ndarray | None = None
    normal: np.ndarray | None = None
    grazing: float = 0.0
    grad_norm: float = 0.0

    @property
    def hit(self) -> bool:
        return self.t_b is not None

    def t1(self, t: float) -> float | None:
        """Bounce time t - t_b, or None for the -infinity sentinel."""
        return None if self.t_b is None else t - self.t_b

    @property
    def cos_incidence(self) -> float:
        if self.t_b is None:
            return 0.0
        return abs(self.grazing) / (self.grad_norm * float(np.linalg.norm(self.v)))


@dataclass(frozen=True)
class TrajectoryPoint:
    X: np.ndarray
    V: np.ndarray
    bounced: bool


@dataclass(frozen=True)
class ExitDerivatives:
    grad_x_tb: np.ndarray
    grad_v_tb: np.ndarray
    grad_x_xb: np.ndarray
    grad_v_xb: np.ndarray
    grad_x_n: np.ndarray


def quadric_exit_batch(obstacle: ConvexObstacle, x: np.ndarray, v: np.ndarray,
                       tangent_as_hit: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized exit times and grazing measures for sphere/ellipsoid.

    Returns ``(t_b, grazing)`` with ``t_b = inf`` on a miss.  In the unit-ball
    coordinates y = (x - c)/a, w = v/a the backward ray solves
    A s^2 - 2 B s + C = 0 and the normalized discriminant
    delta = 1 - |y_perp|^2 is computed from the perpendicular part directly.
    """
    y = (np.asarray(x, dtype=float) - obstacle.center) / obstacle.axes
    w = np.asarray(v, dtype=float) / obstacle.axes
    y, w = np.broadcast_arrays(y, w)
    A = np.sum(w * w, axis=-1)
    B = np.sum(y * w, axis=-1)
    C = np.sum(y * y, axis=-1) - 1.0
    yp = y - (B / A)[..., None] * w
    delta = 1.0 - np.sum(yp * yp, axis=-1)
    C = np.maximum(C, 0.0)
    if tangent_as_hit:
        ok = (B > 0) & (delta > -TANGENT_TOL)
    else:
        ok = (B > 0) & (delta >= TANGENT_TOL)
    root = np.sqrt(A * np.maximum(delta, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        tb = np.where(ok, C / (B + root), np.inf)
    graz = np.where(ok, -2.0 * obstacle.scale * root, 0.0)
    return tb, graz


def _custom_exit(obstacle: ConvexObstacle, x: np.ndarray, v: np.ndarray) -> float | None:
    speed = float(np.linalg.norm(v))
    phi = lambda s: float(obstacle.xi(x - s * v))  # noqa: E731
    if phi(0.0) > -BOUNDARY_TOL and -float(obstacle.grad(x) @ v) > 0:
        return 0.0
    # farthest time at which the backward ray can still be inside the bounding ball
    R = obstacle.bounding_radius
    s_far = (float(np.linalg.norm(x)) + R) / speed
    h = R / speed / 64.0
    s_pp, s_prev, s = None, 0.0, h
    f_pp, f_prev = None, phi(0.0)
    while s <= s_far + h:
        f = phi(s)
        if f > 0:
            return _newton_bisect(obstacle, x, v, s_prev, s)
        if f_pp is not None and f_prev >= f_pp and f_prev >= f:
            # a sampled local maximum below zero may hide a short near-grazing chord
            res = minimize_scalar(lambda r: -phi(r), bounds=(s_pp, s), method="bounded",
                                  options={"xatol": 1e-14 * max(1.0, s)})
            if -res.fun > 0:
                return _newton_bisect(obstacle, x, v, s_pp, float(res.x))
        s_pp, f_pp = s_prev, f_prev
        s_prev, f_prev, s = s, f, s + h
    return None


def _newton_bisect(obstacle: ConvexObstacle, x: np.ndarray, v: np.ndarray, lo: float, hi: float) -> float:
    """Root of xi(x - s v) on [lo, hi] with xi(lo) <= 0 < xi(hi)."""
    tol_scale = 1.0 + float(np.linalg.norm(obstacle.grad(x - hi * v))) * float(np.linalg.norm(v))
    s = 0.5 * (lo + hi)
    for _ in range(200):
        p = x - s * v
        val = float(obstacle.xi(p))
        deriv = -float(obstacle.grad(p) @ v)
        if abs(val) <= 1e-12 * tol_scale:
            # one more Newton step brings the root to rounding level
            return s - val / deriv if deriv != 0 else s
        if val > 0:
            hi = s
        else:
            lo = s
        s_new = s - val / deriv if deriv != 0 else 0.5 * (lo + hi)
        if not (lo < s_new < hi):
            s_new = 0.5 * (lo + hi)
        if hi - lo < 1e-16 * max(1.0, hi):
            return s_new
        s = s_new
    return s


def backward_exit(obstacle: ConvexObstacle, x, v, tangent_as_hit: bool = False) -> BounceInfo:
    """First backward hit of the ray x - s v with the boundary.

    A point on the boundary whose backward ray enters the obstacle gets
    ``t_b = 0`` (it is bouncing now).  ``tangent_as_hit`` treats double roots
    of the quadric equation as hits with zero grazing measure.
    """
    x = _vec3(x)
    v = _vec3(v, "v")
    if not np.any(v):
        raise InvalidInputError("velocity must be nonzero")
    xi0 = float(obstacle.xi(x))
    if xi0 > BOUNDARY_TOL:
        raise DomainError("x lies inside the obstacle")
    if obstacle.is_quadric:
        tb_arr, gz = quadric_exit_batch(obstacle, x, v, tangent_as_hit)
        tb = float(tb_arr)
        if not np.isfinite(tb):
            return BounceInfo(x=x, v=v, t_b=None)
    else:
        tb = _custom_exit(obstacle, x, v)
        if tb is None:
            return BounceInfo(x=x, v=v, t_b=None)
    xb = x - tb * v
    g = obstacle.grad(xb)
    gn = float(np.linalg.norm(g))
    # the quadric form avoids cancellation in v . grad xi near grazing
    grazing = float(gz) if obstacle.is_quadric else float(v @ g)
    return BounceInfo(x=x, v=v, t_b=tb, x_b=xb, normal=g / gn, grazing=grazing, grad_norm=gn)


def exit_time(obstacle: ConvexObstacle, x, v, tangent_as_hit: bool = False) -> float | None:
    return backward_exit(obstacle, x, v, tangent_as_hit).t_b


def specular_reflect(v, n) -> np.ndarray:
    v = _vec3(v, "v")
    n = _vec3(n, "n")
    if abs(float(np.linalg.norm(n)) - 1.0) > 1e-10:
        raise InvalidInputError("normal must be a unit vector")
    return v - 2.0 * float(v @ n) * n


def trajectory_eval(obstacle: ConvexObstacle, t: float, x, v, s: float,
                    bounce: BounceInfo | None = None) -> TrajectoryPoint:
    """(X(s), V(s)) of the backward characteristic through (t, x, v)."""
    if not (0.0 <= s <= t):
        raise InvalidInputError(f"s={s} outside [0, t={t}]")
    b = bounce if bounce is not None else backward_exit(obstacle, x, v)
    x, v = b.x, b.v
    t1 = b.t1(t)
    if t1 is None or s > t1:
        return TrajectoryPoint(X=x - (t - s) * v, V=v.copy(), bounced=False)
    rv = specular_reflect(v, b.normal)
    return TrajectoryPoint(X=b.x_b - (t1 - s) * rv, V=rv, bounced=True)


def trajectory_batch(obstacle: ConvexObstacle, t: float, x, v, s: np.ndarray,
                     bounce: BounceInfo | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Positions and velocities at an array of times ``s`` (shape (N,))."""
    s = np.asarray(s, dtype=float)
    b = bounce if bounce is not None else backward_exit(obstacle, x, v)
    X = b.x[None, :] - (t - s)[:, None] * b.v[None, :]
    V = np.broadcast_to(b.v, X.shape).copy()
    t1 = b.t1(t)
    if t1 is not None:
        rv = specular_reflect(b.v, b.normal)
        m = s <= t1
        X[m] = b.x_b[None, :] - (t1 - s[m])[:, None] * rv[None, :]
        V[m] = rv
    return X, V


def exit_time_derivatives(obstacle: ConvexObstacle, x, v) -> ExitDerivatives:
    """Exact first derivatives of t_b, x_b and of the normal field at x_b."""
    b = backward_exit(obstacle, x, v, tangent_as_hit=True)
    if b.t_b is None:
        raise NoHitError("backward ray misses the obstacle")
    v = b.v
    if abs(b.grazing) < GRAZING_FLOOR * b.grad_norm * float(np.linalg.norm(v)):
        raise NearGrazingError("too close to grazing for derivative formulas")
    g = obstacle.grad(b.x_b)
    n = b.normal
    gx_tb = g / float(g @ v)
    gx_xb = np.eye(3) - np.outer(v, n) / float(v @ n)
    H = obstacle.hess(b.x_b)
    gx_n = (np.eye(3) - np.outer(n, n)) @ H / b.grad_norm
    return ExitDerivatives(
        grad_x_tb=gx_tb, grad_v_tb=-b.t_b * gx_tb,
        grad_x_xb=gx_xb, grad_v_xb=-b.t_b * gx_xb, grad_x_n=gx_n,
    )


def grazing_direction(obstacle: ConvexObstacle, x, axis, azimuth_dir, tol: float = 1e-13) -> np.ndarray:
    """Unit direction in the plane span{axis, azimuth_dir} on the grazing cone.

    ``axis`` points from the obstacle toward x, so the backward ray along it
    hits; theta = pi/2 must miss.  Bisects on the angle theta measured from
    ``axis`` toward ``azimuth_dir``.
    """
    x = _vec3(x)
    e3 = np.asarray(axis, dtype=float)
    e1 = np.asarray(azimuth_dir, dtype=float)

    def hits(th: float) -> bool:
        d = np.cos(th) * e3 + np.sin(th) * e1
        return backward_exit(obstacle, x, d).hit

    lo, hi = 0.0, 0.5 * np.pi
    if not hits(lo):
        raise NoHitError("axis direction does not hit the obstacle")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if hits(mid):
            lo = mid
        else:
            hi = mid
    th = 0.5 * (lo + hi)
    return np.cos(th) * e3 + np.sin(th) * e1
