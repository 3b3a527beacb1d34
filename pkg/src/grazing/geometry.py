"""Level-set description of a uniformly convex obstacle.

The level-set function ``xi`` is positive inside the obstacle, zero on its
boundary and negative in the exterior fluid domain.  Spheres and ellipsoids
are handled in closed form through a common quadric parametrization

    xi(x) = s * (1 - |(x - c) / a|^2)

with ``s = r^2`` and ``a = (r, r, r)`` for a sphere of radius ``r`` and
``s = 1`` for an ellipsoid with semi-axes ``a``.  Custom obstacles supply
vectorized callbacks for xi, its gradient and its Hessian.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConvexityViolation, DomainError, InvalidInputError, SchemaError

BOUNDARY_TOL = 1e-10


@dataclass(frozen=True)
class CustomLevelSet:
    """Callbacks for a user-defined obstacle.

    Each callback takes an array of shape (..., 3) and returns xi (...),
    gradient (..., 3) or Hessian (..., 3, 3).
    """

    xi: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    interior_point: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ConvexObstacle:
    kind: str
    center: np.ndarray
    axes: np.ndarray
    scale: float
    bounding_radius: float
    theta_omega: float
    custom: CustomLevelSet | None = field(default=None, compare=False)

    @property
    def is_quadric(self) -> bool:
        return self.kind in ("sphere", "ellipsoid")

    @property
    def interior_point(self) -> np.ndarray:
        if self.custom is not None:
            return np.asarray(self.custom.interior_point, dtype=float)
        return self.center

    # vectorized level-set evaluation
    def xi(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.custom is not None:
            return np.asarray(self.custom.xi(x), dtype=float)
        y = (x - self.center) / self.axes
        return self.scale * (1.0 - np.sum(y * y, axis=-1))

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.custom is not None:
            return np.asarray(self.custom.grad(x), dtype=float)
        return -2.0 * self.scale * (x - self.center) / self.axes**2

    def hess(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.custom is not None:
            return np.asarray(self.custom.hess(x), dtype=float)
        h = np.diag(-2.0 * self.scale / self.axes**2)
        return np.broadcast_to(h, x.shape[:-1] + (3, 3)).copy()

    def normal(self, x: np.ndarray) -> np.ndarray:
        g = self.grad(x)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def to_json(self) -> dict:
        if self.kind == "sphere":
            return {"kind": "sphere", "center": self.center.tolist(), "radius": float(self.axes[0])}
        if self.kind == "ellipsoid":
            return {"kind": "ellipsoid", "center": self.center.tolist(), "semi_axes": self.axes.tolist()}
        return {"kind": "custom", "bounding_radius": self.bounding_radius, "theta_omega": self.theta_omega}


@dataclass(frozen=True)
class BoundaryPoint:
    position: np.ndarray
    normal: np.ndarray
    grad_norm: float


@dataclass(frozen=True)
class PlanarCurve:
    """Closed convex curve cut from the boundary by a plane."""

    points: np.ndarray          # (N, 3) points on the boundary
    coords: np.ndarray          # (N, 2) in-plane coordinates
    curvature: np.ndarray       # (N,)
    n_par_norm: np.ndarray      # |(I - q q^T) n| at each point
    plane_normal: np.ndarray

    @property
    def n_par_min(self) -> float:
        return float(self.n_par_norm.min())

    @property
    def n_par_max(self) -> float:
        return float(self.n_par_norm.max())


def _vec3(x, name: str = "x") -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.shape != (3,):
        raise InvalidInputError(f"{name} must be a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} must be finite")
    return a


def sphere(center=(0.0, 0.0, 0.0), radius: float = 1.0) -> ConvexObstacle:
    c = _vec3(center, "center")
    if not radius > 0:
        raise InvalidInputError("radius must be positive")
    r = float(radius)
    return ConvexObstacle(
        kind="sphere", center=c, axes=np.full(3, r), scale=r * r,
        bounding_radius=float(np.linalg.norm(c) + r), theta_omega=2.0,
    )


def ellipsoid(center=(0.0, 0.0, 0.0), semi_axes=(1.0, 1.0, 1.0)) -> ConvexObstacle:
    c = _vec3(center, "center")
    a = _vec3(semi_axes, "semi_axes")
    if np.any(a <= 0):
        raise InvalidInputError("semi_axes must be positive")
    return ConvexObstacle(
        kind="ellipsoid", center=c, axes=a, scale=1.0,
        bounding_radius=_ellipsoid_bounding_radius(c, a), theta_omega=float(2.0 / np.max(a) ** 2),
    )


def custom(levelset: CustomLevelSet, bounding_radius: float, theta_omega: float) -> ConvexObstacle:
    if not (bounding_radius > 0 and theta_omega > 0):
        raise InvalidInputError("bounding_radius and theta_omega must be positive")
    return ConvexObstacle(
        kind="custom", center=np.asarray(levelset.interior_point, dtype=float), axes=np.ones(3),
        scale=1.0, bounding_radius=float(bounding_radius), theta_omega=float(theta_omega), custom=levelset,
    )


def _ellipsoid_bounding_radius(c: np.ndarray, a: np.ndarray) -> float:
    if not np.any(c):
        return float(np.max(a))
    # max |c + a*y| over the unit sphere: dense sample then local polish
    rng = np.random.default_rng(0)
    y = rng.normal(size=(20000, 3))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    r = np.linalg.norm(c + a * y, axis=1)
    best = y[np.argmax(r)]
    for _ in range(200):
        p = c + a * best
        g = a * p
        best = g / np.linalg.norm(g)
    return float(max(r.max(), np.linalg.norm(c + a * best)))


def obstacle_from_json(doc: dict | str | Path) -> ConvexObstacle:
    """Build a sphere or ellipsoid from a JSON document, string or file path."""
    if isinstance(doc, Path) or (isinstance(doc, str) and not doc.lstrip().startswith("{")):
        doc = json.loads(Path(doc).read_text())
    elif isinstance(doc, str):
        doc = json.loads(doc)
    if not isinstance(doc, dict):
        raise SchemaError("obstacle description must be a JSON object")
    kind = doc.get("kind")
    allowed = {"sphere": {"kind", "center", "radius"}, "ellipsoid": {"kind", "center", "semi_axes"}}
    if kind not in allowed:
        raise SchemaError(f"unknown obstacle kind {kind!r}; custom obstacles are registered programmatically")
    extra = set(doc) - allowed[kind]
    if extra:
        raise SchemaError(f"unknown keys for {kind}: {sorted(extra)}")
    try:
        if kind == "sphere":
            return sphere(doc.get("center", (0, 0, 0)), float(doc["radius"]))
        return ellipsoid(doc.get("center", (0, 0, 0)), doc["semi_axes"])
    except (KeyError, TypeError, InvalidInputError) as exc:
        raise SchemaError(f"invalid {kind} description: {exc}") from exc


def levelset_eval(obstacle: ConvexObstacle, x) -> tuple[float, np.ndarray, np.ndarray]:
    x = _vec3(x)
    h = obstacle.hess(x)
    return float(obstacle.xi(x)), obstacle.grad(x), 0.5 * (h + h.T)


def _closest_quadric(obstacle: ConvexObstacle, x: np.ndarray) -> np.ndarray:
    """Closest boundary points for exterior points x of shape (N, 3)."""
    c, a = obstacle.center, obstacle.axes
    y = x - c
    if obstacle.kind == "sphere":
        return c + a[0] * y / np.linalg.norm(y, axis=1, keepdims=True)
    # minimize |z - y| on sum (z/a)^2 = 1: z_i = a_i^2 y_i / (t + a_i^2) with
    # F(t) = sum (a_i y_i / (t + a_i^2))^2 - 1 = 0, t > 0, F decreasing.
    a2 = a * a
    ay = a * y
    lo = np.zeros(len(y))
    hi = np.linalg.norm(ay, axis=1)
    t = 0.5 * (lo + hi)
    for _ in range(200):
        q = ay / (t[:, None] + a2)
        F = np.sum(q * q, axis=1) - 1.0
        dF = -2.0 * np.sum(q * q / (t[:, None] + a2), axis=1)
        lo = np.where(F > 0, t, lo)
        hi = np.where(F > 0, hi, t)
        with np.errstate(divide="ignore", invalid="ignore"):
            tn = t - F / dF
        bad = ~((tn > lo) & (tn < hi))
        tn = np.where(bad, 0.5 * (lo + hi), tn)
        if np.all(np.abs(tn - t) <= 1e-15 * np.maximum(1.0, t)):
            t = tn
            break
        t = tn
    return c + a2 * y / (t[:, None] + a2)


def _closest_custom(obstacle: ConvexObstacle, x: np.ndarray) -> np.ndarray:
    """Constrained projection by damped Newton on the KKT system."""
    out = np.empty_like(x)
    p0 = obstacle.interior_point
    # seed points: the KKT system has spurious stationary points, so start
    # from the nearest of a fixed boundary sample
    seeds = sample_boundary(obstacle, 2000, np.random.default_rng(0))
    for i, xi_pt in enumerate(x):
        z = seeds[np.argmin(np.linalg.norm(seeds - xi_pt, axis=1))]
        g = obstacle.grad(z)
        lam = float((z - xi_pt) @ g) / max(float(g @ g), 1e-300)
        for _ in range(100):
            g = obstacle.grad(z)
            H = obstacle.hess(z)
            r = np.concatenate([z - xi_pt - lam * g, [obstacle.xi(z)]])
            if np.linalg.norm(r) < 1e-14 * (1 + np.linalg.norm(xi_pt)):
                break
            J = np.zeros((4, 4))
            J[:3, :3] = np.eye(3) - lam * H
            J[:3, 3] = -g
            J[3, :3] = g
            try:
                step = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                break
            alpha = 1.0
            while alpha > 1e-6:
                zn, ln = z + alpha * step[:3], lam + alpha * step[3]
                rn = np.concatenate([zn - xi_pt - ln * obstacle.grad(zn), [obstacle.xi(zn)]])
                if np.linalg.norm(rn) < np.linalg.norm(r):
                    break
                alpha *= 0.5
            z, lam = zn, ln
        # safeguard: pull back exactly onto the boundary along the segment to p0
        if abs(obstacle.xi(z)) > BOUNDARY_TOL:
            z = _segment_crossing(obstacle, z + (z - p0), p0)
        out[i] = z
    return out


def _segment_crossing(obstacle: ConvexObstacle, outside: np.ndarray, inside: np.ndarray) -> np.ndarray:
    lo, hi = 0.0, 1.0  # parameter from outside (xi<0) to inside (xi>0)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if obstacle.xi(outside + mid * (inside - outside)) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-17:
            break
    return outside + 0.5 * (lo + hi) * (inside - outside)


def distance_batch(obstacle: ConvexObstacle, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distances and closest points for exterior points of shape (N, 3)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if obstacle.is_quadric:
        z = _closest_quadric(obstacle, x)
    else:
        z = _closest_custom(obstacle, x)
    d = np.linalg.norm(x - z, axis=1)
    inside = obstacle.xi(x) > BOUNDARY_TOL
    d = np.where(inside, 0.0, d)
    return d, z


def distance_to_boundary(obstacle: ConvexObstacle, x) -> tuple[float, BoundaryPoint]:
    x = _vec3(x)
    if obstacle.xi(x) > BOUNDARY_TOL:
        raise DomainError("point lies inside the obstacle")
    d, z = distance_batch(obstacle, x[None, :])
    g = obstacle.grad(z[0])
    gn = float(np.linalg.norm(g))
    return float(d[0]), BoundaryPoint(position=z[0], normal=g / gn, grad_norm=gn)


def sample_boundary(obstacle: ConvexObstacle, n: int, rng: np.random.Generator) -> np.ndarray:
    """Random boundary points (not area-uniform)."""
    y = rng.normal(size=(n, 3))
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    if obstacle.is_quadric:
        return obstacle.center + obstacle.axes * y
    p0 = obstacle.interior_point
    far = p0 + 2.5 * (obstacle.bounding_radius + np.linalg.norm(p0)) * y
    return np.array([_segment_crossing(obstacle, f, p0) for f in far])


def verify_uniform_convexity(obstacle: ConvexObstacle, n_samples: int = 256, seed: int = 0) -> float:
    """Minimum of zeta . (-Hess xi) zeta over sampled boundary points and directions.

    Besides random unit directions, the eigenvector of the smallest eigenvalue
    of -Hess xi is included at every sampled point, so the estimate is the
    exact minimum eigenvalue over the sampled points.
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    pts = sample_boundary(obstacle, n_samples, rng)
    H = -obstacle.hess(pts)
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    zeta = rng.normal(size=(n_samples, 8, 3))
    zeta /= np.linalg.norm(zeta, axis=-1, keepdims=True)
    w, vecs = np.linalg.eigh(H)
    zeta = np.concatenate([zeta, vecs[:, None, :, 0]], axis=1)
    q = np.einsum("nki,nij,nkj->nk", zeta, H, zeta)
    i, k = np.unravel_index(np.argmin(q), q.shape)
    theta = float(q[i, k])
    if theta < 0:
        raise ConvexityViolation(
            f"negative curvature direction found (value {theta:.3g})", witness_x=pts[i], witness_zeta=zeta[i, k]
        )
    if theta < 0.9 * obstacle.theta_omega:
        raise ConvexityViolation(
            f"sampled convexity {theta:.6g} below 0.9 x declared theta_omega {obstacle.theta_omega:.6g}",
            witness_x=pts[i], witness_zeta=zeta[i, k],
        )
    return theta


def _orthonormal_plane(span1, span2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    e1 = _vec3(span1, "span1")
    s2 = _vec3(span2, "span2")
    n1 = np.linalg.norm(e1)
    if n1 == 0:
        raise InvalidInputError("span1 vanishes")
    e1 = e1 / n1
    e2 = s2 - (s2 @ e1) * e1
    n2 = np.linalg.norm(e2)
    if n2 < 1e-12 * max(1.0, np.linalg.norm(s2)):
        raise InvalidInputError("span vectors are linearly dependent")
    e2 = e2 / n2
    return e1, e2, np.cross(e1, e2)


def planar_slice(obstacle: ConvexObstacle, base, span1, span2, n_points: int = 720) -> PlanarCurve | None:
    """Intersect the boundary with the plane base + span{span1, span2}.

    Returns None when the intersection is empty or a single point.
    """
    from scipy.optimize import minimize

    base = _vec3(base, "base")
    e1, e2, q = _orthonormal_plane(span1, span2)
    # in-plane foot of the obstacle's reference point, then maximize xi
    ref = obstacle.interior_point - base
    start = np.array([ref @ e1, ref @ e2])
    plane = lambda ab: base + ab[..., :1] * e1 + ab[..., 1:2] * e2  # noqa: E731
    res = minimize(lambda ab: -float(obstacle.xi(plane(np.asarray(ab)))), start, method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 4000})
    center2 = res.x
    peak = float(obstacle.xi(plane(center2)))
    if peak <= BOUNDARY_TOL * max(1.0, obstacle.scale):
        return None

    ang = np.linspace(0.0, 2 * np.pi, n_points, endpoint=False)
    dirs2 = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    p0 = plane(center2)
    dirs3 = dirs2[:, :1] * e1 + dirs2[:, 1:] * e2
    if obstacle.is_quadric:
        y0 = (p0 - obstacle.center) / obstacle.axes
        w = dirs3 / obstacle.axes
        A = np.sum(w * w, axis=1)
        B = w @ y0
        C = y0 @ y0 - 1.0  # negative: start inside
        rad = (-B + np.sqrt(B * B - A * C)) / A
    else:
        R = 2.5 * (obstacle.bounding_radius + np.linalg.norm(p0))
        rad = np.array([np.linalg.norm(_segment_crossing(obstacle, p0 + R * d, p0) - p0) for d in dirs3])
    pts = p0 + rad[:, None] * dirs3
    coords = center2 + rad[:, None] * dirs2

    g = obstacle.grad(pts)
    H = obstacle.hess(pts)
    ga, gb = g @ e1, g @ e2
    haa = np.einsum("i,nij,j->n", e1, H, e1)
    hab = np.einsum("i,nij,j->n", e1, H, e2)
    hbb = np.einsum("i,nij,j->n", e2, H, e2)
    kappa = np.abs(haa * gb**2 - 2 * hab * ga * gb + hbb * ga**2) / np.hypot(ga, gb) ** 3
    n = g / np.linalg.norm(g, axis=1, keepdims=True)
    n_par = n - np.outer(n @ q, q)
    return PlanarCurve(points=pts, coords=coords, curvature=kappa,
                       n_par_norm=np.linalg.norm(n_par, axis=1), plane_normal=q)


def closest_boundary_direction(obstacle: ConvexObstacle, x) -> tuple[float, np.ndarray, np.ndarray]:
    """Distance, closest point P and unit axis (x - P)/|x - P|."""
    d, bp = distance_to_boundary(obstacle, x)
    if d <= 0:
        raise DomainError("point lies on the boundary")
    axis = (np.asarray(x, dtype=float) - bp.position) / d
    return d, bp.position, axis


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


def bracket(x: float) -> float:
    """Japanese bracket <x> = sqrt(1 + x^2)."""
    return math.sqrt(1.0 + x * x)
