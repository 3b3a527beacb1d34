"""Hölder-quotient estimation for trajectory maps, difference-lemma ratio tables and weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import billiard, shift
from .errors import DomainError, GrazingError, InvalidInputError, SingularWeightError
from .geometry import (ConvexObstacle, _vec3, bracket, closest_boundary_direction, distance_to_boundary,
                       sample_boundary)

MAPS = ("xb", "tb", "X_at_s", "V_at_s", "solution_field")
IDENTITY_TOL = 1e-10


# --------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class WeightParams:
    eps: float = 0.5
    delta: float = 0.5
    varpi: float = 2.0

    def __post_init__(self):
        if not (0 < self.eps < 1 and 0 < self.delta < 1):
            raise InvalidInputError("eps and delta must lie in (0, 1)")
        if not self.varpi > 1:
            raise InvalidInputError("varpi must exceed 1")


@dataclass(frozen=True)
class Weights:
    G_xv: float
    G_xbvb: float
    W: float


def _near(obstacle: ConvexObstacle, x: np.ndarray, eps: float) -> bool:
    return distance_to_boundary(obstacle, x)[0] <= eps


def weight_G(obstacle: ConvexObstacle, x, v, eps: float) -> float:
    x, v = _vec3(x), _vec3(v, "v")
    if not _near(obstacle, x, eps):
        return 1.0
    vn = float(np.linalg.norm(v))
    if vn == 0:
        raise SingularWeightError("|v| = 0 with d(x) <= eps")
    return math.log1p(1.0 / vn) + 1.0


def evaluate_weights(x, v, xbar, vbar, params: WeightParams, obstacle: ConvexObstacle) -> Weights:
    x, v, xbar, vbar = _vec3(x), _vec3(v, "v"), _vec3(xbar, "xbar"), _vec3(vbar, "vbar")
    g1 = weight_G(obstacle, x, v, params.eps)
    g2 = weight_G(obstacle, xbar, vbar, params.eps)
    W = 1.0
    for p, u in ((x, v), (xbar, vbar)):
        if _near(obstacle, p, params.eps):
            un = float(np.linalg.norm(u))
            if un == 0:
                raise SingularWeightError("|v| = 0 with d(x) <= eps")
            W += un ** (-params.delta)
    return Weights(G_xv=g1, G_xbvb=g2, W=W)


# --------------------------------------------------------------------------
# Hölder sweeps


@dataclass(frozen=True)
class HolderFit:
    exponent: float
    constant: float
    residual: float
    eps_grid: list[float]
    diffs: list[float] = field(default_factory=list)
    forced_residual: float = math.nan
    n_used: int = 0
    knee_dropped: bool = False
    crossing: float | None = None


def fit_power_law(eps, diffs, forced: float = 0.75) -> tuple[float, float, float, float, int, bool]:
    """Least-squares fit of log diff = log C + a log eps.

    When dropping the two largest decades lowers the RMS residual by more than
    a factor two (a knee), the trimmed fit is kept.  Returns (a, C, rms,
    forced_rms, n_used, knee_dropped).
    """
    eps = np.asarray(eps, dtype=float)
    diffs = np.asarray(diffs, dtype=float)
    ok = diffs > 0
    le, ld = np.log(eps[ok]), np.log(diffs[ok])
    if le.size < 3:
        raise InvalidInputError("need at least three positive differences to fit")

    def lsq(a_le, a_ld):
        A = np.column_stack([a_le, np.ones_like(a_le)])
        coef, *_ = np.linalg.lstsq(A, a_ld, rcond=None)
        res = a_ld - A @ coef
        return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(res * res)))

    a, b, rms = lsq(le, ld)
    knee = False
    keep = le <= le.max() - 2.0 * math.log(10.0) + 1e-9
    if keep.sum() >= 3:
        a2, b2, rms2 = lsq(le[keep], ld[keep])
        if rms > 2.0 * rms2 + 1e-3:
            a, b, rms, knee = a2, b2, rms2, True
            le, ld = le[keep], ld[keep]
    off = ld - forced * le
    forced_rms = float(np.sqrt(np.mean((off - off.mean()) ** 2)))
    return a, math.exp(b), rms, forced_rms, int(le.size), knee


def _map_value(map_id: str, obstacle, x, v, t, s, field_fn):
    if map_id in ("xb", "tb"):
        b = billiard.backward_exit(obstacle, x, v, tangent_as_hit=True)
        if not b.hit:
            return None
        return b.x_b if map_id == "xb" else np.array([b.t_b])
    if map_id in ("X_at_s", "V_at_s"):
        p = billiard.trajectory_eval(obstacle, t, x, v, s)
        return p.X if map_id == "X_at_s" else p.V
    if map_id == "solution_field":
        return np.atleast_1d(np.asarray(field_fn(x, v), dtype=float))
    raise InvalidInputError(f"unknown map {map_id!r}; expected one of {MAPS}")


def holder_sweep(map_id: str, x, v, direction, eps_grid, obstacle: ConvexObstacle, t: float | None = None,
                 s: float | None = None, field_fn: Callable | None = None) -> HolderFit:
    """Fit |map(base + eps e) - map(base)| ~ C eps^a over a monotone eps grid.

    ``direction`` is a 6-vector perturbing (x, v).  If the map becomes
    undefined at some grid point the fit uses the valid prefix and the first
    failing eps is reported as ``crossing``.
    """
    x, v = _vec3(x), _vec3(v, "v")
    e = np.asarray(direction, dtype=float).ravel()
    if e.size != 6 or not np.all(np.isfinite(e)) or not np.any(e):
        raise InvalidInputError("direction must be a nonzero 6-vector")
    e = e / np.linalg.norm(e)
    eps_grid = [float(q) for q in eps_grid]
    steps = np.diff(eps_grid)
    if min(eps_grid) <= 0 or not (np.all(steps < 0) or np.all(steps > 0)):
        raise InvalidInputError("eps_grid must be positive and strictly monotone")
    if map_id in ("X_at_s", "V_at_s") and (t is None or s is None):
        raise InvalidInputError("X_at_s / V_at_s need t and s")
    if map_id == "solution_field" and field_fn is None:
        raise InvalidInputError("solution_field needs field_fn")
    base = _map_value(map_id, obstacle, x, v, t, s, field_fn)
    if base is None:
        raise DomainError("map undefined at the base point")
    diffs, crossing = [], None
    for q in eps_grid:
        try:
            val = _map_value(map_id, obstacle, x + q * e[:3], v + q * e[3:], t, s, field_fn)
        except GrazingError:
            val = None
        if val is None:
            crossing = q
            break
        diffs.append(float(np.linalg.norm(val - base)))
    used = eps_grid[: len(diffs)]
    if len(used) < 3:
        raise DomainError(f"map undefined from eps={crossing}; fewer than three valid grid points")
    a, C, rms, frms, n, knee = fit_power_law(used, diffs)
    return HolderFit(exponent=a, constant=C, residual=rms, eps_grid=eps_grid, diffs=diffs, forced_residual=frms,
                     n_used=n, knee_dropped=knee, crossing=crossing)


@dataclass(frozen=True)
class GrazingBase:
    x: np.ndarray
    v: np.ndarray
    tangent_point: np.ndarray
    direction: np.ndarray  # 6-vector: inward normal at the tangent point, v fixed
    grazing: float


def grazing_base(obstacle: ConvexObstacle, rng: np.random.Generator, dist_range=(0.3, 2.0)) -> GrazingBase:
    """Exterior point with a velocity on the grazing cone (angle bisection)."""
    for _ in range(100):
        p = sample_boundary(obstacle, 1, rng)[0]
        n_in = obstacle.normal(p)
        x = p - rng.uniform(*dist_range) * n_in
        d, P, axis = closest_boundary_direction(obstacle, x)
        az = rng.normal(size=3)
        az -= (az @ axis) * axis
        if np.linalg.norm(az) < 1e-6:
            continue
        az /= np.linalg.norm(az)
        v = billiard.grazing_direction(obstacle, x, axis, az, tol=1e-15)
        v = v * rng.uniform(0.5, 2.0)
        b = billiard.backward_exit(obstacle, x, v, tangent_as_hit=True)
        if not b.hit:
            continue
        g = abs(b.grazing) / (b.grad_norm * float(np.linalg.norm(v)))
        if g > 1e-6:
            continue
        e = np.concatenate([b.normal, np.zeros(3)])
        return GrazingBase(x=x, v=v, tangent_point=b.x_b, direction=e, grazing=g)
    raise GrazingError("could not construct a grazing base")


# --------------------------------------------------------------------------
# difference-lemma tables


@dataclass(frozen=True)
class DifferenceRow:
    lemma: str
    item: str
    kind: str  # "identity" or "inequality"
    s: float | None
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float:
        if self.kind == "identity":
            return abs(self.lhs - self.rhs)
        if self.rhs == 0:
            return 0.0 if self.lhs == 0 else math.inf
        return self.lhs / self.rhs


@dataclass
class DifferenceReport:
    rows: list[DifferenceRow] = field(default_factory=list)
    uncovered_s: list[float] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, lemma, item, kind, s, lhs, rhs):
        self.rows.append(DifferenceRow(lemma, item, kind, None if s is None else float(s), float(lhs), float(rhs)))

    def identity_error(self) -> float:
        errs = [r.ratio for r in self.rows if r.kind == "identity"]
        return max(errs) if errs else 0.0

    def max_ratio(self, lemma: str, item: str | None = None) -> float:
        vals = [r.ratio for r in self.rows
                if r.kind == "inequality" and r.lemma == lemma and (item is None or r.item == item)]
        return max(vals) if vals else 0.0


def _t1(b: billiard.BounceInfo, t: float) -> float:
    return -math.inf if b.t_b is None else t - b.t_b


def _XV(obstacle, t, b, s):
    p = billiard.trajectory_eval(obstacle, t, b.x, b.v, float(s), b)
    return p.X, p.V


def _outside(s: float, t1a: float, t1b: float) -> bool:
    lo, hi = min(t1a, t1b), max(t1a, t1b)
    if lo == -math.inf:
        return True
    if lo >= 0:
        return s <= lo or s >= hi
    return s >= hi


def _position_rows(rep: DifferenceReport, obstacle, x, xbar, v, t, s_grid, nodes):
    try:
        frame = shift.build_shift_frame(x, xbar, v, obstacle)
    except GrazingError as exc:
        rep.notes.append(f"position split skipped: {exc}")
        return
    xt = frame.xtilde
    vn = float(np.linalg.norm(v))
    bx = billiard.backward_exit(obstacle, x, v)
    bt = billiard.backward_exit(obstacle, xt, v)
    bb = billiard.backward_exit(obstacle, xbar, v)
    if not frame.degenerate:
        T = shift.averaged_singularity_sp(frame, t, obstacle, nodes).value
        dx = float(np.linalg.norm(x - xt))
        t1x, t1t = _t1(bx, t), _t1(bt, t)
        for s in s_grid:
            X1, V1 = _XV(obstacle, t, bx, s)
            X2, V2 = _XV(obstacle, t, bt, s)
            rep.add("singular_x", "1", "inequality", s, np.linalg.norm(X1 - X2),
                    dx * (1 + vn * (t - s) + vn**2 * (t - s) * T))
            if _outside(s, t1x, t1t):
                rep.add("singular_x", "2", "inequality", s, np.linalg.norm(V1 - V2), dx * (vn + vn**2 * T))
    # nonsingular leg x~ -> xbar along v
    dxb = float(np.linalg.norm(xt - xbar))
    same_point = bt.hit and bb.hit and float(np.linalg.norm(bt.x_b - bb.x_b)) < 1e-9 * max(1.0, dxb)
    if bt.hit and bb.hit and same_point:
        rep.add("nonsingular_x", "1", "identity", None, abs(bt.t_b - bb.t_b), dxb / vn)
    t1t, t1b = _t1(bt, t), _t1(bb, t)
    for s in s_grid:
        X1, V1 = _XV(obstacle, t, bt, s)
        X2, V2 = _XV(obstacle, t, bb, s)
        rep.add("nonsingular_x", "2", "inequality", s, np.linalg.norm(X1 - X2), dxb)
        if (bt.hit == bb.hit) and _outside(s, t1t, t1b) and (same_point or not bt.hit):
            rep.add("nonsingular_x", "3", "identity", s, np.linalg.norm(V1 - V2), 0.0)


def _velocity_rows(rep: DifferenceReport, obstacle, x, v, vbar, zeta, t, s_grid, nodes):
    try:
        frame = shift.build_velocity_frame(x, v, vbar, zeta, obstacle)
    except GrazingError as exc:
        rep.notes.append(f"velocity split skipped: {exc}")
        return
    a = v + zeta
    na = float(np.linalg.norm(a))
    at = frame.vtilde + zeta
    ab = vbar + zeta
    bx = billiard.backward_exit(obstacle, x, a)
    bt = billiard.backward_exit(obstacle, x, at)
    bb = billiard.backward_exit(obstacle, x, ab)
    if not frame.degenerate:
        T = shift.averaged_singularity_vel(frame, t, obstacle, nodes).value
        dv = float(np.linalg.norm(v - frame.vtilde))
        t1x, t1t = _t1(bx, t), _t1(bt, t)
        for s in s_grid:
            X1, V1 = _XV(obstacle, t, bx, s)
            X2, V2 = _XV(obstacle, t, bt, s)
            rep.add("singular_v", "1", "inequality", s, np.linalg.norm(X1 - X2),
                    dv * ((t - s) + na * (t - s) ** 2 + na**2 * (t - s) * T))
            if _outside(s, t1x, t1t):
                rep.add("singular_v", "2", "inequality", s, np.linalg.norm(V1 - V2),
                        dv * (1 + na * (t - s) + na**2 * T))
    dvb = float(np.linalg.norm(frame.vtilde - vbar))
    nt, nb = float(np.linalg.norm(at)), float(np.linalg.norm(ab))
    if bt.hit and bb.hit and dvb > 0:
        lhs = abs(bt.t_b - bb.t_b)
        # stated form: min over the same-index quotients
        rep.add("nonsingular_v", "1", "inequality", None, lhs, min(bt.t_b / nt, bb.t_b / nb) * dvb)
        # exact identity from the common exit point
        rep.add("nonsingular_v", "1-exact", "identity", None, lhs, bb.t_b * abs(nb - nt) / nt)
    t1t, t1b = _t1(bt, t), _t1(bb, t)
    for s in s_grid:
        X1, V1 = _XV(obstacle, t, bt, s)
        X2, V2 = _XV(obstacle, t, bb, s)
        rep.add("nonsingular_v", "2", "inequality", s, np.linalg.norm(X1 - X2), dvb * (t - s))
        if bt.hit == bb.hit and _outside(s, t1t, t1b):
            rep.add("nonsingular_v", "3", "identity", s, np.linalg.norm(V1 - V2), dvb)


def trajectory_difference_report(x, v, xbar, vbar, t: float, s_grid, obstacle: ConvexObstacle,
                                 zeta=None, nodes: int = 32) -> DifferenceReport:
    """LHS/RHS table for the trajectory difference lemmas at the given s values.

    The full pair is checked against the square-root estimates; the position
    leg (x, xbar at velocity v) and the velocity leg (v, vbar at position x)
    are split into singular and nonsingular parts through the shifted point
    and shifted velocity.
    """
    x, v, xbar, vbar = _vec3(x), _vec3(v, "v"), _vec3(xbar, "xbar"), _vec3(vbar, "vbar")
    zeta = np.zeros(3) if zeta is None else _vec3(zeta, "zeta")
    dx = float(np.linalg.norm(x - xbar))
    dv = float(np.linalg.norm(v - vbar))
    if math.hypot(dx, dv) > 1.0 + 1e-12:
        raise InvalidInputError("|(x,v) - (xbar,vbar)| must be <= 1")
    s_grid = [float(s) for s in s_grid]
    if any(not (0 <= s <= t) for s in s_grid):
        raise InvalidInputError("s values must lie in [0, t]")
    rep = DifferenceReport()
    b1 = billiard.backward_exit(obstacle, x, v)
    b2 = billiard.backward_exit(obstacle, xbar, vbar)
    vb = bracket(float(np.linalg.norm(v)))
    if b1.hit and b2.hit:
        rep.add("sqrt_bound", "1", "inequality", None,
                max(np.linalg.norm(v), np.linalg.norm(vbar)) * abs(b1.t_b - b2.t_b),
                math.sqrt(dx) + min(math.sqrt(b1.t_b), math.sqrt(b2.t_b)) * math.sqrt(dv))
    t1a, t1b = _t1(b1, t), _t1(b2, t)
    bxv = billiard.backward_exit(obstacle, xbar, v)
    for s in s_grid:
        X1, V1 = _XV(obstacle, t, b1, s)
        X2, V2 = _XV(obstacle, t, b2, s)
        root = math.sqrt(dx) + math.sqrt(t - s) * math.sqrt(dv)
        rep.add("sqrt_bound", "2", "inequality", s, np.linalg.norm(X1 - X2), (1 + vb * (t - s)) * root)
        if t1a > -math.inf and t1b > -math.inf:
            if _outside(s, t1a, t1b):
                rep.add("sqrt_bound", "3", "inequality", s, np.linalg.norm(V1 - V2), dv + vb * root)
            else:
                rep.uncovered_s.append(s)
            continue
        covered = False
        # x-variant: (x, v) against (xbar, v)
        if min(t1a, _t1(bxv, t)) == -math.inf:
            _, V3 = _XV(obstacle, t, bxv, s)
            rep.add("sqrt_bound", "3x", "inequality", s, np.linalg.norm(V1 - V3), vb * math.sqrt(dx))
            covered = True
        # v-variant: (xbar, v) against (xbar, vbar)
        if min(_t1(bxv, t), t1b) == -math.inf:
            _, V3 = _XV(obstacle, t, bxv, s)
            rep.add("sqrt_bound", "3v", "inequality", s, np.linalg.norm(V3 - V2),
                    dv + vb * math.sqrt(t - s) * math.sqrt(dv))
            covered = True
        if not covered:
            rep.uncovered_s.append(s)
    if dx > 0 and np.any(v):
        _position_rows(rep, obstacle, x, xbar, v, t, s_grid, nodes)
    if dv > 0:
        _velocity_rows(rep, obstacle, x, v, vbar, zeta, t, s_grid, nodes)
    return rep


# --------------------------------------------------------------------------
# initial datum


@dataclass(frozen=True)
class SeminormEstimate:
    x_part: float
    v_part: float

    @property
    def total(self) -> float:
        return self.x_part + self.v_part


def initial_holder_seminorm(f0: Callable, x_pairs=(), v_pairs=()) -> SeminormEstimate:
    """Sampled weighted quotients of the initial datum at exponent 1/2.

    ``x_pairs`` holds (x, xbar, v) with |x - xbar| <= 1 and ``v_pairs`` holds
    (x, v, vbar) with |v - vbar| <= 1.
    """
    xq = 0.0
    for x, xb, v in x_pairs:
        x, xb, v = _vec3(x), _vec3(xb, "xbar"), _vec3(v, "v")
        d = float(np.linalg.norm(x - xb))
        if d == 0 or d > 1:
            continue
        xq = max(xq, bracket(float(np.linalg.norm(v))) * abs(float(f0(x, v)) - float(f0(xb, v))) / d)
    vq = 0.0
    for x, v, vb in v_pairs:
        x, v, vb = _vec3(x), _vec3(v, "v"), _vec3(vb, "vbar")
        d = float(np.linalg.norm(v - vb))
        if d == 0 or d > 1:
            continue
        vq = max(vq, (1 + float(v @ v)) * abs(float(f0(x, v)) - float(f0(x, vb))) / d)
    return SeminormEstimate(xq, vq)


def maxwellian(x, v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.exp(-0.25 * np.sum(v * v, axis=-1)))


def maxwellian_A_half_bound(n: int = 20001, r_max: float = 20.0) -> float:
    """Lipschitz bound of <v>^2 |sqrt(mu)(v) - sqrt(mu)(vbar)| / |v - vbar| over |v - vbar| <= 1.

    |grad sqrt(mu)(w)| = |w|/2 exp(-|w|^2/4) is maximized over the ball |w - v| <= 1.
    """
    r = np.linspace(0.0, r_max, n)
    rho = np.linspace(0.0, r_max + 1.0, 4 * n)
    g = 0.5 * rho * np.exp(-0.25 * rho * rho)
    # sliding max of g over [r - 1, r + 1]
    best = np.empty_like(r)
    for i, ri in enumerate(r):
        m = (rho >= ri - 1.0) & (rho <= ri + 1.0)
        best[i] = g[m].max()
    return float(np.max((1 + r * r) * best))


@dataclass(frozen=True)
class InitialCheck:
    branch: str
    lhs: float
    rhs: float
    ratio: float
    compat_residual: float


def _compat(f0, obstacle, b: billiard.BounceInfo) -> float:
    if not b.hit:
        return 0.0
    rv = billiard.specular_reflect(b.v, b.normal)
    return abs(float(f0(b.x_b, b.v)) - float(f0(b.x_b, rv)))


def initial_trajectory_holder_check(x, v, xbar, vbar, t: float, f0: Callable, obstacle: ConvexObstacle,
                                    A_half: float, w0f0: float, nodes: int = 32) -> list[InitialCheck]:
    """Ratios of the initial-term difference against the applicable estimates."""
    x, v, xbar, vbar = _vec3(x), _vec3(v, "v"), _vec3(xbar, "xbar"), _vec3(vbar, "vbar")
    b1 = billiard.backward_exit(obstacle, x, v)
    b2 = billiard.backward_exit(obstacle, xbar, vbar)
    p1 = billiard.trajectory_eval(obstacle, t, x, v, 0.0, b1)
    p2 = billiard.trajectory_eval(obstacle, t, xbar, vbar, 0.0, b2)
    lhs = abs(float(f0(p1.X, p1.V)) - float(f0(p2.X, p2.V)))
    compat = max(_compat(f0, obstacle, b1), _compat(f0, obstacle, b2))
    dx = float(np.linalg.norm(x - xbar))
    dv = float(np.linalg.norm(v - vbar))
    K = A_half + w0f0
    out = []

    def record(branch, rhs):
        ratio = 0.0 if lhs == 0 else (lhs / rhs if rhs > 0 else math.inf)
        if not math.isfinite(ratio):
            raise GrazingError(f"{branch}: non-finite ratio")
        out.append(InitialCheck(branch, lhs, rhs, ratio, compat))

    vn = float(np.linalg.norm(v))
    if dv == 0 and dx > 0:
        frame = shift.build_shift_frame(x, xbar, v, obstacle)
        T = shift.averaged_singularity_sp(frame, t, obstacle, nodes).value
        record("s0_shift_x", dx * K * (1 + t) * (1 + vn + (vn + vn**2) * T))
    if dx == 0 and dv > 0:
        frame = shift.build_velocity_frame(x, v, vbar, np.zeros(3), obstacle)
        T = shift.averaged_singularity_vel(frame, t, obstacle, nodes).value
        vbn = float(np.linalg.norm(vbar))
        record("s0_shift_v", dv * (1 + t + t * t) * K
               * (1 / vn + 1 / vbn + vn + (min(1 / vn, 1 / vbn) + 1) * vn**2 * T))
    record("sqrt_bound_datum", bracket(vn) * (1 + t**1.5) * (math.sqrt(dx) + math.sqrt(dv)) * K)
    return out
