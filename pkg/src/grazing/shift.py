"""Shifted position/velocity frames, specular singularities and their averages.

A position frame joins x~ to x by the segment x(tau) = (1 - tau) x~ + tau x
with x - x~ orthogonal to v; a velocity frame rotates v~ + zeta into v + zeta
along a circular arc of fixed speed.  Along either path the backward ray hits
the obstacle on a single tau-interval whose ends are tangency parameters.

For sphere/ellipsoid obstacles the tangency parameters are explicit and the
discriminant of the exit equation is kept in factored form
``K (tau - r_lo)(r_hi - tau)`` (position) or ``K sin(theta(tau - r_lo))
sin(theta(r_hi - tau))`` (velocity), so 1/S keeps full relative accuracy up
to the inverse-square-root endpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import billiard
from .errors import DegenerateDirectionError, InvalidInputError, NoHitError, PathInvalidError
from .geometry import ConvexObstacle, _vec3, bracket, distance_to_boundary
from .quadrature import QuadratureReport, integrate_batch

ABS_TOL = 1e-10
REL_TOL = 1e-8
C_DOM = 4.0
SCAN_NODES = 256
DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class ShiftFrame:
    x: np.ndarray
    xbar: np.ndarray
    v: np.ndarray
    xtilde: np.ndarray
    tau_minus: float | None
    tau_plus: float | None
    degenerate: bool
    hit_interval: tuple[float, float] | None = None
    roots: tuple[float, ...] = ()

    def path(self, tau):
        tau = np.asarray(tau, dtype=float)
        return (1.0 - tau)[..., None] * self.xtilde + tau[..., None] * self.x

    @property
    def xdot(self) -> np.ndarray:
        return self.x - self.xtilde


@dataclass(frozen=True)
class VelocityShiftFrame:
    x: np.ndarray
    v: np.ndarray
    vbar: np.ndarray
    zeta: np.ndarray
    vtilde: np.ndarray
    theta: float
    rotation: np.ndarray
    tau_minus: float | None
    tau_plus: float | None
    degenerate: bool
    hit_interval: tuple[float, float] | None = None
    roots: tuple[float, ...] = ()

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.v + self.zeta))

    def path(self, tau):
        ph = np.asarray(tau, dtype=float) * self.theta
        return self.speed * (np.cos(ph)[..., None] * self.rotation[:, 0] + np.sin(ph)[..., None] * self.rotation[:, 1])

    def path_dot(self, tau):
        ph = np.asarray(tau, dtype=float) * self.theta
        return self.speed * self.theta * (-np.sin(ph)[..., None] * self.rotation[:, 0]
                                          + np.cos(ph)[..., None] * self.rotation[:, 1])


@dataclass(frozen=True)
class SingularAverage:
    value: float
    pieces: tuple[float, float, float]
    active_indicators: tuple[bool, bool, bool]
    quadrature: QuadratureReport
    min_tb: tuple[float | None, float | None, float | None] = (None, None, None)


@dataclass(frozen=True)
class AveragingReport:
    """Ratios for the averaged-singularity bounds of one frame."""

    lemma_ratios: list[float] = field(default_factory=list)
    lemma_tau_star: list[float] = field(default_factory=list)
    average: float = 0.0
    corollary_rhs: float = 0.0
    corollary_ratio: float = 0.0
    distance: float = 0.0
    c_dom: float = C_DOM
    rhs_indicator: bool = False


# --------------------------------------------------------------------------
# path models: exit times along a frame's path, exact where possible


class _QuadricPositionModel:
    def __init__(self, obstacle: ConvexObstacle, frame: ShiftFrame):
        a, c = obstacle.axes, obstacle.center
        self.y0 = (frame.xtilde - c) / a
        self.e = frame.xdot / a
        self.w = frame.v / a
        self.A = float(self.w @ self.w)
        self.ehat = self.e / float(np.linalg.norm(frame.xdot))
        pa = self.y0 - (self.y0 @ self.w) / self.A * self.w
        pb = self.e - (self.e @ self.w) / self.A * self.w
        self.q2 = float(pb @ pb)
        self.q1 = 2.0 * float(pa @ pb)
        self.q0 = float(pa @ pa) - 1.0

    def roots(self) -> list[float]:
        q2, q1, q0 = self.q2, self.q1, self.q0
        if q2 <= 0:
            return []
        disc = q1 * q1 - 4.0 * q2 * q0
        if disc < 0:
            return []
        qq = -0.5 * (q1 + math.copysign(math.sqrt(disc), q1))
        r = [qq / q2, q0 / qq] if qq != 0 else [0.0, 0.0]
        return sorted(r)

    def B(self, tau):
        return (self.y0 + np.asarray(tau)[..., None] * self.e) @ self.w

    def _core(self, tau, delta):
        y = self.y0 + tau[..., None] * self.e
        B = y @ self.w
        C = np.maximum(np.sum(y * y, axis=-1) - 1.0, 0.0)
        root = np.sqrt(self.A * np.maximum(delta, 0.0))
        tb = C / (B + root)
        yb = y - tb[..., None] * self.w
        return tb, np.abs(yb @ self.ehat), B

    def exit_times(self, tau, tangent_as_hit=True):
        tau = np.asarray(tau, dtype=float)
        delta = -(self.q2 * tau * tau + self.q1 * tau + self.q0)
        with np.errstate(divide="ignore", invalid="ignore"):
            tb, _, B = self._core(tau, delta)
        tol = -billiard.TANGENT_TOL if tangent_as_hit else billiard.TANGENT_TOL
        ok = (B > 0) & (delta > tol) if tangent_as_hit else (B > 0) & (delta >= tol)
        return np.where(ok, tb, np.inf)

    def weighted(self, tau, e_sub, e_other):
        """2u / S(tau) with tau - root = +-u^2 = e_sub at the substituted end."""
        tb, num, _ = self._core(tau, self.q2 * e_sub * e_other)
        return 2.0 * num / np.sqrt(self.A * self.q2 * e_other)

    def inverse_S(self, tau, e1, e2):
        tb, num, _ = self._core(tau, self.q2 * e1 * e2)
        return num / np.sqrt(self.A * self.q2 * e1 * e2)


class _QuadricVelocityModel:
    def __init__(self, obstacle: ConvexObstacle, frame: VelocityShiftFrame):
        a = obstacle.axes
        self.y = (frame.x - obstacle.center) / a
        self.C = max(float(self.y @ self.y) - 1.0, 0.0)
        self.beta = frame.rotation[:, 0] / a
        self.gamma = frame.rotation[:, 1] / a
        self.rho = frame.speed
        self.theta = frame.theta
        p, q = float(self.y @ self.beta), float(self.y @ self.gamma)
        bb, bg, gg = float(self.beta @ self.beta), float(self.beta @ self.gamma), float(self.gamma @ self.gamma)
        a11, a12, a22 = p * p - self.C * bb, p * q - self.C * bg, q * q - self.C * gg
        self.a0 = 0.5 * (a11 + a22)
        cx, cy = 0.5 * (a11 - a22), a12
        self.rho_h = math.hypot(cx, cy)
        self.psi = math.atan2(cy, cx)

    def roots(self) -> list[float]:
        if self.rho_h == 0 or abs(self.a0) > self.rho_h or self.theta == 0:
            return []
        base = math.acos(-self.a0 / self.rho_h)
        out = []
        for k in range(-3, 5):
            for sgn in (1.0, -1.0):
                ph = 0.5 * (self.psi + sgn * base) + k * math.pi
                tau = ph / self.theta
                if -1.0 - math.pi / self.theta <= tau <= 2.0 + math.pi / self.theta:
                    out.append(tau)
        return sorted(set(out))

    def _w(self, tau):
        ph = np.asarray(tau, dtype=float) * self.theta
        return self.rho * (np.cos(ph)[..., None] * self.beta + np.sin(ph)[..., None] * self.gamma), ph

    def B(self, tau):
        return self._w(tau)[0] @ self.y

    def _core(self, tau, sqrt_h):
        w, ph = self._w(tau)
        B = np.sum(w * self.y, axis=-1)
        tb = self.C / (B + sqrt_h)
        yb = self.y - tb[..., None] * w
        wdot_hat = -np.sin(ph)[..., None] * self.beta + np.cos(ph)[..., None] * self.gamma
        return tb, np.abs(np.sum(yb * wdot_hat, axis=-1)), B

    def exit_times(self, tau, tangent_as_hit=True):
        tau = np.asarray(tau, dtype=float)
        w, ph = self._w(tau)
        H = self.a0 + self.rho_h * np.cos(2.0 * ph - self.psi)
        A = np.sum(w * w, axis=-1)
        delta = self.rho**2 * H / A
        with np.errstate(divide="ignore", invalid="ignore"):
            tb, _, B = self._core(tau, self.rho * np.sqrt(np.maximum(H, 0.0)))
        ok = (B > 0) & (delta > -billiard.TANGENT_TOL) if tangent_as_hit else (B > 0) & (delta >= billiard.TANGENT_TOL)
        return np.where(ok, tb, np.inf)

    def weighted(self, tau, e_sub, e_other):
        th = self.theta
        red = th * np.sinc(th * e_sub / np.pi)  # sin(theta e)/e
        Hred = 2.0 * self.rho_h * np.sin(th * e_other) * red
        H = 2.0 * self.rho_h * np.sin(th * e_other) * np.sin(th * e_sub)
        tb, num, _ = self._core(tau, self.rho * np.sqrt(H))
        return 2.0 * tb * num / (self.rho * np.sqrt(Hred))

    def inverse_S(self, tau, e1, e2):
        H = 2.0 * self.rho_h * np.sin(self.theta * e1) * np.sin(self.theta * e2)
        tb, num, _ = self._core(tau, self.rho * np.sqrt(H))
        return tb * num / (self.rho * np.sqrt(H))


class _GenericModel:
    """Root finding by scan and bisection on the hit indicator (custom obstacles)."""

    def __init__(self, obstacle: ConvexObstacle, frame, kind: str):
        self.obstacle, self.frame, self.kind = obstacle, frame, kind

    def _xv(self, tau):
        f = self.frame
        if self.kind == "sp":
            return f.path(tau), f.v
        return f.x, f.path(tau)

    def exit_times(self, tau, tangent_as_hit=True):
        out = []
        for t in np.atleast_1d(np.asarray(tau, dtype=float)):
            x, v = self._xv(t)
            tb = billiard.exit_time(self.obstacle, x, v)
            out.append(np.inf if tb is None else tb)
        return np.array(out).reshape(np.shape(tau))

    def roots(self) -> list[float]:
        grid = np.linspace(0.0, 1.0, SCAN_NODES + 1)
        hit = np.isfinite(self.exit_times(grid))
        out = []
        for i in np.flatnonzero(hit[1:] != hit[:-1]):
            lo, hi = grid[i], grid[i + 1]
            h_lo = hit[i]
            while hi - lo > 1e-14:
                mid = 0.5 * (lo + hi)
                if np.isfinite(self.exit_times(mid)) == h_lo:
                    lo = mid
                else:
                    hi = mid
            out.append(0.5 * (lo + hi))
        return out

    def B(self, tau):
        # sign test used only for root classification: positive means the
        # root belongs to the backward hit set
        return np.ones(np.shape(tau))

    def direct(self, tau):
        out = []
        for t in np.atleast_1d(np.asarray(tau, dtype=float)):
            val = (specular_singularity_sp(self.frame, float(t), self.obstacle) if self.kind == "sp"
                   else specular_singularity_vel(self.frame, float(t), self.obstacle))
            out.append(1.0 / val)
        return np.array(out)

    def weighted(self, tau, e_sub, e_other):
        return 2.0 * np.sqrt(e_sub) * self.direct(tau)

    def inverse_S(self, tau, e1, e2):
        return self.direct(tau)


def _model(obstacle: ConvexObstacle, frame):
    kind = "sp" if isinstance(frame, ShiftFrame) else "vel"
    if not obstacle.is_quadric:
        return _GenericModel(obstacle, frame, kind)
    return _QuadricPositionModel(obstacle, frame) if kind == "sp" else _QuadricVelocityModel(obstacle, frame)


def _classify(model, roots: list[float]):
    """Tangency parameters in [0, 1] and the hit interval within [0, 1]."""
    inside = [r for r in roots if 0.0 <= r <= 1.0]
    pts = sorted({0.0, 1.0, *inside})
    hits = []
    for a, b in zip(pts[:-1], pts[1:]):
        if b - a <= 0:
            continue
        if np.isfinite(model.exit_times(np.array([0.5 * (a + b)]), tangent_as_hit=False))[0]:
            hits.append((a, b))
    interval = (hits[0][0], hits[-1][1]) if hits else None
    taus = []
    if interval is not None:
        taus = [r for r in inside if abs(r - interval[0]) < 1e-15 or abs(r - interval[1]) < 1e-15]
    taus = sorted(taus)
    tm = taus[0] if taus else None
    tp = taus[1] if len(taus) > 1 else None
    return tm, tp, interval


# --------------------------------------------------------------------------
# frame construction


def build_shift_frame(x, xbar, v, obstacle: ConvexObstacle) -> ShiftFrame:
    x, xbar, v = _vec3(x), _vec3(xbar, "xbar"), _vec3(v, "v")
    if not np.any(v):
        raise InvalidInputError("velocity must be nonzero")
    for p, name in ((x, "x"), (xbar, "xbar")):
        if obstacle.xi(p) > 0:
            raise PathInvalidError(f"{name} lies inside the obstacle")
    d = x - xbar
    nd, nv = float(np.linalg.norm(d)), float(np.linalg.norm(v))
    if nd == 0 or abs(abs(float(d @ v)) - nd * nv) <= DEGENERATE_TOL * nd * nv:
        return ShiftFrame(x=x, xbar=xbar, v=v, xtilde=x.copy(), tau_minus=None, tau_plus=None, degenerate=True)
    vh = v / nv
    xt = xbar + float(d @ vh) * vh
    frame = ShiftFrame(x=x, xbar=xbar, v=v, xtilde=xt, tau_minus=None, tau_plus=None, degenerate=False)
    _check_path(obstacle, frame)
    model = _model(obstacle, frame)
    roots = model.roots()
    tm, tp, interval = _classify(model, roots)
    return ShiftFrame(x=x, xbar=xbar, v=v, xtilde=xt, tau_minus=tm, tau_plus=tp, degenerate=False,
                      hit_interval=interval, roots=tuple(roots))


def _check_path(obstacle: ConvexObstacle, frame: ShiftFrame) -> None:
    if obstacle.is_quadric:
        y0 = (frame.xtilde - obstacle.center) / obstacle.axes
        e = frame.xdot / obstacle.axes
        tau = float(np.clip(-(y0 @ e) / (e @ e), 0.0, 1.0))
        y = y0 + tau * e
        bad = float(y @ y) < 1.0 - 1e-12
    else:
        pts = frame.path(np.linspace(0, 1, 1025))
        bad = bool(np.any(obstacle.xi(pts) > 1e-12))
    if bad:
        raise PathInvalidError("shift path x(tau) enters the obstacle")


def rotation_matrix(v, vbar, zeta) -> tuple[np.ndarray, float]:
    """R = [a_bar | a | c] M^-1 with M = [[1, cos, 0], [0, sin, 0], [0, 0, 1]]."""
    a = v + zeta
    b = vbar + zeta
    ah, bh = a / np.linalg.norm(a), b / np.linalg.norm(b)
    cos = float(np.clip(ah @ bh, -1.0, 1.0))
    theta = math.acos(cos)
    cr = np.cross(b, a)
    ncr = float(np.linalg.norm(cr))
    if ncr == 0 or math.sin(theta) == 0:
        raise DegenerateDirectionError("v + zeta and vbar + zeta are parallel")
    cols = np.column_stack([bh, ah, cr / ncr])
    M = np.array([[1.0, cos, 0.0], [0.0, math.sin(theta), 0.0], [0.0, 0.0, 1.0]])
    return cols @ np.linalg.inv(M), theta


def build_velocity_frame(x, v, vbar, zeta, obstacle: ConvexObstacle) -> VelocityShiftFrame:
    x, v, vbar, zeta = _vec3(x), _vec3(v, "v"), _vec3(vbar, "vbar"), _vec3(zeta, "zeta")
    a, b = v + zeta, vbar + zeta
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        raise InvalidInputError("v + zeta and vbar + zeta must be nonzero")
    if obstacle.xi(x) > 0:
        raise PathInvalidError("x lies inside the obstacle")
    if abs(abs(float(a @ b)) - na * nb) <= DEGENERATE_TOL * na * nb:
        return VelocityShiftFrame(x=x, v=v, vbar=vbar, zeta=zeta, vtilde=v.copy(), theta=0.0,
                                  rotation=np.eye(3), tau_minus=None, tau_plus=None, degenerate=True)
    vt = na * b / nb - zeta
    R, theta = rotation_matrix(v, vbar, zeta)
    frame = VelocityShiftFrame(x=x, v=v, vbar=vbar, zeta=zeta, vtilde=vt, theta=theta, rotation=R,
                               tau_minus=None, tau_plus=None, degenerate=False)
    model = _model(obstacle, frame)
    roots = model.roots()
    tm, tp, interval = _classify(model, roots)
    return VelocityShiftFrame(x=x, v=v, vbar=vbar, zeta=zeta, vtilde=vt, theta=theta, rotation=R,
                              tau_minus=tm, tau_plus=tp, degenerate=False, hit_interval=interval,
                              roots=tuple(roots))


# --------------------------------------------------------------------------
# pointwise singularities (direct evaluation through backward_exit)


def specular_singularity_sp(frame: ShiftFrame, tau: float, obstacle: ConvexObstacle) -> float:
    xd = frame.xdot
    nxd = float(np.linalg.norm(xd))
    if nxd == 0:
        raise DegenerateDirectionError("zero-length shift path")
    b = billiard.backward_exit(obstacle, frame.path(tau), frame.v, tangent_as_hit=True)
    if not b.hit:
        raise NoHitError(f"no backward hit at tau={tau}")
    g = obstacle.grad(b.x_b)
    num = -float(g @ frame.v)
    if num < -1e-12 * b.grad_norm * float(np.linalg.norm(frame.v)):
        raise DegenerateDirectionError("grazing measure has the wrong sign")
    den = abs(float(xd @ g)) / nxd
    if den < 1e-14:
        raise DegenerateDirectionError("path direction tangent to the boundary normal plane")
    return max(num, 0.0) / den


def specular_singularity_vel(frame: VelocityShiftFrame, tau: float, obstacle: ConvexObstacle) -> float:
    if frame.degenerate:
        raise DegenerateDirectionError("degenerate velocity frame")
    vt = frame.path(tau)
    vd = frame.path_dot(tau)
    b = billiard.backward_exit(obstacle, frame.x, vt, tangent_as_hit=True)
    if not b.hit:
        raise NoHitError(f"no backward hit at tau={tau}")
    g = obstacle.grad(b.x_b)
    num = -float(g @ vt)
    if num < -1e-12 * b.grad_norm * float(np.linalg.norm(vt)):
        raise DegenerateDirectionError("grazing measure has the wrong sign")
    den = b.t_b * abs(float(vd @ g)) / float(np.linalg.norm(vd))
    if den < 1e-14:
        raise DegenerateDirectionError("vanishing denominator")
    return max(num, 0.0) / den


# --------------------------------------------------------------------------
# averages


def _min_exit_time(model, a: float, b: float) -> float:
    """Minimum of t_b over [a, b]: scan, then golden-section refinement."""
    grid = np.linspace(a, b, SCAN_NODES + 1)
    tb = model.exit_times(grid, tangent_as_hit=True)
    i = int(np.argmin(tb))
    best = float(tb[i])
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, SCAN_NODES)]
    gr = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = hi - gr * (hi - lo), lo + gr * (hi - lo)
    fc, fd = float(model.exit_times(np.array([c]))[0]), float(model.exit_times(np.array([d]))[0])
    for _ in range(80):
        if hi - lo < 1e-14:
            break
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - gr * (hi - lo)
            fc = float(model.exit_times(np.array([c]))[0])
        else:
            lo, c, fc = c, d, fd
            d = lo + gr * (hi - lo)
            fd = float(model.exit_times(np.array([d]))[0])
    return min(best, fc, fd)


def _bracketing_roots(roots, a: float, b: float):
    lo = [r for r in roots if r <= a + 1e-15]
    hi = [r for r in roots if r >= b - 1e-15]
    return (max(lo) if lo else None), (min(hi) if hi else None)


def _piece_integrals(model, roots, intervals, nodes: int):
    """Integrals of 1/S over hit intervals with u^2 substitution at both ends.

    Each interval [a, b] is split at its midpoint; the left half uses
    tau = r_lo + u^2 and the right half tau = r_hi - u^2, where r_lo <= a and
    r_hi >= b are the bracketing roots of the exit discriminant.
    """
    per = max(1, nodes // 16)
    fam_segments = {"L": ([], [], []), "R": ([], [], []), "plain": ([], [], [])}
    brackets = []
    for k, (a, b) in enumerate(intervals):
        rl, rh = _bracketing_roots(roots, a, b)
        brackets.append((np.nan if rl is None else rl, np.nan if rh is None else rh))
        m = 0.5 * (a + b)
        for side, (p, q) in (("L", (a, m)), ("R", (m, b))):
            root = rl if side == "L" else rh
            if root is None:
                fam, u0, u1 = "plain", p, q
            elif side == "L":
                fam, u0, u1 = "L", math.sqrt(max(p - root, 0.0)), math.sqrt(max(q - root, 0.0))
            else:
                fam, u0, u1 = "R", math.sqrt(max(root - q, 0.0)), math.sqrt(max(root - p, 0.0))
            edges = np.linspace(u0, u1, per + 1)
            lo_l, hi_l, own_l = fam_segments[fam]
            lo_l.extend(edges[:-1])
            hi_l.extend(edges[1:])
            own_l.extend([k] * per)
    rl_all = np.array([br[0] for br in brackets])
    rh_all = np.array([br[1] for br in brackets])

    def integrand(fam):
        def g(own, u):
            rl_, rh_ = rl_all[own], rh_all[own]
            if fam == "L":
                tau = rl_ + u * u
                return model.weighted(tau, u * u, np.where(np.isnan(rh_), 1.0, rh_ - tau))
            if fam == "R":
                tau = rh_ - u * u
                return model.weighted(tau, u * u, np.where(np.isnan(rl_), 1.0, tau - rl_))
            e1 = np.where(np.isnan(rl_), 1.0, u - rl_)
            e2 = np.where(np.isnan(rh_), 1.0, rh_ - u)
            return model.inverse_S(u, e1, e2)
        return g

    values = np.zeros(len(intervals))
    errs = np.zeros(len(intervals))
    n_nodes = n_sub = 0
    for fam, (lo_l, hi_l, own_l) in fam_segments.items():
        if not own_l:
            continue
        reps = integrate_batch(integrand(fam), lo_l, hi_l, own_l, n_integrals=len(intervals),
                               abs_tol=ABS_TOL / 2, rel_tol=REL_TOL / 2)
        for k, r in enumerate(reps):
            values[k] += r.value
            errs[k] += r.abs_error_est
            n_nodes += r.nodes
            n_sub += r.subdivisions
    reports = [QuadratureReport(float(values[k]), float(errs[k]), n_nodes, n_sub) for k in range(len(intervals))]
    return values, reports


def _average(frame, t: float, obstacle: ConvexObstacle, nodes: int) -> SingularAverage:
    if nodes < 16:
        raise InvalidInputError("nodes must be >= 16")
    empty = SingularAverage(0.0, (0.0, 0.0, 0.0), (False, False, False), QuadratureReport(0.0, 0.0, 0, 0))
    if frame.degenerate or frame.hit_interval is None:
        return empty
    model = _model(obstacle, frame)
    roots = list(frame.roots) if frame.roots else model.roots()
    tm = frame.tau_minus
    candidates = [(0.0, 1.0)]
    candidates.append((tm, 1.0) if tm is not None and tm < 1.0 else None)
    candidates.append((0.0, tm) if tm is not None and tm > 0.0 else None)
    lo, hi = frame.hit_interval
    active, mins, todo = [], [], []
    for iv in candidates:
        if iv is None or iv[1] - iv[0] < 1e-14:
            active.append(False)
            mins.append(None)
            continue
        covered = lo <= iv[0] + 1e-15 and hi >= iv[1] - 1e-15
        mtb = _min_exit_time(model, iv[0], iv[1]) if covered else None
        ok = covered and mtb is not None and mtb <= t
        active.append(ok)
        mins.append(mtb)
        if ok:
            todo.append(iv)
    if not todo:
        return SingularAverage(0.0, (0.0, 0.0, 0.0), tuple(active), QuadratureReport(0.0, 0.0, 0, 0), tuple(mins))
    values, reps = _piece_integrals(model, roots, todo, nodes)
    pieces, j = [], 0
    for k in range(3):
        if active[k]:
            a, b = todo[j]
            pieces.append(float(values[j]) / (b - a))
            j += 1
        else:
            pieces.append(0.0)
    err = sum(r.abs_error_est / (b - a) for r, (a, b) in zip(reps, todo))
    q = QuadratureReport(float(sum(pieces)), float(err), reps[0].nodes, reps[0].subdivisions)
    return SingularAverage(float(sum(pieces)), tuple(pieces), tuple(active), q, tuple(mins))


def averaged_singularity_sp(frame: ShiftFrame, t: float, obstacle: ConvexObstacle, nodes: int = 32) -> SingularAverage:
    """Sum of the three tau-averages of 1/S_sp with their indicator conditions."""
    return _average(frame, t, obstacle, nodes)


def averaged_singularity_vel(frame: VelocityShiftFrame, t: float, obstacle: ConvexObstacle,
                             nodes: int = 32) -> SingularAverage:
    return _average(frame, t, obstacle, nodes)


def singular_integral(frame, obstacle: ConvexObstacle, a: float, b: float, nodes: int = 32) -> float:
    """Plain integral of 1/S over a hit sub-interval [a, b] of [0, 1]."""
    model = _model(obstacle, frame)
    roots = list(frame.roots) if frame.roots else model.roots()
    values, _ = _piece_integrals(model, roots, [(a, b)], nodes)
    return float(values[0])


def _grazing_abs(obstacle, x, v) -> float | None:
    b = billiard.backward_exit(obstacle, x, v, tangent_as_hit=True)
    return abs(b.grazing) if b.hit else None


def averaging_bound_check(frame, t: float, obstacle: ConvexObstacle, c_dom: float = C_DOM,
                          n_star: int = 5, nodes: int = 32) -> AveragingReport:
    """Left/right-hand ratios of the averaged-singularity bounds for one frame.

    Lemma-type ratios compare the integral of 1/S from tau_- to tau_* with
    (tau_* - tau_-) over the grazing measure at tau_*; corollary-type ratios
    compare the full average with the grazing-measure majorant built from the
    path endpoints, using the materialized indicator d <= c_dom <v>.
    """
    vel = isinstance(frame, VelocityShiftFrame)
    avg = _average(frame, t, obstacle, nodes)
    x = frame.x
    d = distance_to_boundary(obstacle, x)[0]
    rep = AveragingReport(average=avg.value, distance=d, c_dom=c_dom)
    if frame.degenerate or frame.hit_interval is None:
        return rep
    model = _model(obstacle, frame)
    roots = list(frame.roots) if frame.roots else model.roots()
    ratios, stars = [], []
    tm = frame.tau_minus
    lo, hi = frame.hit_interval
    if tm is not None:
        # the hit side of tau_- is [tau_-, hi] or [lo, tau_-]
        other = hi if abs(tm - lo) < 1e-15 else lo
        if vel:
            tb_grid = model.exit_times(np.linspace(lo, hi, SCAN_NODES + 1))
            min_vt = frame.speed * float(np.min(tb_grid))
        for frac in np.linspace(1.0, 0.0, n_star, endpoint=False)[::-1]:
            ts = tm + frac * (other - tm)
            a, b = min(tm, ts), max(tm, ts)
            if b - a < 1e-12:
                continue
            g = _grazing_abs(obstacle, x, frame.path(ts)) if vel else _grazing_abs(obstacle, frame.path(ts), frame.v)
            if not g:
                # exactly tangent at tau_*: the majorant is infinite
                continue
            lhs = singular_integral(frame, obstacle, a, b, nodes)
            rhs = (b - a) / g / frame.speed * (1.0 + min_vt) if vel else (b - a) / g
            ratios.append(lhs / rhs)
            stars.append(float(ts))
    rep.lemma_ratios.extend(ratios)
    rep.lemma_tau_star.extend(stars)

    # endpoint grazing majorant
    if vel:
        ends = [frame.v + frame.zeta, frame.vtilde + frame.zeta]
        s = frame.speed
        terms = []
        for u in ends:
            b = billiard.backward_exit(obstacle, x, u)
            if b.hit:
                terms.append(1.0 / (abs(b.grazing) / s))
        ind_near = d <= c_dom
        ind_far = c_dom < d <= c_dom * bracket(s)
        pref = (1.0 / s**2 if ind_near else 0.0) + (1.0 / s if ind_far else 0.0)
        rhs = pref * sum(terms)
        indicator = ind_near or ind_far
    else:
        speed = float(np.linalg.norm(frame.v))
        terms = []
        for p in (frame.x, frame.xtilde):
            b = billiard.backward_exit(obstacle, p, frame.v)
            if b.hit:
                terms.append(1.0 / (abs(b.grazing) / speed))
        indicator = d <= c_dom * bracket(speed)
        rhs = (sum(terms) / speed) if indicator else 0.0
    ratio = 0.0 if avg.value == 0 else (avg.value / rhs if rhs > 0 else math.inf)
    return AveragingReport(lemma_ratios=ratios, lemma_tau_star=stars, average=avg.value, corollary_rhs=rhs,
                           corollary_ratio=ratio, distance=d, c_dom=c_dom, rhs_indicator=bool(indicator))
