"""Hard-sphere collision kernels, the Duhamel evaluator with specular reflection and desk-scale Picard sweeps.

Grid computations store g = f / sqrt(mu) rather than f.  The equilibrium is
then g = 1, which trilinear interpolation reproduces exactly, and the gain and
loss kernels share one (u, omega) rule so that their equilibrium values agree
node by node.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import sparse
from scipy.special import erf

from . import billiard
from .errors import DivergenceError, ExtrapolationError, InvalidFieldError, InvalidInputError
from .geometry import ConvexObstacle, _vec3, bracket, distance_batch, sample_boundary
from .holder import WeightParams
from .quadrature import gauss_legendre

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]
NU0_PREFACTOR = math.pi * (2.0 * math.pi) ** 1.5
NU_LIP = math.pi * (4.0 * math.pi) ** 1.5  # |grad_v nu(f)| <= pi int sqrt(mu) |f|


def sqrt_mu(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.exp(-0.25 * np.sum(v * v, axis=-1))


def nu_equilibrium(v) -> np.ndarray:
    """nu(sqrt(mu))(v) = pi (2 pi)^{3/2} E|v - Z| for a standard normal Z."""
    r = np.linalg.norm(np.asarray(v, dtype=float), axis=-1)
    rs = np.where(r > 1e-6, r, 1.0)
    mean = np.sqrt(2.0 / np.pi) * np.exp(-0.5 * r * r) + np.where(r > 1e-6, (rs + 1.0 / rs) * erf(rs / np.sqrt(2.0)),
                                                                   np.sqrt(2.0 / np.pi) * (1.0 + r * r / 3.0))
    return NU0_PREFACTOR * mean


def maxwellian_field(x, v) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(sqrt_mu(v), np.broadcast_shapes(x.shape[:-1], np.shape(v)[:-1])).copy()


def zero_field(x, v) -> np.ndarray:
    return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(v)[:-1]))


def _bump(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    m = r < 1.0
    out[m] = np.exp(1.0 - 1.0 / (1.0 - r[m] ** 2))
    return out


def perturbed_field(amplitude: float = 0.01, x_center=(1.5, 0.0, 0.0), x_radius: float = 0.45,
                    v_center=(0.0, 0.0, 0.0), v_radius: float = 2.5) -> Field:
    """sqrt(mu) (1 + amplitude * bump_x * bump_v) with smooth compact bumps."""
    xc, vc = np.asarray(x_center, dtype=float), np.asarray(v_center, dtype=float)

    def f0(x, v):
        x, v = np.asarray(x, dtype=float), np.asarray(v, dtype=float)
        bx = _bump(np.linalg.norm(x - xc, axis=-1) / x_radius)
        bv = _bump(np.linalg.norm(v - vc, axis=-1) / v_radius)
        return sqrt_mu(v) * (1.0 + amplitude * bx * bv)

    return f0


def collision_map(u, v, omega) -> tuple[np.ndarray, np.ndarray]:
    """(u', v') = (u + ((v-u).w) w, v - ((v-u).w) w)."""
    u, v, omega = (np.asarray(a, dtype=float) for a in (u, v, omega))
    d = np.sum((v - u) * omega, axis=-1, keepdims=True)
    return u + d * omega, v - d * omega


# --------------------------------------------------------------------------
# quadrature rules


@dataclass(frozen=True)
class KernelConfig:
    c: float = 0.125
    radial_nodes: int = 8
    radial_panel: float = 1.5
    polar_nodes: int = 16
    alpha_nodes: int = 2
    beta_nodes: int = 8
    grid_hermite: int = 4
    grid_alpha: int = 1
    grid_beta: int = 4
    sample_radial: int = 8
    sample_polar: int = 4
    duhamel_panels: int = 4
    mc_samples: int = 100_000
    threads: int = 1

    def __post_init__(self):
        if not (0 < self.c <= 0.5):
            raise InvalidInputError("kernel constant c must lie in (0, 1/2]")
        for name in ("radial_nodes", "polar_nodes", "alpha_nodes", "beta_nodes", "grid_hermite", "grid_alpha",
                     "grid_beta", "sample_radial", "sample_polar", "duhamel_panels", "threads"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")


def _perp_frame(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit a_hat and two orthonormal complements, vectorized over leading axes."""
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    ah = np.where(n > 0, a / np.where(n > 0, n, 1.0), np.array([0.0, 0.0, 1.0]))
    helper = np.where(np.abs(ah[..., :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    e1 = np.cross(ah, helper)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    return ah, e1, np.cross(ah, e1)


def hemisphere_rule(a: np.ndarray, n_alpha: int, n_beta: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes omega on {omega . a >= 0} and weights of |a . omega| d omega.

    Returns omega with shape a.shape[:-1] + (K, 3) and weights with shape
    a.shape[:-1] + (K,); the weights already include |a . omega|.
    """
    ah, e1, e2 = _perp_frame(a)
    cz, wc = gauss_legendre(n_alpha, 0.0, 1.0)
    beta = 2.0 * np.pi * (np.arange(n_beta) + 0.5) / n_beta
    cz_, b_ = np.meshgrid(cz, beta, indexing="ij")
    cz_, b_ = cz_.ravel(), b_.ravel()
    wk = np.repeat(wc, n_beta) * (2.0 * np.pi / n_beta) * cz_
    sz = np.sqrt(1.0 - cz_ * cz_)
    om = (cz_[:, None] * ah[..., None, :] + (sz * np.cos(b_))[:, None] * e1[..., None, :]
          + (sz * np.sin(b_))[:, None] * e2[..., None, :])
    return om, np.linalg.norm(a, axis=-1)[..., None] * wk


def _radial_panels(a: float, b: float, n: int, panel: float) -> tuple[np.ndarray, np.ndarray]:
    k = max(1, int(math.ceil((b - a) / panel)))
    edges = np.linspace(a, b, k + 1)
    xs, ws = zip(*(gauss_legendre(n, lo, hi) for lo, hi in zip(edges[:-1], edges[1:])))
    return np.concatenate(xs), np.concatenate(ws)


def polar_rule(center, axis, r_lo: float, r_hi: float, n_r: int, panel: float, n_theta: int,
               n_phi: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Volume rule on the shell r_lo <= |u - center| <= r_hi; returns (u, r, weights incl. r^2 sin)."""
    center = np.asarray(center, dtype=float)
    e3, e1, e2 = _perp_frame(np.asarray(axis, dtype=float))
    r, wr = _radial_panels(r_lo, r_hi, n_r, panel)
    th, wth = gauss_legendre(n_theta, 0.0, np.pi)
    n_phi = n_phi or 2 * n_theta
    ph = 2.0 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    sig = (np.cos(th)[:, None, None] * e3 + (np.sin(th)[:, None] * np.cos(ph)[None, :])[..., None] * e1
           + (np.sin(th)[:, None] * np.sin(ph)[None, :])[..., None] * e2).reshape(-1, 3)
    wsig = (np.repeat(wth * np.sin(th), n_phi) * (2.0 * np.pi / n_phi))
    u = center + r[:, None, None] * sig[None, :, :]
    w = (wr * r * r)[:, None] * wsig[None, :]
    return u.reshape(-1, 3), np.repeat(r, sig.shape[0]), w.ravel()


def velocity_rule(v, config: KernelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Rule for int h(u) e^{-|u|^2/2} |v - u| du centred at v (the kink), axis toward the origin."""
    v = _vec3(v, "v")
    s = float(np.linalg.norm(v))
    axis = -v if s > 0 else np.array([0.0, 0.0, 1.0])
    n_theta = max(config.polar_nodes, int(math.ceil(4.0 * s)) + 8)
    u, _, w = polar_rule(v, axis, max(0.0, s - 8.0), s + 8.0, config.radial_nodes, config.radial_panel, n_theta)
    return u, w


# --------------------------------------------------------------------------
# pointwise kernels


def _read(f, t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    if isinstance(f, PhaseHistory):
        vals = f.f_at(np.full(v.shape[:-1], float(t)), np.broadcast_to(x, v.shape), v)
    else:
        vals = np.asarray(f(np.broadcast_to(x, v.shape), v), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise InvalidFieldError("field returned non-finite values")
    if np.max(np.abs(vals), initial=0.0) > 1e150:
        raise InvalidFieldError("field is unbounded on the quadrature nodes")
    return vals


def collision_frequency_nu(f, t: float, x, v, config: KernelConfig | None = None) -> float:
    """nu(f)(t, x, v) = int int |(v - u) . w| sqrt(mu(u)) f(t, x, u) dw du over the half sphere."""
    cfg = config or KernelConfig()
    x, v = _vec3(x), _vec3(v, "v")
    u, w = velocity_rule(v, cfg)
    vals = _read(f, t, x, u)
    # the half-sphere integral of |a . w| is pi |a|
    return float(np.pi * np.sum(w * np.linalg.norm(v - u, axis=-1) * sqrt_mu(u) * vals))


def gamma_gain(f, t: float, x, v, config: KernelConfig | None = None, return_nu: bool = False):
    """Gain term Gamma_gain(f, f)(t, x, v); optionally also nu(f) from the same (u, omega) rule."""
    cfg = config or KernelConfig()
    x, v = _vec3(x), _vec3(v, "v")
    u, w = velocity_rule(v, cfg)
    om, wk = hemisphere_rule(v - u, cfg.alpha_nodes, cfg.beta_nodes)
    up, vp = collision_map(u[:, None, :], v, om)
    fu, fv = _read(f, t, x, up), _read(f, t, x, vp)
    base = w * sqrt_mu(u)
    gain = float(np.sum(base[:, None] * wk * fu * fv))
    if not return_nu:
        return gain
    nu = float(np.sum(base[:, None] * wk * _read(f, t, x, u)[:, None]))
    return gain, nu


def nu_monte_carlo(f, t: float, x, v, n: int, rng: np.random.Generator, chunk: int = 1_000_000) -> tuple[float, float]:
    """Monte Carlo nu(f) with u ~ N(0, I); returns (estimate, standard error)."""
    x, v = _vec3(x), _vec3(v, "v")
    s1 = s2 = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        u = rng.normal(size=(m, 3))
        vals = np.linalg.norm(v - u, axis=1) * _read(f, t, x, u) / sqrt_mu(u)
        s1 += float(vals.sum())
        s2 += float((vals * vals).sum())
        done += m
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0)
    return NU0_PREFACTOR * mean, NU0_PREFACTOR * math.sqrt(var / n)


def ws_inequality(u, v, ws, c: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Both sides of the weight-shift inequalities: (lhs, e^{c|u-v|^2/2}, e^{|u|^2/8})."""
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    uu, vv = np.sum(u * u, axis=-1), np.sum(v * v, axis=-1)
    lhs = np.exp(-np.asarray(ws) * (vv - uu))
    return lhs, np.exp(0.5 * c * np.sum((u - v) ** 2, axis=-1)), np.exp(uu / 8.0)


# --------------------------------------------------------------------------
# phase grid


@dataclass
class PhaseGrid:
    """Tensor grid on a cube [lo, hi]^3 with `halo` extra layers holding the far-field closure.

    Node kinds: 0 evolved, 1 halo (fixed at f0), 2 masked (inside the
    obstacle; holds a ghost copy of the nearest unmasked node so that
    trilinear stencils straddling the boundary stay defined).
    """

    obstacle: ConvexObstacle
    lo: float = -2.0
    hi: float = 2.0
    n_x: int = 8
    n_v: int = 9
    v_max: float = 6.0
    theta: float = 0.125
    halo: int = 1
    x_axis: np.ndarray = field(init=False)
    v_axis: np.ndarray = field(init=False)
    kind: np.ndarray = field(init=False)
    ghost_src: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.n_x < 2 or self.n_v < 2 or not self.hi > self.lo or self.v_max <= 0:
            raise InvalidInputError("grid needs n_x, n_v >= 2, hi > lo and v_max > 0")
        if not (0 < self.theta < 0.25):
            raise InvalidInputError("weight exponent theta must lie in (0, 1/4)")
        self.h = (self.hi - self.lo) / (self.n_x - 1)
        self.x_axis = self.lo + self.h * np.arange(-self.halo, self.n_x + self.halo)
        self.v_axis = np.linspace(-self.v_max, self.v_max, self.n_v)
        self.hv = self.v_axis[1] - self.v_axis[0]
        self.nxe = self.x_axis.size
        gx = np.stack(np.meshgrid(self.x_axis, self.x_axis, self.x_axis, indexing="ij"), -1).reshape(-1, 3)
        gv = np.stack(np.meshgrid(self.v_axis, self.v_axis, self.v_axis, indexing="ij"), -1).reshape(-1, 3)
        self.x_points, self.v_points = gx, gv
        idx = np.stack(np.meshgrid(*[np.arange(self.nxe)] * 3, indexing="ij"), -1).reshape(-1, 3)
        in_box = np.all((idx >= self.halo) & (idx < self.halo + self.n_x), axis=1)
        inside = self.obstacle.xi(gx) > 0
        kind = np.where(in_box, 0, 1)
        kind[inside] = 2
        self.kind = kind
        free = np.flatnonzero(kind != 2)
        src = np.arange(gx.shape[0])
        for i in np.flatnonzero(kind == 2):
            src[i] = free[np.argmin(np.sum((gx[free] - gx[i]) ** 2, axis=1))]
        self.ghost_src = src

    @property
    def NX(self) -> int:
        return self.x_points.shape[0]

    @property
    def NV(self) -> int:
        return self.v_points.shape[0]

    def weight(self, theta: float | None = None) -> np.ndarray:
        th = self.theta if theta is None else theta
        return np.exp(th * np.sum(self.v_points**2, axis=1))

    def truncation_factor(self) -> float:
        """Weighted tail factor e^{-theta V_max^2} of the velocity cutoff."""
        return math.exp(-self.theta * self.v_max**2)

    def sample(self, f: Field) -> np.ndarray:
        """g = f / sqrt(mu) on every node, shape (NX, NV)."""
        vals = np.asarray(f(self.x_points[:, None, :], self.v_points[None, :, :]), dtype=float)
        if vals.shape != (self.NX, self.NV) or not np.all(np.isfinite(vals)):
            raise InvalidFieldError("field callback must return finite values broadcast over (x, v)")
        return vals / sqrt_mu(self.v_points)[None, :]

    def fill_ghosts(self, g: np.ndarray) -> np.ndarray:
        m = self.kind == 2
        g[..., m, :] = g[..., self.ghost_src[m], :]
        return g

    # interpolation helpers ---------------------------------------------

    def x_cell(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        fx = (X - self.x_axis[0]) / self.h
        if np.any(fx < -1e-9) or np.any(fx > self.nxe - 1 + 1e-9):
            raise ExtrapolationError("spatial read beyond the far-field halo")
        i0 = np.clip(np.floor(fx).astype(np.int64), 0, self.nxe - 2)
        return i0, np.clip(fx - i0, 0.0, 1.0)

    def v_cell(self, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # velocities beyond the cutoff read the clamped (constant-extended) g
        fv = np.clip((V + self.v_max) / self.hv, 0.0, self.n_v - 1)
        j0 = np.clip(np.floor(fv).astype(np.int64), 0, self.n_v - 2)
        return j0, fv - j0

    def v_interp_matrix(self, V: np.ndarray) -> sparse.csr_matrix:
        """Rows of trilinear v-interpolation weights (clamped beyond V_max)."""
        V = V.reshape(-1, 3)
        j0, wv = self.v_cell(V)
        rows, cols, vals = [], [], []
        n = self.n_v
        r = np.arange(V.shape[0])
        for c in range(8):
            b = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1])
            w = np.prod(np.where(b, wv, 1.0 - wv), axis=1)
            jj = j0 + b
            rows.append(r)
            cols.append((jj[:, 0] * n + jj[:, 1]) * n + jj[:, 2])
            vals.append(w)
        return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(V.shape[0], self.NV))


def interp_fields(grid: PhaseGrid, fields: np.ndarray, dt: float, s: np.ndarray, X: np.ndarray,
                  V: np.ndarray | None = None, vidx: np.ndarray | None = None) -> np.ndarray:
    """Linear-in-time, trilinear-in-x, trilinear-in-v reads of fields with shape (nT, NX, NV, m).

    When ``vidx`` is given the velocity is the grid node with that index and
    only time and space are interpolated.
    """
    nT, NX, NV, m = fields.shape
    flat = fields.reshape(-1, m)
    P = s.shape[0]
    if nT > 1:
        ft = np.clip(s / dt, 0.0, nT - 1)
        n0 = np.clip(np.floor(ft).astype(np.int64), 0, nT - 2)
        wt = ft - n0
    else:
        n0, wt = np.zeros(P, dtype=np.int64), np.zeros(P)
    i0, wx = grid.x_cell(X)
    nxe, nv = grid.nxe, grid.n_v
    xbase = (i0[:, 0] * nxe + i0[:, 1]) * nxe + i0[:, 2]
    wxs = [(1.0 - wx[:, d], wx[:, d]) for d in range(3)]
    if vidx is None:
        j0, wv = grid.v_cell(V)
        vbase = (j0[:, 0] * nv + j0[:, 1]) * nv + j0[:, 2]
        wvs = [(1.0 - wv[:, d], wv[:, d]) for d in range(3)]
        vcorners = [((b0 * nv + b1) * nv + b2, wvs[0][b0] * wvs[1][b1] * wvs[2][b2])
                    for b0 in (0, 1) for b1 in (0, 1) for b2 in (0, 1)]
    else:
        vbase = vidx
        vcorners = [(0, None)]
    out = np.zeros((P, m))
    for tb in ((0, 1) if nT > 1 else (0,)):
        w_t = wt if tb else 1.0 - wt
        base_t = ((n0 + tb) * NX + xbase) * NV + vbase
        for b0 in (0, 1):
            for b1 in (0, 1):
                w01 = w_t * wxs[0][b0] * wxs[1][b1]
                for b2 in (0, 1):
                    w_x = w01 * wxs[2][b2]
                    xoff = ((b0 * nxe + b1) * nxe + b2) * NV
                    for voff, w_v in vcorners:
                        w = w_x if w_v is None else w_x * w_v
                        out += w[:, None] * flat[base_t + (xoff + voff)]
    return out


# --------------------------------------------------------------------------
# grid collision kernels


class GridKernelRule:
    """Shared (u, omega) rule for nu and Gamma_gain / sqrt(mu) on the velocity grid.

    In g-variables nu(v) = sum k(v,u,w) g(u) and Gamma_hat(v) = sum k(v,u,w) g(u') g(v')
    with identical weights k, so g = 1 gives Gamma_hat = nu at every node.
    """

    def __init__(self, grid: PhaseGrid, config: KernelConfig, block: int = 81):
        self.grid = grid
        z, wz = hermegauss(config.grid_hermite)
        U = np.stack(np.meshgrid(z, z, z, indexing="ij"), -1).reshape(-1, 3)
        GW = np.prod(np.stack(np.meshgrid(wz, wz, wz, indexing="ij"), -1).reshape(-1, 3), axis=1)
        self.U, self.GW = U, GW
        self.P_u = grid.v_interp_matrix(U)
        self.blocks = []
        V = grid.v_points
        for j0 in range(0, grid.NV, block):
            js = np.arange(j0, min(j0 + block, grid.NV))
            a = V[js, None, :] - U[None, :, :]
            om, wk = hemisphere_rule(a, config.grid_alpha, config.grid_beta)
            k = GW[None, :, None] * wk  # (B, Q, K)
            up, vp = collision_map(U[None, :, None, :], V[js, None, None, :], om)
            self.blocks.append((js, k.reshape(len(js), -1), k.sum(axis=2),
                                grid.v_interp_matrix(up).tocsr(), grid.v_interp_matrix(vp).tocsr()))

    def evaluate(self, G: np.ndarray, threads: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """(nu, Gamma_hat) for rows G of g-values with shape (R, NV)."""
        R = G.shape[0]
        nu = np.empty((R, self.grid.NV))
        gam = np.empty((R, self.grid.NV))
        gu = (self.P_u @ G.T).T  # (R, Q)

        def run(blk):
            js, kf, kq, Pu, Pv = blk
            nu[:, js] = gu @ kq.T
            A = (Pu @ G.T).T.reshape(R, len(js), -1)
            B = (Pv @ G.T).T.reshape(R, len(js), -1)
            gam[:, js] = np.einsum("rbm,bm->rb", A * B, kf)

        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                list(ex.map(run, self.blocks))
        else:
            for blk in self.blocks:
                run(blk)
        return nu, gam


def equilibrium_rule_error(rule: GridKernelRule) -> float:
    """Max relative error of the grid rule for nu(sqrt(mu)) against the closed form on the velocity grid."""
    ones = np.ones((1, rule.grid.NV))
    nu, _ = rule.evaluate(ones)
    ex = nu_equilibrium(rule.grid.v_points)
    return float(np.max(np.abs(nu[0] - ex) / ex))


# --------------------------------------------------------------------------
# history and Duhamel evaluation


@dataclass
class PhaseHistory:
    grid: PhaseGrid
    times: np.ndarray
    g: np.ndarray  # (nT, NX, NV)
    f0: Field
    kernels: np.ndarray | None = None  # (nT, NX, NV, 2): nu, Gamma_hat

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 1.0

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    def f_level(self, n: int) -> np.ndarray:
        return self.g[n] * sqrt_mu(self.grid.v_points)[None, :]

    def f_at(self, s: np.ndarray, X: np.ndarray, V: np.ndarray) -> np.ndarray:
        shape = np.shape(V)[:-1]
        s = np.broadcast_to(np.asarray(s, dtype=float), shape).ravel()
        X = np.broadcast_to(X, shape + (3,)).reshape(-1, 3)
        V = np.asarray(V, dtype=float).reshape(-1, 3)
        g = interp_fields(self.grid, self.g[..., None], self.dt, s, X, V)[:, 0]
        return (g * sqrt_mu(V)).reshape(shape)

    def sup_weighted(self, n: int, theta: float | None = None) -> float:
        ev = self.grid.kind != 2
        return float(np.max(np.abs(self.f_level(n)[ev] * self.grid.weight(theta)[None, :])))

    @classmethod
    def from_values(cls, grid: PhaseGrid, times, g: np.ndarray, f0: Field) -> "PhaseHistory":
        g = np.asarray(g, dtype=float)
        times = np.asarray(times, dtype=float)
        if g.shape != (times.size, grid.NX, grid.NV):
            raise InvalidInputError("history values must have shape (n_times, NX, NV)")
        return cls(grid=grid, times=times, g=grid.fill_ghosts(g.copy()), f0=f0)


def _exit_batch(obstacle: ConvexObstacle, X: np.ndarray, V: np.ndarray) -> np.ndarray:
    moving = np.any(V != 0, axis=1)
    tb = np.full(X.shape[0], np.inf)
    if obstacle.is_quadric:
        tb[moving] = billiard.quadric_exit_batch(obstacle, X[moving], V[moving])[0]
        return tb
    for i in np.flatnonzero(moving):
        b = billiard.backward_exit(obstacle, X[i], V[i])
        if b.hit:
            tb[i] = b.t_b
    return tb


def _duhamel_batch(hist: PhaseHistory, fields: np.ndarray, f0: Field, obstacle: ConvexObstacle, t: float,
                   X: np.ndarray, V: np.ndarray, vidx: np.ndarray | None, m: int) -> np.ndarray:
    """g(t, x, v) from the mild formulation along the one-bounce characteristic.

    The s-integral uses m graded sub-intervals on each side of the bounce
    time t1 (or of t/2 without a bounce).  On a sub-interval nu and the gain
    are replaced by their trapezoid means; the gain is integrated exactly
    against the resulting exponential, so a gain equal to nu telescopes to
    1 - exp(-int nu).
    """
    P = X.shape[0]
    grid = hist.grid
    tb = _exit_batch(obstacle, X, V)
    bounce = tb < t
    t1 = np.where(bounce, t - np.where(bounce, tb, 0.0), 0.5 * t)
    xb = X - np.where(bounce, tb, 0.0)[:, None] * V
    nrm = obstacle.normal(xb)
    RV = np.where(bounce[:, None], V - 2.0 * np.sum(V * nrm, axis=1, keepdims=True) * nrm, V)
    k = np.arange(m + 1) / m
    tauA = 1.0 - (1.0 - k) ** 2
    tauB = k**2
    sA = t1[:, None] * tauA[None, :]
    sB = t1[:, None] + (t - t1)[:, None] * tauB[None, :]
    # piece A: s in [0, t1]; after the bounce in backward time the state is (x_b - (t1 - s) Rv, Rv)
    XA = np.where(bounce[:, None, None], xb[:, None, :] - (t1[:, None] - sA)[..., None] * RV[:, None, :],
                  X[:, None, :] - (t - sA)[..., None] * V[:, None, :])
    XB = X[:, None, :] - (t - sB)[..., None] * V[:, None, :]
    rep = lambda a: np.repeat(a, m + 1, axis=0)  # noqa: E731
    KB = interp_fields(grid, fields, hist.dt, sB.ravel(), XB.reshape(-1, 3),
                       None if vidx is not None else rep(V), None if vidx is None else rep(vidx))
    KA = np.empty_like(KB)
    b_rows = np.repeat(bounce, m + 1)
    if np.any(b_rows):
        KA[b_rows] = interp_fields(grid, fields, hist.dt, sA.ravel()[b_rows], XA.reshape(-1, 3)[b_rows],
                                   rep(RV)[b_rows])
    nb = ~b_rows
    if np.any(nb):
        KA[nb] = interp_fields(grid, fields, hist.dt, sA.ravel()[nb], XA.reshape(-1, 3)[nb],
                               None if vidx is not None else rep(V)[nb], None if vidx is None else rep(vidx)[nb])
    s_all = np.concatenate([sA, sB], axis=1)  # (P, 2m+2), A_m and B_0 coincide at t1
    K = np.concatenate([KA.reshape(P, m + 1, 2), KB.reshape(P, m + 1, 2)], axis=1)
    h = np.diff(s_all, axis=1)
    nub = 0.5 * (K[:, 1:, 0] + K[:, :-1, 0])
    gab = 0.5 * (K[:, 1:, 1] + K[:, :-1, 1])
    dL = h * nub
    L_after = np.cumsum(dL[:, ::-1], axis=1)[:, ::-1] - dL  # int_{s_{k+1}}^t nu
    E_next = np.exp(-L_after)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(dL > 1e-14, -np.expm1(-dL) / np.where(nub != 0, nub, 1.0), h)
    gain = np.sum(gab * E_next * phi, axis=1)
    E0 = np.exp(-(L_after[:, 0] + dL[:, 0]))
    X0 = np.where(bounce[:, None], xb - t1[:, None] * RV, X - t * V)
    g_init = np.asarray(f0(X0, RV), dtype=float) / sqrt_mu(RV)
    return E0 * g_init + gain


def duhamel_eval(history: PhaseHistory, f0: Field, obstacle: ConvexObstacle, t: float, x, v,
                 config: KernelConfig | None = None) -> float:
    """f(t, x, v) from the mild formulation using the history's kernel fields."""
    cfg = config or KernelConfig()
    if history.kernels is None:
        raise InvalidInputError("history carries no kernel fields; run picard_iterate first")
    if not (0 < t <= history.t_final + 1e-12):
        raise InvalidInputError("t must lie in (0, t_final]")
    x, v = _vec3(x), _vec3(v, "v")
    g = _duhamel_batch(history, history.kernels, f0, obstacle, float(t), x[None, :], v[None, :], None,
                       cfg.duhamel_panels)
    return float(g[0] * sqrt_mu(v))


def duhamel_eval_batch(history: PhaseHistory, f0: Field, obstacle: ConvexObstacle, t: float, X, V,
                       config: KernelConfig | None = None) -> np.ndarray:
    cfg = config or KernelConfig()
    X, V = np.asarray(X, dtype=float).reshape(-1, 3), np.asarray(V, dtype=float).reshape(-1, 3)
    return _duhamel_batch(history, history.kernels, f0, obstacle, float(t), X, V, None,
                          cfg.duhamel_panels) * sqrt_mu(V)


@dataclass
class PicardResult:
    history: PhaseHistory
    sup_trace: np.ndarray  # ||w f(t_n)||_inf of the final sweep
    initial_weighted: float  # ||w0 f0||_inf
    constant: float  # max_n sup_trace / initial_weighted
    sweep_diffs: list[float]
    rule_error: float
    truncation: float


def picard_iterate(f0: Field, obstacle: ConvexObstacle, t_final: float, n_steps: int, n_sweeps: int,
                   config: KernelConfig | None = None, n_x: int = 8, n_v: int = 9, box=(-2.0, 2.0),
                   v_max: float = 6.0, theta: float = 0.125, theta0: float = 0.1875) -> PicardResult:
    """Fixed-point sweeps of the mild formulation on a phase grid over [0, t_final]."""
    cfg = config or KernelConfig()
    if not (0 < t_final <= 1) or n_steps < 1 or n_sweeps < 1:
        raise InvalidInputError("need 0 < t_final <= 1, n_steps >= 1, n_sweeps >= 1")
    if not (0 < theta < theta0 < 0.25):
        raise InvalidInputError("need 0 < theta < theta0 < 1/4")
    h = (box[1] - box[0]) / (n_x - 1)
    halo = max(1, int(math.ceil(t_final * v_max * math.sqrt(3.0) / h)))
    grid = PhaseGrid(obstacle, box[0], box[1], n_x, n_v, v_max, theta, halo)
    G0 = grid.fill_ghosts(grid.sample(f0))
    sm = sqrt_mu(grid.v_points)
    init_w = float(np.max(np.abs(G0[grid.kind != 2] * sm * grid.weight(theta0))))
    times = np.linspace(0.0, t_final, n_steps + 1)
    g = np.broadcast_to(G0, (times.size,) + G0.shape).copy()
    rule = GridKernelRule(grid, cfg)
    ev, halo_m, masked = grid.kind == 0, grid.kind == 1, grid.kind == 2
    nu_h, ga_h = rule.evaluate(G0[halo_m], cfg.threads)
    Xe = np.repeat(grid.x_points[ev], grid.NV, axis=0)
    Ve = np.tile(grid.v_points, (int(ev.sum()), 1))
    vidx = np.tile(np.arange(grid.NV), int(ev.sum()))
    hist = PhaseHistory(grid=grid, times=times, g=g, f0=f0)
    diffs = []
    for _ in range(n_sweeps):
        K = np.empty(g.shape + (2,))
        for n in range(times.size):
            nu, ga = rule.evaluate(g[n, ev], cfg.threads)
            K[n, ev, :, 0], K[n, ev, :, 1] = nu, ga
            K[n, halo_m, :, 0], K[n, halo_m, :, 1] = nu_h, ga_h
            K[n, masked] = K[n, grid.ghost_src[masked]]
        g_new = g.copy()
        for n in range(1, times.size):
            vals = _duhamel_batch(hist, K, f0, obstacle, float(times[n]), Xe, Ve, vidx, cfg.duhamel_panels)
            g_new[n, ev] = vals.reshape(-1, grid.NV)
        grid.fill_ghosts(g_new)
        diffs.append(float(np.max(np.abs((g_new - g)[:, ~masked] * sm))))
        g = g_new
        hist = PhaseHistory(grid=grid, times=times, g=g, f0=f0, kernels=K)
        trace = np.array([hist.sup_weighted(n) for n in range(times.size)])
        if not np.all(np.isfinite(trace)) or (init_w > 0 and trace.max() > 1e3 * init_w):
            raise DivergenceError("weighted sup norm exceeded 1e3 times its initial value")
    const = float(trace.max() / init_w) if init_w > 0 else 0.0
    return PicardResult(history=hist, sup_trace=trace, initial_weighted=init_w, constant=const, sweep_diffs=diffs,
                        rule_error=equilibrium_rule_error(rule), truncation=grid.truncation_factor())


# --------------------------------------------------------------------------
# specular compatibility


def interpolation_error_estimate(history: PhaseHistory, n: int = -1) -> float:
    """A-priori trilinear error bound for f = sqrt(mu) g.

    Sums over the six grid directions max |second difference of g| / 8,
    each second difference scaled by sqrt(mu) at its centre node.
    """
    grid = history.grid
    shape = (grid.nxe,) * 3 + (grid.n_v,) * 3
    g = history.g[n].reshape(shape)
    sm = sqrt_mu(grid.v_points).reshape((1, 1, 1) + (grid.n_v,) * 3)
    est = 0.0
    for ax in range(6):
        d2 = np.abs(np.diff(g, n=2, axis=ax))
        sl = [slice(None)] * 6
        sl[ax] = slice(1, -1)
        est += float(np.max(d2 * sm[tuple(sl)] if ax >= 3 else d2 * sm)) / 8.0
    return est


@dataclass(frozen=True)
class SpecularReport:
    residual: float
    interp_estimate: float
    n_samples: int

    @property
    def ok(self) -> bool:
        # floor: a few ulps of f <= 1 from the two independent evaluations
        return self.residual <= 5.0 * self.interp_estimate + 64 * np.finfo(float).eps


def specular_residual(history: PhaseHistory, obstacle: ConvexObstacle, n_samples: int, rng: np.random.Generator,
                      config: KernelConfig | None = None, v_scale: float = 1.5) -> SpecularReport:
    """max |f(t, x, v) - f(t, x, R_x v)| over random boundary points at the final time."""
    P = sample_boundary(obstacle, n_samples, rng)
    V = rng.normal(scale=v_scale, size=(n_samples, 3))
    nrm = obstacle.normal(P)
    RV = V - 2.0 * np.sum(V * nrm, axis=1, keepdims=True) * nrm
    t = history.t_final
    a = duhamel_eval_batch(history, history.f0, obstacle, t, P, V, config)
    b = duhamel_eval_batch(history, history.f0, obstacle, t, P, RV, config)
    return SpecularReport(float(np.max(np.abs(a - b))), interpolation_error_estimate(history), n_samples)


# --------------------------------------------------------------------------
# kernel difference checks


def _sphere_rule(n_r: int, n_theta: int, r_max: float, panel: float):
    return polar_rule(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.0, r_max, n_r, panel, n_theta)


def _sup_norms(f, t: float, xs) -> tuple[float, float, float]:
    """(||w f||, ||f||) at the given positions with w = e^{|v|^2/8}, sampled on a velocity grid."""
    if isinstance(f, PhaseHistory):
        n = int(np.argmin(np.abs(f.times - t)))
        ev = f.grid.kind != 2
        fl = f.f_level(n)[ev]
        return float(np.max(np.abs(fl * f.grid.weight(0.125)))), float(np.max(np.abs(fl))), 0.0
    ax = np.linspace(-8.0, 8.0, 25)
    V = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    w = np.exp(0.125 * np.sum(V * V, axis=1))
    wf = fs = 0.0
    for x in xs:
        vals = _read(f, t, np.asarray(x, dtype=float), V)
        wf, fs = max(wf, float(np.max(np.abs(vals * w)))), max(fs, float(np.max(np.abs(vals))))
    return wf, fs, 0.0


@dataclass(frozen=True)
class KernelRatio:
    check: str
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float:
        if self.rhs == 0:
            return 0.0 if self.lhs <= 1e-14 else math.inf
        return self.lhs / self.rhs


def kernel_difference_check(f, pairs, config: KernelConfig | None = None, t: float = 0.0,
                            norms: tuple[float, float] | None = None) -> list[KernelRatio]:
    """LHS/RHS of the Gamma and nu difference estimates for (x, v, xbar, vbar) pairs.

    Spatial pairs (v = vbar) give the gamma_x / nu_x rows, velocity pairs
    (x = xbar) the gamma_v / nu_v rows; every pair also contributes the upper
    bounds gamma_upper and nu_upper at (x, v).
    """
    cfg = config or KernelConfig()
    pairs = [tuple(_vec3(p, n) for p, n in zip(pr, ("x", "v", "xbar", "vbar"))) for pr in pairs]
    if norms is None:
        wf, fs, _ = _sup_norms(f, t, [p[0] for p in pairs] + [p[2] for p in pairs])
    else:
        wf, fs = norms
    u1, r1, w1 = _sphere_rule(cfg.radial_nodes, cfg.polar_nodes, math.sqrt(40.0 / cfg.c), cfg.radial_panel)
    k1 = w1 * np.exp(-cfg.c * r1 * r1) / np.where(r1 > 0, r1, 1.0)
    out = []
    for x, v, xb, vb in pairs:
        dx, dv = float(np.linalg.norm(x - xb)), float(np.linalg.norm(v - vb))
        if dx > 1 + 1e-12 or dv > 1 + 1e-12:
            raise InvalidInputError("pairs need |x - xbar| <= 1 and |v - vbar| <= 1")
        ga, nu = gamma_gain(f, t, x, v, cfg, return_nu=True)
        out.append(KernelRatio("gamma_upper", abs(ga), wf * wf))
        out.append(KernelRatio("nu_upper", abs(nu), bracket(float(np.linalg.norm(v))) * fs))
        if dx > 0:
            ga2, nu2 = gamma_gain(f, t, xb, v, cfg, return_nu=True)
            diff1 = np.abs(_read(f, t, x, v + u1) - _read(f, t, xb, v + u1))
            out.append(KernelRatio("gamma_x", abs(ga - ga2), wf * float(np.sum(k1 * diff1))))
            # |u| e^{-|u+v|^2/4} kernel: centre the rule where u + v = 0
            u2, r2, w2 = polar_rule(-v, np.array([0.0, 0.0, 1.0]), 0.0, 14.0, cfg.radial_nodes, cfg.radial_panel,
                                    cfg.polar_nodes)
            k2 = w2 * np.linalg.norm(u2, axis=1) * np.exp(-0.25 * r2 * r2)
            diff2 = np.abs(_read(f, t, x, v + u2) - _read(f, t, xb, v + u2))
            out.append(KernelRatio("nu_x", abs(nu - nu2), float(np.sum(k2 * diff2))))
        if dv > 0:
            ga2, nu2 = gamma_gain(f, t, x, vb, cfg, return_nu=True)
            diff1 = np.abs(_read(f, t, x, v + u1) - _read(f, t, x, vb + u1))
            mn = min(1.0 / bracket(float(np.linalg.norm(v))), 1.0 / bracket(float(np.linalg.norm(vb))))
            out.append(KernelRatio("gamma_v", abs(ga - ga2), wf * float(np.sum(k1 * diff1)) + wf * wf * mn * dv))
            out.append(KernelRatio("nu_v", abs(nu - nu2), dv * fs))
    return out


# --------------------------------------------------------------------------
# seminorm samples


@dataclass(frozen=True)
class SeminormSample:
    X_values: np.ndarray
    V_values: np.ndarray

    @property
    def X_max(self) -> float:
        return float(self.X_values.max(initial=0.0))

    @property
    def V_max(self) -> float:
        return float(self.V_values.max(initial=0.0))


def _weight_G(obstacle, x, v, eps):
    d = float(distance_batch(obstacle, x[None, :])[0][0])
    if d > eps:
        return 1.0
    s = float(np.linalg.norm(v))
    return math.log1p(1.0 / s) + 1.0 if s > 0 else math.inf


def seminorm_sample_XV(history: PhaseHistory, obstacle: ConvexObstacle, pairs, params: WeightParams,
                       config: KernelConfig | None = None, t: float | None = None) -> SeminormSample:
    """Finite-sample lower estimates of the seminorms X and V at time t for the given pairs."""
    cfg = config or KernelConfig()
    t = history.t_final if t is None else float(t)
    c = cfg.c
    u1, r1, w1 = _sphere_rule(cfg.sample_radial, cfg.sample_polar, math.sqrt(36.0 / c), 3.0)
    k1 = w1 * np.exp(-c * r1 * r1) / np.where(r1 > 0, r1, 1.0)
    gs, gw = gauss_legendre(6, 0.0, 1.0)
    xs_out, vs_out = [], []
    for pr in pairs:
        x, v, xb, vb = (_vec3(p) for p in pr)
        dist = math.hypot(float(np.linalg.norm(x - xb)), float(np.linalg.norm(v - vb)))
        if not (0 < dist <= 1 + 1e-12):
            raise InvalidInputError("pairs need 0 < |(x,v) - (xbar,vbar)| <= 1")
        b1 = billiard.backward_exit(obstacle, x, v)
        b2 = billiard.backward_exit(obstacle, xb, vb)
        cuts = sorted({0.0, t} | {q for q in (b1.t1(t), b2.t1(t)) if q is not None and 0 < q < t})
        s = np.concatenate([a + (b - a) * gs for a, b in zip(cuts[:-1], cuts[1:])])
        ws = np.concatenate([(b - a) * gw for a, b in zip(cuts[:-1], cuts[1:])])
        X1, V1 = billiard.trajectory_batch(obstacle, t, x, v, s, b1)
        X2, V2 = billiard.trajectory_batch(obstacle, t, xb, vb, s, b2)
        vn = float(np.linalg.norm(v))
        damp = math.exp(-params.varpi * (1 + vn * vn) * t)
        G1 = _weight_G(obstacle, x, v, params.eps)
        G2 = _weight_G(obstacle, xb, vb, params.eps)
        xi_sum = vi_sum = 0.0
        for k in range(s.size):
            sk = s[k]
            dX = float(np.linalg.norm(X1[k] - X2[k]))
            if dX > 1e-14:
                pts = V1[k] + u1
                diff = np.abs(history.f_at(sk, X1[k], pts) - history.f_at(sk, X2[k], pts))
                u2, r2, w2 = polar_rule(-V1[k], np.array([0.0, 0.0, 1.0]), 0.0, 12.0, cfg.sample_radial, 3.0,
                                        cfg.sample_polar)
                k2 = w2 * np.linalg.norm(u2, axis=1) * np.exp(-0.25 * r2 * r2)
                pts2 = V1[k] + u2
                diff2 = np.abs(history.f_at(sk, X1[k], pts2) - history.f_at(sk, X2[k], pts2))
                wgt = max(math.sqrt(t - sk), 1.0 / bracket(vn))
                xi_sum += ws[k] * wgt * (float(np.sum(k1 * diff)) + float(np.sum(k2 * diff2))) / dX
            dV = float(np.linalg.norm(V1[k] - V2[k]))
            if dV > 1e-14:
                diff = np.abs(history.f_at(sk, X1[k], V1[k] + u1) - history.f_at(sk, X1[k], V2[k] + u1))
                vi_sum += ws[k] * float(np.sum(k1 * diff)) / dV
        xs_out.append(damp * xi_sum / (G1 + G2))
        vs_out.append(damp * vi_sum / G1)
    return SeminormSample(np.array(xs_out), np.array(vs_out))
