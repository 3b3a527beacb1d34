"""Vectorized adaptive Gauss-Kronrod (7/15) quadrature.

Several independent integrals can be refined simultaneously: the integrand is
called with an ``owner`` index array telling which integral each node belongs
to.  Intervals are bisected until the local error share is met or the
bisection depth limit is reached.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import QuadratureError

# QUADPACK qk15 abscissae (positive half, descending) and weights.
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])

# full 15-point node set on [-1, 1] and matching weights
NODES = np.concatenate([-_XGK[:-1], [0.0], _XGK[:-1][::-1]])
KRONROD_W = np.concatenate([_WGK[:-1], [_WGK[-1]], _WGK[:-1][::-1]])
GAUSS_W = np.zeros(15)
GAUSS_W[[1, 3, 5]] = _WG[:3]
GAUSS_W[7] = _WG[3]
GAUSS_W[[13, 11, 9]] = _WG[:3]

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class QuadratureReport:
    value: float
    abs_error_est: float
    nodes: int
    subdivisions: int
    converged: bool = True

    def __post_init__(self):
        if not self.abs_error_est >= 0.0:
            raise ValueError("abs_error_est must be nonnegative")


def _rule(vals: np.ndarray, half: np.ndarray):
    """Kronrod value and QUADPACK-style error estimate per interval row."""
    k = vals @ KRONROD_W
    g = vals @ GAUSS_W
    mean = 0.5 * k
    resabs = np.abs(vals) @ KRONROD_W * np.abs(half)
    resasc = np.abs(vals - mean[:, None]) @ KRONROD_W * np.abs(half)
    k = k * half
    err = np.abs((k - g * half))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(resasc > 0, np.minimum(1.0, (200.0 * err / resasc) ** 1.5), 1.0)
    err = np.where(resasc > 0, resasc * scale, err)
    err = np.maximum(err, 50.0 * _EPS * resabs)
    return k, err


def integrate_batch(
    f: Callable[[np.ndarray, np.ndarray], np.ndarray],
    lo: Sequence[float],
    hi: Sequence[float],
    owner: Sequence[int] | None = None,
    n_integrals: int | None = None,
    abs_tol: float = 1e-10,
    rel_tol: float = 1e-8,
    max_depth: int = 40,
    raise_on_fail: bool = True,
) -> list[QuadratureReport]:
    """Integrate ``f(owner, x)`` over a list of starting intervals.

    ``owner[i]`` names the integral that interval ``[lo[i], hi[i]]`` belongs
    to; several starting intervals per integral act as breakpoints.
    """
    lo = np.asarray(lo, dtype=float).ravel()
    hi = np.asarray(hi, dtype=float).ravel()
    if owner is None:
        owner = np.arange(lo.size)
    owner = np.asarray(owner, dtype=int).ravel()
    m = int(n_integrals if n_integrals is not None else (owner.max() + 1 if owner.size else 0))
    span = np.bincount(owner, weights=np.abs(hi - lo), minlength=m)
    span = np.where(span > 0, span, 1.0)

    acc_val = np.zeros(m)
    acc_err = np.zeros(m)
    n_nodes = np.zeros(m, dtype=int)
    n_sub = np.zeros(m, dtype=int)
    ok = np.ones(m, dtype=bool)
    worst: dict[int, tuple[float, float, float]] = {}
    depth = np.zeros(lo.size, dtype=int)

    while lo.size:
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        x = mid[:, None] + half[:, None] * NODES[None, :]
        vals = np.asarray(f(np.repeat(owner, 15), x.ravel()), dtype=float).reshape(x.shape)
        if not np.all(np.isfinite(vals)):
            bad = ~np.all(np.isfinite(vals), axis=1)
            j = int(np.flatnonzero(bad)[0])
            raise QuadratureError(
                f"non-finite integrand on [{lo[j]:.6g}, {hi[j]:.6g}]",
                worst_interval=(float(lo[j]), float(hi[j])),
            )
        k, err = _rule(vals, half)
        np.add.at(n_nodes, owner, 15)

        tot_val = acc_val + np.bincount(owner, weights=k, minlength=m)
        tot_err = acc_err + np.bincount(owner, weights=err, minlength=m)
        tol = np.maximum(abs_tol, rel_tol * np.abs(tot_val))
        owner_done = tot_err <= tol
        local_ok = err <= tol[owner] * np.abs(hi - lo) / span[owner]
        accept = owner_done[owner] | local_ok
        too_deep = (~accept) & (depth >= max_depth)
        if np.any(too_deep):
            for j in np.flatnonzero(too_deep):
                o = int(owner[j])
                ok[o] = False
                if o not in worst or err[j] > worst[o][2]:
                    worst[o] = (float(lo[j]), float(hi[j]), float(err[j]))
            accept = accept | too_deep
        np.add.at(acc_val, owner[accept], k[accept])
        np.add.at(acc_err, owner[accept], err[accept])

        split = ~accept
        if not np.any(split):
            break
        o = owner[split]
        a, b, mm = lo[split], hi[split], mid[split]
        np.add.at(n_sub, o, 1)
        lo = np.concatenate([a, mm])
        hi = np.concatenate([mm, b])
        owner = np.concatenate([o, o])
        d = depth[split] + 1
        depth = np.concatenate([d, d])

    if raise_on_fail and not np.all(ok):
        o = int(np.flatnonzero(~ok)[0])
        w = worst[o]
        raise QuadratureError(
            f"quadrature did not converge within depth {max_depth}; worst interval "
            f"[{w[0]:.6g}, {w[1]:.6g}] err {w[2]:.3g}",
            worst_interval=(w[0], w[1]),
        )
    return [
        QuadratureReport(float(acc_val[i]), float(acc_err[i]), int(n_nodes[i]), int(n_sub[i]), bool(ok[i]))
        for i in range(m)
    ]


def integrate(
    f: Callable[[np.ndarray], np.ndarray],
    a: float,
    b: float,
    breakpoints: Sequence[float] = (),
    abs_tol: float = 1e-10,
    rel_tol: float = 1e-8,
    max_depth: int = 40,
    raise_on_fail: bool = True,
) -> QuadratureReport:
    """Adaptive integral of a vectorized scalar function over [a, b]."""
    if a == b:
        return QuadratureReport(0.0, 0.0, 0, 0)
    sign = 1.0
    if b < a:
        a, b, sign = b, a, -1.0
    pts = sorted({float(a), float(b), *(float(p) for p in breakpoints if a < p < b)})
    rep = integrate_batch(
        lambda _o, x: f(x), pts[:-1], pts[1:], np.zeros(len(pts) - 1, dtype=int), 1,
        abs_tol=abs_tol, rel_tol=rel_tol, max_depth=max_depth, raise_on_fail=raise_on_fail,
    )[0]
    if sign < 0:
        rep = QuadratureReport(-rep.value, rep.abs_error_est, rep.nodes, rep.subdivisions, rep.converged)
    return rep


def gauss_legendre(n: int, a: float = -1.0, b: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to [a, b]."""
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return 0.5 * (a + b) + half * x, half * w
