"""Command-line experiment runner.

Each subcommand is described by a parameter table that drives both the
argparse flags and the JSON config schema, so a config file and the
equivalent flags produce the same :class:`ExperimentConfig`.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__, acceptance, billiard, geometry, holder, kinetic, shift
from . import singular_integrals as si
from .errors import BoundViolation, GrazingError, SchemaError

COMMON = {"subcommand", "obstacle", "params", "seed", "out", "threads", "profile"}


# --------------------------------------------------------------------------
# config and report types

@dataclass
class ExperimentConfig:
    subcommand: str
    obstacle: dict = field(default_factory=lambda: {"kind": "sphere", "radius": 1.0})
    params: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None
    threads: int = 1
    profile: str = "fast"


@dataclass
class ExperimentReport:
    config: dict
    build_id: str
    records: list[dict]
    wall_time: float
    payload: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r["pass"] for r in self.records)


def record(name: str, anchor: str, value: float, bound: float, ok: bool | None = None) -> dict:
    value, bound = float(value), float(bound)
    ratio = value / bound if bound != 0 and math.isfinite(bound) else (0.0 if value == 0 else math.inf)
    return {"name": name, "anchor": anchor, "value": value, "bound": bound, "ratio": ratio,
            "pass": bool(value <= bound) if ok is None else bool(ok)}


def build_id() -> str:
    """Content hash of the package sources (stable across checkouts of the same code)."""
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# --------------------------------------------------------------------------
# parameter tables: name -> (kind, default, help)

def _vec(val) -> list[float]:
    if isinstance(val, str):
        val = [float(t) for t in val.replace(",", " ").split()]
    out = [float(t) for t in val]
    if len(out) != 3:
        raise SchemaError("vector parameters need exactly three components")
    return out


KINDS: dict[str, Callable[[Any], Any]] = {"vec": _vec, "float": float, "int": int, "str": str, "bool": bool}

SPECS: dict[str, dict[str, tuple]] = {
    "geometry-check": {
        "samples": ("int", 256, "boundary samples for the convexity check"),
        "points": ("int", 64, "exterior points for the distance check"),
    },
    "trace": {
        "x": ("vec", [2.0, 0.0, 0.0], "position"),
        "v": ("vec", [1.0, 0.0, 0.0], "velocity"),
        "t": ("float", 3.0, "final time"),
        "samples": ("int", 31, "number of equally spaced s values in [0, t]"),
    },
    "holder": {
        "map": ("str", "xb", f"one of {holder.MAPS}"),
        "x": ("vec", [2.0, 1.0, 0.0], "base position"),
        "v": ("vec", [1.0, 0.0, 0.0], "base velocity"),
        "direction": ("str", "0 -1 0 0 0 0", "six perturbation components"),
        "t": ("float", 3.0, "final time for X_at_s / V_at_s"),
        "s": ("float", 0.0, "evaluation time for X_at_s / V_at_s"),
        "eps_min": ("float", -8.0, "log10 of the smallest step"),
        "eps_max": ("float", -3.0, "log10 of the largest step"),
        "grazing_auto": ("bool", False, "construct random grazing bases instead of using x, v"),
        "bases": ("int", 5, "number of automatic grazing bases"),
    },
    "avg-singularity": {
        "frame": ("str", "position", "position or velocity"),
        "x": ("vec", [1.5, 0.3, 0.2], "position"),
        "xbar": ("vec", [1.5, -1.4, -0.5], "second position (position frame)"),
        "v": ("vec", [1.0, 0.0, 0.0], "velocity"),
        "vbar": ("vec", [0.0, 1.0, 0.0], "second velocity (velocity frame)"),
        "zeta": ("vec", [0.0, 0.0, 0.0], "velocity offset (velocity frame)"),
        "t": ("float", 1.0, "time window"),
        "nodes": ("int", 32, "Gauss nodes per piece"),
    },
    "planar-lemmas": {
        "deltas": ("int", 25, "angles per x1 in the comparison sweep"),
    },
    "singular-static": {
        "x": ("vec", [1.01, 0.0, 0.0], "position"),
        "v": ("vec", [0.0, 1.0, 0.0], "velocity"),
        "k": ("float", 0.0, "velocity power, k < 2"),
        "nodes": ("int", 16, "resolution"),
    },
    "singular-dynamic": {
        "x": ("vec", [1.5, 0.3, 0.0], "position"),
        "v": ("vec", [1.0, 0.0, 0.0], "velocity"),
        "t": ("float", 1.0, "final time in (0, 1]"),
        "varpi": ("float", 4.0, "damping rate, > 1"),
        "eps": ("float", 0.5, "separation threshold for the far bound"),
    },
    "kinetic": {
        "datum": ("str", "equilibrium", "equilibrium or perturbed"),
        "amplitude": ("float", 0.1, "bump amplitude for the perturbed datum"),
        "n_x": ("int", 8, "x nodes per axis"),
        "n_v": ("int", 9, "v nodes per axis"),
        "t_final": ("float", 0.05, "final time"),
        "steps": ("int", 5, "time steps"),
        "sweeps": ("int", 3, "Picard sweeps"),
        "boundary_samples": ("int", 100, "samples for the specular residual"),
    },
    "accept": {
        "only": ("str", "", "comma-separated criterion numbers (default: all)"),
    },
}


def validate(doc: dict) -> ExperimentConfig:
    """Schema check of a config document; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise SchemaError("config must be a JSON object")
    extra = set(doc) - COMMON
    if extra:
        raise SchemaError(f"unknown config keys: {sorted(extra)}")
    sub = doc.get("subcommand")
    if sub not in SPECS:
        raise SchemaError(f"unknown subcommand {sub!r}")
    spec = SPECS[sub]
    raw = doc.get("params", {}) or {}
    if not isinstance(raw, dict):
        raise SchemaError("params must be an object")
    bad = set(raw) - set(spec)
    if bad:
        raise SchemaError(f"unknown parameters for {sub}: {sorted(bad)}")
    params = {}
    for name, (kind, default, _) in spec.items():
        val = raw.get(name, default)
        try:
            params[name] = KINDS[kind](val)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"parameter {name}: {exc}") from exc
    seed = doc.get("seed", 0)
    threads = doc.get("threads", 1)
    profile = doc.get("profile", "fast")
    if not (isinstance(seed, int) and 0 <= seed < 2**64):
        raise SchemaError("seed must be an unsigned 64-bit integer")
    if not (isinstance(threads, int) and threads >= 1):
        raise SchemaError("threads must be a positive integer")
    if profile not in acceptance.PROFILES:
        raise SchemaError(f"profile must be one of {acceptance.PROFILES}")
    obstacle = doc.get("obstacle", {"kind": "sphere", "radius": 1.0})
    geometry.obstacle_from_json(obstacle)
    return ExperimentConfig(sub, obstacle, params, seed, doc.get("out"), threads, profile)


# --------------------------------------------------------------------------
# subcommands: each returns (records, tables, payload)

def _geometry_check(cfg, obstacle, rng):
    theta = geometry.verify_uniform_convexity(obstacle, cfg.params["samples"], seed=cfg.seed)
    pts = acceptance._exterior(obstacle, rng, cfg.params["points"], 1.01, 3.0)
    d, P = geometry.distance_batch(obstacle, pts)
    on = np.abs(obstacle.xi(P))
    rows = [{"x": p.tolist(), "dist": float(di), "xi_at_projection": float(o)} for p, di, o in zip(pts, d, on)]
    recs = [record("0.9 x declared convexity / sampled", "uniform convexity", 0.9 * obstacle.theta_omega, theta),
            record("max |xi| at projections", "closest boundary point", float(on.max()), geometry.BOUNDARY_TOL)]
    return recs, {"distances": rows}, {"theta_sampled": theta, "theta_declared": obstacle.theta_omega}


def _trace(cfg, obstacle, rng):
    p = cfg.params
    b = billiard.backward_exit(obstacle, p["x"], p["v"])
    s = np.linspace(0.0, p["t"], p["samples"])
    X, V = billiard.trajectory_batch(obstacle, p["t"], b.x, b.v, s, b)
    t1 = b.t1(p["t"])
    rows = [{"s": float(si_), "X0": x[0], "X1": x[1], "X2": x[2], "V0": w[0], "V1": w[1], "V2": w[2],
             "bounced": bool(t1 is not None and si_ <= t1)} for si_, x, w in zip(s, X, V)]
    energy = float(np.max(np.abs(np.linalg.norm(V, axis=1) - np.linalg.norm(b.v))))
    payload = {"t_b": b.t_b, "x_b": None if b.x_b is None else b.x_b.tolist(), "t1": t1}
    return [record("speed drift", "energy conservation of reflection", energy, 1e-12)], {"trace": rows}, payload


def _holder(cfg, obstacle, rng):
    p = cfg.params
    grid = 10.0 ** np.arange(p["eps_max"], p["eps_min"] - 1e-9, -0.25)
    fits, rows = [], []
    if p["grazing_auto"]:
        for i in range(p["bases"]):
            gb = holder.grazing_base(obstacle, rng)
            f = holder.holder_sweep(p["map"], gb.x, gb.v, gb.direction, grid, obstacle, t=p["t"], s=p["s"])
            fits.append(f)
            rows.append({"base": i, "x": gb.x.tolist(), "v": gb.v.tolist(), "grazing": gb.grazing})
    else:
        d = [float(t) for t in p["direction"].replace(",", " ").split()]
        if len(d) != 6:
            raise SchemaError("direction needs six components")
        fits.append(holder.holder_sweep(p["map"], p["x"], p["v"], d, grid, obstacle, t=p["t"], s=p["s"]))
        rows.append({"base": 0, "x": p["x"], "v": p["v"]})
    table = []
    for r, f in zip(rows, fits):
        r.update(exponent=f.exponent, constant=f.constant, residual=f.residual, forced_residual=f.forced_residual,
                 crossing=f.crossing, n_used=f.n_used)
        table.extend({"base": r["base"], "eps": e, "diff": dv} for e, dv in zip(f.eps_grid, f.diffs))
    recs = [record(f"base {r['base']} fit residual", "log-log Holder fit", r["residual"], 0.05) for r in rows]
    return recs, {"holder_diffs": table}, {"fits": rows}


def _avg_singularity(cfg, obstacle, rng):
    p = cfg.params
    if p["frame"] == "position":
        frame = shift.build_shift_frame(p["x"], p["xbar"], p["v"], obstacle)
    elif p["frame"] == "velocity":
        frame = shift.build_velocity_frame(p["x"], p["v"], p["vbar"], p["zeta"], obstacle)
    else:
        raise SchemaError("frame must be position or velocity")
    rep = shift.averaging_bound_check(frame, p["t"], obstacle, nodes=p["nodes"])
    finite = all(math.isfinite(r) for r in rep.lemma_ratios) and math.isfinite(rep.corollary_ratio)
    recs = [record("ratios finite", "averaged specular singularity", 0.0, 0.0, ok=finite)]
    rows = [{"tau_star": t, "ratio": r} for t, r in zip(rep.lemma_tau_star, rep.lemma_ratios)]
    payload = {"average": rep.average, "corollary_rhs": rep.corollary_rhs, "corollary_ratio": rep.corollary_ratio,
               "distance": rep.distance, "c_dom": rep.c_dom, "indicator": rep.rhs_indicator}
    return recs, {"lemma_ratios": rows}, payload


def _planar_lemmas(cfg, obstacle, rng):
    rows, recs = [], []
    for R in acceptance.RADII:
        for d in acceptance.DIST_GRID:
            c = si.circle_grazing_integral(R, d, check=False)
            lhs, rhs = si.chord_bound_check(R, d, check=False)
            rows.append({"R": R, "dist": d, "grazing_part": c.quad.value, "bound": c.bound,
                         "identity": c.identity_value, "closed_form": c.identity_closed_form,
                         "chord_lhs": lhs, "chord_rhs": rhs})
    recs.append(record("circle identity error", "circle integral depends only on direction",
                       max(abs(r["identity"] - r["closed_form"]) for r in rows), 1e-8))
    recs.append(record("circle grazing part / bound", "circle grazing integral bound",
                       max(r["grazing_part"] / r["bound"] for r in rows), 1.0))
    recs.append(record("chord lhs / rhs", "chord length bound", max(r["chord_lhs"] / r["chord_rhs"] for r in rows), 1.0))
    angles = []
    for name, curve in si.standard_curves().items():
        eps = si.locate_angle_threshold(curve)
        bad = 0
        for x1 in (0.25, 1.0, 3.0):
            for delta in np.geomspace(1e-6, 1.4, cfg.params["deltas"]):
                if x1 * math.tan(delta) >= eps:
                    continue
                res = si.angle_compare(curve, x1, float(delta), eps, raise_on_violation=False)
                if res.intersects:
                    bad += not res.holds
                    angles.append({"curve": name, "x1": x1, "delta": float(delta), "A_p": res.A_p, "A_q": res.A_q})
        recs.append(record(f"{name}: comparison failures below threshold", "incidence angle comparison", bad, 0))
        slope_bad = 0
        for x1 in 2.0 ** np.arange(-4, 7):
            cp = si.closest_point_slope(curve, float(x1), raise_on_violation=False)
            slope_bad += cp.slope * x1 < cp.eps_curve * (1 - 1e-9)
        recs.append(record(f"{name}: closest-point slope failures", "closest point slope bound", slope_bad, 0))
    return recs, {"circle": rows, "angles": angles}, {}


def _singular_static(cfg, obstacle, rng):
    p = cfg.params
    r = si.static_singular_integral(obstacle, p["x"], p["v"], p["k"], nodes=p["nodes"])
    recs = [record("value / bound", "static log singularity", r.quad.value, r.bound, ok=math.isfinite(r.ratio))]
    payload = {"value": r.quad.value, "err_est": r.quad.abs_error_est, "bound": r.bound, "ratio": r.ratio,
               "ratio_to_bound": r.ratio_to_bound, "distance": r.distance, "c_dom": r.c_dom}
    return recs, {}, payload


def _singular_dynamic(cfg, obstacle, rng):
    p = cfg.params
    r = si.dynamical_singular_integral(obstacle, p["t"], p["x"], p["v"], p["varpi"], eps=p["eps"])
    recs = [record("value / near bound", "log singular integral along backward trajectories", r.quad.value,
                   r.bound_near, ok=math.isfinite(r.ratio_near))]
    payload = {"value": r.quad.value, "bound_near": r.bound_near, "bound_far": r.bound_far,
               "ratio_near": r.ratio_near, "ratio_far": r.ratio_far, "t1": r.t1, "distance": r.distance}
    return recs, {}, payload


def _kinetic(cfg, obstacle, rng):
    p = cfg.params
    if p["datum"] == "equilibrium":
        f0 = kinetic.maxwellian_field
    elif p["datum"] == "perturbed":
        f0 = kinetic.perturbed_field(p["amplitude"], acceptance.BUMP["x_center"], acceptance.BUMP["x_radius"])
    else:
        raise SchemaError("datum must be equilibrium or perturbed")
    kc = kinetic.KernelConfig(threads=cfg.threads)
    run = kinetic.picard_iterate(f0, obstacle, p["t_final"], p["steps"], p["sweeps"], kc, n_x=p["n_x"], n_v=p["n_v"])
    spec = kinetic.specular_residual(run.history, obstacle, p["boundary_samples"], rng, kc)
    recs = [record("trace constant", "local-in-time weighted sup bound", run.constant, 2.0),
            record("specular residual", "specular boundary condition", spec.residual,
                   5.0 * spec.interp_estimate + 64 * np.finfo(float).eps)]
    if p["datum"] == "equilibrium":
        ev = run.history.grid.kind != 2
        sm = kinetic.sqrt_mu(run.history.grid.v_points)
        dev = max(float(np.max(np.abs(run.history.f_level(n)[ev] - sm))) for n in range(run.history.times.size))
        recs.append(record("max |f - sqrt(mu)|", "equilibrium is a mild solution", dev, 10 * run.rule_error))
    rows = [{"level": n, "t": float(t), "sup_weighted": float(s)}
            for n, (t, s) in enumerate(zip(run.history.times, run.sup_trace))]
    payload = {"constant": run.constant, "sweep_diffs": list(map(float, run.sweep_diffs)),
               "rule_error": run.rule_error, "truncation": run.truncation,
               "specular_residual": spec.residual, "interp_estimate": spec.interp_estimate}
    return recs, {"sup_trace": rows}, payload, run.history


def _accept(cfg, obstacle, rng):
    only = [int(t) for t in cfg.params["only"].replace(",", " ").split()] or None
    results = acceptance.acceptance_suite(cfg.profile, cfg.seed, cfg.threads, only)
    recs, tables = [], {}
    for r in results:
        print(r.summary(), flush=True)
        for rec in r.records:
            recs.append({**rec.as_dict(), "name": f"criterion {r.number}: {rec.name}"})
        if r.error:
            recs.append(record(f"criterion {r.number}: {r.error}", r.title, 1.0, 0.0))
        if cfg.profile == "full" or not r.passed:
            tables[f"criterion_{r.number:02d}"] = r.table
    payload = {"criteria": [{"number": r.number, "title": r.title, "pass": r.passed, "seconds": r.seconds,
                             "budget": r.budget, "error": r.error} for r in results]}
    return recs, tables, payload


HANDLERS = {
    "geometry-check": _geometry_check, "trace": _trace, "holder": _holder, "avg-singularity": _avg_singularity,
    "planar-lemmas": _planar_lemmas, "singular-static": _singular_static, "singular-dynamic": _singular_dynamic,
    "kinetic": _kinetic, "accept": _accept,
}


# --------------------------------------------------------------------------
# output

def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, dict)):
        return json.dumps(v)
    return v


def csv_bytes(rows: list[dict]) -> bytes:
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _cell(v) for k, v in _plain(r).items()})
    return buf.getvalue().encode()


def dump_history(path: Path, history: kinetic.PhaseHistory) -> None:
    """PhaseGrid dump: an .npz archive with the arrays listed in the README."""
    g = history.grid
    buf = io.BytesIO()
    np.savez(buf, format_version=np.array(1), times=history.times, g=history.g, x_axis=g.x_axis, v_axis=g.v_axis,
             kind=g.kind, ghost_src=g.ghost_src, theta=np.array(g.theta))
    atomic_write(path, buf.getvalue())


def run_experiment(cfg: ExperimentConfig) -> tuple[ExperimentReport, dict]:
    obstacle = geometry.obstacle_from_json(cfg.obstacle)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    t0 = time.perf_counter()
    out = HANDLERS[cfg.subcommand](cfg, obstacle, rng)
    recs, tables, payload = out[:3]
    extra = {"history": out[3]} if len(out) > 3 else {}
    report = ExperimentReport(config=asdict(cfg), build_id=build_id(), records=recs,
                              wall_time=time.perf_counter() - t0, payload=payload)
    return report, {"tables": tables, **extra}


def write_outputs(cfg: ExperimentConfig, report: ExperimentReport, extra: dict) -> Path:
    out = Path(cfg.out or ".")
    stem = cfg.subcommand
    doc = _plain(asdict(report))
    doc["pass"] = report.passed
    atomic_write(out / f"{stem}.json", (json.dumps(doc, indent=2, default=str) + "\n").encode())
    for name, rows in extra["tables"].items():
        if rows:
            atomic_write(out / f"{stem}_{name}.csv", csv_bytes(rows))
    if "history" in extra:
        dump_history(out / f"{stem}_phasegrid.npz", extra["history"])
    return out / f"{stem}.json"


# --------------------------------------------------------------------------
# argparse front end

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grazing", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name, spec in SPECS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file; flags given explicitly override it")
        sp.add_argument("--obstacle", help="obstacle JSON (inline or path)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--threads", type=int)
        sp.add_argument("--profile", choices=acceptance.PROFILES)
        for pname, (kind, default, help_) in spec.items():
            flag = "--" + pname.replace("_", "-")
            if kind == "bool":
                sp.add_argument(flag, dest=pname, action="store_true", default=None, help=help_)
            else:
                sp.add_argument(flag, dest=pname, default=None, help=f"{help_} (default {default})")
    return ap


def config_from_args(ns: argparse.Namespace) -> ExperimentConfig:
    doc: dict = {}
    if ns.config:
        try:
            doc = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"cannot read config: {exc}") from exc
        if doc.get("subcommand", ns.subcommand) != ns.subcommand:
            raise SchemaError("config subcommand does not match the command line")
    doc = dict(doc)
    doc["subcommand"] = ns.subcommand
    if ns.obstacle:
        text = ns.obstacle
        try:
            doc["obstacle"] = json.loads(text if text.lstrip().startswith("{") else Path(text).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"cannot read obstacle: {exc}") from exc
    for key in ("seed", "out", "threads", "profile"):
        if getattr(ns, key) is not None:
            doc[key] = getattr(ns, key)
    params = dict(doc.get("params", {}) or {})
    for pname in SPECS[ns.subcommand]:
        val = getattr(ns, pname)
        if val is not None:
            params[pname] = val
    doc["params"] = params
    return validate(doc)


def main(argv: list[str] | None = None) -> int:
    ns = _parser().parse_args(argv)
    try:
        cfg = config_from_args(ns)
        report, extra = run_experiment(cfg)
    except (SchemaError, GrazingError) as exc:
        if isinstance(exc, BoundViolation):
            print(f"assertion failed: {exc}", file=sys.stderr)
            return 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    path = write_outputs(cfg, report, extra)
    failed = [r for r in report.records if not r["pass"]]
    for r in failed:
        print(f"FAIL {r['name']} [{r['anchor']}]: value={r['value']:.6g} bound={r['bound']:.6g}", file=sys.stderr)
    print(f"{'PASS' if not failed else 'FAIL'} {cfg.subcommand}: {len(report.records) - len(failed)}/"
          f"{len(report.records)} checks, report {path}")
    return 0 if not failed else 1


if __name__ == "__main__":
    sys.exit(main())
