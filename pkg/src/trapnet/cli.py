"""Command-line entry point: ``trapnet <subcommand> ...``.

Exit codes: 0 success, 1 domain error (a JSON error report is printed),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
OMEGA = 2 * math.pi  # one time unit is one RF period

log = logging.getLogger("trapnet")


class DomainError(Exception):
    pass


# file helpers


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays become lists, non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _report(data: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, **data}


def _write_json(path, data: dict) -> None:
    _atomic_write(path, _dumps(_report(data)))


def _write_csv(path, header: str, rows) -> None:
    rows = np.asarray(rows, dtype=float).reshape(-1, len(header.split(",")))
    lines = [header] + [",".join(f"{v:.12g}" for v in row) for row in rows]
    _atomic_write(path, "\n".join(lines) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DomainError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DomainError(f"{path} is not valid JSON: {exc}") from None


def load_field(path):
    """Multipole field from a bare coefficient object or a report holding one."""
    from trapnet.multipole import MultipoleField

    data = _read_json(path)
    for key in ("field", "multipole"):
        if isinstance(data.get(key), dict):
            data = data[key]
            break
    data = {k: v for k, v in data.items() if k != "schema_version"}
    try:
        f = MultipoleField.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise DomainError(f"{path}: {exc}") from None
    if not f.is_valid(1e-8):
        raise DomainError(f"{path}: coefficients are not symmetric and traceless")
    return f


def _triple(text: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z but got {text!r}") from None
    if len(vals) != 3 or not all(math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected three finite numbers, got {text!r}")
    return np.array(vals)


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}")
    return v


def _resolution(text: str) -> int:
    n = int(text)
    if n < 2:
        raise argparse.ArgumentTypeError("resolution must be at least 2")
    return n


def _dry(args, plan: dict) -> dict:
    return {"command": args.command_name, "status": "dry-run", "valid": True, **plan}


# solve-x


def cmd_solve_x(args) -> dict:
    from trapnet.intersection import (IntersectionProblem, alignment, build_constraints, solve_nullspace,
                                      straight_x_paths, theta_x)
    from trapnet.multipole import MultipoleField

    theta = math.radians(args.theta)
    if not 0 < theta <= math.pi / 4 + 1e-12:
        raise DomainError("--theta must lie in (0, 45] degrees")
    if args.order not in (2, 3, 4):
        raise DomainError("--order must be 2, 3 or 4")
    report_path = _sibling(args.out, "_report.json")
    if args.dry_run:
        return _dry(args, {"outputs": [str(args.out), str(report_path)]})

    paths = straight_x_paths(theta)
    null = solve_nullspace(build_constraints(IntersectionProblem(*paths, max_multipole_order=args.order)))
    if null.dimension == 0:
        raise DomainError(f"no nonzero field vanishes on both paths up to order {args.order}")
    orders = tuple(range(1, args.order + 1))
    target = theta_x(theta, args.alpha).as_vector(orders)
    coef = null.basis.T @ (null.basis @ target)  # projection onto the admissible space
    f = MultipoleField.from_vector(coef, orders)
    align = [alignment(v, target) for v in null.basis]
    report = {
        "command": "solve-x",
        "theta_deg": args.theta,
        "order": args.order,
        "alpha": args.alpha,
        "nullspace_dim": null.dimension,
        "basis_alignment": max(align),
        "projection_alignment": alignment(coef, target) if np.any(coef) else 0.0,
        "field_file": str(args.out),
    }
    _atomic_write(args.out, _dumps(f.to_dict()))
    _write_json(report_path, report)
    return report


def _sibling(path, suffix: str) -> Path:
    path = Path(path)
    return path.with_name(path.stem + suffix)


# analyze / trace


def _perturbed(f, alpha_h: float):
    from trapnet.analysis import PerturbedIntersection
    from trapnet.intersection import decompose_theta_x

    dec = decompose_theta_x(f)
    scale = max(abs(dec.alpha_x), abs(dec.alpha_y), 1e-300)
    extra = max(float(np.max(np.abs(f.dipole[:2]))), float(np.max(np.abs(f.quadrupole))),
                float(np.max(np.abs(f.octupole))))
    if dec.theta is None or dec.forbidden > 1e-9 * scale or extra > 1e-9 * scale or dec.theta == 0:
        raise DomainError("analyze expects a field alpha_H z + alpha_X Theta_X; use 'trace' for general fields")
    # field dipole_z = -alpha_H under E = -grad V
    return PerturbedIntersection(alpha_h - float(f.dipole[2]), dec.alpha, dec.theta)


def _zeros_rows(polylines):
    rows = [[i, *pt] for i, pl in enumerate(polylines) for pt in pl]
    return np.array(rows) if rows else np.zeros((0, 4))


def _grid_rows(g):
    return np.column_stack([g.points(), g.flat_values()])


def _default_iso(g) -> float:
    vals = g.values[g.values > 0]
    if vals.size == 0:
        raise DomainError("|E|^2 vanishes on the whole grid; no isosurface")
    return float(np.quantile(vals, 0.1))


def cmd_analyze(args) -> dict:
    from trapnet.analysis import analyze_intersection, boundary_loops, extract_isosurface, sample_pseudopotential

    f = load_field(args.field)
    p = _perturbed(f, args.alpha_h)
    prefix = args.out_prefix
    outs = {k: f"{prefix}_{k}" for k in ("report.json", "zeros.csv", "grid.csv", "iso.obj")}
    if args.dry_run:
        return _dry(args, {"outputs": sorted(outs.values())})

    rep = analyze_intersection(p, box=args.box, step=args.step)
    g = sample_pseudopotential(p.field(), box=args.box, resolution=args.res)
    level = args.iso if args.iso is not None else _default_iso(g)
    mesh = extract_isosurface(g, level)
    report = {
        "command": "analyze",
        "alpha_H": p.alpha_H,
        "alpha_X": p.alpha_X,
        "theta_deg": math.degrees(p.theta),
        "box": args.box,
        "resolution": args.res,
        "iso_level": level,
        "iso_triangles": int(len(mesh.faces)),
        "iso_boundary_loops": boundary_loops(mesh),
        **rep.to_dict(),
    }
    _write_csv(outs["zeros.csv"], "polyline,x,y,z", _zeros_rows(rep.polylines))
    _write_csv(outs["grid.csv"], "x,y,z,U", _grid_rows(g))
    _atomic_write(outs["iso.obj"], mesh.to_obj())
    _write_json(outs["report.json"], report)
    return report


def cmd_trace(args) -> dict:
    from trapnet.analysis import trace_zero_lines

    f = load_field(args.field)
    if not args.seed:
        raise DomainError("give at least one --seed x,y,z")
    prefix = args.out_prefix
    outs = {"report": f"{prefix}_report.json", "zeros": f"{prefix}_zeros.csv"}
    if args.dry_run:
        return _dry(args, {"outputs": sorted(outs.values())})
    rep = trace_zero_lines(f, np.array(args.seed), step=args.step, tol=args.tol, box=args.box)
    report = {"command": "trace", "step": args.step, "box": args.box, **rep.to_dict()}
    _write_csv(outs["zeros"], "polyline,x,y,z", _zeros_rows(rep.polylines))
    _write_json(outs["report"], report)
    return report


# bem


def _load_tags(path) -> dict:
    tags = _read_json(path)
    tags = {k: v for k, v in tags.items() if k != "schema_version"}
    if not tags or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in tags.values()):
        raise DomainError(f"{path}: expected an object mapping material names to volts")
    return tags


def cmd_bem_solve(args) -> dict:
    from trapnet.bem import assemble_and_solve, fit_multipoles
    from trapnet.geometry import read_obj

    tags = _load_tags(args.tags)
    if not Path(args.mesh).exists():
        raise DomainError(f"file not found: {args.mesh}")
    try:
        mesh = read_obj(args.mesh, tags)
    except (KeyError, ValueError) as exc:
        raise DomainError(f"{args.mesh}: {exc}") from None
    if mesh.n_panels > args.max_panels:
        raise DomainError(f"mesh has {mesh.n_panels} panels, above --max-panels {args.max_panels}")
    if args.dry_run:
        return _dry(args, {"panels": mesh.n_panels, "outputs": [str(args.out)]})
    sol = assemble_and_solve(mesh, max_panels=args.max_panels)
    fit = fit_multipoles(sol, center=args.fit_center, radius=args.fit_radius)
    report = {
        "command": "bem solve",
        "mesh": str(args.mesh),
        "panels": mesh.n_panels,
        "fit_center": args.fit_center,
        "fit_radius": args.fit_radius,
        "solve_residual": sol.residual,
        "total_charge": sol.total_charge,
        **fit.to_dict(),
    }
    _write_json(args.out, report)
    return report


def _family(args):
    from trapnet.geometry import load_reference_dimensions, reference_family

    if args.family != "reference":
        raise DomainError(f"unknown geometry family {args.family!r}")
    dims = load_reference_dimensions(args.dimensions)
    return dims, reference_family(dims, refine=args.refine)


def cmd_bem_tune(args) -> dict:
    from trapnet.bem import tune_alpha_h

    dims, family = _family(args)
    lo = args.param_lo if args.param_lo is not None else dims["parameter"]["bracket"][0]
    hi = args.param_hi if args.param_hi is not None else dims["parameter"]["bracket"][1]
    if not lo < hi:
        raise DomainError("--param-lo must be below --param-hi")
    for v in (lo, hi):
        if not family.param_range[0] <= v <= family.param_range[1]:
            raise DomainError(f"bracket end {v} outside the family range {list(family.param_range)}")
    if args.dry_run:
        return _dry(args, {"bracket": [lo, hi], "panels": family(lo).n_panels, "outputs": [str(args.out)]})
    res = tune_alpha_h(family, (lo, hi), tol=args.tol, fit_radius=args.fit_radius)
    report = {
        "command": "bem tune",
        "family": family.name,
        "parameter_name": dims["parameter"]["name"],
        "parameter": res.parameter,
        "bracket": [lo, hi],
        "tol": args.tol,
        "refine": args.refine,
        "iterations": res.iterations,
        "converged": res.converged,
        "history": [list(h) for h in res.history],
        "panels": res.solution.mesh.n_panels if res.solution is not None else None,
        "fit": res.fit.to_dict(),
    }
    _write_json(args.out, report)
    if not res.converged:
        raise DomainError("bisection did not reach the alpha_H tolerance; see the written report")
    return report


# simulate


def cmd_simulate(args) -> dict:
    from trapnet.dynamics import (IonState, UnstableTrajectory, charge_to_mass_for_q, gradient_scale,
                                  integrate, secular_compare)

    f = load_field(args.field)
    if args.steps_per_period < 50:
        raise DomainError("--steps-per-period must be at least 50")
    grad = gradient_scale(f)
    if grad <= 0:
        raise DomainError("field has no gradient; a Mathieu q is undefined")
    kappa = charge_to_mass_for_q(args.q, grad, OMEGA)
    report_path = _sibling(args.out, "_report.json")
    if args.dry_run:
        return _dry(args, {"charge_to_mass": kappa, "outputs": [str(args.out), str(report_path)]})
    dt = 1.0 / args.steps_per_period
    rec = integrate(f, OMEGA, kappa, IonState(args.start, args.velocity), duration=float(args.periods), dt=dt,
                    sample_every=args.sample_every)
    report = {
        "command": "simulate",
        "q": args.q,
        "gradient_scale": grad,
        "charge_to_mass": kappa,
        "omega": OMEGA,
        "periods": args.periods,
        "dt": dt,
        "start": args.start,
        "velocity": args.velocity,
        "samples": int(len(rec.times)),
    }
    try:
        report["secular"] = secular_compare(rec, f).to_dict()
    except (UnstableTrajectory, ValueError) as exc:
        report["secular"] = {"status": "unstable" if isinstance(exc, UnstableTrajectory) else "skipped",
                             "message": str(exc)}
    data = np.column_stack([rec.times, rec.positions, rec.velocities])
    _write_csv(args.out, "t,x,y,z,vx,vy,vz", data)
    _write_json(report_path, report)
    if report["secular"].get("status") == "unstable":
        raise DomainError(report["secular"]["message"])
    return report


# reproduce


def _reproduce_fig1(args) -> dict:
    from trapnet.analysis import boundary_loops, extract_isosurface, sample_pseudopotential
    from trapnet.intersection import theta_x

    out = {}
    for label, theta in (("a", math.pi / 6), ("b", math.pi / 4)):
        f = theta_x(theta)
        g = sample_pseudopotential(f, box=args.box, resolution=args.res)
        level = args.iso if args.iso is not None else 9.0 * (0.5 * args.box) ** 4 * math.cos(theta) ** 4
        mesh = extract_isosurface(g, level)
        stem = f"{args.out_prefix}_fig1{label}"
        _write_csv(f"{stem}_grid.csv", "x,y,z,U", _grid_rows(g))
        _atomic_write(f"{stem}_iso.obj", mesh.to_obj())
        out[label] = {
            "theta_deg": math.degrees(theta),
            "iso_level": level,
            "iso_triangles": int(len(mesh.faces)),
            "boundary_loops": boundary_loops(mesh),
            "z_axis_min_U": float(np.min(g.values[g.values.shape[0] // 2, g.values.shape[1] // 2, :])),
            "y_axis_coefficient": 9 * math.cos(theta) ** 4,
            "z_axis_coefficient": 9 * math.cos(2 * theta) ** 2,
        }
    return out


def _reproduce_fig3(args) -> dict:
    from trapnet.analysis import PerturbedIntersection, analyze_intersection, extract_isosurface, sample_pseudopotential

    theta = math.pi / 6
    out = {}
    for label, ratio in (("neg", -args.ratio), ("zero", 0.0), ("pos", args.ratio)):
        p = PerturbedIntersection(ratio, 1.0, theta)
        ell = math.sqrt(abs(ratio) / 3.0) if ratio else math.sqrt(args.ratio / 3.0)
        box = 2.5 * ell
        rep = analyze_intersection(p, box=box, step=box / 200)
        g = sample_pseudopotential(p.field(), box=box, resolution=args.res)
        mid = args.res // 2
        xy = np.column_stack([g.points(), g.flat_values()])
        cuts = xy[(np.isclose(xy[:, 2], g.axes[2][mid])) | (np.isclose(xy[:, 1], g.axes[1][mid]))]
        # next-to-outermost contour of a geometric ladder below the barrier scale
        level = (p.alpha_H**2 if ratio else (ell**2) ** 2) * 2.0
        mesh = extract_isosurface(g, level)
        stem = f"{args.out_prefix}_fig3_{label}"
        _write_csv(f"{stem}_zeros.csv", "polyline,x,y,z", _zeros_rows(rep.polylines))
        _write_csv(f"{stem}_cuts.csv", "x,y,z,U", cuts)
        _atomic_write(f"{stem}_iso.obj", mesh.to_obj())
        row = {"alpha_H_over_alpha_X": ratio, "length_scale": ell, "box": box, "iso_level": level, **rep.to_dict()}
        _write_json(f"{stem}_report.json", row)
        out[label] = row
    return out


FIG4_MAX_BOX = 0.9


def _reproduce_fig4(args) -> dict:
    from trapnet.analysis import extract_isosurface, sample_pseudopotential
    from trapnet.bem import assemble_and_solve, fit_multipoles, tune_alpha_h
    from trapnet.geometry import tags_for, write_obj

    dims, family = _family(args)
    if args.tune:
        res = tune_alpha_h(family, tuple(dims["parameter"]["bracket"]), tol=1e-3)
        value, sol, fit = res.parameter, res.solution, res.fit
    else:
        value = dims["tuned"]["parameter"]
        sol = assemble_and_solve(family(value))
        fit = fit_multipoles(sol)
    stem = f"{args.out_prefix}_fig4"
    write_obj(sol.mesh, _tmp_target(f"{stem}_mesh.obj"))
    os.replace(_tmp_target(f"{stem}_mesh.obj"), f"{stem}_mesh.obj")
    _write_json(f"{stem}_tags.json", tags_for(sol.mesh))
    # the rails sit at |z| = 1, so the sampling cube must stay inside them
    box = min(args.box, FIG4_MAX_BOX)
    g = sample_pseudopotential(sol, box=box, resolution=args.res)
    level = args.iso if args.iso is not None else float(np.quantile(g.values, 0.05))
    _write_csv(f"{stem}_grid.csv", "x,y,z,U", _grid_rows(g))
    _atomic_write(f"{stem}_iso.obj", extract_isosurface(g, level).to_obj())
    return {"parameter_name": dims["parameter"]["name"], "parameter": value, "tuned_now": bool(args.tune),
            "panels": sol.mesh.n_panels, "box": box, "iso_level": level, "fit": fit.to_dict(),
            "mesh_file": f"{stem}_mesh.obj", "tags_file": f"{stem}_tags.json"}


def _tmp_target(path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return str(path.with_name(f".{path.name}.tmp"))


def _reproduce_table(args) -> dict:
    """The quoted numbers of the text, recomputed (there is no numbered table)."""
    from trapnet.analysis import PerturbedIntersection, barrier_analysis, classify_topology
    from trapnet.geometry import load_reference_dimensions

    th = math.pi / 6
    neg = PerturbedIntersection(-0.03, 1.0, th)
    pos = PerturbedIntersection(0.03, 1.0, th)
    dims = load_reference_dimensions(args.dimensions)
    return {
        "confinement_y_coefficient_theta30": 9 * math.cos(th) ** 4,
        "confinement_z_coefficient_theta30": 9 * math.cos(2 * th) ** 2,
        "confinement_z_coefficient_theta45": 9 * math.cos(math.pi / 2) ** 2,
        "double_junction_z_zero": float(classify_topology(neg).zeros[0][2]),
        "disjoint_y_zero": float(classify_topology(pos).zeros[0][1]),
        "barrier_height_ratio_negative": barrier_analysis(PerturbedIntersection(0.1, -1.0, th), verify=False)[0].height,
        "barrier_height_ratio_positive": barrier_analysis(PerturbedIntersection(0.1, 1.0, th), verify=False)[0].height,
        "reference_geometry": dims.get("tuned", {}),
    }


def cmd_reproduce(args) -> dict:
    target_fns = {"fig1": _reproduce_fig1, "fig3": _reproduce_fig3, "fig4": _reproduce_fig4,
                  "table-none": _reproduce_table}
    report_path = f"{args.out_prefix}_{args.target}_summary.json"
    if args.dry_run:
        return _dry(args, {"target": args.target, "outputs": [report_path]})
    result = target_fns[args.target](args)
    report = {"command": "reproduce", "target": args.target, "results": result}
    _write_json(report_path, report)
    return report


# verify


def cmd_verify(args) -> dict:
    from trapnet.intersection import (IntersectionProblem, alignment, build_constraints, solve_nullspace,
                                      straight_x_paths, theta_x, verify_cotangential_quadrupole)

    if args.dry_run:
        return _dry(args, {"suites": ["uniqueness", "quadrupole_exclusion", "cotangential"]})
    checks = []
    for k in (12, 8, 6, 5, 4):
        th = math.pi / k
        null = solve_nullspace(build_constraints(IntersectionProblem(*straight_x_paths(th))))
        ok = null.dimension == 1 and alignment(null.basis[0], theta_x(th).as_vector((1, 2, 3))) >= 1 - 1e-9
        checks.append({"suite": "uniqueness", "theta": th, "nullspace_dim": null.dimension, "pass": bool(ok)})
        q_only = solve_nullspace(build_constraints(IntersectionProblem(*straight_x_paths(th), max_multipole_order=2)))
        checks.append({"suite": "quadrupole_exclusion", "theta": th, "nullspace_dim": q_only.dimension,
                       "pass": q_only.dimension == 0})
    rng = np.random.default_rng(args.seed)
    for i in range(args.pairs):
        m = 2 + i % 2
        p1, p2 = _random_cotangential_pair(rng, m)
        rep = verify_cotangential_quadrupole(p1, p2)
        checks.append({"suite": "cotangential", "M": rep.M, "expected_M": m, "pass": bool(rep.forced_q_zero
                                                                                         and rep.M == m)})
    failed = [c for c in checks if not c["pass"]]
    report = {"command": "verify", "seed": args.seed, "checks": checks, "n_checks": len(checks),
              "n_failed": len(failed), "passed": not failed}
    if args.out:
        _write_json(args.out, report)
    if failed:
        raise DomainError(f"{len(failed)} verification checks failed")
    return report


def _random_cotangential_pair(rng, m: int):
    """Two analytic paths sharing a tangent and first differing at order m."""
    from trapnet.intersection import arc_length_path

    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    a = rng.normal(size=(m + 1, 3))  # transverse parts of u^(2) .. u^(m+2)
    b = a.copy()
    b[m - 2:] = rng.normal(size=(3, 3))
    return arc_length_path(t, a), arc_length_path(t, b)


# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trapnet", description="Zero-field intersections of RF ion-trap networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, parent=sub):
        p = parent.add_parser(name, help=help_)
        p.set_defaults(func=fn, command_name=name)
        p.add_argument("--dry-run", action="store_true", help="validate inputs without computing")
        return p

    p = add("solve-x", cmd_solve_x, "solve for the field of a straight X crossing")
    p.add_argument("--theta", type=float, required=True, help="half-angle in degrees, (0, 45]")
    p.add_argument("--order", type=int, default=3, help="maximum multipole order (2-4)")
    p.add_argument("--alpha", type=float, default=1.0, help="hexapole strength of the output field")
    p.add_argument("--out", type=Path, default=Path("field.json"))

    p = add("analyze", cmd_analyze, "zero lines, topology, barriers, grid and isosurface")
    p.add_argument("--field", type=Path, required=True)
    p.add_argument("--alpha-h", type=float, default=0.0, help="added homogeneous term alpha_H (V = alpha_H z)")
    p.add_argument("--box", type=_positive, default=1.5, help="half-width of the sampling cube, d")
    p.add_argument("--res", type=_resolution, default=101, help="grid points per axis")
    p.add_argument("--iso", type=_positive, default=None, help="isosurface level of |E|^2")
    p.add_argument("--step", type=_positive, default=0.01, help="continuation step, d")
    p.add_argument("--out-prefix", default="run")

    p = add("trace", cmd_trace, "trace zero-field curves of any multipole field")
    p.add_argument("--field", type=Path, required=True)
    p.add_argument("--seed", type=_triple, action="append", default=[], help="x,y,z start point (repeatable)")
    p.add_argument("--step", type=_positive, default=0.01)
    p.add_argument("--tol", type=_positive, default=None)
    p.add_argument("--box", type=_positive, default=3.0)
    p.add_argument("--out-prefix", default="trace")

    bem = sub.add_parser("bem", help="boundary-element solve and geometry tuning")
    bem_sub = bem.add_subparsers(dest="bem_command", required=True)
    p = add("solve", cmd_bem_solve, "solve a tagged OBJ mesh and fit multipoles", bem_sub)
    p.set_defaults(command_name="bem solve")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--tags", type=Path, required=True, help="JSON {material: volts}")
    p.add_argument("--fit-center", type=_triple, default=np.zeros(3))
    p.add_argument("--fit-radius", type=_positive, default=0.2)
    p.add_argument("--max-panels", type=int, default=8000)
    p.add_argument("--out", type=Path, default=Path("fit.json"))

    p = add("tune", cmd_bem_tune, "bisect a geometry parameter until alpha_H vanishes", bem_sub)
    p.set_defaults(command_name="bem tune")
    _family_args(p)
    p.add_argument("--param-lo", type=float, default=None)
    p.add_argument("--param-hi", type=float, default=None)
    p.add_argument("--tol", type=_positive, default=1e-3, help="stop when |alpha_H| < tol |alpha_X|")
    p.add_argument("--fit-radius", type=_positive, default=0.2)
    p.add_argument("--out", type=Path, default=Path("tuned.json"))

    p = add("simulate", cmd_simulate, "integrate full RF motion and compare with the pseudopotential")
    p.add_argument("--field", type=Path, required=True)
    p.add_argument("--q", type=_positive, default=0.1, help="Mathieu-style drive strength")
    p.add_argument("--periods", type=int, default=200)
    p.add_argument("--steps-per-period", type=int, default=100)
    p.add_argument("--sample-every", type=int, default=1)
    p.add_argument("--start", type=_triple, default=np.array([0.05, 0.05, 0.05]))
    p.add_argument("--velocity", type=_triple, default=np.zeros(3))
    p.add_argument("--out", type=Path, default=Path("traj.csv"))

    p = add("reproduce", cmd_reproduce, "regenerate figure data and quoted numbers")
    p.add_argument("target", choices=["fig1", "fig3", "fig4", "table-none"])
    _family_args(p)
    p.add_argument("--box", type=_positive, default=1.0)
    p.add_argument("--res", type=_resolution, default=41)
    p.add_argument("--iso", type=_positive, default=None)
    p.add_argument("--ratio", type=_positive, default=0.03, help="|alpha_H / alpha_X| for fig3")
    p.add_argument("--tune", action="store_true", help="fig4: rerun the bisection instead of the stored value")
    p.add_argument("--out-prefix", default="repro")

    p = add("verify", cmd_verify, "uniqueness and cotangential property suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=20, help="random cotangential path pairs")
    p.add_argument("--out", type=Path, default=None)
    return parser


def _family_args(p) -> None:
    p.add_argument("--family", default="reference")
    p.add_argument("--dimensions", type=Path, default=None, help="dimension table (default: packaged)")
    p.add_argument("--refine", type=_positive, default=1.0, help="panel density multiplier")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from trapnet.bem import BemError
    from trapnet.dynamics import IntegrationError, UnstableTrajectory

    try:
        report = args.func(args)
    except (DomainError, BemError, IntegrationError, UnstableTrajectory, ValueError) as exc:
        err = _report({"command": args.command_name, "status": "error", "error": type(exc).__name__,
                       "message": str(exc)})
        sys.stdout.write(_dumps(err))
        return 1
    sys.stdout.write(_dumps(_report({"status": "ok", **report} if "status" not in report else report)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
