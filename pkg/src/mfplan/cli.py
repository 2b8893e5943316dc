"""Command-line front end: gen, solve, kl, diagnose, trace, report.

Every run writes a manifest (hash of the resolved inputs, package and
library versions, seeds) so that re-running from the same inputs reproduces
report.json bit for bit.  Failures exit nonzero with one JSON error object
on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np
import scipy

from . import __version__
from . import grid as G
from .errors import MFPlanError
from .grid import GridSpec, density_to_csv, read_field, write_field
from .model import ModelSpec
from .primal import SolverConfig, solve_planning

log = logging.getLogger("mfplan")


def _load_grid(path) -> GridSpec:
    with open(path) as fh:
        return GridSpec.from_json(json.load(fh))


def _hash_payload(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, default=repr).encode()).hexdigest()


def _write_manifest(outdir, command, inputs, seeds=None) -> None:
    manifest = {
        "command": command,
        "inputs": inputs,
        "input_hash": _hash_payload(inputs),
        "seeds": seeds or {},
        "versions": {
            "mfplan": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

GEN_KINDS = ("gaussian", "box", "bimodal", "ring")


def make_density(grid: GridSpec, kind: str, params: dict, seed: int = 0) -> np.ndarray:
    """Normalized nonnegative density of the requested family; deterministic."""
    mesh = grid.cell_center_mesh()
    if kind == "gaussian":
        c = np.atleast_1d(np.asarray(params.get("center", [0.0] * grid.d), dtype=float))
        s = float(params.get("sigma", 0.25 * grid.R))
        rsq = sum((mesh[j] - c[j]) ** 2 for j in range(grid.d))
        m = np.exp(-rsq / (2 * s * s))
    elif kind == "box":
        c = np.atleast_1d(np.asarray(params.get("center", [0.0] * grid.d), dtype=float))
        half = float(params.get("halfwidth", 0.5 * grid.R))
        inside = np.ones(grid.space_shape, dtype=bool)
        for j in range(grid.d):
            inside &= np.abs(mesh[j] - c[j]) <= half
        m = inside.astype(float)
    elif kind == "bimodal":
        sep = float(params.get("separation", grid.R))
        s = float(params.get("sigma", 0.2 * grid.R))
        c1 = np.zeros(grid.d)
        c1[0] = -sep / 2
        c2 = -c1
        r1 = sum((mesh[j] - c1[j]) ** 2 for j in range(grid.d))
        r2 = sum((mesh[j] - c2[j]) ** 2 for j in range(grid.d))
        m = 0.5 * np.exp(-r1 / (2 * s * s)) + 0.5 * np.exp(-r2 / (2 * s * s))
    elif kind == "ring":
        if grid.d != 2:
            raise MFPlanError("ring densities need d = 2")
        radius = float(params.get("radius", 0.5 * grid.R))
        s = float(params.get("sigma", 0.15 * grid.R))
        rr = np.sqrt(mesh[0] ** 2 + mesh[1] ** 2)
        m = np.exp(-((rr - radius) ** 2) / (2 * s * s))
    else:
        raise MFPlanError(f"unknown density kind {kind!r}; choose from {GEN_KINDS}")
    total = m.sum() * grid.dx**grid.d
    if total <= 0:
        raise MFPlanError("generated density has zero mass (parameters degenerate)")
    return m / total


def cmd_gen(args) -> int:
    grid = _load_grid(args.grid)
    params = json.loads(args.params) if args.params else {}
    if args.center is not None:
        params["center"] = [float(v) for v in args.center.split(",")]
    if args.sigma is not None:
        params["sigma"] = args.sigma
    m = make_density(grid, args.kind, params, args.seed)
    write_field(args.out, grid, "density", m[None])
    if grid.d == 1 and args.csv:
        with open(args.out + ".csv", "w") as fh:
            fh.write("x,m\n")
            for x, v in zip(grid.x_centers, m):
                fh.write(f"{x!r},{v!r}\n")
    log.info("wrote %s (mass %.15f)", args.out, m.sum() * grid.dx**grid.d)
    return 0


def _read_density(path, grid: GridSpec) -> np.ndarray:
    fgrid, kind, arrays = read_field(path)
    if fgrid.to_json() != grid.to_json():
        raise MFPlanError(f"{path}: grid header does not match the run grid")
    return arrays[0][0] if arrays[0].ndim == 1 + grid.d else arrays[0]


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def run_solve(model, grid, m0, m1, config, outdir):
    os.makedirs(outdir, exist_ok=True)
    sol = solve_planning(model, grid, m0, m1, config)
    from .dual import duality_report

    rep = duality_report(model, sol)
    write_field(os.path.join(outdir, "m.field"), grid, "density", sol.m)
    write_field(os.path.join(outdir, "w.field"), grid, "momentum", list(sol.w))
    write_field(os.path.join(outdir, "u.field"), grid, "scalar", sol.u)
    write_field(os.path.join(outdir, "alpha.field"), grid, "scalar", sol.alpha)
    sol.history.to_csv(os.path.join(outdir, "history.csv"))
    rep.save(os.path.join(outdir, "report.json"))
    with open(os.path.join(outdir, "grid.json"), "w") as fh:
        json.dump(grid.to_json(), fh, sort_keys=True)
        fh.write("\n")
    model.save(os.path.join(outdir, "model.json"))
    with open(os.path.join(outdir, "solver.json"), "w") as fh:
        json.dump(config.to_json(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    if grid.d == 1:
        density_to_csv(os.path.join(outdir, "m.csv"), grid, sol.m)
    return sol, rep


def cmd_solve(args) -> int:
    grid = _load_grid(args.grid)
    model = ModelSpec.load(args.model, field_dir=os.path.dirname(args.model) or ".")
    with open(args.config) as fh:
        config = SolverConfig.from_json(json.load(fh))
    m0 = _read_density(args.m0, grid)
    m1 = _read_density(args.m1, grid)
    sol, rep = run_solve(model, grid, m0, m1, config, args.out)
    _write_manifest(args.out, "solve", {
        "grid": grid.to_json(),
        "model": model.to_json(),
        "config": config.to_json(),
        "m0_sha": _hash_payload(m0.tolist()),
        "m1_sha": _hash_payload(m1.tolist()),
    })
    log.info("solved in %d iterations (%s); gap=%.3e", sol.iterations,
             sol.stop_reason, rep.gap)
    if args.figures:
        from .plots import render_run

        for path in render_run(args.out):
            log.info("figure %s", path)
    print(json.dumps({"iterations": sol.iterations, "converged": sol.converged,
                      "b": rep.b, "a": rep.a, "gap": rep.gap,
                      "rel_gap": rep.rel_gap}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------


def rebuild_solution(rundir):
    """Reload a run directory into a Solution for re-diagnosis."""
    from .primal import Solution, History, recover_velocity

    grid = _load_grid(os.path.join(rundir, "grid.json"))
    model = ModelSpec.load(os.path.join(rundir, "model.json"), field_dir=rundir)
    _, _, (m,) = read_field(os.path.join(rundir, "m.field"))
    _, _, w = read_field(os.path.join(rundir, "w.field"))
    _, _, (u,) = read_field(os.path.join(rundir, "u.field"))
    _, _, (alpha,) = read_field(os.path.join(rundir, "alpha.field"))
    with open(os.path.join(rundir, "solver.json")) as fh:
        config = SolverConfig.from_json(json.load(fh))
    floor = config.density_floor
    if floor is None:
        floor = 1e-8 * float(m.max())
    v, mask = recover_velocity(grid, m, tuple(w), floor)
    return Solution(
        grid=grid, model=model, m=m, w=tuple(w), v=v, v_mask=mask,
        u=u, alpha=alpha, multiplier=u, multiplier_scale=1.0,
        history=History(), config=config, density_floor=floor,
        iterations=0, converged=True, stop_reason="reloaded", wall_time=0.0,
    )


def cmd_diagnose(args) -> int:
    from .dual import duality_report

    sol = rebuild_solution(args.run)
    rep = duality_report(sol.model, sol)
    rep.save(os.path.join(args.run, "report.json"))
    print(json.dumps(rep.to_json(), sort_keys=True))
    failures = {}
    if args.tol_gap is not None and abs(rep.rel_gap) > args.tol_gap:
        failures["rel_gap"] = rep.rel_gap
    if args.tol_residual is not None and rep.continuity_residual_max > args.tol_residual:
        failures["continuity_residual_max"] = rep.continuity_residual_max
    if args.tol_hj is not None and rep.hj_violation_support > args.tol_hj:
        failures["hj_violation_support"] = rep.hj_violation_support
    if failures:
        print(json.dumps({"error": {"type": "CertificateExceeded",
                                    "failures": failures}}, sort_keys=True),
              file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# kl
# ---------------------------------------------------------------------------


def cmd_kl(args) -> int:
    from .metrics import kl_distance, kl_upper_bound, w2_1d

    grid = _load_grid(args.grid)
    m0 = _read_density(args.m0, grid)
    m1 = _read_density(args.m1, grid)
    a_grid = [float(v) for v in args.a.split(",")]
    config = None
    if args.config:
        with open(args.config) as fh:
            config = SolverConfig.from_json(json.load(fh))
    res = kl_distance(grid, m0, m1, a_grid, args.p, config, refine=args.refine)
    out = {
        "p": args.p,
        "costs": {repr(a): c for a, c in sorted(res["costs"].items())},
        "d_kl": res["d_kl"],
        "argmin_a": res["argmin_a"],
        "upper_bounds": {repr(a): kl_upper_bound(grid, m0, m1, a, args.p)
                         for a in a_grid},
    }
    if grid.d == 1:
        out["w2"] = w2_1d(grid, m0, m1)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "kl.json"), "w") as fh:
            json.dump(out, fh, sort_keys=True, indent=1)
            fh.write("\n")
        _write_manifest(args.out, "kl", {
            "grid": grid.to_json(), "p": args.p, "a_grid": a_grid,
            "m0_sha": _hash_payload(m0.tolist()),
            "m1_sha": _hash_payload(m1.tolist()),
        })
    print(json.dumps(out, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


def cmd_trace(args) -> int:
    from .lagrangian import (path_optimality_check, sample_particles,
                             trace_ensemble, transport_plan_summary)

    sol = rebuild_solution(args.run)
    grid = sol.grid
    x0 = sample_particles(grid, sol.m[0], args.n, args.seed)
    ens = trace_ensemble(sol, x0, steps=args.steps)
    pos = ens["positions"]
    times = ens["times"]
    h = times[1] - times[0]
    stride = max(1, args.steps // args.csv_steps) if args.csv_steps else 1

    out_csv = args.out or os.path.join(args.run, "paths.csv")
    cols = ["id", "t"] + [f"x{j}" for j in range(grid.d)] + ["cost_so_far"]
    n = pos.shape[1]
    cum = ens["cost_cumulative"]
    with open(out_csv, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for pid in range(n):
            for j in range(0, times.size, stride):
                row = [str(pid), repr(float(times[j]))]
                row += [repr(float(c)) for c in pos[j, pid]]
                row.append(repr(float(cum[j, pid])))
                fh.write(",".join(row) + "\n")

    chk = path_optimality_check(sol, ens, seed=args.seed + 1)
    plan = transport_plan_summary(sol, ens)
    summary = {
        "n": args.n, "seed": args.seed, "steps": args.steps,
        "mean_energy": float(ens["energy"].mean()),
        "mean_cost": float(ens["path_cost"].mean()),
        "median_abs_r": chk["median_abs_r"],
        "p95_abs_r": chk["p95_abs_r"],
        "beat_fraction": chk["beat_fraction"],
        "low_confidence_fraction": float(ens["low_confidence"].mean()),
        "plan_marginal_end_l1": float(np.abs(
            plan["marginal_end"] - plan["marginal_start"]).sum()),
    }
    with open(os.path.join(args.run, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(json.dumps(summary, sort_keys=True))
    if args.figures:
        from .plots import render_paths

        render_paths(args.run, out_csv)
    return 0


def cmd_report(args) -> int:
    from .plots import render_run

    written = render_run(args.run, args.out)
    print(json.dumps({"figures": written}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mfplan",
        description="Deterministic mean field planning: solve, certify, trace.",
    )
    ap.add_argument("--threads", type=int, default=1,
                    help="worker threads for the transform solves")
    ap.add_argument("--log-level", default="warning",
                    choices=("debug", "info", "warning", "error"))
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a test density field")
    g.add_argument("--kind", required=True, choices=GEN_KINDS)
    g.add_argument("--grid", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--params", default=None, help="JSON object of parameters")
    g.add_argument("--center", default=None, help="comma-separated center")
    g.add_argument("--sigma", type=float, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--csv", action="store_true")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="solve a planning problem")
    s.add_argument("--model", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--m0", required=True)
    s.add_argument("--m1", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--figures", action="store_true",
                   help="render matplotlib figures into the run directory")
    s.set_defaults(func=cmd_solve)

    d = sub.add_parser("diagnose", help="recompute certificates for a run")
    d.add_argument("--run", required=True)
    d.add_argument("--tol-gap", type=float, default=None)
    d.add_argument("--tol-residual", type=float, default=None)
    d.add_argument("--tol-hj", type=float, default=None)
    d.set_defaults(func=cmd_diagnose)

    k = sub.add_parser("kl", help="Kantorovich-Lebesgue costs")
    k.add_argument("--m0", required=True)
    k.add_argument("--m1", required=True)
    k.add_argument("--grid", required=True)
    k.add_argument("--p", type=float, default=2.0)
    k.add_argument("--a", default="1.0", help="comma-separated parameter grid")
    k.add_argument("--refine", action="store_true")
    k.add_argument("--config", default=None)
    k.add_argument("--out", default=None)
    k.set_defaults(func=cmd_kl)

    t = sub.add_parser("trace", help="trace characteristics through a run")
    t.add_argument("--run", required=True)
    t.add_argument("--n", type=int, default=10000)
    t.add_argument("--seed", type=int, default=7)
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--csv-steps", type=int, default=50,
                   help="time samples per path written to the CSV")
    t.add_argument("--out", default=None)
    t.add_argument("--figures", action="store_true")
    t.set_defaults(func=cmd_trace)

    r = sub.add_parser("report", help="render figures for a run directory")
    r.add_argument("--run", required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    G.FFT_WORKERS = max(1, args.threads)
    try:
        return args.func(args)
    except MFPlanError as exc:
        print(json.dumps({"error": exc.payload()}, sort_keys=True), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(json.dumps({"error": {"type": "FileNotFound", "message": str(exc)}},
                         sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
