"""Command-line entry point: declarative TOML run specs and artifacts.

Subcommands:

    run          integrate an ensemble, writing step CSV / halving log /
                 summary / optional VTK snapshots
    convergence  temporal-refinement study table (stdout + CSV)
    eig          smallest mixed Dirichlet-Neumann Laplace eigenvalue
    mesh-info    metrics of a mesh file
    calibrate-c  empirical inverse-estimate constant for the
                 gradient-based timestep conditions

All numeric pipelines are deterministic: the same spec and seed yield
byte-identical CSV output.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import numpy as np

from . import ensemble, experiments, linsolve, vtkio
from .fespace import ThetaParams, build_space, interpolate
from .mesh import (BoundaryPartition, generate_channel, generate_rectangle,
                   generate_unit_square, import_mesh, mesh_metrics,
                   parse_mesh_text)

RATE_BAND = (1.85, 2.15)


def load_spec(path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise SystemExit(f"error: cannot parse spec {path}: {exc}")


def _require(table: dict, key: str, where: str):
    if key not in table:
        raise SystemExit(f"error: missing field '{key}' in [{where}]")
    return table[key]


def build_mesh(spec: dict):
    mtab = _require(spec, "mesh", "top level")
    gen = mtab.get("generator")
    if gen == "unit_square":
        return generate_unit_square(int(_require(mtab, "n", "mesh")))
    if gen == "rectangle":
        return generate_rectangle(mtab["length"], mtab["height"],
                                  int(mtab["nx"]), int(mtab["ny"]))
    if gen == "channel":
        hole = mtab.get("hole")
        return generate_channel(mtab["length"], mtab["height"],
                                int(mtab["nx"]), int(mtab["ny"]),
                                hole=tuple(hole) if hole else None)
    if gen == "contraction":
        from .mesh import generate_polygon_mesh
        return generate_polygon_mesh(experiments.contraction_polygon(),
                                     float(mtab.get("h", 0.12)),
                                     experiments.contraction_tag)
    if gen is None and "path" in mtab:
        return read_mesh_file(mtab["path"])
    raise SystemExit(f"error: unknown mesh generator {gen!r} in [mesh]")


def read_mesh_file(path):
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".msh":
        return import_mesh(text)
    return parse_mesh_text(text)


def build_partition(spec: dict) -> BoundaryPartition:
    btab = spec.get("boundary", {})
    return BoundaryPartition(
        dirichlet_tags=tuple(btab.get("dirichlet", (1, 2, 3, 4))),
        open_tags=tuple(btab.get("open", ())))


def build_config(spec: dict, space) -> ensemble.EnsembleConfig:
    etab = _require(spec, "ensemble", "top level")
    ttab = _require(spec, "time", "top level")
    alg = _require(etab, "algorithm", "ensemble")
    if alg not in ensemble.ALGORITHMS:
        raise SystemExit(f"error: unknown algorithm {alg!r} in [ensemble]; "
                         f"choose one of {', '.join(ensemble.ALGORITHMS)}")
    nus = tuple(float(v) for v in _require(etab, "nus", "ensemble"))
    gamma = etab.get("gamma", 1.0)
    if gamma == "auto":
        gamma = ensemble.select_gamma(nus)["gamma"]
    elif not (0.0 <= float(gamma) < 2.0):
        raise SystemExit(f"error: gamma={gamma} outside the valid range "
                         "[0, 2) in [ensemble]")
    length = etab.get("L", 0.0)
    if isinstance(length, str):
        if not length.startswith("auto:"):
            raise SystemExit(f"error: bad L value {length!r}; use a number "
                             "or 'auto:<tau>'")
        tau = float(length.split(":", 1)[1])
        length = tau * inlet_diameter(space)
    theta = ThetaParams(epsilon=float(etab.get("epsilon", 0.01)),
                        U0=float(etab.get("U0", 1.0)))
    try:
        return ensemble.EnsembleConfig(
            nus=nus, algorithm=alg,
            dt0=float(_require(ttab, "dt0", "time")),
            t_final=float(_require(ttab, "t_final", "time")),
            gamma=float(gamma), L=float(length), theta=theta,
            cfl_active=bool(ttab.get("cfl", True)),
            safety=float(ttab.get("safety", 1.0)),
            inv_const_C=float(etab.get("C", 1.0)),
            dt_floor=float(ttab.get("floor", 1e-8)))
    except ValueError as exc:
        raise SystemExit(f"error: invalid run configuration: {exc}")


def inlet_diameter(space) -> float:
    """Extent of the Dirichlet boundary edges tagged 1 (the inlet)."""
    mask = space.mesh.boundary_tags == 1
    if not mask.any():
        return 1.0
    pts = space.mesh.vertices[space.mesh.boundary_edges[mask].ravel()]
    span = pts.max(axis=0) - pts.min(axis=0)
    return float(span.max())


def build_problem(spec: dict, space, config):
    """Initial data, forcings and boundary data from the [problem] table."""
    ptab = spec.get("problem", {"kind": "rest"})
    kind = ptab.get("kind", "rest")
    J = config.J
    if kind == "rest":
        initial = np.zeros((J, space.n_vel))
        return initial, None, None, None
    if kind == "mms":
        eps = float(ptab.get("eps", 0.1))
        nu = float(ptab.get("nu", 1.0))
        fam = experiments.mms_ensemble(J, eps, nu)
        initial = np.array([interpolate(space, fam["velocity"][j], 0.0).values
                            for j in range(J)])
        history = None
        if config.algorithm in ensemble.SECOND_ORDER:
            history = np.array([
                interpolate(space, fam["velocity"][j], -config.dt0).values
                for j in range(J)])
        return initial, fam["forcing"], fam["velocity"], history
    if kind == "cylinder":
        g = experiments.cylinder_inflow(
            height=float(ptab.get("height", 0.41)),
            umax=float(ptab.get("umax", 1.5)),
            period=float(ptab.get("period", 8.0)))
        initial = np.zeros((J, space.n_vel))
        return initial, None, [g] * J, None
    if kind == "contraction":
        cd = experiments.contraction_config()
        bcs = cd["inlet_bcs"][:J]
        forcings = cd["stokes_forcings"][:J]
        if len(bcs) < J:
            raise SystemExit("error: the contraction problem provides "
                             f"{len(bcs)} members, spec asks for {J}")
        initial = np.array([
            experiments.solve_stokes(space, config.nus[j],
                                     forcing=forcings[j], bc=bcs[j])[0]
            for j in range(J)])
        return initial, forcings, bcs, None
    raise SystemExit(f"error: unknown problem kind {kind!r} in [problem]")


def cmd_run(args) -> int:
    spec = load_spec(args.spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = build_mesh(spec)
    part = build_partition(spec)
    space = build_space(mesh, part)
    config = build_config(spec, space)
    initial, forcings, bc, history = build_problem(spec, space, config)

    otab = spec.get("outputs", {})
    vtk_every = int(otab.get("vtk_every", 0))
    linsolve.reset_counters()

    rows = []

    def on_step(state, rep):
        worst = max((m for d in rep.margins for m in d.values()), default=0.0)
        rows.append([rep.step, rep.t, rep.dt, worst]
                    + list(rep.energies) + list(rep.boundary_flux))
        if vtk_every and rep.step % vtk_every == 0:
            text = vtkio.snapshot_to_vtk(space, state.u[0])
            vtkio.write_vtk(out / f"snapshot_{rep.step:06d}.vtk", text)

    result = ensemble.run(space, config, initial, forcings=forcings, bc=bc,
                          history=history, on_step=on_step)

    with open(out / "steps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t_end", "dt", "worst_cfl_margin"]
                   + [f"energy_{j}" for j in range(config.J)]
                   + [f"boundary_flux_{j}" for j in range(config.J)])
        w.writerows(rows)
    with open(out / "halvings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "old_dt", "new_dt"])
        for h in result.halvings:
            w.writerow([h["t"], h["old_dt"], h["new_dt"]])

    steps = len(result.reports)
    summary = [
        f"algorithm {config.algorithm}, J={config.J}",
        f"steps {steps}, final t {result.state.t!r}, final dt {result.state.dt!r}",
        f"factorizations {linsolve.COUNTERS['factorizations']}, "
        f"solves {linsolve.COUNTERS['solves']}",
        f"halvings {len(result.halvings)}",
        f"final energies {' '.join(repr(float(e)) for e in result.reports[-1].energies)}",
    ]
    if result.lambda1 is not None:
        summary.append(f"lambda1 {result.lambda1!r}")
    if result.sigma is not None:
        summary.append(f"sigma {float(result.sigma)!r}")
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def cmd_convergence(args) -> int:
    spec = load_spec(args.spec)
    stab = spec.get("study", {})
    dts = [float(v) for v in stab.get("dts", (0.02, 0.01, 0.005, 0.0025))]
    table = experiments.convergence_study(
        dts, n=int(stab.get("n", 10)), J=int(stab.get("J", 2)),
        eps=float(stab.get("eps", 0.1)), nu=float(stab.get("nu", 1.0)),
        algorithm=stab.get("algorithm", "A4"),
        gamma=float(stab.get("gamma", 1.5)),
        t_final=float(stab.get("t_final", 1.0)))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    J = table["velocity_errors"].shape[1]
    header = ["dt"]
    for j in range(J):
        header += [f"vel_err_{j}", f"vel_rate_{j}", f"pr_err_{j}", f"pr_rate_{j}"]
    lines = [",".join(header)]
    for i, dt in enumerate(table["dts"]):
        row = [repr(float(dt))]
        for j in range(J):
            vr = (repr(float(table["velocity_rates"][i - 1, j]))
                  if i > 0 else "")
            pr = (repr(float(table["pressure_rates"][i - 1, j]))
                  if i > 0 else "")
            row += [repr(float(table["velocity_errors"][i, j])), vr,
                    repr(float(table["pressure_errors"][i, j])), pr]
        lines.append(",".join(row))
    (out / "convergence.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if table["velocity_rates"].size:
        ok = bool(np.all((table["velocity_rates"] >= RATE_BAND[0])
                         & (table["velocity_rates"] <= RATE_BAND[1])))
        print(f"velocity rates within [{RATE_BAND[0]}, {RATE_BAND[1]}]: "
              + ("PASS" if ok else "FAIL"))
    return 0


def cmd_eig(args) -> int:
    spec = load_spec(args.spec)
    mesh = build_mesh(spec)
    part = build_partition(spec)
    space = build_space(mesh, part)
    lam = linsolve.lambda1(space)
    if lam == 0.0:
        print("lambda1 0.0 (no Dirichlet boundary: the constant mode is free)")
    else:
        print(f"lambda1 {lam!r}")
    return 0


def cmd_mesh_info(args) -> int:
    mesh = read_mesh_file(args.path)
    m = mesh_metrics(mesh)
    print(f"vertices {mesh.n_vertices}")
    print(f"triangles {mesh.n_triangles}")
    print(f"boundary_edges {len(mesh.boundary_edges)}")
    print(f"h {m['h']!r}")
    print(f"diam {m['diam']!r}")
    print(f"area {m['area']!r}")
    return 0


def cmd_calibrate_c(args) -> int:
    spec = load_spec(args.spec)
    mesh = build_mesh(spec)
    part = build_partition(spec)
    space = build_space(mesh, part)
    c = experiments.calibrate_inverse_constant(space, seed=args.seed)
    print(f"inverse_constant {c!r}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ensflow",
        description="Ensemble incompressible-flow solver (shared-matrix "
                    "time stepping on Taylor-Hood elements)")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap (ENSFLOW_THREADS overrides)")
    parser.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="integrate an ensemble from a spec")
    p_run.add_argument("--spec", required=True)
    p_run.add_argument("--out-dir", default="out")
    p_run.set_defaults(func=cmd_run)

    p_conv = sub.add_parser("convergence", help="temporal refinement study")
    p_conv.add_argument("--spec", required=True)
    p_conv.add_argument("--out-dir", default="out")
    p_conv.set_defaults(func=cmd_convergence)

    p_eig = sub.add_parser("eig", help="smallest constrained eigenvalue")
    p_eig.add_argument("--spec", required=True)
    p_eig.set_defaults(func=cmd_eig)

    p_mi = sub.add_parser("mesh-info", help="metrics of a mesh file")
    p_mi.add_argument("path")
    p_mi.set_defaults(func=cmd_mesh_info)

    p_cc = sub.add_parser("calibrate-c", help="inverse-estimate constant")
    p_cc.add_argument("--spec", required=True)
    p_cc.set_defaults(func=cmd_calibrate_c)

    args = parser.parse_args(argv)
    threads = os.environ.get("ENSFLOW_THREADS", args.threads)
    if threads is not None:
        os.environ["OMP_NUM_THREADS"] = str(threads)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
