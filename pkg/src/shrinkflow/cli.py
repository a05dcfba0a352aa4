"""Command line entry point: ``shrinkflow <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .brownian import (
    GeneratorConvention,
    birthless_ensemble,
    martingale_qv_test,
    parse_surface_point,
    simulate_ensemble,
    sphere_time_change_check,
    time_grid,
)
from .coupling import CouplingConfig, run_coupling_schedule, tv_decay_estimate
from .density import (
    delta_density,
    density_from_values,
    solve_density,
    uniform_density,
    write_density_csv,
)
from .errors import ConfigError, InvariantFailure, ShrinkflowError
from .flow import FlowTrajectory, normalize_and_time_maps, run_flow, sphere_oracle
from .mesh import parse_mesh_spec

log = logging.getLogger("shrinkflow")


# ---------------------------------------------------------------------- helpers
def _header(args, conv: GeneratorConvention | None = None) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    return {"shrinkflow_version": __version__, "convention_c": None if conv is None else conv.c, "config": cfg}


def _write_json(path: Path, header: dict, body: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({**header, "report": body}, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(f"cannot serialize {type(x)}")


def _conv(args) -> GeneratorConvention:
    try:
        return GeneratorConvention.parse(args.conv)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_traj(path) -> FlowTrajectory:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise ConfigError(f"no trajectory manifest in {p}")
    traj = FlowTrajectory.load(p)
    if traj.psi is None and len(traj) > 1:
        normalize_and_time_maps(traj)
    return traj


def _mesh(spec: str):
    try:
        return parse_mesh_spec(spec)
    except FileNotFoundError as exc:
        raise ConfigError(f"mesh file not found: {spec}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _point(text: str):
    try:
        return parse_surface_point(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _need_seed(args):
    if args.seed is None:
        raise ConfigError("--seed is required for stochastic subcommands")


def _check(cond: bool, name: str, failures: list, detail=None):
    if not cond:
        failures.append({"check": name, "detail": detail})


def _csv_header(header: dict) -> str:
    return "# " + json.dumps(header, sort_keys=True, default=_json_default) + "\n"


# ---------------------------------------------------------------------- subcommands
def cmd_flow(args) -> dict:
    mesh = _mesh(args.mesh)
    traj = run_flow(mesh, args.dt, args.stop_area, scheme=args.scheme, record_every=args.record_every)
    if len(traj) > 1:
        normalize_and_time_maps(traj)
    traj.config.update({"mesh": args.mesh})
    traj.save(args.out)
    failures = []
    _check(bool(np.all(np.diff(traj.areas) < 0)), "area decreasing", failures)
    bound = mesh.diameter**2 / 4.0
    _check(traj.t_explosion_estimate <= bound or len(traj) == 1, "explosion bound", failures,
           {"estimate": traj.t_explosion_estimate, "bound": bound})
    return {"snapshots": len(traj), "t_explosion_estimate": traj.t_explosion_estimate, "failures": failures}


def cmd_simulate(args) -> dict:
    _need_seed(args)
    conv = _conv(args)
    traj = _load_traj(args.traj)
    start = _point(args.start)
    ens = simulate_ensemble(traj, start, time_grid(args.t0, args.t1, args.dt), conv, args.seed,
                            path_ids=np.arange(args.paths), record_every=args.record_every, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ens.write_csv(out)
    report = {"n_paths": args.paths, "samples": len(ens.times)}
    if args.paths >= 100:
        report["martingale"] = martingale_qv_test(ens.times, ens.positions, conv)
    _write_json(out.with_suffix(".json"), _header(args, conv), report)
    return {"failures": [], **report}


def cmd_birthless(args) -> dict:
    _need_seed(args)
    conv = _conv(args)
    traj = _load_traj(args.traj)
    T_c = traj.t_explosion_estimate
    eps = [float(e) * T_c for e in args.eps.split(",")]
    res = birthless_ensemble(traj, _point(args.start), eps, args.t_star * T_c, args.paths, conv, args.seed,
                             dt=args.dt, cells_subdiv=args.cells)
    body = {k: v for k, v in res.items() if k != "densities"}
    _write_json(Path(args.out), _header(args, conv), body)
    return {"failures": [], "tv_consecutive": res["tv_consecutive"], "tv_uniform": res["tv_uniform"]}


def _parse_window(text: str) -> tuple[float, float]:
    try:
        a, b = (float(x) for x in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"bad window {text!r}; expected a:b") from exc
    return a, b


def cmd_couple(args) -> dict:
    _need_seed(args)
    conv = _conv(args)
    traj = _load_traj(args.traj)
    u0, u1 = _parse_window(args.window)
    cfg = CouplingConfig.from_trajectory(traj, u0)
    a, b = _point(args.start_a), _point(args.start_b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for i in range(args.runs):
        run = run_coupling_schedule(traj, cfg, a, b, conv, args.seed, i, u_end=u1, dt=args.dt)
        run.write_csv(out / f"run_{i:05d}.csv")
        runs.append(run)
    k = np.linspace(0.0, u1 - u0, 6)
    table = tv_decay_estimate(traj, cfg, (a, b), k, len(runs), conv, args.seed, args.dt, runs=runs)
    failures = []
    for i, run in enumerate(runs):
        if run.coupling_time is not None:
            after = run.times >= run.coupling_time
            _check(bool(np.all(run.rho[after] == 0)), "coalescence absorbing", failures, i)
    _write_json(out / "summary.json", _header(args, conv), {"coupling_probability": 1 - table["p_no_coalescence"][-1],
                                                           "tv_table": table})
    return {"failures": failures, "coupling_probability": 1 - table["p_no_coalescence"][-1]}


def cmd_tv_decay(args) -> dict:
    _need_seed(args)
    conv = _conv(args)
    traj = _load_traj(args.traj)
    cfg = CouplingConfig.from_trajectory(traj, args.start_time)
    k = [float(x) for x in args.windows.split(",")]
    table = tv_decay_estimate(traj, cfg, (_point(args.start_a), _point(args.start_b)), k, args.runs, conv,
                              args.seed, args.dt)
    _write_json(Path(args.out), _header(args, conv), table)
    failures = []
    _check(bool(np.all(np.diff(table["p_no_coalescence"]) <= 0)), "P(no coalescence) non-increasing", failures)
    return {"failures": failures, **{k: table[k] for k in ("p_no_coalescence", "log_slope", "log_r2")}}


def cmd_pde(args) -> dict:
    conv = _conv(args)
    traj = _load_traj(args.traj)
    eps = args.eps
    if args.init == "uniform":
        h0 = uniform_density(traj, eps)
    elif args.init.startswith("delta:"):
        h0 = delta_density(traj, eps, int(args.init.split(":", 1)[1]))
    else:
        path = Path(args.init)
        if not path.exists():
            raise ConfigError(f"initial data file not found: {path}")
        h0 = density_from_values(traj, eps, np.loadtxt(path, delimiter=",", ndmin=1))
    t_end = args.t_end if args.t_end is not None else 0.9 * traj.t_explosion_estimate
    fields = solve_density(traj, h0, t_end, args.dt, conv, scheme=args.scheme)
    every = max(1, args.write_every)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_density_csv(out, fields[::every] + ([fields[-1]] if (len(fields) - 1) % every else []))
    masses = np.array([f.mass for f in fields])
    drift = float(np.max(np.abs(masses / masses[0] - 1.0)))
    failures = []
    _check(drift <= 1e-6 or args.scheme != "conservative", "mass conservation", failures, drift)
    _check(min(float(f.values.min()) for f in fields) >= -1e-12, "positivity", failures)
    body = {"mass_drift": drift, "steps": len(fields) - 1}
    _write_json(out.with_suffix(".json"), _header(args, conv), body)
    return {"failures": failures, **body}


def cmd_sphere_check(args) -> dict:
    _need_seed(args)
    conv = _conv(args)
    rep = sphere_time_change_check(sphere_oracle(args.radius), conv, args.paths, args.seed, subdiv=args.subdiv)
    failures = []
    _check(rep["ks_pvalue"] > 0.01, "KS on φ clock", failures, rep["ks_pvalue"])
    _check(abs(rep["phi_qv_slope"] / rep["phi_qv_expected"] - 1) <= 0.05, "φ-clock QV slope", failures)
    _check(rep["max_ratio_error"] <= 0.05, "local QV ratio", failures, rep["max_ratio_error"])
    _write_json(Path(args.out), _header(args, conv), rep)
    return {"failures": failures}


def cmd_verify_all(args) -> dict:
    from .verify import run_suite

    _need_seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_suite(args.seed, quick=args.quick, out_dir=out)
    failures = [r for r in results if not r["passed"]]
    _write_json(out / "verify.json", _header(args), {"checks": results})
    return {"failures": failures, "checks": len(results)}


# ---------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shrinkflow", description="Mean curvature flow and Brownian motion laboratory.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def stochastic(sp, conv_default="half"):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--conv", default=conv_default, help="generator coefficient: half (c=1/2) or one (c=1)")

    sp = sub.add_parser("flow", help="run mean curvature flow and store the trajectory")
    sp.add_argument("--mesh", required=True, help="OFF/OBJ file or icosphere:K[:R] / ellipsoid:a,b,c:K")
    sp.add_argument("--dt", type=float, default=1e-4)
    sp.add_argument("--stop-area", type=float, default=0.05)
    sp.add_argument("--scheme", choices=["semi-implicit", "explicit"], default="semi-implicit")
    sp.add_argument("--record-every", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_flow)

    sp = sub.add_parser("simulate", help="simulate an ensemble of paths")
    sp.add_argument("--traj", required=True)
    sp.add_argument("--start", required=True, help='"b0,b1,b2@tK"')
    sp.add_argument("--t0", type=float, required=True)
    sp.add_argument("--t1", type=float, required=True)
    sp.add_argument("--dt", type=float, default=1e-4)
    sp.add_argument("--paths", type=int, default=1000)
    sp.add_argument("--record-every", type=int, default=1)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--out", required=True)
    stochastic(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("birthless", help="laws of processes frozen until eps")
    sp.add_argument("--traj", required=True)
    sp.add_argument("--start", required=True)
    sp.add_argument("--eps", default="0.2,0.1,0.05,0.025", help="fractions of T_c")
    sp.add_argument("--t-star", type=float, default=0.9, help="fraction of T_c")
    sp.add_argument("--paths", type=int, default=5000)
    sp.add_argument("--dt", type=float, default=1e-4)
    sp.add_argument("--cells", type=int, default=1, help="subdivision level of the binning icosphere")
    sp.add_argument("--out", required=True)
    stochastic(sp)
    sp.set_defaults(func=cmd_birthless)

    sp = sub.add_parser("couple", help="mirror coupling runs")
    sp.add_argument("--traj", required=True)
    sp.add_argument("--start-a", required=True)
    sp.add_argument("--start-b", required=True)
    sp.add_argument("--window", required=True, help="u0:u1 in backward time")
    sp.add_argument("--runs", type=int, default=500)
    sp.add_argument("--dt", type=float, default=2.5e-3)
    sp.add_argument("--out", required=True)
    stochastic(sp)
    sp.set_defaults(func=cmd_couple)

    sp = sub.add_parser("tv-decay", help="P(no coalescence) against window length")
    sp.add_argument("--traj", required=True)
    sp.add_argument("--start-a", required=True)
    sp.add_argument("--start-b", required=True)
    sp.add_argument("--start-time", type=float, required=True)
    sp.add_argument("--windows", required=True, help="comma separated window lengths")
    sp.add_argument("--runs", type=int, default=500)
    sp.add_argument("--dt", type=float, default=2.5e-3)
    sp.add_argument("--out", required=True)
    stochastic(sp)
    sp.set_defaults(func=cmd_tv_decay)

    sp = sub.add_parser("pde", help="solve the backward density equation")
    sp.add_argument("--traj", required=True)
    sp.add_argument("--init", default="uniform", help="uniform | delta:VERTEX | values.csv")
    sp.add_argument("--eps", type=float, required=True, help="start backward time")
    sp.add_argument("--t-end", type=float, default=None)
    sp.add_argument("--dt", type=float, default=1e-4)
    sp.add_argument("--scheme", choices=["conservative", "potential"], default="conservative")
    sp.add_argument("--write-every", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.add_argument("--conv", default="half")
    sp.set_defaults(func=cmd_pde)

    sp = sub.add_parser("sphere-check", help="time change check on the round sphere")
    sp.add_argument("--radius", type=float, default=1.0)
    sp.add_argument("--subdiv", type=int, default=3)
    sp.add_argument("--paths", type=int, default=2000)
    sp.add_argument("--out", required=True)
    stochastic(sp)
    sp.set_defaults(func=cmd_sphere_check)

    sp = sub.add_parser("verify-all", help="run the verification suite")
    sp.add_argument("--quick", action="store_true")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default="verify-out")
    sp.set_defaults(func=cmd_verify_all)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    start = time.perf_counter()
    try:
        result = args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc)}), file=sys.stderr)
        return 2
    except (OSError, ShrinkflowError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    log.info("finished in %.1f s", time.perf_counter() - start)
    failures = result.get("failures", [])
    if failures:
        err = InvariantFailure(f"{len(failures)} invariant check(s) failed")
        print(json.dumps({"error": type(err).__name__, "message": str(err), "failures": failures},
                         default=_json_default), file=sys.stderr)
        return 1
    print(json.dumps({k: v for k, v in result.items() if k != "failures"}, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
