"""``edfq`` command line: simulate, fluid, mvsm, compare, fcfs-check, validate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .fluid import FluidData, SolverConfig, SolverError, fme_residuals, solve
from .measures import FiniteMeasure, MeasurePath, ScalarPath
from .simulator import SimConfig, simulate
from .skorohod import mvsm_solve

SERIES = ("X", "Q", "K", "R")


def _load(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _int_list(s: str) -> list[int]:
    """``"100,400"`` or a range ``"0-49"``."""
    if "-" in s and "," not in s:
        lo, hi = s.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in s.split(",") if x]


def cmd_simulate(a) -> int:
    cfg = _load(a.config)
    over = {k: v for k, v in {"N": a.N, "T": a.T, "snapshot_dt": a.snapshot_dt}.items() if v is not None}
    sim = SimConfig.from_config(cfg, **over)
    sim.record_measures = a.measures is not None
    sim.record_epochs = a.events is not None
    seed = a.seed if a.seed is not None else int(cfg.get("seed", 0))
    tr = simulate(sim, seed)
    _write(a.out, tr.to_csv())
    if a.events:
        _write(a.events, tr.events_csv())
    if a.measures:
        doc = {
            "N": tr.N, "seed": seed, "times": tr.snap_t.tolist(),
            "nu": [tr.nu_measure(i).to_dict() for i in range(tr.snap_t.size)],
            "queue": [tr.q_measure(i).to_dict() for i in range(tr.snap_t.size)],
        }
        _write(a.measures, harness.dumps(doc))
    if a.plot_data:
        _write(a.plot_data, harness.plot_rows({k: (tr.snap_t, tr.scaled(k)) for k in SERIES}))
    return 0


def cmd_fluid(a) -> int:
    cfg = _load(a.config)
    data = FluidData.from_config(cfg)
    T = a.T if a.T is not None else float(cfg.get("T", 10.0))
    sol = solve(data, T, SolverConfig(dt=a.dt if a.dt is not None else cfg.get("dt"), mode=a.mode))
    _write(a.out, sol.to_csv(a.every))
    rep = {
        "dt": sol.dt, "window": sol.window, "mode": sol.mode, "residuals": fme_residuals(sol),
        "max_picard_ratio": sol.diagnostics.get("max_ratio_from_2"),
        "regime_switches": sol.diagnostics.get("regime_switches"),
    }
    if a.report:
        _write(a.report, harness.dumps(rep))
    else:
        sys.stderr.write(harness.dumps(rep) + "\n")
    if a.plot_data:
        _write(a.plot_data, harness.plot_rows({k: (sol.t, getattr(sol, k)) for k in SERIES}))
    return 0


def _measure_path(doc: dict) -> MeasurePath:
    return MeasurePath(doc["times"], [FiniteMeasure.from_dict(m) for m in doc["measures"]], monotone=True)


def cmd_mvsm(a) -> int:
    alpha = _measure_path(_load(a.alpha))
    mu_doc = _load(a.mu)
    mu = ScalarPath(mu_doc["times"], mu_doc["values"], nondecreasing=True, interp=mu_doc.get("interp", "linear"))
    grid = _load(a.alpha).get("x_grid")
    sol = mvsm_solve(alpha, mu, x_grid=grid, alpha_interp=a.interp)
    atomic = all(m.ac_knots.size == 0 for m in alpha.measures)
    A = np.vstack([m.cdf_at(sol.x_grid) for m in alpha.measures])
    doc = {
        "times": sol.times.tolist(),
        "x_grid": sol.x_grid.tolist(),
        "measures": [sol.xi_measure(k, atomic).to_dict() for k in range(sol.times.size)],
        "iota": sol.iota.tolist(),
        "residuals": sol.residuals(A, alpha.totals()),
    }
    _write(a.out, harness.dumps(doc))
    return 0


def cmd_compare(a) -> int:
    cfg = _load(a.config)
    spec = harness.ExperimentSpec(
        name=cfg.get("name", Path(a.config).stem), config=cfg, N_list=_int_list(a.N), replications=a.reps,
        T=a.T if a.T is not None else float(cfg.get("T", 10.0)), snapshot_dt=a.snapshot_dt,
        base_seed=a.base_seed, fluid_dt=a.dt, measures=a.measures, eps=a.eps,
    )
    rep = harness.run_convergence(spec)
    _write(a.out, rep.table_csv())
    if a.report:
        _write(a.report, harness.dumps(rep.to_dict()))
    if a.plot_data:
        _write(a.plot_data, harness.plot_rows({m: (rep.N_list, rep.mean[m]) for m in rep.mean}))
    return 0 if rep.passed else 1


def cmd_fcfs(a) -> int:
    cfg = _load(a.config)
    rep = harness.run_fcfs_equivalence(cfg, a.N, a.T, _int_list(a.seeds))
    _write(a.report, harness.dumps(rep) + "\n")
    return 0 if rep["identical"] else 1


def cmd_validate(a) -> int:
    code, rep = harness.validate(_load(a.config))
    _write(a.report, harness.dumps(rep) + "\n")
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edfq", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="one scaled simulation run")
    s.add_argument("--config", required=True)
    s.add_argument("--N", type=int)
    s.add_argument("--T", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--snapshot-dt", type=float)
    s.add_argument("--out", default="-")
    s.add_argument("--events")
    s.add_argument("--measures")
    s.add_argument("--plot-data")
    s.set_defaults(fn=cmd_simulate)

    f = sub.add_parser("fluid", help="solve the fluid model")
    f.add_argument("--config", required=True)
    f.add_argument("--dt", type=float)
    f.add_argument("--T", type=float)
    f.add_argument("--mode", default="auto", choices=("auto", "boundary-map", "operator-split"))
    f.add_argument("--every", type=int, default=1, help="write every k-th grid row")
    f.add_argument("--out", default="-")
    f.add_argument("--report")
    f.add_argument("--plot-data")
    f.set_defaults(fn=cmd_fluid)

    m = sub.add_parser("mvsm", help="measure-valued Skorohod map on JSON inputs")
    m.add_argument("--alpha", required=True)
    m.add_argument("--mu", required=True)
    m.add_argument("--interp", default="linear", choices=("linear", "step"))
    m.add_argument("--out", default="-")
    m.set_defaults(fn=cmd_mvsm)

    c = sub.add_parser("compare", help="convergence of simulations to the fluid solution")
    c.add_argument("--config", required=True)
    c.add_argument("--N", default="100,400,1600,6400")
    c.add_argument("--reps", type=int, default=20)
    c.add_argument("--T", type=float)
    c.add_argument("--dt", type=float, help="fluid step")
    c.add_argument("--snapshot-dt", type=float, default=0.1)
    c.add_argument("--base-seed", type=int, default=0)
    c.add_argument("--eps", type=float, default=0.1)
    c.add_argument("--measures", action="store_true")
    c.add_argument("--out", default="-")
    c.add_argument("--report")
    c.add_argument("--plot-data")
    c.set_defaults(fn=cmd_compare)

    q = sub.add_parser("fcfs-check", help="EDF vs FCFS event logs under deterministic patience")
    q.add_argument("--config", required=True)
    q.add_argument("--N", type=int, default=5)
    q.add_argument("--T", type=float, default=20.0)
    q.add_argument("--seeds", default="0-49")
    q.add_argument("--report", default="-")
    q.set_defaults(fn=cmd_fcfs)

    v = sub.add_parser("validate", help="run the invariant battery on a config")
    v.add_argument("--config", required=True)
    v.add_argument("--report", default="-")
    v.set_defaults(fn=cmd_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, SolverError, OSError) as ex:
        sys.stderr.write(f"edfq {args.command}: {ex}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
