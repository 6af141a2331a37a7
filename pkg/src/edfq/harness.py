"""Experiments comparing scaled simulations with the fluid solution, plus the validation battery."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .distributions import validate_assumptions
from .fluid import FluidData, FluidSolution, SolverConfig, SolverError, fme_residuals, solve
from .measures import uniform_cdf_distance
from .simulator import SimConfig, check_pathwise_identities, compensator_diagnostic, simulate

__all__ = [
    "ExperimentSpec",
    "ConvergenceReport",
    "run_convergence",
    "run_fcfs_equivalence",
    "run_compensator",
    "validate",
    "worker_count",
    "plot_rows",
    "dumps",
]

SCALARS = ("X", "Q", "K", "R")


def worker_count() -> int:
    """Worker cap from ``EDFQ_THREADS`` (default: CPU count)."""
    env = os.environ.get("EDFQ_THREADS")
    if env:
        return max(int(env), 1)
    return os.cpu_count() or 1


def _pool_map(fn, jobs: list, workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
        return list(ex.map(fn, jobs, chunksize=1))


@dataclass
class ExperimentSpec:
    """A convergence experiment.

    ``config`` is the JSON config shape; ``reference`` optionally replaces the
    fluid solution by a closed form ``t -> {"X": .., "Q": .., "K": .., "R": ..}``.
    """

    name: str
    config: dict
    N_list: list
    replications: int = 20
    T: float = 10.0
    snapshot_dt: float = 0.1
    base_seed: int = 0
    fluid_dt: float | None = None
    measures: bool = False
    reference: Callable | None = None
    workers: int | None = None
    eps: float = 0.1  # threshold for the fraction-within-eps column

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.N_list, self.N_list[1:])):
            raise ValueError("N list must be strictly increasing")
        if self.replications < 1:
            raise ValueError("need at least one replication")


@dataclass
class ConvergenceReport:
    name: str
    N_list: list
    seeds: list
    mean: dict  # metric -> list over N
    max: dict
    slope: dict
    decrease: dict  # metric -> mean(first N) / mean(last N)
    within: dict  # metric -> fraction of replications with error < eps, per N
    eps: float
    rows: list = field(default_factory=list)  # (N, seed, metric, value)

    @property
    def passed(self) -> bool:
        return all(v >= 2.0 for v in self.decrease.values())

    def table_csv(self) -> str:
        metrics = list(self.mean)
        out = [f"# experiment={self.name} seeds={self.seeds[0]}..{self.seeds[-1]}"]
        out.append("N," + ",".join(f"mean_{m},max_{m},within_{m}" for m in metrics))
        for i, N in enumerate(self.N_list):
            cells = (f"{self.mean[m][i]!r},{self.max[m][i]!r},{self.within[m][i]!r}" for m in metrics)
            out.append(f"{N}," + ",".join(cells))
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict:
        return {
            "name": self.name, "N": self.N_list, "seeds": self.seeds, "mean": self.mean, "max": self.max,
            "slope": self.slope, "decrease": self.decrease, "within": self.within, "eps": self.eps,
            "passed": self.passed,
        }


def _reference_paths(spec: ExperimentSpec, data: FluidData, grid: np.ndarray) -> tuple[dict, FluidSolution | None]:
    if spec.reference is not None:
        ref = spec.reference(grid)
        return {k: np.asarray(ref[k], dtype=float) for k in SCALARS}, None
    cfg = SolverConfig(dt=spec.fluid_dt) if spec.fluid_dt else SolverConfig()
    sol = solve(data, spec.T, cfg)
    return {k: np.interp(grid, sol.t, getattr(sol, k)) for k in SCALARS}, sol


def _conv_job(job) -> list:
    cfg_dict, N, seed, T, snap_dt, ref, nu_ref, q_ref, meas_idx = job
    cfg = SimConfig.from_config(cfg_dict, N=N, T=T, snapshot_dt=snap_dt)
    cfg.record_epochs = False
    cfg.record_measures = nu_ref is not None
    tr = simulate(cfg, seed)
    out = []
    for k in SCALARS:
        out.append((N, seed, k, float(np.max(np.abs(tr.scaled(k) - ref[k])))))
    if nu_ref is not None:
        dn = max(uniform_cdf_distance(tr.nu_measure(i), nu_ref[j]) for j, i in enumerate(meas_idx))
        dq = max(uniform_cdf_distance(tr.q_measure(i), q_ref[j]) for j, i in enumerate(meas_idx))
        out += [(N, seed, "nu", dn), (N, seed, "queue", dq)]
    return out


def run_convergence(spec: ExperimentSpec) -> ConvergenceReport:
    """Solve the fluid model once, simulate every ``(N, seed)`` and tabulate sup-norm discrepancies."""
    data = FluidData.from_config(spec.config)
    grid = np.arange(0.0, spec.T + 1e-12 * max(spec.T, 1.0), spec.snapshot_dt)
    ref, sol = _reference_paths(spec, data, grid)
    nu_ref = q_ref = None
    meas_idx = []
    if spec.measures and sol is not None:
        meas_idx = np.unique(np.linspace(0, grid.size - 1, 11).astype(int)).tolist()
        nu_ref = [sol.nu_at(float(grid[i])) for i in meas_idx]
        snap_t = sol.t[sol.snap_index]
        q_ref = [sol.queue_measure(int(np.argmin(np.abs(snap_t - grid[i])))) for i in meas_idx]
    seeds = [spec.base_seed + r for r in range(spec.replications)]
    jobs = [(spec.config, N, s, spec.T, spec.snapshot_dt, ref, nu_ref, q_ref, meas_idx) for N in spec.N_list for s in seeds]
    results = _pool_map(_conv_job, jobs, spec.workers)
    rows = [row for res in results for row in res]
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    metrics = list(SCALARS) + (["nu", "queue"] if nu_ref is not None else [])
    mean, mx, slope, dec, within = {}, {}, {}, {}, {}
    for m in metrics:
        per_N = [[v for (n, _, k, v) in rows if n == N and k == m] for N in spec.N_list]
        mean[m] = [float(np.mean(x)) for x in per_N]
        mx[m] = [float(np.max(x)) for x in per_N]
        within[m] = [float(np.mean(np.asarray(x) < spec.eps)) for x in per_N]
        if len(spec.N_list) > 1 and all(v > 0 for v in mean[m]):
            slope[m] = float(np.polyfit(np.log(spec.N_list), np.log(mean[m]), 1)[0])
        else:
            slope[m] = math.nan
        dec[m] = mean[m][0] / mean[m][-1] if mean[m][-1] > 0 else math.inf
    return ConvergenceReport(spec.name, list(spec.N_list), seeds, mean, mx, slope, dec, within, spec.eps, rows)


# ---------------------------------------------------------------------------
# FCFS equivalence
# ---------------------------------------------------------------------------


def run_fcfs_equivalence(config: dict, N: int, T: float, seeds) -> dict:
    """EDF and FCFS runs on identical primitives must give identical event logs when patience is a point mass."""
    base = SimConfig.from_config(config, N=N, T=T)
    if base.patience.kind != "deterministic":
        raise ValueError("FCFS equivalence needs deterministic patience")
    out = {"runs": [], "identical": True}
    for seed in seeds:
        e = simulate(base, seed)
        f = simulate(SimConfig(**{**base.__dict__, "discipline": "fcfs"}), seed)
        le = [ev for ev in e.events if ev[1] != "arrive"]
        lf = [ev for ev in f.events if ev[1] != "arrive"]
        same = le == lf
        first = None
        if not same:
            j = next((i for i, (x, y) in enumerate(zip(le, lf)) if x != y), min(len(le), len(lf)))
            first = {"position": j, "edf": le[j] if j < len(le) else None, "fcfs": lf[j] if j < len(lf) else None}
        out["runs"].append({"seed": seed, "identical": same, "events": len(le), "first_difference": first})
        out["identical"] &= same
    return out


# ---------------------------------------------------------------------------
# compensator scaling
# ---------------------------------------------------------------------------


def _comp_job(job):
    cfg_dict, N, seed, T = job
    cfg = SimConfig.from_config(cfg_dict, N=N, T=T)
    tr = simulate(cfg, seed)
    return N, seed, compensator_diagnostic(tr, cfg.service)


def run_compensator(config: dict, N_list, seeds, T: float, workers: int | None = None) -> dict:
    """RMS over seeds and the test family of the scaled compensator defect, per N."""
    jobs = [(config, N, s, T) for N in N_list for s in seeds]
    res = sorted(_pool_map(_comp_job, jobs, workers), key=lambda r: (r[0], r[1]))
    if res and res[0][2].get("skipped"):
        return {"skipped": True, "notice": res[0][2]["notice"]}
    rms = {}
    for N in N_list:
        vals = np.array([r[2]["values"] for r in res if r[0] == N])
        rms[N] = float(np.sqrt(np.mean(vals ** 2)))
    return {"skipped": False, "rms": rms}


# ---------------------------------------------------------------------------
# validation battery
# ---------------------------------------------------------------------------


def validate(config: dict) -> tuple[int, dict]:
    """Run the invariant battery; returns ``(exit status, JSON-ready report)``."""
    report: dict = {"ok": False, "errors": []}
    try:
        data = FluidData.from_config(config)
    except ValueError as ex:
        report["errors"].append(str(ex))
        return 1, report
    rep = validate_assumptions(data.service, data.patience, data.nu0)
    report["assumptions"] = rep.to_dict()
    if not rep.solvable:
        report["errors"].append(
            "neither the finite-zero-set condition on the service density (with an atomless initial age measure) "
            "nor a positive patience lower bound holds"
        )
        return 1, report
    T = float(config.get("T", 5.0))
    dt = config.get("dt")
    try:
        sol = solve(data, T, SolverConfig(dt=dt))
    except SolverError as ex:
        report["errors"].append(f"fluid solver: {ex}")
        return 1, report
    res = fme_residuals(sol)
    tol = 10 * sol.dt
    report["fluid"] = {"dt": sol.dt, "tolerance": tol, "residuals": res,
                       "max_picard_ratio": sol.diagnostics["max_ratio_from_2"]}
    bad = [k for k, v in res.items() if not v <= tol]
    if bad:
        report["errors"].append(f"fluid residuals above {tol:g}: {bad}")
    N = int(config.get("validate_N", 20))
    sim = SimConfig.from_config(config, N=N, T=T)
    ids = check_pathwise_identities(simulate(sim, int(config.get("seed", 0))))
    report["simulation"] = ids
    if not ids["all_ok"]:
        report["errors"].append(f"pathwise identities failed: {[k for k, v in ids.items() if v is False]}")
    if data.patience.kind == "deterministic":
        bp = data.Q0.breakpoints()
        if bp.size and bp.max() > data.patience.params["value"]:
            # initial deadlines past the patience value cannot come from earlier arrivals
            report["fcfs"] = "skipped: initial queue deadlines exceed the patience value"
        else:
            fc = run_fcfs_equivalence(config, N, T, [int(config.get("seed", 0))])
            report["fcfs"] = fc["identical"]
            if not fc["identical"]:
                report["errors"].append("EDF and FCFS event logs differ under deterministic patience")
    report["ok"] = not report["errors"]
    return (0 if report["ok"] else 1), report


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------


def plot_rows(series: dict[str, tuple]) -> str:
    """``x,y,series`` CSV from ``{name: (x, y)}``."""
    out = ["x,y,series"]
    for name, (x, y) in series.items():
        out += [f"{float(a)!r},{float(b)!r},{name}" for a, b in zip(x, y)]
    return "\n".join(out) + "\n"


def dumps(obj) -> str:
    """Deterministic JSON with NaN/inf made explicit strings."""

    def clean(o):
        if isinstance(o, float):
            return o + 0.0 if math.isfinite(o) else str(o)  # +0.0 folds -0.0
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (np.floating, np.integer)):
            return clean(o.item())
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, np.ndarray):
            return clean(o.tolist())
        return o

    return json.dumps(clean(obj), indent=2, sort_keys=True)
