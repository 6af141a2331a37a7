import json
import math
from pathlib import Path

import numpy as np
import pytest

from edfq.harness import (
    ExperimentSpec, dumps, plot_rows, run_compensator, run_convergence, run_fcfs_equivalence, validate,
)

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.json"))

MM = {"service": {"kind": "exponential", "rate": 1.0}, "patience": {"kind": "exponential", "rate": 1.0},
      "arrivals": {"kind": "poisson", "rate": 1.5}}
OVERLOADED = {"service": {"kind": "exponential", "rate": 1.0}, "patience": {"kind": "deterministic", "value": 1.0},
              "arrivals": {"kind": "poisson", "rate": 2.0}, "initial": {"X0": 1.0, "nu0": {"atoms": [[0.0, 1.0]]}}}


def overloaded_closed_form(t):
    return {"K": t, "R": np.maximum(t - 2, 0), "Q": np.minimum(t, 2), "X": np.minimum(t, 2) + 1}


def test_spec_invariants():
    with pytest.raises(ValueError):
        ExperimentSpec("x", MM, [400, 100])
    with pytest.raises(ValueError):
        ExperimentSpec("x", MM, [100, 100])
    with pytest.raises(ValueError):
        ExperimentSpec("x", MM, [100], replications=0)


def test_no_dynamics_scenario_is_exact():
    cfg = {**MM, "arrivals": {"kind": "poisson", "rate": 0.0}}
    rep = run_convergence(ExperimentSpec("idle", cfg, [10, 40], replications=3, T=2.0, workers=1))
    for m in ("X", "Q", "K", "R"):
        assert rep.max[m] == [0.0, 0.0]


def test_initial_population_only_errors_shrink():
    cfg = {**MM, "arrivals": {"kind": "poisson", "rate": 0.0},
           "initial": {"X0": 0.8, "nu0": {"ac_knots": [[0.0, 0.0], [1.0, 0.8]]}}}
    rep = run_convergence(ExperimentSpec("drain", cfg, [50, 3200], replications=8, T=3.0, workers=1))
    assert rep.mean["K"] == [0.0, 0.0] and rep.mean["R"] == [0.0, 0.0]
    assert rep.decrease["X"] >= 2


def test_report_consistency_and_worker_independence():
    spec = dict(name="mm", config=MM, N_list=[20, 80, 320], replications=4, T=3.0, snapshot_dt=0.25, base_seed=7)
    a = run_convergence(ExperimentSpec(**spec, workers=1))
    b = run_convergence(ExperimentSpec(**spec, workers=2))
    assert a.table_csv() == b.table_csv() and dumps(a.to_dict()) == dumps(b.to_dict())
    assert a.table_csv().startswith("# experiment=mm seeds=7..10")
    for m in a.mean:
        assert all(mx >= mn >= 0 for mx, mn in zip(a.max[m], a.mean[m]))
        assert all(0 <= w <= 1 for w in a.within[m])
    # slope is reproducible from the emitted table
    lines = a.table_csv().splitlines()
    head = lines[1].split(",")
    body = [list(map(float, r.split(","))) for r in lines[2:]]
    col = head.index("mean_X")
    slope = np.polyfit(np.log([r[0] for r in body]), np.log([r[col] for r in body]), 1)[0]
    assert slope == pytest.approx(a.slope["X"], abs=1e-12)


def test_measure_discrepancies_reported():
    rep = run_convergence(ExperimentSpec("mm", MM, [20, 200], replications=2, T=2.0, measures=True, workers=1))
    assert set(rep.mean) == {"X", "Q", "K", "R", "nu", "queue"}
    assert all(0 <= v <= 1.5 for v in rep.mean["nu"])


def test_closed_form_reference():
    rep = run_convergence(ExperimentSpec("ov", OVERLOADED, [100, 1600], replications=5, T=4.0, snapshot_dt=0.05,
                                         reference=overloaded_closed_form, workers=1))
    assert rep.passed, rep.decrease


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="mean sup error measured at 0.058; reneging onset at t=2 is biased by O(N^-1/2)")
def test_overloaded_R_within_005_at_6400():
    rep = run_convergence(ExperimentSpec("ov", OVERLOADED, [6400], replications=20, T=4.0, snapshot_dt=0.05,
                                         reference=overloaded_closed_form))
    assert rep.mean["R"][0] <= 0.05


# -- FCFS equivalence ------------------------------------------------------------


def test_fcfs_equivalence_deterministic_patience():
    rep = run_fcfs_equivalence(OVERLOADED, 5, 20.0, range(5))
    assert rep["identical"] and all(r["first_difference"] is None for r in rep["runs"])
    assert all(r["events"] > 0 for r in rep["runs"])


def test_fcfs_single_customer():
    cfg = {**OVERLOADED, "arrivals": {"kind": "fixed", "times": [1.0], "services": [0.5], "patience": [1.0]}}
    cfg.pop("initial")
    rep = run_fcfs_equivalence(cfg, 1, 5.0, [0])
    assert rep["identical"] and rep["runs"][0]["events"] == 2


def test_fcfs_precondition():
    with pytest.raises(ValueError, match="deterministic"):
        run_fcfs_equivalence(MM, 5, 20.0, [0])


# -- validate -------------------------------------------------------------------


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    code, rep = validate(json.loads(path.read_text()))
    assert code == 0, rep["errors"]
    assert rep["ok"] and rep["simulation"]["all_ok"]


def test_validate_initial_set_violation():
    cfg = {**MM, "initial": {"X0": 0.5, "nu0": {"atoms": [[0.0, 0.3]]}}}
    code, rep = validate(cfg)
    assert code == 1 and "S0" in rep["errors"][0]


def test_validate_neither_assumption():
    cfg = {**MM, "service": {"kind": "deterministic", "value": 1.0}}
    code, rep = validate(cfg)
    assert code == 1
    msg = rep["errors"][0]
    assert "zero-set" in msg and "patience lower bound" in msg


def test_validate_unknown_key():
    code, rep = validate({**MM, "X0": 0.5})
    assert code == 1 and "unknown config keys" in rep["errors"][0]


# -- compensator and output helpers -----------------------------------------------


def test_run_compensator_small_and_skip():
    rep = run_compensator(MM, [10, 40], range(3), 5.0, workers=1)
    assert not rep["skipped"] and set(rep["rms"]) == {10, 40}
    det = {**MM, "service": {"kind": "deterministic", "value": 1.0}}
    assert run_compensator(det, [10], [0], 2.0, workers=1)["skipped"]


def test_plot_rows_and_dumps():
    txt = plot_rows({"a": ([0, 1], [2.0, 3.5]), "b": ([0], [1])})
    assert txt == "x,y,series\n0.0,2.0,a\n1.0,3.5,a\n0.0,1.0,b\n"
    d = json.loads(dumps({"x": math.nan, "y": np.float64(-0.0), "z": np.array([1, 2]), "w": np.bool_(True)}))
    assert d == {"x": "nan", "y": 0.0, "z": [1, 2], "w": True}


def test_fcfs_with_initial_queue():
    # initial deadlines inside [0, patience] are those of customers who arrived before time 0
    consistent = {**OVERLOADED, "initial": {"X0": 1.5, "nu0": {"atoms": [[0.0, 1.0]]},
                                            "Q0": {"ac_knots": [[0.2, 0.0], [1.0, 0.5]]}}}
    assert run_fcfs_equivalence(consistent, 20, 6.0, range(5))["identical"]
    late = {**consistent, "initial": {**consistent["initial"], "Q0": {"ac_knots": [[1.0, 0.0], [2.0, 0.5]]}}}
    assert not run_fcfs_equivalence(late, 20, 6.0, [0])["identical"]
    code, rep = validate(late)
    assert code == 0 and rep["fcfs"].startswith("skipped")
