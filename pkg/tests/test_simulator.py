import numpy as np
import pytest

from edfq.distributions import Law
from edfq.fluid import FluidData
from edfq.measures import FiniteMeasure, uniform_cdf_distance
from edfq.simulator import SimConfig, check_pathwise_identities, compensator_diagnostic, init_state, simulate

EXP1 = Law("exponential", {"rate": 1.0})


def fixed(N, times, services, patience, T=20.0):
    arr = {"kind": "fixed", "times": times, "services": services, "patience": patience}
    return SimConfig(N=N, T=T, service=EXP1, patience=EXP1, arrivals=arr, snapshot_dt=0.5)


def events_of(trace, i):
    return [(t, k) for t, k, j in trace.events if j == i]


# -- hand traces ---------------------------------------------------------------


def test_trace_single_server_reneging():
    tr = simulate(fixed(1, [1.0, 2.0], [5.0, 1.0], [0.5, 0.5], T=10.0), 0)
    assert events_of(tr, 1) == [(1.0, "arrive"), (1.0, "admit"), (6.0, "complete")]
    assert events_of(tr, 2) == [(2.0, "arrive"), (2.5, "renege")]
    k = np.searchsorted(tr.epochs["t"], 6.0)
    assert (tr.epochs["K"][k], tr.epochs["R"][k], tr.epochs["D"][k]) == (1, 1, 1)
    assert check_pathwise_identities(tr)["all_ok"]


def test_trace_two_servers_wait():
    tr = simulate(fixed(2, [0.5, 1.0, 1.5], [2.0, 2.0, 2.0], [10.0] * 3), 0)
    assert (2.5, "admit") in events_of(tr, 3)
    assert tr.epochs["K"][-1] == 3 and tr.epochs["R"][-1] == 0
    assert check_pathwise_identities(tr)["all_ok"]


def test_trace_edf_order():
    tr = simulate(fixed(1, [0.0, 0.2, 0.4], [1.0, 1.0, 1.0], [10.0, 4.8, 1.6]), 0)
    assert events_of(tr, 3)[1] == (1.0, "admit")
    assert events_of(tr, 2)[1] == (2.0, "admit")
    assert check_pathwise_identities(tr)["all_ok"]
    tr = simulate(SimConfig(**{**fixed(1, [0.0, 0.2, 0.4], [1.0] * 3, [10.0, 4.8, 1.6]).__dict__, "discipline": "fcfs"}), 0)
    assert events_of(tr, 2)[1] == (1.0, "admit")


def test_deadline_equal_to_admission_epoch_is_served():
    # customer 2's deadline is exactly when the server frees up
    tr = simulate(fixed(1, [0.0, 0.5], [1.0, 1.0], [5.0, 0.5]), 0)
    assert events_of(tr, 2)[1] == (1.0, "admit")
    assert check_pathwise_identities(tr)["all_ok"]


def test_empty_run():
    tr = simulate(SimConfig(N=3, T=5.0, service=EXP1, patience=EXP1), 1)
    for k in ("X", "Q", "K", "R", "D", "E"):
        assert np.all(tr.counts[k] == 0)
    rep = check_pathwise_identities(tr)
    assert rep["all_ok"]


def test_config_errors():
    with pytest.raises(ValueError):
        SimConfig(N=0, T=1.0, service=EXP1, patience=EXP1)
    with pytest.raises(ValueError):
        SimConfig(N=1, T=0.0, service=EXP1, patience=EXP1)
    with pytest.raises(ValueError, match="lambda_sup"):
        simulate(SimConfig(N=1, T=1.0, service=EXP1, patience=EXP1,
                           arrivals={"kind": "inhomogeneous", "breakpoints": [0], "rates": [1.0]}), 0)


# -- initial state ----------------------------------------------------------------


def test_init_state_examples():
    assert init_state(10, FluidData(EXP1, EXP1, 0.0), 0).X0 == 0
    st = init_state(1000, FluidData(EXP1, EXP1, 0.5, nu0=FiniteMeasure.lebesgue(0, 1, mass=0.5)), 0)
    assert st.ages.size == 500 and st.queue_deadlines.size == 0
    assert np.all(st.residual > 0)
    q0 = FiniteMeasure.lebesgue(1, 1.5)
    d = FluidData(EXP1, EXP1, 1.5, Q0=q0, nu0=FiniteMeasure.dirac(0.0))
    st = init_state(10_000, d, 3)
    assert st.ages.size == 10_000 and st.queue_deadlines.size == 5_000
    emp = FiniteMeasure(list(zip(st.queue_deadlines, np.full(5000, 1e-4))))
    assert uniform_cdf_distance(emp, q0) < 0.02


def test_initial_population_dynamics_identities():
    q0 = FiniteMeasure.lebesgue(0.5, 1.5, mass=0.5)
    d = FluidData(EXP1, EXP1, 1.5, Q0=q0, nu0=FiniteMeasure.lebesgue(0, 2, mass=1.0))
    cfg = SimConfig(N=20, T=10.0, service=EXP1, patience=EXP1, arrivals={"kind": "poisson", "rate": 0.8}, initial=d)
    tr = simulate(cfg, 5)
    assert tr.counts["X"][0] == 30 and tr.counts["Q"][0] == 10
    assert check_pathwise_identities(tr)["all_ok"]


# -- random runs ---------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_random_mmn_identities(seed):
    cfg = SimConfig(N=10, T=50.0, service=EXP1, patience=EXP1, arrivals={"kind": "poisson", "rate": 1.5})
    rep = check_pathwise_identities(simulate(cfg, seed))
    assert rep["all_ok"], rep


@pytest.mark.parametrize("svc,pat,arr", [
    (Law("deterministic", {"value": 1.0}), Law("deterministic", {"value": 0.5}), {"kind": "poisson", "rate": 1.6}),
    (Law("uniform", {"low": 0.5, "high": 1.5}), Law("uniform", {"low": 0.2, "high": 1.0}),
     {"kind": "piecewise", "breakpoints": [0, 5], "rates": [2.0, 0.5]}),
    (Law("lognormal", {"mu": 0.0, "sigma": 1.0}), EXP1, {"kind": "renewal", "interarrival": {"kind": "deterministic", "value": 0.5}}),
])
def test_other_laws_identities(svc, pat, arr):
    cfg = SimConfig(N=8, T=20.0, service=svc, patience=pat, arrivals=arr)
    rep = check_pathwise_identities(simulate(cfg, 11))
    assert rep["all_ok"], rep


def test_determinism():
    cfg = SimConfig(N=7, T=20.0, service=EXP1, patience=EXP1, arrivals={"kind": "poisson", "rate": 1.2}, record_measures=True)
    a, b = simulate(cfg, 42), simulate(cfg, 42)
    assert a.events == b.events and a.to_csv() == b.to_csv()
    assert all(np.array_equal(x, y) for x, y in zip(a.nu_snap, b.nu_snap))
    assert simulate(cfg, 43).events != a.events


def test_scaled_measures_match_counts():
    cfg = SimConfig(N=25, T=10.0, service=EXP1, patience=EXP1, arrivals={"kind": "poisson", "rate": 1.5}, record_measures=True)
    tr = simulate(cfg, 2)
    for i in range(tr.snap_t.size):
        assert tr.nu_measure(i).total == pytest.approx(min(tr.scaled("X")[i], 1.0), abs=1e-12)
        assert tr.q_measure(i).total == pytest.approx(tr.scaled("Q")[i], abs=1e-12)
        assert np.all(tr.q_snap[i] > tr.snap_t[i])


def test_no_preemption_and_age_bounds():
    cfg = SimConfig(N=5, T=30.0, service=EXP1, patience=EXP1, arrivals={"kind": "poisson", "rate": 1.3})
    tr = simulate(cfg, 9)
    seen = {}
    for t, kind, i in tr.events:
        if kind == "admit":
            assert i not in seen
            seen[i] = t
        if kind == "complete" and i > 0:
            row = i + tr.offset
            assert t == pytest.approx(seen[i] + tr.customers["v"][row], abs=1e-12)


def test_edf_reneges_no_more_than_fcfs():
    # services are handed out in admission order so both disciplines see the same service sequence
    wins = 0
    for seed in range(200):
        cfg = SimConfig(N=5, T=20.0, service=EXP1, patience=EXP1, arrivals={"kind": "poisson", "rate": 1.4},
                        record_epochs=False, service_coupling="admission")
        e = simulate(cfg, seed).counts["R"][-1]
        f = simulate(SimConfig(**{**cfg.__dict__, "discipline": "fcfs"}), seed).counts["R"][-1]
        wins += e <= f
    assert wins >= 190


def test_admission_coupling_identities():
    cfg = SimConfig(N=6, T=30.0, service=EXP1, patience=EXP1, arrivals={"kind": "poisson", "rate": 1.5},
                    service_coupling="admission")
    assert check_pathwise_identities(simulate(cfg, 4))["all_ok"]


# -- compensator ---------------------------------------------------------------


def test_compensator_diagnostic_reports_and_skips():
    cfg = SimConfig(N=10, T=10.0, service=EXP1, patience=EXP1, arrivals={"kind": "poisson", "rate": 1.5})
    rep = compensator_diagnostic(simulate(cfg, 0), EXP1)
    assert not rep["skipped"] and np.isfinite(rep["rms"]) and len(rep["values"]) == 10
    det = Law("deterministic", {"value": 1.0})
    cfg = SimConfig(N=10, T=10.0, service=det, patience=EXP1, arrivals={"kind": "poisson", "rate": 1.5})
    rep = compensator_diagnostic(simulate(cfg, 0), det)
    assert rep["skipped"] and "skipped" in rep["notice"]
