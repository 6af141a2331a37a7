import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edfq.measures import FiniteMeasure, MeasurePath, ScalarPath
from edfq.skorohod import gamma, gamma_boundary, mvsm_solve, mvsm_solve_cdf

from helpers import (
    check_gamma,
    check_gamma_boundary,
    check_lipschitz,
    edf_consumption_oracle,
    random_ac_instance,
    random_atomic_instance,
    random_boundary_pair,
    random_pl_path,
)


# -- one-dimensional map -------------------------------------------------------


def test_gamma_nonnegative_increasing_input_is_fixed():
    psi = ScalarPath([0, 1, 3], [0, 1, 3])
    phi, eta = gamma(psi)
    assert np.array_equal(phi.values, psi.values) and np.all(eta.values == 0)


def test_gamma_pure_reflection():
    phi, eta = gamma(ScalarPath([0, 2, 5], [0, -2, -5]))
    assert np.all(phi.values == 0) and np.array_equal(eta.values, [0, 2, 5])


def test_gamma_interior_crossing_inserted():
    phi, eta = gamma(ScalarPath([0, 1, 2], [1, -1, 0]))
    assert np.allclose(phi.times, [0, 0.5, 1, 2], atol=1e-15)
    assert np.allclose(phi.values, [1, 0, 0, 1], atol=1e-15)
    assert eta(2.0) == pytest.approx(1.0, abs=1e-15)
    assert eta(0.5) == 0.0


def test_gamma_step_paths():
    phi, eta = gamma(ScalarPath([0, 1, 2, 3], [1, -2, 0, -1], interp="step"))
    assert np.array_equal(phi.values, [1, 0, 2, 1])
    assert np.array_equal(eta.values, [0, 2, 2, 2])


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gamma_properties(seed):
    rng = np.random.default_rng(seed)
    p = random_pl_path(rng)
    check_gamma(p)
    check_lipschitz(p, random_pl_path(rng))


# -- moving boundary ----------------------------------------------------------


def test_boundary_inactive():
    psi = ScalarPath([0, 1, 2], [0, 0.5, 0.2])
    phi, eta = gamma_boundary(psi, ScalarPath([0, 2], [1, 1]))
    assert np.all(eta.values == 0) and np.allclose(phi(psi.times), psi.values, atol=0)


def test_boundary_cap_at_one():
    t = np.linspace(0, 3, 31)
    phi, eta = gamma_boundary(ScalarPath([0, 3], [0, 3]), ScalarPath([0, 3], [1, 1]))
    assert np.max(np.abs(eta(t) - np.maximum(t - 1, 0))) <= 1e-12
    assert np.max(np.abs(phi(t) - np.minimum(t, 1))) <= 1e-12


def test_boundary_riding():
    t = np.linspace(0, 4, 41)
    phi, eta = gamma_boundary(ScalarPath([0, 4], [0, 8]), ScalarPath([0, 4], [0, 4]))
    assert np.max(np.abs(eta(t) - t)) <= 1e-12
    assert np.max(np.abs(phi(t) - t)) <= 1e-12


def test_boundary_rejects_start_above():
    with pytest.raises(ValueError):
        gamma_boundary(ScalarPath([0, 1], [2, 2]), ScalarPath([0, 1], [1, 1]))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_boundary_properties(seed):
    psi, b = random_boundary_pair(np.random.default_rng(seed))
    check_gamma_boundary(psi, b)
    phi, eta = gamma_boundary(psi, b)
    # sup formula at the input knots inside the common domain
    s = np.union1d(psi.times, b.times)
    s = s[s <= phi.times[-1]]
    ref = np.maximum.accumulate(np.maximum(psi(s) - b(s), 0.0))
    assert np.allclose(eta(s), ref, atol=1e-12, rtol=0)


# -- measure-valued map --------------------------------------------------------


def _lebesgue_growth(times):
    return MeasurePath(times, [FiniteMeasure.lebesgue(0, t) if t > 0 else FiniteMeasure.zero() for t in times], monotone=True)


def test_mvsm_no_consumption():
    times = np.linspace(0, 3, 7)
    alpha = _lebesgue_growth(times)
    sol = mvsm_solve(alpha, ScalarPath(times, np.zeros_like(times)), x_grid=times)
    A = np.vstack([m.cdf_at(times) for m in alpha.measures])
    assert np.array_equal(sol.xi_cdf, A)
    assert np.all(sol.beta_tail == 0) and np.all(sol.iota == 0)


def test_mvsm_lebesgue_consumed_at_rate_one():
    times = np.linspace(0, 3, 7)
    alpha = _lebesgue_growth(times)
    sol = mvsm_solve(alpha, ScalarPath(times, times), x_grid=times)
    assert np.max(np.abs(sol.xi_cdf)) <= 1e-12
    assert np.max(np.abs(sol.iota)) <= 1e-12
    expected = np.minimum(times[:, None], times[None, :])
    assert np.max(np.abs(sol.beta_cdf - expected)) <= 1e-12


def test_mvsm_single_atom_overconsumed():
    times = np.linspace(0, 2, 5)
    alpha = MeasurePath(times, [FiniteMeasure.dirac(5.0, t) if t > 0 else FiniteMeasure.zero() for t in times])
    x = np.array([0.0, 4.0, 5.0, 6.0])
    sol = mvsm_solve(alpha, ScalarPath(times, 2 * times), x_grid=x)
    assert np.max(np.abs(sol.xi_cdf)) <= 1e-12
    assert np.max(np.abs(sol.iota - times)) <= 1e-12
    expected = np.where(x[None, :] >= 5.0, times[:, None], 0.0)
    assert np.max(np.abs(sol.beta_cdf - expected)) <= 1e-12
    assert np.all(np.abs(sol.beta_total + sol.iota - sol.mu) <= 2 * np.spacing(sol.mu))


def test_mvsm_rejects_decreasing_mu():
    times = np.array([0.0, 1.0])
    A = np.zeros((2, 1))
    with pytest.raises(ValueError):
        mvsm_solve_cdf(times, [0.0], A, np.zeros(2), np.array([1.0, 0.5]))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_mvsm_matches_edf_oracle(seed):
    rng = np.random.default_rng(seed)
    alpha, mu, atoms = random_atomic_instance(rng)
    sol = mvsm_solve(alpha, mu, x_grid=np.arange(30.0), alpha_interp="step")
    queues, idle = edf_consumption_oracle(alpha.times, atoms, mu.values)
    for k, q in enumerate(queues):
        for j, x in enumerate(sol.x_grid):
            assert sol.xi_cdf[k, j] == sum(w for loc, w in q.items() if loc <= x)
        assert sol.iota[k] == idle[k]
    A = np.vstack([m.cdf_at(sol.x_grid) for m in alpha.measures])
    res = sol.residuals(A, alpha.totals())
    assert all(v == 0.0 for v in res.values()), res


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_mvsm_conditions_on_continuous_inputs(seed):
    times, x, A, At, mu = random_ac_instance(np.random.default_rng(seed))
    sol = mvsm_solve_cdf(times, x, A, At, mu)
    res = sol.residuals(A, At)
    tol = 1e-9 * max(At[-1], 1.0)
    assert all(v <= tol for v in res.values()), res
    # beta_total is stored as mu - iota, so only the final addition rounds
    assert np.all(np.abs(sol.beta_total + sol.iota - mu) <= 2 * np.spacing(mu))


def test_xi_measure_reconstruction():
    times = np.linspace(0, 3, 7)
    alpha = _lebesgue_growth(times)
    sol = mvsm_solve(alpha, ScalarPath(times, 0.5 * times), x_grid=times)
    for k in range(times.size):
        m = sol.xi_measure(k)
        assert m.total == pytest.approx(sol.xi_total[k], abs=1e-12)
        assert np.allclose(m.cdf_at(times), sol.xi_cdf[k], atol=1e-12)
    assert sol.xi_path().times.size == times.size
