"""Random instance generators and independent oracles shared by the test modules."""

from __future__ import annotations

import numpy as np

from edfq.measures import FiniteMeasure, MeasurePath, ScalarPath
from edfq.skorohod import gamma, gamma_boundary


def random_pl_path(rng: np.random.Generator, max_knots: int = 50, lo: float = -10, hi: float = 10) -> ScalarPath:
    n = int(rng.integers(2, max_knots + 1))
    t = np.concatenate([[0.0], np.sort(rng.uniform(0, 10, n - 1))])
    t = np.unique(t)
    return ScalarPath(t, rng.uniform(lo, hi, t.size))


def check_gamma(psi: ScalarPath) -> None:
    phi, eta = gamma(psi)
    assert np.all(phi.values >= 0)
    assert np.all(np.diff(eta.values) >= 0)
    # complementarity: eta grows only on pieces where phi vanishes at both ends
    up = np.diff(eta.values) > 0
    assert np.all(phi.values[:-1][up] == 0.0) and np.all(phi.values[1:][up] == 0.0)
    # phi - eta reproduces psi at the input knots (inserted crossings carry
    # rounding amplified by the slope, so they are not compared here)
    idx = np.searchsorted(phi.times, psi.times)
    assert np.array_equal(phi.times[idx], psi.times)
    assert np.allclose(phi.values[idx] - eta.values[idx], psi.values, atol=1e-12, rtol=0)


def check_lipschitz(p: ScalarPath, q: ScalarPath) -> None:
    fp, _ = gamma(p)
    fq, _ = gamma(q)
    t = np.union1d(fp.times, fq.times)
    lhs = np.max(np.abs(fp(t) - fq(t)))
    s = np.union1d(p.times, q.times)
    rhs = np.max(np.abs(p(s) - q(s)))
    assert lhs <= 2 * rhs + 1e-12


def check_gamma_boundary(psi: ScalarPath, b: ScalarPath) -> None:
    phi, eta = gamma_boundary(psi, b)
    b_at = np.interp(phi.times, b.times, b.values)
    assert np.all(phi.values <= b_at)
    assert np.all(np.diff(eta.values) >= 0)
    up = np.diff(eta.values) > 0
    assert np.all(phi.values[:-1][up] == b_at[:-1][up]) and np.all(phi.values[1:][up] == b_at[1:][up])


def random_boundary_pair(rng: np.random.Generator) -> tuple[ScalarPath, ScalarPath]:
    psi = random_pl_path(rng)
    b = random_pl_path(rng)
    shift = max(psi.values[0] - b.values[0], 0.0) + rng.uniform(0, 1)
    return psi, ScalarPath(b.times, b.values + shift)


def random_atomic_instance(rng: np.random.Generator, n_times: int = 12, max_atoms: int = 20):
    """Dyadic atomic arrivals at sample times and a dyadic piecewise-linear mu.

    All quantities are multiples of 1/8 so every sum is exact in floating point.
    """
    times = np.arange(n_times, dtype=float)
    n_atoms = int(rng.integers(1, max_atoms + 1))
    locs = rng.integers(0, 30, n_atoms).astype(float)
    weights = rng.integers(1, 17, n_atoms) / 8.0
    arrive = rng.integers(0, n_times, n_atoms)
    slopes = rng.integers(0, 17, n_times - 1) / 8.0
    mu = np.concatenate([[rng.integers(0, 9) / 8.0], np.zeros(n_times - 1)])
    mu[1:] = mu[0] + np.cumsum(slopes)
    measures = []
    for k in range(n_times):
        sel = arrive <= k
        measures.append(FiniteMeasure(list(zip(locs[sel], weights[sel]))))
    alpha = MeasurePath(times, measures, monotone=True)
    return alpha, ScalarPath(times, mu, nondecreasing=True), (locs, weights, arrive)


def edf_consumption_oracle(times, atoms, mu_values):
    """Event-driven EDF consumption: mass arrives at sample times and is eaten lowest-location first.

    Returns per sample the queue content as a dict ``loc -> weight`` and the idleness.
    """
    locs, weights, arrive = atoms
    queue: dict[float, float] = {}
    idle = 0.0
    out_q, out_idle = [], []
    prev_mu = 0.0
    for k in range(len(times)):
        c = mu_values[k] - prev_mu
        prev_mu = mu_values[k]
        if k == 0:
            for j in np.flatnonzero(arrive == 0):
                queue[locs[j]] = queue.get(locs[j], 0.0) + weights[j]
        for loc in sorted(queue):
            if c <= 0:
                break
            take = min(queue[loc], c)
            queue[loc] -= take
            c -= take
        idle += c
        queue = {x: w for x, w in queue.items() if w > 0}
        if k > 0:
            for j in np.flatnonzero(arrive == k):
                queue[locs[j]] = queue.get(locs[j], 0.0) + weights[j]
        out_q.append(dict(queue))
        out_idle.append(idle)
    return out_q, out_idle


def random_ac_instance(rng: np.random.Generator, n_times: int = 15):
    """Absolutely continuous arrivals, linear in t between samples, and a linear mu."""
    times = np.linspace(0.0, 5.0, n_times)
    n_streams = int(rng.integers(1, 5))
    streams = []
    for _ in range(n_streams):
        a = rng.uniform(0, 8)
        streams.append((int(rng.integers(0, n_times - 1)), rng.uniform(0.1, 2), a, a + rng.uniform(0.5, 4)))
    x_grid = np.unique(np.concatenate([[0.0], [s[2] for s in streams], [s[3] for s in streams], np.linspace(0, 12, 25)]))
    A = np.zeros((n_times, x_grid.size))
    At = np.zeros(n_times)
    for k, t in enumerate(times):
        for start, rate, a, b in streams:
            mass = rate * max(t - times[start], 0.0)
            A[k] += mass * np.clip((x_grid - a) / (b - a), 0, 1)
            At[k] += mass
    q0 = rng.uniform(0, 2)
    A += q0 * np.clip(x_grid / 10.0, 0, 1)
    At += q0
    mu = np.concatenate([[rng.uniform(0, 0.5)], rng.uniform(0, 3, n_times - 1)])
    mu = np.cumsum(mu)
    return times, x_grid, A, At, mu
