"""Numerical solver for the fluid limit of the many-server EDF queue.

State on ``[0, T]``: cumulative admissions ``K``, reneging ``R``, the queue
deadline measure (stored as its CDF on a level grid that contains every
time step), and the age measure ``nu`` (never gridded; recovered from ``K``
and ``nu0`` by transport with survival weights).

Per Picard window the departures are frozen from the previous iterate, the
window is marched step by step (arrivals in, serve from the left up to the
spare capacity, then renege), and the window is repeated until ``K`` stops
moving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.integrate import trapezoid

from .distributions import Law, validate_assumptions
from .measures import FiniteMeasure, MeasurePath, ScalarPath
from .skorohod import mvsm_solve_cdf

__all__ = [
    "SolverError",
    "FluidData",
    "SolverConfig",
    "FluidSolution",
    "build_alpha",
    "transport_nu",
    "departures",
    "renewal_solve",
    "choose_step",
    "compute_R",
    "solve",
    "FluidState",
    "fluid_step",
    "fme_residuals",
]

_ZERO_MASS = 1e-13


class SolverError(RuntimeError):
    """The fluid solver cannot run or did not converge."""


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


# top-level keys of a run config; the solver and harness read the optional ones
CONFIG_KEYS = frozenset({"service", "patience", "arrivals", "initial", "N", "T", "dt", "snapshot_dt", "seed", "mode", "validate_N", "name"})


@dataclass
class FluidData:
    """Initial condition, arrival rate and laws for one fluid instance.

    ``lam_rates[i]`` is the arrival rate on ``[lam_breaks[i], lam_breaks[i+1])``;
    the last rate holds forever.
    """

    service: Law
    patience: Law
    X0: float = 0.0
    Q0: FiniteMeasure = field(default_factory=FiniteMeasure)
    nu0: FiniteMeasure = field(default_factory=FiniteMeasure)
    lam_breaks: np.ndarray = field(default_factory=lambda: np.zeros(1))
    lam_rates: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        self.lam_breaks = np.atleast_1d(np.asarray(self.lam_breaks, dtype=float))
        self.lam_rates = np.atleast_1d(np.asarray(self.lam_rates, dtype=float))
        if self.lam_breaks.shape != self.lam_rates.shape or self.lam_breaks[0] != 0.0:
            raise ValueError("arrival rate needs equal-length breakpoints starting at 0 and rates")
        if np.any(np.diff(self.lam_breaks) <= 0) or np.any(self.lam_rates < 0):
            raise ValueError("arrival breakpoints must increase and rates be nonnegative")
        if not self.Q0.is_atomless:
            raise ValueError("initial queue measure must be atomless")
        if self.patience.cdf(0.0) > 0:
            raise ValueError("patience law must put no mass at 0")
        edge = self.service.support_edge
        bp = self.nu0.breakpoints()
        pos = self.nu0.atoms[:, 0] if len(self.nu0.atoms) else np.zeros(0)
        if pos.size and np.any(self.service.sf(pos) <= 0):
            raise ValueError("initial age measure has atoms at or beyond the service support edge")
        if bp.size and math.isfinite(edge) and self.nu0.cdf_left(edge) < self.nu0.total - 1e-12:
            raise ValueError("initial age measure must live on [0, H^s)")
        self.check_initial_state()

    def check_initial_state(self, tol: float = 1e-9) -> None:
        """Membership in the admissible initial set: busy iff a queue can exist."""
        nu_mass, q_mass = self.nu0.total, self.Q0.total
        if nu_mass > 1 + tol:
            raise ValueError(f"S0 violation: initial age measure has mass {nu_mass} > 1")
        if abs(1 - nu_mass - max(1 - self.X0, 0.0)) > tol:
            raise ValueError(f"S0 violation: 1 - <1,nu0> = {1 - nu_mass} but [1 - X0]^+ = {max(1 - self.X0, 0.0)}")
        if abs(nu_mass + q_mass - self.X0) > tol:
            raise ValueError(f"S0 violation: <1,nu0> + Q0 mass = {nu_mass + q_mass} differs from X0 = {self.X0}")

    # -- arrival rate ------------------------------------------------------

    def rate(self, t):
        i = np.searchsorted(self.lam_breaks, np.asarray(t, dtype=float), side="right") - 1
        return self.lam_rates[np.clip(i, 0, None)]

    def lambda_sup(self, T: float) -> float:
        return float(self.lam_rates[self.lam_breaks < T].max()) if T > 0 else float(self.lam_rates[0])

    def cum_arrivals(self, t):
        """``E_t = int_0^t lambda_s ds``."""
        ta = np.asarray(t, dtype=float)
        seg_len = np.diff(self.lam_breaks)
        cum = np.concatenate([[0.0], np.cumsum(self.lam_rates[:-1] * seg_len)])
        i = np.clip(np.searchsorted(self.lam_breaks, ta, side="right") - 1, 0, None)
        out = cum[i] + self.lam_rates[i] * (ta - self.lam_breaks[i])
        return float(out) if ta.ndim == 0 else out

    def segments(self, a: float, b: float) -> list[tuple[float, float, float]]:
        """``(rate, lo, hi)`` pieces of constant rate covering ``[a, b]``."""
        edges = np.concatenate([[a], self.lam_breaks[(self.lam_breaks > a) & (self.lam_breaks < b)], [b]])
        return [(float(self.rate(lo)), float(lo), float(hi)) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]

    def alpha_cdf(self, t: float, x):
        """``alpha_t[0, x]``: initial queue plus arrivals by ``t`` with deadline ``<= x``."""
        xa = np.asarray(x, dtype=float)
        out = np.asarray(self.Q0.cdf_at(xa), dtype=float).copy()
        ipi = self.patience.integrated_cdf
        for lam, lo, hi in self.segments(0.0, t):
            if lam > 0:
                out = out + lam * (np.asarray(ipi(xa - lo)) - np.asarray(ipi(xa - hi)))
        return out

    # -- serialization -------------------------------------------------------

    @classmethod
    def from_config(cls, cfg: dict) -> "FluidData":
        """Build from the JSON config shape (see README)."""
        unknown = set(cfg) - CONFIG_KEYS
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}; initial data goes under 'initial'")
        svc = Law.from_dict(cfg["service"])
        pat = Law.from_dict(cfg["patience"])
        arr = cfg.get("arrivals", {"kind": "poisson", "rate": 0.0})
        kind = arr.get("kind", "poisson")
        if kind == "poisson":
            breaks, rates = [0.0], [float(arr["rate"])]
        elif kind in ("piecewise", "inhomogeneous"):
            breaks, rates = arr["breakpoints"], arr["rates"]
        elif kind == "renewal":
            breaks, rates = [0.0], [1.0 / Law.from_dict(arr["interarrival"]).mean]
        elif kind == "fixed":
            breaks, rates = [0.0], [float(arr.get("rate", 0.0))]
        else:
            raise ValueError(f"unknown arrival kind {kind!r}")
        init = cfg.get("initial", {})
        X0 = float(init.get("X0", 0.0))
        nu0 = FiniteMeasure.from_dict(init["nu0"]) if "nu0" in init else (
            FiniteMeasure.dirac(0.0, min(X0, 1.0)) if X0 > 0 else FiniteMeasure()
        )
        Q0 = FiniteMeasure.from_dict(init["Q0"]) if "Q0" in init else FiniteMeasure()
        return cls(svc, pat, X0, Q0, nu0, breaks, rates)

    def to_config(self) -> dict:
        return {
            "service": self.service.to_dict(),
            "patience": self.patience.to_dict(),
            "arrivals": {"kind": "piecewise", "breakpoints": self.lam_breaks.tolist(), "rates": self.lam_rates.tolist()},
            "initial": {"X0": self.X0, "Q0": self.Q0.to_dict(), "nu0": self.nu0.to_dict()},
        }


@dataclass
class SolverConfig:
    """Numerical knobs. ``dt`` and ``window`` default to ``window/64`` and :func:`choose_step`."""

    dt: float | None = None
    window: float | None = None
    picard_tol: float = 1e-11
    picard_max_iters: int = 60
    mode: str = "auto"  # auto | boundary-map | operator-split
    init: str = "warm"  # warm | zero | arrivals
    n_record: int = 200
    tail_points: int = 200
    eps: float = 0.25
    check_compact: bool = True
    max_halvings: int = 4
    max_steps: int = 2_000_000


# ---------------------------------------------------------------------------
# step size
# ---------------------------------------------------------------------------


def choose_step(svc: Law, pat: Law, lambda_sup: float, nu0: FiniteMeasure | None = None, T: float = 1.0,
                eps: float = 0.25, tail: float | None = None) -> tuple[float, dict]:
    """Picard window length and the quantities that fixed it.

    Always ``G(window) < 1/10``. With a patience floor ``kappa1 > 0`` the
    window is also at most ``kappa1 / 2``. When the service density has
    finitely many zeros, ``lambda_sup * pi[0, window] < (1 - eps) h0`` with
    ``h0`` the least hazard on a compact age set avoiding the zeros and the
    far tail (``tail`` is the service tail mass left outside, ``eps/4`` by
    default).
    """
    rep = validate_assumptions(svc, pat, nu0)
    if not rep.solvable:
        raise SolverError(
            "fluid solver needs either a service density with finitely many zeros "
            "and an atomless initial age measure, or a positive patience lower bound; neither holds"
        )
    tail = eps / 4 if tail is None else tail
    delta_g = float(svc.ppf(0.1)) * (1 - 1e-9)
    cands = {"service": delta_g}
    diag: dict = {"delta_service": delta_g, "kappa1": rep.kappa1, "assumptions": rep.to_dict()}
    if rep.kappa1 > 0:
        cands["patience_floor"] = rep.kappa1 / 2
    if rep.density_zeros_finite:
        rate_bound = max(lambda_sup, 1.0 / svc.mean if svc.mean > 0 else 1.0)
        z_lo = 0.0
        if any(p == 0.0 for p in rep.zero_points):
            z_lo = min(eps / (4 * rate_bound), float(svc.ppf(eps / 4)))
        edge = svc.support_edge
        z_hi = float(svc.isf(tail))
        if math.isfinite(edge):
            z_hi = min(z_hi, edge * (1 - 1e-9))
        z_hi = max(z_hi, z_lo * 2, 1e-9)
        grid = np.linspace(max(z_lo, 1e-12), z_hi, 2001)
        h0 = float(np.min(svc.hazard(grid)))
        m = (1 - eps) * h0
        diag.update(compact_set=(z_lo, z_hi), h0=h0, m=m)
        if lambda_sup > 0 and m / lambda_sup < 1:
            q = m / lambda_sup
            if q <= 0:
                raise SolverError("no positive window: hazard floor on the compact set is zero")
            d_pi = float(pat.ppf(q)) * (1 - 1e-9)
            cands["arrival_hazard"] = d_pi
            diag["delta_arrival"] = d_pi
    delta = min(cands.values())
    if not (delta > 0 and math.isfinite(delta)):
        raise SolverError(f"no positive window satisfies the constraints: {cands}")
    diag["binding"] = min(cands, key=cands.get)
    diag["window"] = delta
    return delta, diag


# ---------------------------------------------------------------------------
# transport and departures
# ---------------------------------------------------------------------------


def _survival_ratio(svc: Law, x: np.ndarray, s) -> np.ndarray:
    sx = np.asarray(svc.sf(x), dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.asarray(svc.sf(x + s), dtype=float) / sx
    return np.where(sx > 0, r, 0.0)


def _entry_knots(K: ScalarPath, t: float):
    """Times and increments of a piecewise-linear ``K`` restricted to ``[K.times[0], t]``."""
    u = K.times[K.times < t]
    u = np.concatenate([u, [t]])
    kv = K(u)
    return u, np.diff(kv)


def transport_nu(nu_start: FiniteMeasure, K: ScalarPath, svc: Law, times=None) -> MeasurePath:
    """Age measure ``nu_s`` from ``nu_start`` and admissions ``K`` (piecewise linear).

    Initial mass at age ``x`` moves to ``x + s`` with weight ``S(x + s) / S(x)``;
    mass admitted at ``u`` has age ``s - u`` and survives with ``S(s - u)``.
    ``times`` default to the knots of ``K``; ages are measured from ``K.times[0]``.
    """
    t0 = float(K.times[0])
    times = K.times if times is None else np.asarray(times, dtype=float)
    out = []
    for t in times:
        s = float(t) - t0
        out.append(_transported(nu_start, svc, s) + _entry_measure(K, svc, float(t)))
    return MeasurePath(times, out)


def _transported(nu: FiniteMeasure, svc: Law, s: float) -> FiniteMeasure:
    atoms = ()
    if len(nu.atoms):
        w = nu.atoms[:, 1] * _survival_ratio(svc, nu.atoms[:, 0], s)
        atoms = np.column_stack([nu.atoms[:, 0] + s, w])
    knots = ()
    if len(nu.ac_knots) > 1:
        kx, kf = nu.ac_knots[:, 0], nu.ac_knots[:, 1]
        dens = np.diff(kf) / np.where(np.diff(kx) > 0, np.diff(kx), 1.0)
        xg, wg = np.polynomial.legendre.leggauss(8)
        a, b = kx[:-1], kx[1:]
        pts = 0.5 * (b - a)[:, None] * xg + 0.5 * (a + b)[:, None]
        piece = np.sum(0.5 * (b - a)[:, None] * wg * _survival_ratio(svc, pts, s), axis=1) * dens
        knots = np.column_stack([kx + s, np.concatenate([[0.0], np.cumsum(piece)])])
    return FiniteMeasure(atoms, knots)


def _entry_measure(K: ScalarPath, svc: Law, t: float) -> FiniteMeasure:
    if t <= K.times[0]:
        return FiniteMeasure()
    u, dk = _entry_knots(K, t)
    du = np.diff(u)
    ok = du > 0
    lm = np.asarray(svc.limited_mean(t - u), dtype=float)
    # mass admitted on [u_j, u_{j+1}] still present at t
    piece = np.where(ok, dk / np.where(ok, du, 1.0) * (lm[:-1] - lm[1:]), 0.0)
    ages = (t - u)[::-1]
    cum = np.concatenate([[0.0], np.cumsum(piece[::-1])])
    if cum[-1] <= 0:
        return FiniteMeasure()
    return FiniteMeasure(ac_knots=np.column_stack([ages, cum]))


def departures(nu_start: FiniteMeasure, K: ScalarPath, svc: Law, t: float) -> float:
    """Cumulative service completions by ``t`` in convolution form.

    ``int (G(x+t) - G(x)) / S(x) nu_start(dx) + int_0^t G(t - s) dK_s``, exact
    for piecewise-linear ``K`` through the integrated CDF.
    """
    s = t - float(K.times[0])
    xq, wq = nu_start.quadrature(16)
    d0 = float(np.sum(wq * (1.0 - _survival_ratio(svc, xq, s)))) if xq.size else 0.0
    if s <= 0:
        return d0
    u, dk = _entry_knots(K, t)
    du = np.diff(u)
    ig = np.asarray(svc.integrated_cdf(t - u), dtype=float)
    ok = du > 0
    dent = np.where(ok, dk / np.where(ok, du, 1.0) * (ig[:-1] - ig[1:]), 0.0)
    return d0 + float(np.sum(dent))


def renewal_solve(F: ScalarPath, svc: Law, window: tuple[float, float], dt: float) -> tuple[ScalarPath, dict]:
    """Solve ``K(s) = F(s) + int_0^s K(s - a) dG(a)`` on ``window`` (``s`` from the window start).

    Product trapezoid rule in the Stieltjes form, so laws without a density
    are handled too. Returns the solution path and ``{"residual", "converged"}``.
    """
    t0, t1 = window
    n = max(int(round((t1 - t0) / dt)), 1)
    s = np.linspace(0.0, t1 - t0, n + 1)
    h = s[1] - s[0]
    f = F(t0 + s)
    Gs = np.asarray(svc.cdf(s), dtype=float)
    dG = np.diff(Gs)
    if dG.size and dG[0] >= 2:
        raise SolverError("renewal step too coarse")
    K = np.empty(n + 1)
    K[0] = f[0]
    for i in range(1, n + 1):
        # sum_{j=0}^{i-1} (K[i-j] + K[i-j-1]) / 2 * dG[j], implicit in K[i]
        if i > 1:
            mids = 0.5 * (K[i - 1:0:-1] + K[i - 2::-1])  # j = 1..i-1
            hist = float(np.dot(mids, dG[1:i]))
        else:
            hist = 0.0
        K[i] = (f[i] + 0.5 * K[i - 1] * dG[0] + hist) / (1.0 - 0.5 * dG[0])
    # residual of the discrete equation
    res = 0.0
    for i in range(1, n + 1):
        conv = float(np.dot(0.5 * (K[i:0:-1] + K[i - 1::-1]), dG[:i]))
        res = max(res, abs(K[i] - f[i] - conv))
    tol = 1e-9 * max(1.0, float(np.max(np.abs(K))))
    info = {"residual": res, "converged": res <= tol, "dt": h}
    return ScalarPath(t0 + s, K), info


# ---------------------------------------------------------------------------
# arrival measure on the level grid
# ---------------------------------------------------------------------------


class _Levels:
    """Level grid containing every time step, plus helpers for arrival increments."""

    def __init__(self, data: FluidData, t: np.ndarray, tail_points: int):
        self.data = data
        pat = data.patience
        edge = pat.support_edge
        reach = edge if math.isfinite(edge) else float(pat.isf(1e-13))
        T = float(t[-1])
        hi = T + reach
        qb = data.Q0.breakpoints()
        if qb.size:
            hi = max(hi, float(qb.max()))
        extra = np.linspace(T, hi, tail_points + 1)[1:] if hi > T else np.zeros(0)
        self.x = np.unique(np.concatenate([t, extra, qb]))
        self.idx_t = np.searchsorted(self.x, t)
        assert np.array_equal(self.x[self.idx_t], t)
        self.t = t
        self.ipi = pat.integrated_cdf

    def increments(self, k0: int, k1: int, col0: int, cols=None) -> tuple[np.ndarray, np.ndarray]:
        """Arrival-measure increments over steps ``k0..k1-1`` on ``x[col0:]`` (or ``x[cols]``).

        Row ``j`` is ``alpha_{t_{k0+j+1}}[0, x] - alpha_{t_{k0+j}}[0, x]``.
        """
        x = self.x[col0:] if cols is None else self.x[cols]
        t, d = self.t, self.data
        m = k1 - k0
        out = np.zeros((m, x.size))
        dE = np.zeros(m)
        simple = len(d.lam_breaks) == 1
        if simple:
            lam = float(d.lam_rates[0])
            if lam > 0:
                P = np.asarray(self.ipi(x[None, :] - t[k0:k1 + 1, None]), dtype=float)
                out = lam * (P[:-1] - P[1:])
            dE[:] = lam * np.diff(t[k0:k1 + 1])
            return out, dE
        for j in range(m):
            for lam, lo, hi in d.segments(t[k0 + j], t[k0 + j + 1]):
                if lam > 0:
                    out[j] += lam * (np.asarray(self.ipi(x - lo)) - np.asarray(self.ipi(x - hi)))
                dE[j] += lam * (hi - lo)
        return out, dE


def build_alpha(data: FluidData, T: float, x_grid=None, times=None) -> MeasurePath:
    """Arrival-deadline measure path ``alpha_t`` at ``times`` (absolutely continuous in ``x``)."""
    if T <= 0:
        raise ValueError("horizon must be positive")
    times = np.linspace(0.0, T, 101) if times is None else np.asarray(times, dtype=float)
    if x_grid is None:
        pat = data.patience
        reach = pat.support_edge if math.isfinite(pat.support_edge) else float(pat.isf(1e-13))
        x_grid = np.unique(np.concatenate([data.Q0.breakpoints(), np.linspace(0.0, T + reach, 1001)]))
    x_grid = np.asarray(x_grid, dtype=float)
    ms = []
    for t in times:
        cdf = data.alpha_cdf(float(t), x_grid)
        if cdf[-1] <= 0:
            ms.append(FiniteMeasure())
            continue
        kn = np.column_stack([x_grid, cdf])
        if kn[0, 1] > 0:
            kn = np.vstack([[max(kn[0, 0] - 1e-300, 0.0), 0.0], kn]) if kn[0, 0] > 0 else kn
        ms.append(FiniteMeasure(ac_knots=_clean_knots(kn)))
    return MeasurePath(times, ms, monotone=True)


def _clean_knots(kn: np.ndarray) -> np.ndarray:
    """Force a CDF table to start at 0 and be nondecreasing (rounding noise only)."""
    kn = kn.copy()
    kn[:, 1] = np.maximum.accumulate(np.maximum(kn[:, 1], 0.0))
    if kn[0, 1] > 0:
        kn = np.vstack([[kn[0, 0], 0.0], kn])
        kn[1, 0] = np.nextafter(kn[1, 0], np.inf)
    return kn


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


@dataclass
class FluidSolution:
    """Solved paths on the time grid ``t`` plus recorded queue snapshots."""

    data: FluidData
    t: np.ndarray
    K: np.ndarray
    R: np.ndarray
    E: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    X: np.ndarray
    nu_mass: np.ndarray
    sigma: np.ndarray
    levels: np.ndarray
    snap_index: np.ndarray
    snap_cdf: np.ndarray
    dt: float
    window: float
    mode: str
    diagnostics: dict = field(default_factory=dict)

    def path(self, name: str) -> ScalarPath:
        v = getattr(self, name)
        return ScalarPath(self.t, v, nondecreasing=name in ("K", "R", "E", "D"))

    @property
    def K_path(self) -> ScalarPath:
        return self.path("K")

    @property
    def R_path(self) -> ScalarPath:
        return self.path("R")

    def queue_measure(self, i: int) -> FiniteMeasure:
        """Queue deadline measure at snapshot ``i`` (levels beyond the grid are not represented)."""
        cdf = self.snap_cdf[i]
        if cdf[-1] <= _ZERO_MASS:
            return FiniteMeasure()
        first = int(np.argmax(cdf > 0))
        lo = max(first - 1, 0)
        return FiniteMeasure(ac_knots=_clean_knots(np.column_stack([self.levels[lo:], cdf[lo:]])))

    def Q_path(self) -> MeasurePath:
        return MeasurePath(self.t[self.snap_index], [self.queue_measure(i) for i in range(len(self.snap_index))])

    def nu_at(self, t: float) -> FiniteMeasure:
        K = ScalarPath(self.t[self.t <= t + 1e-12], self.K[self.t <= t + 1e-12])
        return transport_nu(self.data.nu0, K, self.data.service, [t]).measures[0]

    def nu_path(self, times=None) -> MeasurePath:
        times = self.t[self.snap_index] if times is None else np.asarray(times, dtype=float)
        return transport_nu(self.data.nu0, self.K_path, self.data.service, times)

    def at(self, times) -> dict:
        """Scalar paths linearly interpolated at ``times``."""
        tt = np.asarray(times, dtype=float)
        return {k: np.interp(tt, self.t, getattr(self, k)) for k in ("X", "Q", "K", "R", "D", "E", "nu_mass")}

    def to_csv(self, every: int = 1) -> str:
        rows = ["t,X,Q,K,R,D,E,nu_mass,sigma"]
        for i in range(0, self.t.size, every):
            vals = [self.t[i], self.X[i], self.Q[i], self.K[i], self.R[i], self.D[i], self.E[i], self.nu_mass[i], self.sigma[i]]
            rows.append(",".join(repr(float(v)) for v in vals))
        return "\n".join(rows) + "\n"

    def with_R(self, R: np.ndarray) -> "FluidSolution":
        return replace(self, R=np.asarray(R, dtype=float))


class _Solver:
    def __init__(self, data: FluidData, T: float, cfg: SolverConfig, window: float, dt: float, mode: str):
        self.data, self.cfg, self.mode = data, cfg, mode
        n = max(int(round(T / dt)), 1)
        self.n = n
        self.t = np.linspace(0.0, T, n + 1)
        self.dt = self.t[1] - self.t[0]
        self.m = max(int(math.floor(window / self.dt + 1e-9)), 1)
        self.window = self.m * self.dt
        svc = data.service
        self.lev = _Levels(data, self.t, cfg.tail_points)
        ig = np.asarray(svc.integrated_cdf(self.dt * np.arange(n + 2)), dtype=float)
        self.w = np.diff(ig) / self.dt  # departures per unit admitted, by lag
        xq, wq = data.nu0.quadrature(16)
        if xq.size:
            self.S0 = np.array([float(np.sum(wq * _survival_ratio(svc, xq, s))) for s in self.t])
        else:
            self.S0 = np.zeros(n + 1)
        self.nu0_mass = data.nu0.total

    # past departures at t_{a+1..b} from increments before a
    def _past(self, kinc: np.ndarray, a: int, b: int) -> np.ndarray:
        if a == 0:
            return np.zeros(b - a)
        view = sliding_window_view(self.w[1:], a)[: b - a]
        return view @ kinc[:a][::-1]

    def _march(self, Cw, Q_a, K_a, dA, dE, cap_base, kfix, exp_cols, rec):
        """March one window; capacity from ``cap_base`` or fixed admissions ``kfix``."""
        m = dE.size
        kin, rin, Qs, sig = np.empty(m), np.empty(m), np.empty(m), np.empty(m)
        snaps = {}
        boundary = self.mode == "boundary-map"
        if boundary:
            U = Cw.copy()
            eta = 0.0
        K_cur, Q_cur = K_a, Q_a
        x = self.lev.x[-Cw.size:]
        for j in range(m):
            Cw += dA[j]
            Q_cur += dE[j]
            if kfix is None:
                cap = cap_base[j] - K_cur
                dk = min(max(cap, 0.0), Q_cur)
            else:
                dk = min(kfix[j], Q_cur)
            if dk > 0:
                Cw -= dk
                np.maximum(Cw, 0.0, out=Cw)
            Q_cur -= dk
            K_cur += dk
            e = exp_cols[j]
            if boundary:
                U += dA[j]
                gap = U[e] - (K_cur - K_a)
                new_eta = max(eta, gap, 0.0)
                dr = new_eta - eta
                eta = new_eta
            else:
                dr = Cw[e]
            dr = min(max(dr, 0.0), Q_cur)
            if dr > 0:
                Cw -= dr
                np.maximum(Cw, 0.0, out=Cw)
            Q_cur -= dr
            if Q_cur < -1e-9:
                raise SolverError("negative queue mass")
            Q_cur = max(Q_cur, 0.0)
            kin[j], rin[j], Qs[j] = dk, dr, Q_cur
            if Q_cur <= _ZERO_MASS:
                sig[j] = math.inf
            else:
                c = int(np.searchsorted(Cw, _ZERO_MASS, side="right"))
                sig[j] = x[max(c - 1, 0)] if c < Cw.size else x[-1]
            if rec[j]:
                snaps[j] = Cw.copy()
        return kin, rin, Qs, sig, snaps

    def run(self, kfix: np.ndarray | None = None) -> FluidSolution:
        n, m, cfg, lev = self.n, self.m, self.cfg, self.lev
        K = np.zeros(n + 1)
        R = np.zeros(n + 1)
        Q = np.zeros(n + 1)
        sigma = np.full(n + 1, math.inf)
        kinc = np.zeros(n)
        C = np.asarray(self.data.Q0.cdf_at(lev.x), dtype=float).copy()
        Q[0] = self.data.Q0.total
        sigma[0] = self.data.Q0.support_min()
        rec_every = max(n // max(cfg.n_record, 1), 1)
        rec_mask = np.zeros(n + 1, dtype=bool)
        rec_mask[::rec_every] = True
        rec_mask[n] = True
        snaps = {0: C.copy()}
        diag = {"iterations": [], "ratios": [], "max_ratio_from_2": 0.0, "deltas": []}
        a = 0
        while a < n:
            b = min(a + m, n)
            col0 = int(lev.idx_t[a])
            dA, dE = lev.increments(a, b, col0)
            exp_cols = lev.idx_t[a + 1:b + 1] - col0
            C0w = C[col0:].copy()
            rec = rec_mask[a + 1:b + 1]
            if kfix is not None:
                kin, rin, Qs, sig, sn = self._march(C0w, Q[a], K[a], dA, dE, None, kfix[a:b], exp_cols, rec)
                iters, deltas = 1, []
            else:
                past = self._past(kinc, a, b)
                guess = self._initial_guess(cfg.init, kinc, a, b, dE)
                base = 1.0 - self.S0[a + 1:b + 1] + past
                deltas = []
                for it in range(1, cfg.picard_max_iters + 1):
                    Dwin = np.convolve(guess, self.w[: b - a])[: b - a]
                    kin, rin, Qs, sig, sn = self._march(C0w.copy(), Q[a], K[a], dA, dE, base + Dwin, None, exp_cols, rec)
                    delta = float(np.max(np.abs(np.cumsum(kin) - np.cumsum(guess))))
                    deltas.append(delta)
                    guess = kin
                    if delta < cfg.picard_tol:
                        break
                else:
                    raise SolverError(f"Picard iteration did not converge on [{self.t[a]}, {self.t[b]}]: last change {deltas[-1]:.3e}")
                iters = it
            # accept the last march
            C[col0:] = C0w if kfix is not None else self._replay(C0w, Q[a], K[a], dA, dE, kin, rin)
            C[:col0] = 0.0
            kinc[a:b] = kin
            K[a + 1:b + 1] = K[a] + np.cumsum(kin)
            R[a + 1:b + 1] = R[a] + np.cumsum(rin)
            Q[a + 1:b + 1] = Qs
            sigma[a + 1:b + 1] = sig
            for j, row in sn.items():
                full = np.zeros_like(C)
                full[col0:] = row
                snaps[a + 1 + j] = full
            diag["iterations"].append(iters)
            diag["deltas"].append(deltas)
            floor = 1e3 * np.finfo(float).eps * max(1.0, K[b])
            for k in range(2, len(deltas)):
                if deltas[k - 1] > floor:
                    r = deltas[k] / deltas[k - 1]
                    diag["ratios"].append(r)
            a = b
        if diag["ratios"]:
            diag["max_ratio_from_2"] = float(max(diag["ratios"]))
        return self._finish(K, R, Q, sigma, kinc, snaps, diag)

    def _replay(self, Cw, Q_a, K_a, dA, dE, kin, rin):
        """Rebuild the window-end queue CDF from accepted admissions and reneging."""
        for j in range(dE.size):
            Cw += dA[j]
            if kin[j] > 0:
                Cw -= kin[j]
                np.maximum(Cw, 0.0, out=Cw)
            if rin[j] > 0:
                Cw -= rin[j]
                np.maximum(Cw, 0.0, out=Cw)
        return Cw

    def _initial_guess(self, how, kinc, a, b, dE):
        if how == "zero":
            return np.zeros(b - a)
        if how == "arrivals" or a == 0:
            return dE.copy()
        return np.full(b - a, kinc[a - 1])

    def _finish(self, K, R, Q, sigma, kinc, snaps, diag) -> FluidSolution:
        n = self.n
        DK = np.zeros(n + 1)
        DK[1:] = np.convolve(kinc, self.w[:n])[:n]
        nu_mass = self.S0 + K - DK
        D = self.nu0_mass - self.S0 + DK
        E = np.asarray(self.data.cum_arrivals(self.t), dtype=float)
        X = Q + nu_mass
        idx = np.array(sorted(snaps))
        snap = np.vstack([snaps[i] for i in idx])
        diag.update(_regime_diagnostics(self.t, X, Q))
        diag["capacity_excess"] = float(np.max(nu_mass - 1.0))
        return FluidSolution(
            data=self.data, t=self.t, K=K, R=R, E=E, D=D, Q=Q, X=X, nu_mass=nu_mass, sigma=sigma,
            levels=self.lev.x, snap_index=idx, snap_cdf=snap, dt=self.dt, window=self.window, mode=self.mode,
            diagnostics=diag,
        )


def _regime_diagnostics(t: np.ndarray, X: np.ndarray, Q: np.ndarray, tol: float = 1e-9) -> dict:
    """Times where ``X`` crosses 1 (bisection on the linear interpolant) and grazing contacts."""
    busy = X >= 1.0 - tol
    switches = []
    for k in np.flatnonzero(busy[1:] != busy[:-1]):
        lo, hi = t[k], t[k + 1]
        f = lambda s: np.interp(s, t[k:k + 2], X[k:k + 2]) - 1.0
        flo = f(lo)
        for _ in range(200):
            if hi - lo <= 1e-10:
                break
            mid = 0.5 * (lo + hi)
            if (f(mid) >= 0) == (flo >= 0):
                lo = mid
            else:
                hi = mid
        switches.append(0.5 * (lo + hi))
    graze = np.flatnonzero((np.abs(X - 1.0) <= tol) & (Q <= _ZERO_MASS))
    return {
        "regime_switches": switches,
        "grazing_samples": int(graze.size),
        "first_grazing": float(t[graze[0]]) if graze.size else None,
    }


def _resolve_mode(data: FluidData, mode: str) -> str:
    k1 = data.patience.kappa1
    if mode == "auto":
        return "boundary-map" if k1 > 0 else "operator-split"
    if mode == "boundary-map" and k1 <= 0:
        raise SolverError("boundary-map mode needs a positive patience lower bound; use operator-split")
    if mode not in ("boundary-map", "operator-split"):
        raise ValueError(f"unknown mode {mode!r}")
    return mode


def _compact_violation(sol: FluidSolution, diag: dict, n_eval: int = 40) -> float:
    """``sup_t nu_t(C^c)`` on a subset of times for the compact age set chosen by :func:`choose_step`."""
    if "compact_set" not in diag:
        return 0.0
    z_lo, z_hi = diag["compact_set"]
    svc, nu0 = sol.data.service, sol.data.nu0
    xq, wq = nu0.quadrature(16)
    worst = 0.0
    for k in np.unique(np.linspace(0, sol.t.size - 1, n_eval).astype(int)):
        t = sol.t[k]
        out = 0.0
        if xq.size:
            r = wq * _survival_ratio(svc, xq, t)
            out += float(np.sum(r[(xq + t < z_lo) | (xq + t > z_hi)]))
        if z_lo > 0:
            out += float(sol.K[k] - np.interp(t - z_lo, sol.t, sol.K))
        if t > z_hi:
            sel = sol.t <= t - z_hi
            u = sol.t[sel]
            if u.size > 1:
                lm = np.asarray(svc.limited_mean(t - u), dtype=float)
                dk = np.diff(sol.K[sel])
                out += float(np.sum(dk / np.diff(u) * (lm[:-1] - lm[1:])))
        worst = max(worst, out)
    return worst


def solve(data: FluidData, T: float, config: SolverConfig | None = None) -> FluidSolution:
    """Solve the fluid model on ``[0, T]``."""
    cfg = config or SolverConfig()
    if T <= 0:
        raise ValueError("horizon must be positive")
    mode = _resolve_mode(data, cfg.mode)
    lam_sup = data.lambda_sup(T)
    window, sdiag = choose_step(data.service, data.patience, lam_sup, data.nu0, T, cfg.eps)
    if cfg.window is not None:
        window = min(window, cfg.window)
    tail = cfg.eps / 4
    halvings = []
    for attempt in range(cfg.max_halvings + 1):
        dt = cfg.dt if cfg.dt is not None else window / 64
        dt = min(dt, T)
        if T / dt > cfg.max_steps:
            raise SolverError(
                f"window {window:.3e} would need {T / dt:.3e} time steps (limit {cfg.max_steps}); "
                "the hazard floor on the compact age set is too small for this horizon"
            )
        solver = _Solver(data, T, cfg, max(window, dt), dt, mode)
        sol = solver.run()
        sol.diagnostics["step"] = sdiag
        if not cfg.check_compact or "compact_set" not in sdiag:
            break
        viol = _compact_violation(sol, sdiag)
        sol.diagnostics["compact_mass_outside"] = viol
        if viol < cfg.eps:
            break
        # enlarge the compact set and shrink the window, then rerun
        tail /= 2
        w2, sdiag = choose_step(data.service, data.patience, lam_sup, data.nu0, T, cfg.eps, tail=tail)
        window = min(window / 2, w2)
        halvings.append({"violation": viol, "new_window": window})
    sol.diagnostics["halvings"] = halvings
    return sol


def compute_R(data: FluidData, K: ScalarPath, T: float, dt: float, mode: str = "auto") -> tuple[ScalarPath, FluidSolution]:
    """Reneging and queue for a prescribed admission path ``K`` (clamped to the available queue).

    Returns ``R`` and a :class:`FluidSolution` carrying the queue snapshots.
    """
    mode = _resolve_mode(data, mode)
    cfg = SolverConfig(dt=dt)
    window = data.patience.kappa1 / 2 if mode == "boundary-map" else T
    solver = _Solver(data, T, cfg, max(window, dt), dt, mode)
    kfix = np.diff(K(solver.t))
    sol = solver.run(kfix=kfix)
    return sol.R_path, sol


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def _bump(r):
    r = np.asarray(r, dtype=float)
    inside = np.abs(r) < 1
    out = np.zeros_like(r)
    ri = r[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ri * ri))
    return out


def _bump_d(r):
    r = np.asarray(r, dtype=float)
    inside = np.abs(r) < 1
    out = np.zeros_like(r)
    ri = r[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ri * ri)) * (-2.0 * ri / (1.0 - ri * ri) ** 2)
    return out


def _test_functions(span: float, T: float, count: int = 10):
    """``phi(x, s) = bump((x - c)/w) cos(om s)`` with derivatives, centers across ``[0, span]``."""
    out = []
    for j in range(count):
        c = span * (j + 0.5) / count - (0.5 * span / count if j == 0 else 0.0)
        w = 0.6 * span / count + 0.25 * span * (j % 3) / count
        om = 2 * math.pi * (j % 4) / max(T, 1e-9)

        def phi(x, s, c=c, w=w, om=om):
            return _bump((x - c) / w) * np.cos(om * s)

        def phi_x(x, s, c=c, w=w, om=om):
            return _bump_d((x - c) / w) / w * np.cos(om * s)

        def phi_s(x, s, c=c, w=w, om=om):
            return -om * _bump((x - c) / w) * np.sin(om * s)

        out.append((phi, phi_x, phi_s))
    return out


def _dG_rows(svc: Law, f2, lo: np.ndarray, hi: np.ndarray, nodes: int = 48) -> np.ndarray:
    """Row-wise ``int_{(lo_i, hi_i]} f2(a, i) dG(a)``; ``f2`` takes ages shaped ``(rows, nodes)``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if svc.kind == "deterministic":
        d = svc.params["value"]
        a = np.full((lo.size, 1), d)
        ok = (lo < d) & (d <= hi)
        return np.where(ok, f2(a)[:, 0], 0.0)
    start = svc.params["low"] if svc.kind == "uniform" else 0.0
    lo2 = np.maximum(lo, start)
    hi2 = np.minimum(hi, svc.support_edge)
    ok = hi2 > lo2
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    half = 0.5 * np.where(ok, hi2 - lo2, 0.0)
    a = half[:, None] * xg + (0.5 * (hi2 + lo2))[:, None]
    a = np.where(ok[:, None], a, start + 1.0)
    vals = f2(a) * np.asarray(svc.pdf(a), dtype=float)
    return np.where(ok, half * np.sum(wg * vals, axis=1), 0.0)


def _weak_transport_residual(sol: FluidSolution, n_times: int = 5, n_s: int = 401, max_blocks: int = 2000) -> float:
    """Max defect of the weak transport equation over the test family and a few times."""
    data, svc = sol.data, sol.data.service
    t, K = sol.t, sol.K
    T = float(t[-1])
    # admission blocks (coarsened only for very fine grids)
    step = max(int(math.ceil((t.size - 1) / max_blocks)), 1)
    ub = t[::step]
    if ub[-1] != t[-1]:
        ub = np.append(ub, t[-1])
    kb = np.diff(np.interp(ub, t, K))
    um = 0.5 * (ub[:-1] + ub[1:])
    xq, wq = data.nu0.quadrature(16)
    sfx = np.asarray(svc.sf(xq), dtype=float) if xq.size else np.zeros(0)
    reach = float(svc.isf(1e-3)) if not math.isfinite(svc.support_edge) else svc.support_edge
    span = max(reach, (float(xq.max()) if xq.size else 0.0) + T * 0.5, 1.0)
    fam = _test_functions(span, T)

    def pair(f, s: float) -> float:
        """``<f(., s), nu_s>`` with ``f(x, s)``."""
        v = 0.0
        if xq.size:
            v += float(np.sum(wq * f(xq + s, s) * _survival_ratio(svc, xq, s)))
        sel = ub[1:] <= s + 1e-12
        part = (ub[:-1] < s) & ~sel
        ages = s - um[sel]
        v += float(np.sum(kb[sel] * f(ages, s) * np.asarray(svc.sf(ages), dtype=float)))
        if np.any(part):
            i = int(np.flatnonzero(part)[0])
            frac = (s - ub[i]) / (ub[i + 1] - ub[i])
            a = 0.5 * (s - ub[i])
            v += float(kb[i] * frac * f(np.array([a]), s)[0] * float(svc.sf(a)))
        return v

    worst = 0.0
    for te in np.linspace(T / n_times, T, n_times):
        s_nodes = np.linspace(0.0, te, n_s)
        for phi, phi_x, phi_s in fam:
            lhs = pair(phi, te)
            rhs = pair(phi, 0.0)
            g = np.array([pair(lambda x, s: phi_x(x, s) + phi_s(x, s), s) for s in s_nodes])
            rhs += float(trapezoid(g, s_nodes))
            # boundary inflow
            sel = ub[1:] <= te + 1e-12
            rhs += float(np.sum(kb[sel] * phi(np.zeros(int(sel.sum())), um[sel])))
            # completions: initial mass, then admitted mass (swapped order of integration)
            hz = 0.0
            if xq.size:
                rows = _dG_rows(svc, lambda a: phi(a, a - xq[:, None]), xq, xq + te)
                hz += float(np.sum(wq / np.where(sfx > 0, sfx, 1.0) * rows))
            if np.any(sel):
                u = um[sel]
                rows = _dG_rows(svc, lambda a: phi(a, a + u[:, None]), np.zeros(u.size), te - u)
                hz += float(np.sum(kb[sel] * rows))
            rhs -= hz
            worst = max(worst, abs(lhs - rhs))
    return worst


def fme_residuals(sol: FluidSolution, data: FluidData | None = None, n_levels: int = 300) -> dict:
    """Max residual of each fluid model equation on the solution grid."""
    data = data or sol.data
    t, svc = sol.t, data.service
    E = np.asarray(data.cum_arrivals(t), dtype=float)
    out = {}
    out["fme1_balance"] = float(np.max(np.abs(data.Q0.total + E - sol.Q - sol.K - sol.R)))
    snaps = sol.snap_index
    ts = t[snaps]
    Kp = sol.K_path
    nu_tot = np.array([_transported(data.nu0, svc, s).total + _entry_measure(Kp, svc, s).total for s in ts])
    q_tot = sol.snap_cdf[:, -1]
    out["fme2_X"] = float(np.max(np.abs(sol.X[snaps] - q_tot - nu_tot)))
    out["fme3_Q"] = float(np.max(np.abs(sol.Q - np.maximum(sol.X - 1.0, 0.0))))
    D_ind = np.array([departures(data.nu0, Kp, svc, s) for s in ts])
    out["fme4_K"] = float(np.max(np.abs(sol.K[snaps] - (nu_tot - data.nu0.total + D_ind))))
    out["fme5_weak_transport"] = _weak_transport_residual(sol)
    # queue = Theta_1(alpha, K + R), recomputed level by level
    lev = _Levels(data, t, 0)
    cols = np.unique(np.linspace(0, sol.levels.size - 1, n_levels).astype(int))
    x = sol.levels[cols]
    n = t.size - 1
    A = np.empty((n + 1, x.size))
    A[0] = np.asarray(data.Q0.cdf_at(x), dtype=float)
    dA, _ = _increments_at(lev, data, x, n)
    A[1:] = A[0] + np.cumsum(dA, axis=0)
    mvsm = mvsm_solve_cdf(t, x, A, data.Q0.total + E, sol.K + sol.R)
    out["fme6_mvsm"] = float(np.max(np.abs(mvsm.xi_cdf[snaps] - sol.snap_cdf[:, cols])))
    idx_t = np.searchsorted(sol.levels, ts)
    out["fme7_deadline"] = float(np.max(sol.snap_cdf[np.arange(snaps.size), idx_t]))
    dR = np.diff(sol.R)
    out["fme8_idle_reneging"] = float(np.sum(np.maximum(1.0 - sol.X[1:], 0.0) * dR))
    gap = np.minimum(sol.sigma[1:] - t[1:], 1.0)
    out["fme9_frontier"] = float(np.sum(np.maximum(gap, 0.0) * dR))
    out["balance_X"] = float(np.max(np.abs(sol.X + sol.D + sol.R - data.X0 - E)))
    return out


def _increments_at(lev: _Levels, data: FluidData, x: np.ndarray, n: int, chunk: int = 2000):
    ipi = data.patience.integrated_cdf
    t = lev.t
    out = np.zeros((n, x.size))
    dE = np.zeros(n)
    if len(data.lam_breaks) == 1:
        lam = float(data.lam_rates[0])
        for k0 in range(0, n, chunk):
            k1 = min(k0 + chunk, n)
            if lam > 0:
                P = np.asarray(ipi(x[None, :] - t[k0:k1 + 1, None]), dtype=float)
                out[k0:k1] = lam * (P[:-1] - P[1:])
            dE[k0:k1] = lam * np.diff(t[k0:k1 + 1])
        return out, dE
    for k in range(n):
        for lam, lo, hi in data.segments(t[k], t[k + 1]):
            if lam > 0:
                out[k] += lam * (np.asarray(ipi(x - lo)) - np.asarray(ipi(x - hi)))
            dE[k] += lam * (hi - lo)
    return out, dE


# ---------------------------------------------------------------------------
# restartable stepping
# ---------------------------------------------------------------------------


@dataclass
class FluidState:
    """Fluid state at absolute time ``t``: queue deadlines (absolute) and ages in service."""

    t: float
    Q: FiniteMeasure
    nu: FiniteMeasure

    @property
    def X(self) -> float:
        return self.Q.total + self.nu.total


def _shift_data(state: FluidState, data: FluidData) -> FluidData:
    """Data of the time-shifted problem started from ``state`` (levels and clock measured from ``state.t``)."""
    t0 = state.t
    q = state.Q
    kn = q.ac_knots.copy() if len(q.ac_knots) else np.zeros((0, 2))
    if kn.size:
        kn[:, 0] = np.maximum(kn[:, 0] - t0, 0.0)
        kn = _clean_knots(kn)
    Q0 = FiniteMeasure(ac_knots=kn) if kn.size else FiniteMeasure()
    rest = data.lam_breaks > t0
    breaks = np.concatenate([[0.0], data.lam_breaks[rest] - t0])
    rates = np.concatenate([[float(data.rate(t0))], data.lam_rates[rest]])
    return FluidData(data.service, data.patience, Q0.total + state.nu.total, Q0, state.nu, breaks, rates)


def fluid_step(state: FluidState, data: FluidData, config: SolverConfig | None = None,
               length: float | None = None) -> tuple[FluidState, FluidSolution]:
    """Advance ``state`` by one Picard window (or ``length``) through the time-shifted problem."""
    cfg = config or SolverConfig()
    shifted = _shift_data(state, data)
    if length is None:
        length, _ = choose_step(data.service, data.patience, data.lambda_sup(state.t + 1.0), shifted.nu0, 1.0, cfg.eps)
        if cfg.window is not None:
            length = min(length, cfg.window)
    sol = solve(shifted, length, replace(cfg, window=length))
    q_end = sol.queue_measure(len(sol.snap_index) - 1)
    if len(q_end.ac_knots):
        kn = q_end.ac_knots.copy()
        kn[:, 0] += state.t
        q_end = FiniteMeasure(ac_knots=kn)
    return FluidState(state.t + float(sol.t[-1]), q_end, sol.nu_at(float(sol.t[-1]))), sol
