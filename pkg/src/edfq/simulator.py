"""Exact discrete-event simulation of the N-server EDF queue with reneging.

Customers are indexed ``-X0^N + 1 .. 0`` (present at time 0) and ``1, 2, ...``
(arrivals). Events at a common epoch are settled in the order: service
completions, admissions from the buffer, deadline expiries, arrivals (an
arrival that finds a free server is admitted at once). Admitting before
expiring lets a customer whose deadline equals the admission epoch be
served.
"""

from __future__ import annotations

import heapq
import math
from bisect import insort
from dataclasses import dataclass, field

import numpy as np

from .distributions import Law
from .fluid import FluidData
from .measures import FiniteMeasure, sample_atoms
from .skorohod import mvsm_solve_cdf

__all__ = [
    "SimConfig",
    "SimTrace",
    "init_state",
    "simulate",
    "check_pathwise_identities",
    "compensator_diagnostic",
]

ARRIVE, ADMIT, COMPLETE, RENEGE = "arrive", "admit", "complete", "renege"


@dataclass
class SimConfig:
    """One simulation run.

    ``arrivals`` is a dict: ``{"kind": "poisson", "rate": l}``,
    ``{"kind": "piecewise", "breakpoints": [...], "rates": [...]}`` (thinning),
    ``{"kind": "renewal", "interarrival": law-dict}`` or
    ``{"kind": "fixed", "times": [...], "services": [...], "patience": [...]}``.
    Rates are per server: the N-th system sees ``N * rate``. Fixed streams are
    used as given, without scaling.
    """

    N: int
    T: float
    service: Law
    patience: Law
    arrivals: dict = field(default_factory=lambda: {"kind": "poisson", "rate": 0.0})
    initial: FluidData | None = None
    snapshot_dt: float = 0.1
    discipline: str = "edf"  # edf | fcfs
    service_coupling: str = "customer"  # customer | admission
    record_epochs: bool = True
    record_measures: bool = False

    def __post_init__(self):
        if int(self.N) < 1:
            raise ValueError("N must be at least 1")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.discipline not in ("edf", "fcfs"):
            raise ValueError("discipline must be 'edf' or 'fcfs'")
        if self.service_coupling not in ("customer", "admission"):
            raise ValueError("service_coupling must be 'customer' or 'admission'")
        self.N = int(self.N)

    @classmethod
    def from_config(cls, cfg: dict, **over) -> "SimConfig":
        data = FluidData.from_config(cfg)
        kw = dict(
            N=cfg.get("N", 100), T=cfg.get("T", 10.0), service=data.service, patience=data.patience,
            arrivals=cfg.get("arrivals", {"kind": "poisson", "rate": 0.0}), initial=data,
            snapshot_dt=cfg.get("snapshot_dt", 0.1),
        )
        kw.update({k: v for k, v in over.items() if v is not None})
        return cls(**kw)


@dataclass
class SimState:
    """Initial population drawn for one run."""

    N: int
    ages: np.ndarray  # ages of customers in service at time 0
    residual: np.ndarray  # remaining service of those customers
    total_service: np.ndarray
    queue_deadlines: np.ndarray  # absolute deadlines of initially queued customers

    @property
    def X0(self) -> int:
        return self.ages.size + self.queue_deadlines.size


@dataclass
class SimTrace:
    """Snapshots on a regular grid plus, optionally, the full epoch and event record."""

    N: int
    T: float
    discipline: str
    snap_t: np.ndarray
    counts: dict  # name -> int array at snapshot times (X, Q, K, R, D, E, S)
    nu_snap: list | None = None  # per snapshot: ages in service
    q_snap: list | None = None  # per snapshot: queued deadlines
    epochs: dict | None = None  # name -> array at event epochs
    events: list | None = None  # (t, kind, index)
    customers: dict | None = None  # per-customer arrays, index -> row via offset
    offset: int = 0  # row of customer index i is i + offset
    X0: int = 0
    S0: int = 0
    Q0_deadlines: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def scaled(self, name: str) -> np.ndarray:
        return self.counts[name] / self.N

    def nu_measure(self, i: int) -> FiniteMeasure:
        a = self.nu_snap[i]
        return FiniteMeasure([(x, 1.0 / self.N) for x in a]) if len(a) else FiniteMeasure()

    def q_measure(self, i: int) -> FiniteMeasure:
        a = self.q_snap[i]
        return FiniteMeasure([(x, 1.0 / self.N) for x in a]) if len(a) else FiniteMeasure()

    def to_csv(self) -> str:
        rows = ["t,X,Q,K,R,D,E"]
        for i, t in enumerate(self.snap_t):
            vals = [self.counts[k][i] / self.N for k in ("X", "Q", "K", "R", "D", "E")]
            rows.append(",".join([repr(float(t))] + [repr(float(v)) for v in vals]))
        return "\n".join(rows) + "\n"

    def events_csv(self) -> str:
        rows = ["t,kind,customer"]
        rows += [f"{t!r},{k},{i}" for t, k, i in (self.events or [])]
        return "\n".join(rows) + "\n"


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]  # arrivals, service, patience, initial


def init_state(N: int, data: FluidData | None, seed: int | np.random.Generator) -> SimState:
    """Round ``N * X0`` customers; fill servers with ages from ``nu0``, queue deadlines from ``Q0``."""
    rng = seed if isinstance(seed, np.random.Generator) else _streams(seed)[3]
    if data is None or data.X0 == 0:
        z = np.zeros(0)
        return SimState(N, z, z, z, z)
    data.check_initial_state()
    x0 = int(round(N * data.X0))
    n_srv = min(x0, N)
    n_q = x0 - n_srv
    svc = data.service
    if n_srv:
        if data.nu0.total <= 0:
            raise ValueError("S0 violation: customers in service but the initial age measure is zero")
        ages = sample_atoms(data.nu0, n_srv, rng)
        total = np.asarray(svc.sample_conditional_exceeds(ages, rng), dtype=float).reshape(n_srv)
    else:
        ages = total = np.zeros(0)
    if n_q:
        if data.Q0.total <= 0:
            raise ValueError("S0 violation: customers queued but the initial queue measure is zero")
        # indices follow deadline order, so the initial queue is the same under EDF and FCFS
        dl = np.sort(sample_atoms(data.Q0, n_q, rng))
    else:
        dl = np.zeros(0)
    return SimState(N, ages, total - ages, total, dl)


class _ArrivalStream:
    def __init__(self, spec: dict, N: int, rng: np.random.Generator, svc_rng, pat_rng, svc: Law, pat: Law):
        self.kind = spec.get("kind", "poisson")
        self.rng, self.svc_rng, self.pat_rng, self.svc, self.pat = rng, svc_rng, pat_rng, svc, pat
        self.t = 0.0
        self.i = 0
        if self.kind == "poisson":
            self.rate = N * float(spec["rate"])
        elif self.kind in ("piecewise", "inhomogeneous"):
            self.breaks = np.asarray(spec["breakpoints"], dtype=float)
            self.rates = N * np.asarray(spec["rates"], dtype=float)
            lam_sup = spec.get("lambda_sup")
            if lam_sup is None and self.kind == "inhomogeneous":
                raise ValueError("inhomogeneous arrivals need lambda_sup")
            self.sup = N * float(lam_sup) if lam_sup is not None else float(self.rates.max())
            if self.sup < self.rates.max():
                raise ValueError("lambda_sup is below the arrival rate")
        elif self.kind == "renewal":
            self.inter = Law.from_dict(spec["interarrival"])
            self.N = N
        elif self.kind == "fixed":
            self.times = [float(x) for x in spec["times"]]
            self.fixed_v = spec.get("services")
            self.fixed_r = spec.get("patience")
        else:
            raise ValueError(f"unknown arrival kind {self.kind!r}")

    def next(self) -> float:
        """Time of the next arrival (inf when the stream is exhausted)."""
        if self.kind == "poisson":
            if self.rate <= 0:
                return math.inf
            self.t += self.rng.exponential(1.0 / self.rate)
            return self.t
        if self.kind in ("piecewise", "inhomogeneous"):
            if self.sup <= 0:
                return math.inf
            while True:
                self.t += self.rng.exponential(1.0 / self.sup)
                lam = self.rates[max(np.searchsorted(self.breaks, self.t, side="right") - 1, 0)]
                if self.rng.random() * self.sup < lam:
                    return self.t
                if lam == 0 and self.t > self.breaks[-1] and self.rates[-1] == 0:
                    return math.inf
        if self.kind == "renewal":
            self.t += float(self.inter.sample(self.rng)) / self.N
            return self.t
        j = self.i
        return self.times[j] if j < len(self.times) else math.inf

    def primitives(self, draw_service: bool = True) -> tuple[float, float]:
        """Service and patience of the arrival just taken (drawn in arrival order)."""
        j = self.i
        self.i += 1
        if self.kind == "fixed" and self.fixed_v is not None:
            return float(self.fixed_v[j]), float(self.fixed_r[j])
        vv = float(self.svc.sample(self.svc_rng)) if draw_service else math.nan
        return vv, float(self.pat.sample(self.pat_rng))


def simulate(config: SimConfig, seed: int) -> SimTrace:
    """Run one replication; ``(config, seed)`` determines the trace bit for bit."""
    cfg = config
    N, T = cfg.N, cfg.T
    ar_rng, sv_rng, pt_rng, in_rng = _streams(seed)
    st = init_state(N, cfg.initial, in_rng)
    edf = cfg.discipline == "edf"
    # "admission": the k-th admitted customer gets the k-th service draw
    by_admission = cfg.service_coupling == "admission" and cfg.arrivals.get("kind") != "fixed"

    # customer table (grown as customers arrive)
    a, r, u, v, gam, out_t, status = [], [], [], [], [], [], []
    q_in, q_out = [], []
    n_init = st.X0
    offset = n_init - 1  # row of index i is i + offset; initial indices are -n_init+1 .. 0

    busy = []  # (completion time, index)
    buffer = []  # discipline key heap: (u, i) or (i,)
    expiry = []  # (u, i)
    in_service = {}  # index -> admission time
    E = K = R = D = 0
    free = N
    for j in range(st.ages.size):
        i = j - n_init + 1
        a.append(-st.ages[j]); r.append(math.inf); u.append(math.inf); v.append(st.total_service[j])
        gam.append(-st.ages[j]); out_t.append(math.nan); status.append("service")
        q_in.append(-1); q_out.append(-1)
        heapq.heappush(busy, (st.residual[j], i))
        in_service[i] = -st.ages[j]
        free -= 1
    for j, dl in enumerate(st.queue_deadlines):
        i = st.ages.size + j - n_init + 1
        a.append(0.0); r.append(dl); u.append(dl)
        v.append(math.nan if by_admission else float(cfg.service.sample(sv_rng)))
        gam.append(math.inf); out_t.append(math.nan); status.append("queue")
        q_in.append(0); q_out.append(-1)
        heapq.heappush(buffer, (dl, i) if edf else (i,))
        heapq.heappush(expiry, (dl, i))
    S0 = len(in_service)
    Q_n = len(st.queue_deadlines)

    stream = _ArrivalStream(cfg.arrivals, N, ar_rng, sv_rng, pt_rng, cfg.service, cfg.patience)
    next_arr = stream.next()

    snap_t = np.arange(0.0, T + 1e-12 * max(T, 1.0), cfg.snapshot_dt)
    names = ("X", "Q", "K", "R", "D", "E", "S")
    counts = {k: np.zeros(snap_t.size, dtype=np.int64) for k in names}
    nu_snap = [] if cfg.record_measures else None
    q_snap = [] if cfg.record_measures else None
    si = 0
    rec = cfg.record_epochs
    ep = {k: [] for k in ("t", "X", "Q", "K", "R", "D", "E", "S")} if rec else None
    events = [] if rec else None

    def snapshot(upto: float):
        nonlocal si
        while si < snap_t.size and snap_t[si] < upto:
            s = snap_t[si]
            S = len(in_service)
            for k, val in zip(names, (Q_n + S, Q_n, K, R, D, E, S)):
                counts[k][si] = val
            if nu_snap is not None:
                nu_snap.append(np.sort(np.array([s - g for g in in_service.values()])))
                q_snap.append(np.sort(np.array([u[i + offset] for i in _queued(buffer, status, offset, edf)])))
            si += 1

    def admit(i: int, t: float):
        nonlocal K, free
        row = i + offset
        if by_admission:
            v[row] = float(cfg.service.sample(sv_rng))
        gam[row] = t
        status[row] = "service"
        in_service[i] = t
        heapq.heappush(busy, (t + v[row], i))
        K += 1
        free -= 1

    epoch = 0
    first = True
    while True:
        t_c = busy[0][0] if busy else math.inf
        t_x = expiry[0][0] if expiry else math.inf
        t = min(next_arr, t_c, t_x)
        if first:
            t = min(t, 0.0) if t <= 0 else 0.0
        if t > T:
            break
        snapshot(t)
        # 1. completions
        while busy and busy[0][0] <= t:
            _, i = heapq.heappop(busy)
            row = i + offset
            status[row] = "done"
            out_t[row] = t
            del in_service[i]
            D += 1
            free += 1
            if rec:
                events.append((t, COMPLETE, i))
        # 2. admissions from the buffer (deadline == t still admissible)
        while free > 0 and buffer:
            key = heapq.heappop(buffer)
            i = key[-1]
            row = i + offset
            if status[row] != "queue":
                continue
            Q_n -= 1
            q_out[row] = epoch
            admit(i, t)
            if rec:
                events.append((t, ADMIT, i))
        # 3. expiries
        while expiry and expiry[0][0] <= t:
            dl, i = heapq.heappop(expiry)
            row = i + offset
            if status[row] != "queue":
                continue
            status[row] = "reneged"
            out_t[row] = t
            q_out[row] = epoch
            Q_n -= 1
            R += 1
            if rec:
                events.append((t, RENEGE, i))
        # 4. arrivals
        while next_arr <= t:
            vv, rr = stream.primitives(not by_admission)
            i = E + 1
            E += 1
            a.append(t); r.append(rr); u.append(t + rr); v.append(vv)
            gam.append(math.inf); out_t.append(math.nan); status.append("queue")
            q_in.append(epoch); q_out.append(-1)
            if rec:
                events.append((t, ARRIVE, i))
            if free > 0:
                q_out[-1] = epoch
                admit(i, t)
                if rec:
                    events.append((t, ADMIT, i))
            else:
                Q_n += 1
                heapq.heappush(buffer, (t + rr, i) if edf else (i,))
                heapq.heappush(expiry, (t + rr, i))
            next_arr = stream.next()
        if rec:
            S = len(in_service)
            for k, val in zip(("t", "X", "Q", "K", "R", "D", "E", "S"), (t, Q_n + S, Q_n, K, R, D, E, S)):
                ep[k].append(val)
        epoch += 1
        first = False
    snapshot(math.inf)

    customers = None
    if rec:
        customers = {
            "a": np.array(a), "r": np.array(r), "u": np.array(u), "v": np.array(v), "gamma": np.array(gam),
            "out": np.array(out_t), "status": np.array(status), "q_in": np.array(q_in), "q_out": np.array(q_out),
        }
        ep = {k: np.array(vals) for k, vals in ep.items()}
    return SimTrace(
        N=N, T=T, discipline=cfg.discipline, snap_t=snap_t, counts=counts, nu_snap=nu_snap, q_snap=q_snap,
        epochs=ep, events=events, customers=customers, offset=offset, X0=n_init, S0=S0,
        Q0_deadlines=np.asarray(st.queue_deadlines, dtype=float),
    )


def _queued(buffer, status, offset, edf):
    return [key[-1] for key in buffer if status[key[-1] + offset] == "queue"]


# ---------------------------------------------------------------------------
# pathwise identities
# ---------------------------------------------------------------------------


def check_pathwise_identities(trace: SimTrace) -> dict:
    """Verify the balance, non-idling, deadline, priority and MVSM identities at event epochs.

    Integer identities are checked exactly. Deadline and priority conditions
    are checked by replaying the event log against an independent ordered
    set of queued ``(deadline, index)`` pairs. The queue is recomputed from
    ``(alpha^N, K^N + R^N)`` with the measure-valued Skorohod map on integer
    counts and compared exactly.
    """
    if trace.epochs is None:
        raise ValueError("trace was recorded without epochs")
    ep, N = trace.epochs, trace.N
    X, Q, K, R, D, E, S = (ep[k] for k in ("X", "Q", "K", "R", "D", "E", "S"))
    Q0 = trace.X0 - trace.S0
    rep = {}
    rep["queue_balance"] = bool(np.all(Q0 + E == Q + K + R))
    rep["X_decomposition"] = bool(np.all(X == Q + S))
    rep["station_balance"] = bool(np.all(trace.S0 + K == S + D))
    rep["system_balance"] = bool(np.all(trace.X0 + E == X + D + R))
    rep["non_idling"] = bool(np.all(Q == np.maximum(X - N, 0)) and np.all(S == np.minimum(X, N)))
    dR = np.diff(np.concatenate([[0], R]))
    rep["reneging_when_busy"] = bool(np.all(np.maximum(N - X, 0) * dR == 0))

    # replay the log
    cust, off = trace.customers, trace.offset
    u = cust["u"]
    queued: list = []
    for dl, i in zip(trace.Q0_deadlines, range(-trace.X0 + trace.S0 + 1, 1)):
        insort(queued, (float(dl), i))
    ok_deadline = ok_frontier = ok_admit = ok_renege = True
    ev = trace.events
    times = ep["t"]
    k = 0
    n_ev = len(ev)
    for e_i, t in enumerate(times):
        while k < n_ev and ev[k][0] == t:
            _, kind, i = ev[k]
            key = (float(u[i + off]), i)
            if kind == ARRIVE:
                insort(queued, key)
            elif kind == ADMIT:
                # the admitted customer holds the smallest (deadline, index) pair
                if trace.discipline == "edf" and (not queued or queued[0] != key):
                    ok_admit = False
                if key in queued:
                    queued.remove(key)
            elif kind == RENEGE:
                # reneging happens at the deadline, from the front of the queue
                if key[0] != t or not queued or queued[0][0] > key[0]:
                    ok_frontier = False
                if queued and queued[0][0] < key[0]:
                    ok_renege = False
                queued.remove(key)
            k += 1
        if queued and queued[0][0] <= t:
            ok_deadline = False
        if len(queued) != Q[e_i]:
            ok_deadline = False
    rep["deadline_constraint"] = ok_deadline
    rep["reneging_at_deadline"] = ok_frontier
    rep["admission_priority"] = ok_admit
    rep["reneging_priority"] = ok_renege
    rep["mvsm"] = _mvsm_check(trace) if trace.discipline == "edf" else None
    rep["all_ok"] = all(v for v in rep.values() if v is not None)
    return rep


def _mvsm_check(trace: SimTrace) -> bool:
    """Queue CDF at every epoch equals Theta_1(alpha^N, K^N + R^N) exactly (integer counts)."""
    cust = trace.customers
    ep = trace.epochs
    n_ep = ep["t"].size
    if n_ep == 0:
        return True
    ever_q = cust["q_in"] >= 0  # present in alpha: initial queue or arrivals
    rows = np.flatnonzero(ever_q)
    if rows.size == 0:
        return bool(np.all(ep["Q"] == 0))
    x = np.unique(cust["u"][rows])
    col = np.searchsorted(x, cust["u"][rows])
    A = np.zeros((n_ep, x.size))
    np.add.at(A, (cust["q_in"][rows], col), 1.0)
    A = np.cumsum(np.cumsum(A, axis=0), axis=1)
    # queue content: in the queue from q_in (inclusive) to q_out (exclusive)
    Qm = np.zeros((n_ep + 1, x.size))
    stay = cust["q_out"][rows]
    stay = np.where(stay < 0, n_ep, stay)
    real = stay > cust["q_in"][rows]
    np.add.at(Qm, (cust["q_in"][rows][real], col[real]), 1.0)
    np.add.at(Qm, (stay[real], col[real]), -1.0)
    Qm = np.cumsum(np.cumsum(Qm, axis=0), axis=1)[:n_ep]
    mu = (ep["K"] + ep["R"]).astype(float)
    sol = mvsm_solve_cdf(ep["t"], x, A, A[:, -1] + 0.0, mu, alpha_interp="step", mu_interp="step")
    return bool(np.array_equal(sol.xi_cdf, Qm) and np.all(sol.iota == 0))


# ---------------------------------------------------------------------------
# compensator diagnostic
# ---------------------------------------------------------------------------


def _family(span: float, T: float, count: int = 10):
    out = []
    for j in range(count):
        c = span * (j + 0.5) / count
        w = 0.6 * span / count + 0.25 * span * (j % 3) / count
        om = 2 * math.pi * (j % 4) / max(T, 1e-9)

        def phi(x, s, c=c, w=w, om=om):
            rr = (np.asarray(x, dtype=float) - c) / w
            inside = np.abs(rr) < 1
            out = np.zeros_like(rr)
            out[inside] = np.exp(-1.0 / (1.0 - rr[inside] ** 2))
            return out * np.cos(om * np.asarray(s, dtype=float))

        out.append(phi)
    return out


def compensator_diagnostic(trace: SimTrace, svc: Law, nodes: int = 16) -> dict:
    """``D^N_T(phi) - A^N_T(phi)`` scaled by ``1/N`` over a fixed test-function family.

    ``A^N_T(phi) = int_0^T int phi(x, s) h(x) nu^N_s(dx) ds``. Laws without a
    bounded hazard are skipped with a notice.
    """
    if not svc.has_density or not svc.hazard_bounded:
        return {"skipped": True, "notice": f"{svc.kind} service has no bounded hazard; diagnostic skipped"}
    if trace.customers is None:
        raise ValueError("trace was recorded without customers")
    c = trace.customers
    T = trace.T
    served = np.isfinite(c["gamma"])
    g = c["gamma"][served]
    end = np.minimum(g + c["v"][served], T)
    start = np.maximum(g, 0.0)
    keep = end > start
    g, start, end = g[keep], start[keep], end[keep]
    done = (g + c["v"][served][keep]) <= T
    span = float(svc.isf(1e-3))
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    half = 0.5 * (end - start)
    s = half[:, None] * xg + (0.5 * (end + start))[:, None]
    age = s - g[:, None]
    h = np.asarray(svc.hazard(age), dtype=float)
    vals = []
    for phi in _family(span, T):
        comp = float(np.sum(half * np.sum(wg * phi(age, s) * h, axis=1)))
        dep_age = c["v"][served][keep][done]
        dep = float(np.sum(phi(dep_age, g[done] + dep_age)))
        vals.append((dep - comp) / trace.N)
    vals = np.array(vals)
    return {"skipped": False, "values": vals.tolist(), "rms": float(np.sqrt(np.mean(vals ** 2)))}
