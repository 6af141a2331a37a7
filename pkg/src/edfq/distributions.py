"""Service-time and patience-time laws.

Every law is a closed-form member of a fixed menu, so CDF, density, hazard
rate, inverse CDF and the integrated CDF are all available analytically.
The integrated CDF ``IG(x) = int_0^x G(u) du`` is what the fluid solver
uses to turn piecewise-linear admission paths into exact departure counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import special

__all__ = [
    "DomainError",
    "Law",
    "ServiceLaw",
    "PatienceLaw",
    "AssumptionReport",
    "validate_assumptions",
    "KINDS",
]

KINDS = (
    "exponential",
    "weibull",
    "lognormal",
    "gamma",
    "uniform",
    "pareto",
    "deterministic",
    "hyperexponential",
)

_ALIASES = {
    "uniform-interval": "uniform",
    "point-mass": "deterministic",
    "point_mass": "deterministic",
    "lomax": "pareto",
}

_REQUIRED = {
    "exponential": ("rate",),
    "weibull": ("shape", "scale"),
    "lognormal": ("mu", "sigma"),
    "gamma": ("shape", "scale"),
    "uniform": ("low", "high"),
    "pareto": ("shape", "scale"),
    "deterministic": ("value",),
    "hyperexponential": ("probs", "rates"),
}

# hazard is only evaluated this far below a finite right support edge
EDGE_GUARD = 1e-12


class DomainError(ValueError):
    """Raised when a law is queried outside the region where it is defined."""


def _ret(x_in, out):
    if np.ndim(x_in) == 0:
        return float(np.asarray(out).reshape(-1)[0])
    return out


@dataclass(frozen=True)
class Law:
    """A probability law on ``[0, inf)`` from the closed menu in ``KINDS``.

    Parameters are plain floats (or lists for the hyperexponential
    mixture), all in units of time or 1/time.
    """

    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown law kind {self.kind!r}")
        missing = [k for k in _REQUIRED[kind] if k not in self.params]
        if missing:
            raise ValueError(f"{kind} law needs parameters {missing}")
        p = dict(self.params)
        if kind == "hyperexponential":
            probs = np.asarray(p["probs"], dtype=float)
            rates = np.asarray(p["rates"], dtype=float)
            if probs.shape != rates.shape or probs.ndim != 1 or probs.size == 0:
                raise ValueError("hyperexponential probs/rates must be equal-length lists")
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12 or np.any(rates <= 0):
                raise ValueError("hyperexponential needs probs summing to 1 and positive rates")
            p["probs"] = tuple(float(v) for v in probs)
            p["rates"] = tuple(float(v) for v in rates)
        else:
            for k in _REQUIRED[kind]:
                p[k] = float(p[k])
        object.__setattr__(self, "params", p)
        self._check_ranges()

    def _check_ranges(self):
        p, k = self.params, self.kind
        positive = {
            "exponential": ("rate",),
            "weibull": ("shape", "scale"),
            "lognormal": ("sigma",),
            "gamma": ("shape", "scale"),
            "pareto": ("shape", "scale"),
        }.get(k, ())
        for name in positive:
            if not p[name] > 0:
                raise ValueError(f"{k} parameter {name} must be positive")
        if k == "uniform" and not (0 <= p["low"] < p["high"]):
            raise ValueError("uniform law needs 0 <= low < high")
        if k == "deterministic" and p["value"] < 0:
            raise ValueError("deterministic value must be nonnegative")

    # -- construction helpers -------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "Law":
        """Accepts ``{"kind", "params": {...}}`` or the flat ``{"kind", **params}`` form."""
        params = d["params"] if "params" in d else {k: v for k, v in d.items() if k != "kind"}
        return cls(d["kind"], dict(params))

    def to_dict(self) -> dict:
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.params.items()}
        return {"kind": self.kind, "params": params}

    # -- support ----------------------------------------------------------

    @property
    def support_edge(self) -> float:
        """Right end ``H^s = sup{x : G(x) < 1}`` (may be ``inf``)."""
        if self.kind == "uniform":
            return self.params["high"]
        if self.kind == "deterministic":
            return self.params["value"]
        return math.inf

    @property
    def kappa1(self) -> float:
        """Largest ``r >= 0`` with ``P[0, r] = 0`` (zero when none)."""
        if self.kind == "uniform":
            return self.params["low"]
        if self.kind == "deterministic":
            return self.params["value"]
        return 0.0

    @property
    def has_density(self) -> bool:
        return self.kind != "deterministic"

    @property
    def hazard_bounded(self) -> bool:
        p, k = self.params, self.kind
        if k in ("exponential", "hyperexponential", "pareto", "lognormal"):
            return True
        if k == "gamma":
            return p["shape"] >= 1.0
        if k == "weibull":
            return p["shape"] == 1.0
        return False

    @property
    def mean(self) -> float:
        p, k = self.params, self.kind
        if k == "exponential":
            return 1.0 / p["rate"]
        if k == "weibull":
            return p["scale"] * math.gamma(1.0 + 1.0 / p["shape"])
        if k == "lognormal":
            return math.exp(p["mu"] + 0.5 * p["sigma"] ** 2)
        if k == "gamma":
            return p["shape"] * p["scale"]
        if k == "uniform":
            return 0.5 * (p["low"] + p["high"])
        if k == "pareto":
            return p["scale"] / (p["shape"] - 1.0) if p["shape"] > 1 else math.inf
        if k == "deterministic":
            return p["value"]
        return float(sum(q / r for q, r in zip(p["probs"], p["rates"])))

    # -- distribution functions ------------------------------------------

    def sf(self, x):
        """Survival function ``1 - G(x)``."""
        xa = np.asarray(x, dtype=float)
        p, k = self.params, self.kind
        xp = np.maximum(xa, 0.0)
        if k == "exponential":
            out = np.exp(-p["rate"] * xp)
        elif k == "weibull":
            out = np.exp(-((xp / p["scale"]) ** p["shape"]))
        elif k == "lognormal":
            with np.errstate(divide="ignore"):
                z = (np.log(xp) - p["mu"]) / p["sigma"]
            out = special.ndtr(-z)
        elif k == "gamma":
            out = special.gammaincc(p["shape"], xp / p["scale"])
        elif k == "uniform":
            out = np.clip((p["high"] - xp) / (p["high"] - p["low"]), 0.0, 1.0)
        elif k == "pareto":
            out = (p["scale"] / (p["scale"] + xp)) ** p["shape"]
        elif k == "deterministic":
            out = np.where(xp < p["value"], 1.0, 0.0)
        else:
            out = np.zeros_like(xp)
            for q, r in zip(p["probs"], p["rates"]):
                out = out + q * np.exp(-r * xp)
        out = np.where(xa < 0, 1.0, out)
        return _ret(x, out)

    def cdf(self, x):
        """``G(x) = P[0, x]``; right-continuous, zero for ``x < 0``."""
        xa = np.asarray(x, dtype=float)
        p, k = self.params, self.kind
        xp = np.maximum(xa, 0.0)
        if k == "exponential":
            out = -np.expm1(-p["rate"] * xp)
        elif k == "weibull":
            out = -np.expm1(-((xp / p["scale"]) ** p["shape"]))
        elif k == "lognormal":
            with np.errstate(divide="ignore"):
                z = (np.log(xp) - p["mu"]) / p["sigma"]
            out = special.ndtr(z)
        elif k == "gamma":
            out = special.gammainc(p["shape"], xp / p["scale"])
        elif k == "pareto":
            out = -np.expm1(p["shape"] * np.log1p(-xp / (p["scale"] + xp)))
        elif k == "deterministic":
            out = np.where(xp >= p["value"], 1.0, 0.0)
        else:
            out = 1.0 - np.asarray(self.sf(xp), dtype=float)
        out = np.where(xa < 0, 0.0, out)
        return _ret(x, out)

    def pdf(self, x):
        """Density ``g``; identically zero for the deterministic law (no density)."""
        xa = np.asarray(x, dtype=float)
        p, k = self.params, self.kind
        xp = np.maximum(xa, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            if k == "exponential":
                out = p["rate"] * np.exp(-p["rate"] * xp)
            elif k == "weibull":
                c, s = p["shape"], p["scale"]
                out = (c / s) * (xp / s) ** (c - 1.0) * np.exp(-((xp / s) ** c))
            elif k == "lognormal":
                m, s = p["mu"], p["sigma"]
                out = np.where(
                    xp > 0,
                    np.exp(-0.5 * ((np.log(xp) - m) / s) ** 2) / (xp * s * math.sqrt(2 * math.pi)),
                    0.0,
                )
            elif k == "gamma":
                a, s = p["shape"], p["scale"]
                out = np.exp((a - 1.0) * np.log(xp / s) - xp / s - special.gammaln(a)) / s
                if a == 1.0:
                    out = np.exp(-xp / s) / s
            elif k == "uniform":
                lo, hi = p["low"], p["high"]
                out = np.where((xp >= lo) & (xp < hi), 1.0 / (hi - lo), 0.0)
            elif k == "pareto":
                a, s = p["shape"], p["scale"]
                out = (a / s) * (s / (s + xp)) ** (a + 1.0)
            elif k == "deterministic":
                out = np.zeros_like(xp)
            else:
                out = np.zeros_like(xp)
                for q, r in zip(p["probs"], p["rates"]):
                    out = out + q * r * np.exp(-r * xp)
        out = np.where(xa < 0, 0.0, out)
        return _ret(x, out)

    def hazard(self, x):
        """Hazard rate ``h = g / (1 - G)`` on ``[0, H^s)``.

        Raises
        ------
        DomainError
            If any ``x >= H^s - EDGE_GUARD`` (finite edge) or if the survival
            probability underflows below 1e-300.
        """
        xa = np.asarray(x, dtype=float)
        if np.any(xa < 0):
            raise DomainError("hazard is defined for x >= 0 only")
        H = self.support_edge
        if math.isfinite(H) and np.any(xa >= H - EDGE_GUARD):
            raise DomainError(f"hazard undefined at x >= H^s = {H}")
        p, k = self.params, self.kind
        if k == "exponential":
            out = np.full_like(xa, p["rate"])
        elif k == "weibull":
            c, s = p["shape"], p["scale"]
            with np.errstate(divide="ignore"):
                out = (c / s) * (xa / s) ** (c - 1.0)
        elif k == "pareto":
            out = p["shape"] / (p["scale"] + xa)
        elif k == "uniform":
            out = np.where(xa >= p["low"], 1.0 / (p["high"] - xa), 0.0)
        elif k == "deterministic":
            out = np.zeros_like(xa)
        elif k in ("lognormal", "gamma"):
            out = self._log_space_hazard(xa)
        else:
            out = np.asarray(self.pdf(xa)) / np.asarray(self.sf(xa))
        return _ret(x, out)

    def _log_space_hazard(self, xa):
        p = self.params
        if self.kind == "lognormal":
            m, s = p["mu"], p["sigma"]
            with np.errstate(divide="ignore"):
                z = (np.log(xa) - m) / s
            logsf = special.log_ndtr(-z)
            with np.errstate(divide="ignore", invalid="ignore"):
                logpdf = -0.5 * z**2 - np.log(xa * s * math.sqrt(2 * math.pi))
        else:
            a, s = p["shape"], p["scale"]
            y = xa / s
            with np.errstate(divide="ignore"):
                logpdf = (a - 1.0) * np.log(y) - y - special.gammaln(a) - math.log(s)
                logsf = np.log(special.gammaincc(a, y))
        if np.any(logsf < math.log(1e-300)):
            raise DomainError("survival probability below 1e-300; hazard not evaluated")
        with np.errstate(invalid="ignore"):
            out = np.exp(logpdf - logsf)
        return np.where(xa == 0, np.asarray(self.pdf(xa)), out)

    def isf(self, s):
        """Inverse survival function: smallest ``x`` with ``1 - G(x) <= s``."""
        sa = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
        p, k = self.params, self.kind
        with np.errstate(divide="ignore"):
            if k == "exponential":
                out = -np.log(sa) / p["rate"]
            elif k == "weibull":
                out = p["scale"] * (-np.log(sa)) ** (1.0 / p["shape"])
            elif k == "lognormal":
                out = np.exp(p["mu"] - p["sigma"] * special.ndtri(sa))
            elif k == "gamma":
                out = p["scale"] * special.gammainccinv(p["shape"], sa)
            elif k == "uniform":
                out = p["high"] - sa * (p["high"] - p["low"])
            elif k == "pareto":
                out = p["scale"] * np.expm1(-np.log(sa) / p["shape"])
            elif k == "deterministic":
                out = np.where(sa < 1.0, p["value"], 0.0)
            else:
                out = self._hyperexp_isf(sa)
        return _ret(s, out)

    def _hyperexp_isf(self, sa):
        probs = np.asarray(self.params["probs"])
        rates = np.asarray(self.params["rates"])
        x = np.zeros_like(sa)
        target = np.where(sa > 0, sa, np.nan)
        # sf is convex decreasing, so Newton from the left converges monotonically
        for _ in range(200):
            e = np.exp(-np.outer(x, rates))
            f = e @ probs - target
            fp = -(e * rates) @ probs
            step = f / fp
            x = x - step
            if np.all(~np.isfinite(step) | (np.abs(step) <= 1e-15 * np.maximum(1.0, x))):
                break
        return np.where(sa > 0, x, np.inf)

    def ppf(self, u):
        """Inverse CDF ``G^{-1}(u)`` for ``u`` in ``[0, 1)``."""
        ua = np.asarray(u, dtype=float)
        if self.kind == "exponential":
            out = -np.log1p(-ua) / self.params["rate"]
        elif self.kind == "deterministic":
            out = np.full_like(ua, self.params["value"])
        else:
            out = np.asarray(self.isf(1.0 - ua), dtype=float)
        return _ret(u, out)

    def limited_mean(self, x):
        """``int_0^x (1 - G(u)) du = E[min(v, x)]``."""
        xa = np.maximum(np.asarray(x, dtype=float), 0.0)
        p, k = self.params, self.kind
        with np.errstate(divide="ignore", invalid="ignore"):
            if k == "exponential":
                out = -np.expm1(-p["rate"] * xa) / p["rate"]
            elif k == "weibull":
                c, s = p["shape"], p["scale"]
                out = s * math.gamma(1.0 + 1.0 / c) * special.gammainc(1.0 / c, (xa / s) ** c)
            elif k == "lognormal":
                m, s = p["mu"], p["sigma"]
                lx = np.log(np.where(xa > 0, xa, 1.0))
                part = math.exp(m + 0.5 * s * s) * special.ndtr((lx - m - s * s) / s)
                tail = xa * special.ndtr(-(lx - m) / s)
                out = np.where(xa > 0, part + tail, 0.0)
            elif k == "gamma":
                a, s = p["shape"], p["scale"]
                y = xa / s
                out = a * s * special.gammainc(a + 1.0, y) + xa * special.gammaincc(a, y)
            elif k == "uniform":
                lo, hi = p["low"], p["high"]
                inside = xa - (np.clip(xa, lo, hi) - lo) ** 2 / (2.0 * (hi - lo))
                out = np.where(xa <= hi, inside, 0.5 * (lo + hi))
            elif k == "pareto":
                a, s = p["shape"], p["scale"]
                if a == 1.0:
                    out = s * np.log1p(xa / s)
                else:
                    out = s / (a - 1.0) * -np.expm1((a - 1.0) * -np.log1p(xa / s))
            elif k == "deterministic":
                out = np.minimum(xa, p["value"])
            else:
                out = np.zeros_like(xa)
                for q, r in zip(p["probs"], p["rates"]):
                    out = out + q * -np.expm1(-r * xa) / r
        return _ret(x, out)

    def integrated_cdf(self, x):
        """``IG(x) = int_0^x G(u) du``; zero for ``x <= 0``."""
        xa = np.maximum(np.asarray(x, dtype=float), 0.0)
        if self.kind == "exponential":
            r = self.params["rate"]
            out = xa + np.expm1(-r * xa) / r
        elif self.kind == "deterministic":
            out = np.maximum(xa - self.params["value"], 0.0)
        elif self.kind == "uniform":
            lo, hi = self.params["low"], self.params["high"]
            out = np.where(
                xa <= hi,
                (np.clip(xa, lo, hi) - lo) ** 2 / (2.0 * (hi - lo)),
                xa - 0.5 * (lo + hi),
            )
        else:
            out = xa - np.asarray(self.limited_mean(xa), dtype=float)
        return _ret(x, np.maximum(out, 0.0))

    def expect(self, fn, a: float, b: float, nodes: int = 64) -> float:
        """``int_{(a, b]} fn(v) dG(v)`` by Gauss-Legendre (exact atom for deterministic)."""
        if b <= a:
            return 0.0
        if self.kind == "deterministic":
            d = self.params["value"]
            return float(fn(np.array([d]))[0]) if a < d <= b else 0.0
        b = min(b, self.support_edge)
        lo = max(a, self.kappa1) if self.kind == "uniform" else a
        if b <= lo:
            return 0.0
        xg, wg = np.polynomial.legendre.leggauss(nodes)
        v = 0.5 * (b - lo) * xg + 0.5 * (b + lo)
        return float(0.5 * (b - lo) * np.sum(wg * fn(v) * self.pdf(v)))

    # -- sampling ---------------------------------------------------------

    def sample(self, rng: np.random.Generator, size=None):
        """Inverse-CDF draw(s) from one uniform stream."""
        return self.ppf(rng.random(size))

    def sample_conditional_exceeds(self, a, rng: np.random.Generator | None = None, u=None):
        """Draw from the law of ``v`` given ``v > a`` by conditional inversion.

        Either ``rng`` or explicit uniforms ``u`` must be supplied.
        """
        aa = np.asarray(a, dtype=float)
        if np.any(aa < 0) or np.any(aa >= self.support_edge):
            raise DomainError("conditioning point must lie in [0, H^s)")
        if u is None:
            if rng is None:
                raise ValueError("need an rng or explicit uniforms")
            u = rng.random(aa.shape if aa.ndim else None)
        ua = np.asarray(u, dtype=float)
        if self.kind == "exponential":
            out = aa - np.log1p(-ua) / self.params["rate"]
        elif self.kind == "deterministic":
            out = np.full(np.broadcast(aa, ua).shape, self.params["value"])
        else:
            out = np.asarray(self.isf((1.0 - ua) * np.asarray(self.sf(aa))), dtype=float)
        out = np.maximum(out, np.nextafter(aa, np.inf))
        return float(out) if np.ndim(out) == 0 else out

    # -- structure of the density -----------------------------------------

    def density_zeros(self):
        """Zero set of ``g`` on ``[0, H^s)``.

        Returns a tuple ``(points, interval)``: finitely many isolated zeros,
        or ``interval = (lo, hi)`` when ``g`` vanishes on a whole interval.
        ``interval`` is ``(0, H^s)`` for the deterministic law, which has no
        density at all.
        """
        p, k = self.params, self.kind
        if k == "deterministic":
            return (), (0.0, p["value"])
        if k == "uniform":
            return ((), (0.0, p["low"])) if p["low"] > 0 else ((), None)
        if k == "weibull" and p["shape"] > 1:
            return (0.0,), None
        if k == "gamma" and p["shape"] > 1:
            return (0.0,), None
        if k == "lognormal":
            return (0.0,), None
        return (), None


ServiceLaw = Law
PatienceLaw = Law


@dataclass
class AssumptionReport:
    """Which regularity assumptions of the fluid theory a (service, patience) pair meets."""

    hazard_regular: bool
    density_zeros_finite: bool
    patience_lower_bound: bool
    kappa1: float
    zero_points: tuple
    zero_interval: tuple | None
    nu0_atomless: bool = True
    notes: list = field(default_factory=list)

    @property
    def solvable(self) -> bool:
        return self.density_zeros_finite or self.patience_lower_bound

    def to_dict(self) -> dict:
        return {
            "hazard_regular": self.hazard_regular,
            "density_zeros_finite": self.density_zeros_finite,
            "patience_lower_bound": self.patience_lower_bound,
            "kappa1": self.kappa1,
            "zero_points": list(self.zero_points),
            "zero_interval": list(self.zero_interval) if self.zero_interval else None,
            "nu0_atomless": self.nu0_atomless,
            "solvable": self.solvable,
            "notes": list(self.notes),
        }


def validate_assumptions(svc: Law, pat: Law, nu0=None) -> AssumptionReport:
    """Report the hazard-regularity, density-zero and patience-floor conditions.

    ``nu0`` (a ``FiniteMeasure``) is optional; when it carries atoms the
    finite-zero-set condition is reported as failing because it also needs
    an atomless initial age measure.
    """
    notes = []
    # every menu hazard is continuous on the interior of its support, hence lsc
    hazard_regular = True
    if not svc.has_density:
        notes.append("service law has no density; hazard taken as 0 below its atom")
    points, interval = svc.density_zeros()
    zeros_ok = interval is None
    if interval is not None:
        notes.append(f"service density vanishes on [{interval[0]}, {interval[1]})")
    atomless = True
    if nu0 is not None and len(nu0.atoms) > 0:
        atomless = False
        zeros_ok = False
        notes.append("initial age measure has atoms")
    if pat.kappa1 == 0.0 and pat.kind == "deterministic":
        raise ValueError("patience law must put no mass at 0")
    k1 = pat.kappa1
    floor_ok = k1 > 0
    if not (zeros_ok or floor_ok):
        notes.append("neither the finite-zero-set condition nor the patience lower bound holds")
    return AssumptionReport(
        hazard_regular=hazard_regular,
        density_zeros_finite=zeros_ok,
        patience_lower_bound=floor_ok,
        kappa1=k1,
        zero_points=tuple(points),
        zero_interval=interval,
        nu0_atomless=atomless,
        notes=notes,
    )
