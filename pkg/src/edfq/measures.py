"""Finite measures on the half line and time-indexed paths.

A :class:`FiniteMeasure` is a sum of point masses plus an absolutely
continuous part whose CDF is piecewise linear through a list of knots.
Simulation produces purely atomic measures, the fluid solver produces
atomless ones, and both answer the same CDF-level queries.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FiniteMeasure",
    "ScalarPath",
    "MeasurePath",
    "uniform_cdf_distance",
    "sample_atoms",
]

_TOL = 1e-12


def _as_pairs(a) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.size == 0:
        return np.zeros((0, 2))
    return arr.reshape(-1, 2)


class FiniteMeasure:
    """Nonnegative finite measure on ``[0, inf)``: atoms + piecewise-linear CDF part.

    Parameters
    ----------
    atoms : array_like, shape (n, 2)
        ``(location, weight)`` rows. Duplicate locations are merged and
        zero weights dropped.
    ac_knots : array_like, shape (m, 2)
        ``(location, cumulative mass)`` rows of the absolutely continuous
        part. The first cumulative value must be 0; the CDF is 0 to the
        left of the first knot and constant to the right of the last.
    """

    __slots__ = ("atoms", "ac_knots")

    def __init__(self, atoms=(), ac_knots=()):
        at = _as_pairs(atoms)
        if at.size:
            if np.any(at[:, 0] < 0) or np.any(at[:, 1] < 0):
                raise ValueError("atoms need nonnegative locations and weights")
            at = at[at[:, 1] > 0]
            order = np.argsort(at[:, 0], kind="stable")
            at = at[order]
            locs, inv = np.unique(at[:, 0], return_inverse=True)
            w = np.zeros(locs.size)
            np.add.at(w, inv, at[:, 1])
            at = np.column_stack([locs, w]) if locs.size else np.zeros((0, 2))
        kn = _as_pairs(ac_knots)
        if kn.size:
            if np.any(kn[:, 0] < 0):
                raise ValueError("knot locations must be nonnegative")
            if np.any(np.diff(kn[:, 0]) < 0):
                raise ValueError("knot locations must be nondecreasing")
            if np.any(np.diff(kn[:, 1]) < -_TOL * max(1.0, abs(kn[-1, 1]))):
                raise ValueError("knot cumulative masses must be nondecreasing")
            if abs(kn[0, 1]) > _TOL:
                raise ValueError("first knot must carry cumulative mass 0")
            kn = kn.copy()
            kn[0, 1] = 0.0
            kn[:, 1] = np.maximum.accumulate(kn[:, 1])
            if kn[-1, 1] <= 0:
                kn = np.zeros((0, 2))
        self.atoms = at
        self.ac_knots = kn
        self.atoms.setflags(write=False)
        self.ac_knots.setflags(write=False)

    # -- basic queries ------------------------------------------------------

    @classmethod
    def zero(cls) -> "FiniteMeasure":
        return cls()

    @classmethod
    def dirac(cls, x: float, weight: float = 1.0) -> "FiniteMeasure":
        return cls(atoms=[[x, weight]])

    @classmethod
    def lebesgue(cls, a: float, b: float, mass: float | None = None) -> "FiniteMeasure":
        """Uniform mass on ``[a, b]`` (Lebesgue measure unless ``mass`` is given)."""
        if b <= a:
            return cls()
        m = (b - a) if mass is None else mass
        return cls(ac_knots=[[a, 0.0], [b, m]])

    @property
    def total(self) -> float:
        s = float(self.atoms[:, 1].sum()) if len(self.atoms) else 0.0
        if len(self.ac_knots):
            s += float(self.ac_knots[-1, 1])
        return s

    @property
    def is_atomless(self) -> bool:
        return len(self.atoms) == 0

    def is_zero(self) -> bool:
        return self.total <= 0.0

    def cdf_at(self, x):
        """``m[0, x]`` (right-continuous)."""
        xa = np.asarray(x, dtype=float)
        out = np.zeros(xa.shape)
        if len(self.atoms):
            cum = np.concatenate([[0.0], np.cumsum(self.atoms[:, 1])])
            out = out + cum[np.searchsorted(self.atoms[:, 0], xa, side="right")]
        if len(self.ac_knots):
            out = out + self._ac_cdf(xa)
        return float(out) if xa.ndim == 0 else out

    def cdf_left(self, x):
        """``m[0, x)`` (left limit of the CDF)."""
        xa = np.asarray(x, dtype=float)
        out = np.zeros(xa.shape)
        if len(self.atoms):
            cum = np.concatenate([[0.0], np.cumsum(self.atoms[:, 1])])
            out = out + cum[np.searchsorted(self.atoms[:, 0], xa, side="left")]
        if len(self.ac_knots):
            out = out + self._ac_cdf(xa)
        return float(out) if xa.ndim == 0 else out

    def _ac_cdf(self, xa):
        kx, kf = self.ac_knots[:, 0], self.ac_knots[:, 1]
        if kx.size == 1:
            return np.where(xa >= kx[0], kf[0], 0.0)
        # fraction first: np.interp forms the slope, which overflows on tiny pieces
        i = np.clip(np.searchsorted(kx, xa, side="right") - 1, 0, kx.size - 2)
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.clip((xa - kx[i]) / (kx[i + 1] - kx[i]), 0.0, 1.0)
        out = kf[i] + frac * (kf[i + 1] - kf[i])
        return np.where(xa < kx[0], 0.0, np.where(xa >= kx[-1], kf[-1], out))

    def quadrature(self, nodes: int = 8) -> tuple[np.ndarray, np.ndarray]:
        """Points and weights with ``<f, m> ~ sum w_i f(x_i)``: atoms exactly, Gauss-Legendre per linear CDF piece."""
        xs, ws = [], []
        if len(self.atoms):
            xs.append(self.atoms[:, 0])
            ws.append(self.atoms[:, 1])
        if len(self.ac_knots) > 1:
            kx, kf = self.ac_knots[:, 0], self.ac_knots[:, 1]
            dx, dm = np.diff(kx), np.diff(kf)
            keep = (dx > 0) & (dm > 0)
            a, b, dens = kx[:-1][keep], kx[1:][keep], dm[keep] / dx[keep]
            xg, wg = np.polynomial.legendre.leggauss(nodes)
            xs.append((0.5 * (b - a)[:, None] * xg[None, :] + 0.5 * (a + b)[:, None]).ravel())
            ws.append((0.5 * (b - a)[:, None] * wg[None, :] * dens[:, None]).ravel())
        if not xs:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(xs), np.concatenate(ws)

    def integrate(self, f, nodes: int = 8) -> float:
        """``<f, m>`` via :meth:`quadrature`."""
        x, w = self.quadrature(nodes)
        return float(np.sum(w * f(x))) if x.size else 0.0

    def breakpoints(self) -> np.ndarray:
        parts = [self.atoms[:, 0], self.ac_knots[:, 0]]
        return np.unique(np.concatenate(parts)) if any(len(p) for p in parts) else np.zeros(0)

    def scaled(self, c: float) -> "FiniteMeasure":
        at = self.atoms.copy()
        kn = self.ac_knots.copy()
        if len(at):
            at[:, 1] *= c
        if len(kn):
            kn[:, 1] *= c
        return FiniteMeasure(at, kn)

    def normalized(self) -> "FiniteMeasure":
        tot = self.total
        if tot <= 0:
            raise ValueError("cannot normalize the zero measure")
        return self.scaled(1.0 / tot)

    def __add__(self, other: "FiniteMeasure") -> "FiniteMeasure":
        atoms = np.concatenate([self.atoms, other.atoms]) if len(self.atoms) or len(other.atoms) else ()
        if not len(self.ac_knots):
            kn = other.ac_knots
        elif not len(other.ac_knots):
            kn = self.ac_knots
        else:
            xs = np.union1d(self.ac_knots[:, 0], other.ac_knots[:, 0])
            kn = np.column_stack([xs, self._ac_cdf(xs) + other._ac_cdf(xs)])
            # left of the first knot both CDFs are zero
            kn = np.vstack([[xs[0], 0.0], kn]) if kn[0, 1] > 0 else kn
        return FiniteMeasure(atoms, kn)

    def __repr__(self) -> str:
        return f"FiniteMeasure(atoms={self.atoms.tolist()}, ac_knots={self.ac_knots.tolist()})"

    # -- structural operations ------------------------------------------------

    def support_min(self) -> float:
        """``inf{x : m[0, x] > 0}``; ``inf`` for the zero measure."""
        cands = []
        if len(self.atoms):
            cands.append(float(self.atoms[0, 0]))
        if len(self.ac_knots):
            kf = self.ac_knots[:, 1]
            i = int(np.argmax(kf > 0))
            cands.append(float(self.ac_knots[i - 1, 0]) if i > 0 else float(self.ac_knots[0, 0]))
        return min(cands) if cands else math.inf

    def expire_below(self, t: float) -> tuple["FiniteMeasure", float]:
        """Remove all mass at locations ``<= t``; return ``(remaining, removed_mass)``."""
        removed = self.cdf_at(t)
        if removed == 0.0:
            return self, 0.0
        atoms = self.atoms[self.atoms[:, 0] > t] if len(self.atoms) else ()
        kn = ()
        if len(self.ac_knots):
            kx, kf = self.ac_knots[:, 0], self.ac_knots[:, 1]
            base = float(self._ac_cdf(np.array(t)))
            right = kx > t
            if np.any(right) and kf[-1] - base > 0:
                kn = np.vstack([[t, 0.0], np.column_stack([kx[right], kf[right] - base])])
        return FiniteMeasure(atoms, kn), removed

    def consume_from_left(self, c: float) -> tuple["FiniteMeasure", float]:
        """Remove mass ``c`` from the lowest locations.

        Returns ``(remaining, frontier)`` with ``remaining[0, x] = (m[0, x] - c)^+``
        and ``frontier = remaining.support_min()``. Atoms are consumed
        partially when the cut falls on them.
        """
        tot = self.total
        if c < 0:
            raise ValueError("consumed mass must be nonnegative")
        if c > tot * (1 + _TOL) + _TOL:
            raise ValueError(f"cannot consume {c} from a measure of mass {tot}")
        if c == 0:
            return self, self.support_min()
        if c >= tot - _TOL * max(1.0, tot):
            return FiniteMeasure(), math.inf
        cut = self._generalized_inverse(c)
        at_mass = self.cdf_at(cut)
        atoms = []
        if len(self.atoms):
            keep = self.atoms[self.atoms[:, 0] > cut]
            atoms = keep.tolist()
            left_over = at_mass - c
            has_atom = np.any(self.atoms[:, 0] == cut)
            if has_atom and left_over > _TOL * max(1.0, tot):
                atoms.append([cut, left_over])
        kn = ()
        if len(self.ac_knots):
            kx, kf = self.ac_knots[:, 0], self.ac_knots[:, 1]
            right = kx > cut
            # offset from mass balance: the cut location can round away from
            # the consumed mass when a linear piece is extremely narrow
            kept = sum(w for _, w in atoms)
            base = kf[-1] - (tot - c - kept)
            lo = float(self._ac_cdf(np.array(cut)))
            hi = kf[right][0] if np.any(right) else kf[-1]
            base = min(max(base, lo), hi)
            if np.any(right) and kf[-1] - base > 0:
                kn = np.vstack([[cut, 0.0], np.column_stack([kx[right], kf[right] - base])])
        rem = FiniteMeasure(atoms, kn)
        return rem, rem.support_min()

    def _generalized_inverse(self, c: float) -> float:
        """``inf{x : m[0, x] >= c}`` for ``0 < c <= total``."""
        bp = self.breakpoints()
        right = self.cdf_at(bp)
        left = self.cdf_left(bp)
        i = int(np.searchsorted(right, c, side="left"))
        i = min(i, len(bp) - 1)
        if left[i] >= c and i > 0:
            # the crossing happens on the linear piece (bp[i-1], bp[i])
            x0, x1 = bp[i - 1], bp[i]
            f0, f1 = right[i - 1], left[i]
            if f1 > f0:
                return float(x0 + (c - f0) / (f1 - f0) * (x1 - x0))
            return float(x0)
        return float(bp[i])

    def quantile(self, u):
        """Generalized inverse of the normalized CDF at ``u`` in ``(0, 1]``."""
        tot = self.total
        if tot <= 0:
            raise ValueError("quantile of the zero measure")
        bp = self.breakpoints()
        right = self.cdf_at(bp) / tot
        left = self.cdf_left(bp) / tot
        # interleave (x, F-) and (x, F+) so jumps become vertical segments
        xs = np.repeat(bp, 2)
        fs = np.empty(2 * len(bp))
        fs[0::2], fs[1::2] = left, right
        ua = np.asarray(u, dtype=float)
        j = np.clip(np.searchsorted(fs, ua, side="left"), 1, len(fs) - 1)
        f0, f1 = fs[j - 1], fs[j]
        x0, x1 = xs[j - 1], xs[j]
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(f1 > f0, (ua - f0) / (f1 - f0), 1.0)
        out = x0 + np.clip(frac, 0.0, 1.0) * (x1 - x0)
        return float(out) if ua.ndim == 0 else out

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {"atoms": self.atoms.tolist(), "ac_knots": self.ac_knots.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FiniteMeasure":
        return cls(d.get("atoms", ()), d.get("ac_knots", ()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, FiniteMeasure):
            return NotImplemented
        return (
            self.atoms.shape == other.atoms.shape
            and self.ac_knots.shape == other.ac_knots.shape
            and np.array_equal(self.atoms, other.atoms)
            and np.array_equal(self.ac_knots, other.ac_knots)
        )

    __hash__ = None


def uniform_cdf_distance(a: FiniteMeasure, b: FiniteMeasure) -> float:
    """``sup_x |a[0, x] - b[0, x]|``.

    Both CDFs are piecewise linear between the union of breakpoints, so
    the sup is attained at a breakpoint (right value or left limit).
    Midpoints are included for robustness; the grid is deterministic.
    """
    bp = np.union1d(a.breakpoints(), b.breakpoints())
    if bp.size == 0:
        return 0.0
    grid = np.concatenate([bp, 0.5 * (bp[1:] + bp[:-1])]) if bp.size > 1 else bp
    d_right = np.abs(a.cdf_at(grid) - b.cdf_at(grid))
    d_left = np.abs(a.cdf_left(grid) - b.cdf_left(grid))
    d_tail = abs(a.total - b.total)
    return float(max(d_right.max(), d_left.max(), d_tail))


def sample_atoms(m: FiniteMeasure, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. draws from ``m / m(R+)`` by inverse CDF."""
    if m.total <= 0:
        raise ValueError("cannot sample from the zero measure")
    u = rng.random(n)
    # u == 0 would select the left end of a leading flat stretch
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    return np.asarray(m.quantile(u), dtype=float).reshape(n)


@dataclass
class ScalarPath:
    """Real-valued path sampled at strictly increasing times.

    ``interp`` is ``"linear"`` (continuous piecewise linear) or ``"step"``
    (right-continuous piecewise constant).
    """

    times: np.ndarray
    values: np.ndarray
    nondecreasing: bool = False
    interp: str = "linear"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape or self.times.ndim != 1:
            raise ValueError("times and values must be equal-length 1-d arrays")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        if self.interp not in ("linear", "step"):
            raise ValueError("interp must be 'linear' or 'step'")
        if self.nondecreasing and np.any(np.diff(self.values) < 0):
            raise ValueError("path flagged nondecreasing has a decrease")

    def __call__(self, t):
        ta = np.asarray(t, dtype=float)
        if self.interp == "linear":
            out = np.interp(ta, self.times, self.values)
        else:
            idx = np.clip(np.searchsorted(self.times, ta, side="right") - 1, 0, None)
            out = self.values[idx]
        return float(out) if ta.ndim == 0 else out

    def sup_norm(self, T: float | None = None) -> float:
        v = self.values if T is None else self.values[self.times <= T]
        return float(np.max(np.abs(v))) if v.size else 0.0

    def to_csv(self, header=("t", "value")) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(header)
        for t, v in zip(self.times, self.values):
            w.writerow([repr(float(t)), repr(float(v))])
        return buf.getvalue()


def _test_family(xmax: float, count: int = 12):
    """Nonnegative piecewise-linear hats and ramps plus the constant 1."""
    centers = np.linspace(0.0, xmax, count)
    width = xmax / max(count - 1, 1) if xmax > 0 else 1.0
    fs = [lambda x: np.ones_like(np.asarray(x, dtype=float))]
    for c in centers:
        fs.append(lambda x, c=c: np.maximum(0.0, 1.0 - np.abs(np.asarray(x) - c) / width))
        fs.append(lambda x, c=c: np.clip((c + width - np.asarray(x)) / width, 0.0, 1.0))
    return fs


@dataclass
class MeasurePath:
    """One :class:`FiniteMeasure` per sample time."""

    times: np.ndarray
    measures: list = field(default_factory=list)
    monotone: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.measures) != self.times.size:
            raise ValueError("need one measure per sample time")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")

    def at(self, t: float) -> FiniteMeasure:
        """Measure at the last sample time ``<= t``."""
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return self.measures[max(i, 0)]

    def check_monotone(self, tol: float = 1e-12) -> bool:
        """``t -> <f, zeta_t>`` nondecreasing over a fixed family of test functions."""
        xmax = max((m.breakpoints().max() if m.breakpoints().size else 0.0) for m in self.measures) if self.measures else 0.0
        fam = _test_family(max(xmax, 1.0))
        for f in fam:
            vals = np.array([m.integrate(f) for m in self.measures])
            if np.any(np.diff(vals) < -tol * max(1.0, np.abs(vals).max())):
                return False
        return True

    def totals(self) -> np.ndarray:
        return np.array([m.total for m in self.measures])
