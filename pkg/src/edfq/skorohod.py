"""Reflection maps.

``gamma``           one-dimensional Skorohod map at 0,
``gamma_boundary``  reflection below a time-varying upper boundary,
``mvsm_solve``      measure-valued Skorohod map, computed level by level
                    through ``gamma`` applied to ``alpha[0, x] - mu``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measures import FiniteMeasure, MeasurePath, ScalarPath

__all__ = [
    "gamma",
    "gamma_boundary",
    "reflect_matrix",
    "MvsmSolution",
    "mvsm_solve",
    "mvsm_solve_cdf",
    "sup_distance",
]


def gamma(psi: ScalarPath) -> tuple[ScalarPath, ScalarPath]:
    """One-dimensional Skorohod map ``phi = psi - inf_{s<=t}(psi(s) ^ 0)``, ``eta = phi - psi``.

    For piecewise-linear input the running infimum can be reached in the
    interior of a piece; that crossing time is inserted as a new knot so
    the output is exact and ``eta`` only grows on pieces where ``phi == 0``.
    """
    t, p = psi.times, psi.values
    if t.size == 0:
        return ScalarPath(t, p), ScalarPath(t, p, nondecreasing=True)
    if psi.interp == "step":
        m = np.minimum.accumulate(np.minimum(p, 0.0))
        phi = p - m
        phi[p == m] = 0.0
        return (
            ScalarPath(t, phi, interp="step"),
            ScalarPath(t, -m, nondecreasing=True, interp="step"),
        )

    m = min(p[0], 0.0)
    ts, phis, etas = [t[0]], [p[0] - m if p[0] > m else 0.0], [-m]
    for k in range(1, t.size):
        t0, p0, t1, p1 = t[k - 1], p[k - 1], t[k], p[k]
        if p1 < m:
            if p0 > m:
                ts_cross = t0 + (p0 - m) / (p0 - p1) * (t1 - t0)
                if t0 < ts_cross < t1:
                    ts.append(ts_cross)
                    phis.append(0.0)
                    etas.append(-m)
            m = p1
            ts.append(t1)
            phis.append(0.0)
            etas.append(-p1)
        else:
            ts.append(t1)
            phis.append(p1 - m if p1 > m else 0.0)
            etas.append(-m)
    ts_a = np.asarray(ts)
    return (
        ScalarPath(ts_a, np.asarray(phis)),
        ScalarPath(ts_a, np.asarray(etas), nondecreasing=True),
    )


def gamma_boundary(psi: ScalarPath, b: ScalarPath) -> tuple[ScalarPath, ScalarPath]:
    """Reflection of ``psi`` below the moving boundary ``b``.

    ``eta(t) = sup_{s<=t} (psi(s) - b(s))^+`` and ``phi = psi - eta``, so
    that ``phi <= b`` and ``eta`` grows only while ``phi == b``. Both inputs
    are continuous piecewise linear; they are merged onto a common grid.

    Raises
    ------
    ValueError
        If ``psi(0) > b(0)``.
    """
    if psi.interp != "linear" or b.interp != "linear":
        raise ValueError("gamma_boundary needs continuous piecewise-linear inputs")
    t = np.union1d(psi.times, b.times)
    t = t[(t >= max(psi.times[0], b.times[0])) & (t <= min(psi.times[-1], b.times[-1]))]
    pv = np.interp(t, psi.times, psi.values)
    bv = np.interp(t, b.times, b.values)
    if pv[0] > bv[0]:
        raise ValueError(f"psi(0) = {pv[0]} exceeds boundary b(0) = {bv[0]}")
    # b - phi is the reflection at 0 of b - psi
    gap, eta = gamma(ScalarPath(t, bv - pv))
    b_at = np.interp(gap.times, b.times, b.values)
    phi = b_at - gap.values
    return ScalarPath(gap.times, phi), eta


def reflect_matrix(psi: np.ndarray, psi_left: np.ndarray | None = None):
    """Column-wise ``gamma`` of sampled paths (rows are times).

    ``psi_left[k]`` is the left limit of the path at row ``k`` (row 0
    ignored); when given, the running infimum also sees it, which makes the
    result exact when one summand jumps and the other is linear between
    samples. Returns ``(phi, eta)`` at the sample rows.
    """
    floor = np.minimum(psi, 0.0)
    if psi_left is not None:
        floor = floor.copy()
        floor[1:] = np.minimum(floor[1:], np.minimum(psi_left[1:], 0.0))
    m = np.minimum.accumulate(floor, axis=0)
    phi = psi - m
    phi[phi < 0] = 0.0
    return phi, -m


@dataclass
class MvsmSolution:
    """Output ``(xi, beta, iota)`` of the measure-valued Skorohod map on a level grid.

    ``xi_cdf[k, j] = xi_{t_k}[0, x_j]`` and ``beta_tail[k, j] = beta_{t_k}(x_j, inf)``;
    ``beta_{t}[0, inf) = mu_t - iota_t``.
    """

    times: np.ndarray
    x_grid: np.ndarray
    xi_cdf: np.ndarray
    xi_total: np.ndarray
    beta_tail: np.ndarray
    iota: np.ndarray
    mu: np.ndarray
    xi_cdf_left: np.ndarray | None = None
    xi_total_left: np.ndarray | None = None

    @property
    def beta_total(self) -> np.ndarray:
        return self.mu - self.iota

    @property
    def beta_cdf(self) -> np.ndarray:
        """``beta_t[0, x_j]``."""
        return self.beta_total[:, None] - self.beta_tail

    def xi_measure(self, k: int, atomic: bool = False) -> FiniteMeasure:
        """``xi_{t_k}`` rebuilt from its grid CDF (atoms at grid points or linear knots)."""
        cdf = self.xi_cdf[k]
        if atomic:
            w = np.diff(np.concatenate([[0.0], cdf]))
            keep = w > 0
            return FiniteMeasure(np.column_stack([self.x_grid[keep], w[keep]]))
        first = np.argmax(cdf > 0) if np.any(cdf > 0) else None
        if first is None:
            return FiniteMeasure()
        lo = max(first - 1, 0)
        kn = np.column_stack([self.x_grid[lo:], cdf[lo:]])
        if kn[0, 1] > 0:
            kn = np.vstack([[kn[0, 0], 0.0], kn])
        return FiniteMeasure(ac_knots=kn)

    def xi_path(self, atomic: bool = False) -> MeasurePath:
        return MeasurePath(self.times, [self.xi_measure(k, atomic) for k in range(self.times.size)])

    def iota_path(self) -> ScalarPath:
        return ScalarPath(self.times, self.iota, nondecreasing=True)

    def residuals(self, alpha_cdf: np.ndarray, alpha_total: np.ndarray) -> dict:
        """Max violation of each defining condition (Riemann-Stieltjes sums on the sample grid)."""
        cond1 = np.abs(self.xi_cdf - (alpha_cdf - self.mu[:, None] + self.beta_tail + self.iota[:, None]))
        cond1_tot = np.abs(self.xi_total - (alpha_total - self.mu + self.iota))
        d_beta = np.diff(self.beta_tail, axis=0)
        # integrand at the right end of each piece; when alpha jumps and mu is
        # linear the growth happens before the jump, so the left limit counts
        xi_r, xt_r = self.xi_cdf[1:], self.xi_total[1:]
        if self.xi_cdf_left is not None:
            xi_r = np.minimum(xi_r, self.xi_cdf_left[1:])
            xt_r = np.minimum(xt_r, self.xi_total_left[1:])
        cond2 = np.sum(xi_r * np.maximum(d_beta, 0.0), axis=0)
        cond3 = float(np.sum(xt_r * np.diff(self.iota)))
        bc = self.beta_cdf
        mono_t = np.maximum(-np.diff(bc, axis=0), 0.0).max() if bc.shape[0] > 1 else 0.0
        mono_tail_t = np.maximum(-d_beta, 0.0).max() if d_beta.size else 0.0
        # alpha carries no mass past the last level, so beta cannot either
        cond4 = max(float(np.abs(self.beta_tail[:, -1]).max()), float(mono_t), float(mono_tail_t))
        return {
            "condition_1": max(float(cond1.max()) if cond1.size else 0.0, float(cond1_tot.max())),
            "condition_2": float(cond2.max()) if cond2.size else 0.0,
            "condition_3": cond3,
            "condition_4": cond4,
            "xi_monotone_in_x": float(np.maximum(-np.diff(self.xi_cdf, axis=1), 0.0).max()) if self.xi_cdf.shape[1] > 1 else 0.0,
        }


def mvsm_solve_cdf(
    times: np.ndarray,
    x_grid: np.ndarray,
    alpha_cdf: np.ndarray,
    alpha_total: np.ndarray,
    mu: np.ndarray,
    alpha_interp: str = "linear",
    mu_interp: str = "linear",
) -> MvsmSolution:
    """Array form of :func:`mvsm_solve`.

    ``alpha_cdf[k, j] = alpha_{t_k}[0, x_j]``; ``alpha_total[k] = alpha_{t_k}[0, inf)``.
    """
    times = np.asarray(times, dtype=float)
    A = np.asarray(alpha_cdf, dtype=float)
    At = np.asarray(alpha_total, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if mu[0] < 0 or np.any(np.diff(mu) < 0):
        raise ValueError("mu must be nonnegative and nondecreasing")

    def left(arr, interp):
        if interp == "linear":
            return None
        out = np.empty_like(arr)
        out[1:] = arr[:-1]
        out[0] = arr[0]
        return out

    mixed = alpha_interp != mu_interp
    A_left = left(A, alpha_interp) if mixed else None
    At_left = left(At, alpha_interp) if mixed else None
    mu_left = left(mu, mu_interp) if mixed else None
    if mixed:
        A_left = A if A_left is None else A_left
        At_left = At if At_left is None else At_left
        mu_left = mu if mu_left is None else mu_left
        psi_left = A_left - mu_left[:, None]
        psi_inf_left = (At_left - mu_left)[:, None]
    else:
        psi_left = psi_inf_left = None

    xi, eta_x = reflect_matrix(A - mu[:, None], psi_left)
    xi_tot, iota = reflect_matrix((At - mu)[:, None], psi_inf_left)
    iota = iota[:, 0]
    beta_tail = np.maximum(eta_x - iota[:, None], 0.0)
    extra = {}
    if psi_left is not None:
        extra["xi_cdf_left"] = _left_reflection(psi_left, -eta_x)
        extra["xi_total_left"] = _left_reflection(psi_inf_left, -iota[:, None])[:, 0]
    return MvsmSolution(
        times=times,
        x_grid=np.asarray(x_grid, dtype=float),
        xi_cdf=xi,
        xi_total=xi_tot[:, 0],
        beta_tail=beta_tail,
        iota=iota,
        mu=mu,
        **extra,
    )


def _left_reflection(psi_left: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``Gamma_1`` at the left limit of each sample, from the right-limit running minima ``m``."""
    m_left = np.empty_like(m)
    m_left[0] = m[0]
    m_left[1:] = np.minimum(m[:-1], np.minimum(psi_left[1:], 0.0))
    out = psi_left - m_left
    out[out < 0] = 0.0
    return out


def mvsm_solve(
    alpha: MeasurePath,
    mu: ScalarPath,
    x_grid=None,
    alpha_interp: str = "linear",
) -> MvsmSolution:
    """Measure-valued Skorohod map ``Theta(alpha, mu)`` on a level grid.

    Parameters
    ----------
    alpha : MeasurePath
        Monotone measure path; its sample times must equal ``mu.times``.
    mu : ScalarPath
        Nondecreasing consumption path with ``mu(0) >= 0``.
    x_grid : array_like, optional
        Levels; defaults to all atom locations and knots of every
        ``alpha_t``. Must contain them for the result to be exact.
    alpha_interp : {"linear", "step"}
        How ``alpha`` moves between samples; ``"step"`` for counting data.
    """
    if not np.array_equal(alpha.times, mu.times):
        raise ValueError("alpha and mu must share sample times")
    if x_grid is None:
        pts = [m.breakpoints() for m in alpha.measures]
        x_grid = np.unique(np.concatenate(pts)) if pts else np.zeros(0)
    x_grid = np.asarray(x_grid, dtype=float)
    if x_grid.size == 0:
        x_grid = np.zeros(1)
    A = np.vstack([m.cdf_at(x_grid) for m in alpha.measures])
    At = np.array([m.total for m in alpha.measures])
    return mvsm_solve_cdf(alpha.times, x_grid, A, At, mu.values, alpha_interp, mu.interp)


def sup_distance(p: ScalarPath, q: ScalarPath) -> float:
    """Sup distance between two piecewise-linear paths over their joint knots."""
    t = np.union1d(p.times, q.times)
    return float(np.max(np.abs(p(t) - q(t)))) if t.size else 0.0
