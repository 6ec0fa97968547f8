"""Replica potential over the effective noise level tau.

    F(tau) = mu * (M I(X; V_tau)) + c * (ln tau + 1/(tau E) - 1),

with c = 1/2 for the real AWGN channel and c = 1 for QSF.  By the I-MMSE
relation F'(tau) = c (tau - 1/E - mu * M mmse(tau)) / tau^2, so the
stationary points of F are exactly the fixed points of uncoupled state
evolution.  Minima are therefore located through the sign changes of that
residual and compared by their potential value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .scalar_channel import ChannelModel, mmse_scaled, mutual_info_scaled, scalar_table

log = logging.getLogger(__name__)

GRID_POINTS = 2000
TIE_RTOL = 1e-9
_LOWER_SLACK = 1e-9
_UPPER_SLACK = 1e-6


@dataclass(frozen=True)
class SystemParams:
    mu: float
    E: float
    ch: ChannelModel

    def __post_init__(self):
        if not self.mu >= 0:
            raise ValueError(f"mu must be non-negative, got {self.mu}")
        if not self.E > 0:
            raise ValueError(f"E must be positive, got {self.E}")


@dataclass(frozen=True)
class Minimum:
    tau: float
    F: float
    basin: tuple[float, float]
    boundary: bool = False


@dataclass
class PotentialLandscape:
    params: SystemParams
    tau: np.ndarray
    F: np.ndarray
    minima: list[Minimum]
    global_argmin_max: float
    tie: bool = False
    boundary: bool = False
    is_min: np.ndarray = field(default=None, repr=False)

    @property
    def samples(self):
        return list(zip(self.tau.tolist(), self.F.tolist()))

    @property
    def phase_flag(self) -> str:
        if self.tie:
            return "tie"
        if self.boundary:
            return "boundary"
        return "multi" if len(self.minima) > 1 else "single"


def _noise_term(p: SystemParams, tau):
    tau = np.asarray(tau, dtype=float)
    return p.ch.potential_weight * (np.log(tau) + 1.0 / (tau * p.E) - 1.0)


def potential_value(p: SystemParams, tau: float) -> float:
    """F(tau) by direct quadrature; tau must exceed 1/E."""
    tau = float(tau)
    if not tau > 1.0 / p.E:
        raise ValueError(f"tau must exceed 1/E = {1.0 / p.E:g}, got {tau:g}")
    mi = mutual_info_scaled(p.ch, tau) if p.mu > 0 else 0.0
    return p.mu * mi + float(_noise_term(p, tau))


def potential_values(p: SystemParams, taus) -> np.ndarray:
    """F on an array of tau using the interpolation tables."""
    taus = np.asarray(taus, dtype=float)
    mi = scalar_table(p.ch).mutual_info_scaled(taus) if p.mu > 0 else 0.0
    return p.mu * mi + _noise_term(p, taus)


def fixed_point_residual(p: SystemParams, tau: float) -> float:
    """tau - 1/E - mu * M mmse(tau), evaluated directly."""
    return tau - 1.0 / p.E - p.mu * mmse_scaled(p.ch, tau)


def scan_grid(p: SystemParams, n: int = GRID_POINTS) -> np.ndarray:
    lo = (1.0 / p.E) * (1.0 + _LOWER_SLACK)
    hi = 1.0 / p.E + p.mu * (1.0 + _UPPER_SLACK)
    return np.geomspace(lo, hi, n)


def _refine_root(p: SystemParams, a: float, b: float) -> float:
    """Root of the fixed-point residual in [a, b] to ~1e-12 relative."""
    fa, fb = fixed_point_residual(p, a), fixed_point_residual(p, b)
    if fa == 0.0:
        return a
    if fb == 0.0:
        return b
    if (fa < 0) != (fb < 0):
        return brentq(lambda t: fixed_point_residual(p, t), a, b, xtol=1e-300, rtol=1e-13)
    # table and direct evaluation disagree on the bracket (near-tangent crossing)
    table = scalar_table(p.ch)
    res = lambda t: t - 1.0 / p.E - p.mu * float(table.mmse_scaled(t))
    if (res(a) < 0) != (res(b) < 0):
        return brentq(res, a, b, xtol=1e-300, rtol=1e-13)
    return 0.5 * (a + b)


def _stationary_points(p: SystemParams, grid: np.ndarray):
    """Sign changes of the residual on ``grid``: list of (index, kind)."""
    res = grid - 1.0 / p.E - p.mu * scalar_table(p.ch).mmse_scaled(grid)
    neg = res < 0
    out = []
    for i in np.flatnonzero(neg[:-1] != neg[1:]):
        out.append((int(i), "min" if neg[i] else "max"))
    return res, out


def uncoupled_fixed_points(p: SystemParams, n: int = GRID_POINTS) -> list[float]:
    """All solutions of tau = 1/E + mu * M mmse(tau) in (1/E, 1/E + mu].

    The largest one is where uncoupled AMP started from tau = infinity
    stops.
    """
    if p.mu == 0:
        return [1.0 / p.E]
    grid = scan_grid(p, n)
    res, changes = _stationary_points(p, grid)
    roots = []
    if res[0] >= 0:
        roots.append(float(grid[0]))
    for i, _ in changes:
        roots.append(_refine_root(p, grid[i], grid[i + 1]))
    return sorted(roots)


def global_minimizer(p: SystemParams, n: int = GRID_POINTS) -> PotentialLandscape:
    """Scan F over (1/E, 1/E + mu], refine every local minimum and return
    the largest of the (tied) global minimisers.

    Every fixed point satisfies tau <= 1/E + mu since M mmse <= 1, so the
    scan range contains all stationary points.
    """
    if p.mu == 0:
        tau0 = 1.0 / p.E
        m = Minimum(tau0, float(_noise_term(p, tau0)), (tau0, tau0), boundary=True)
        return PotentialLandscape(p, np.array([tau0]), np.array([m.F]), [m], tau0,
                                  is_min=np.array([True]))

    grid = scan_grid(p, n)
    F = potential_values(p, grid)
    res, changes = _stationary_points(p, grid)

    maxima = [grid[i] for i, kind in changes if kind == "max"]
    edges = [grid[0]] + maxima + [grid[-1]]
    minima = []
    is_min = np.zeros(grid.size, dtype=bool)
    boundary = False
    if res[0] >= 0:
        # F increases from the left end: the infimum sits at tau -> 1/E
        boundary = True
        minima.append(Minimum(float(grid[0]), potential_value(p, grid[0]),
                              (float(grid[0]), float(edges[1])), boundary=True))
        is_min[0] = True
    basin_idx = 1 if boundary else 0
    for i, kind in changes:
        if kind != "min":
            continue
        tau = _refine_root(p, grid[i], grid[i + 1])
        lo_edge = edges[basin_idx] if basin_idx < len(edges) else grid[0]
        hi_edge = edges[basin_idx + 1] if basin_idx + 1 < len(edges) else grid[-1]
        basin_idx += 1
        minima.append(Minimum(tau, potential_value(p, tau), (float(lo_edge), float(hi_edge))))
        is_min[i if abs(grid[i] - tau) <= abs(grid[i + 1] - tau) else i + 1] = True

    if not minima:
        # should not happen: the residual is positive at the right end
        j = int(np.argmin(F))
        minima.append(Minimum(float(grid[j]), float(F[j]), (float(grid[0]), float(grid[-1]))))
        is_min[j] = True

    f_min = min(m.F for m in minima)
    tol = TIE_RTOL * max(abs(f_min), 1e-3)
    winners = [m for m in minima if m.F - f_min <= tol]
    tie = len(winners) > 1
    if tie:
        log.info("near-tied global minima at mu=%g E=%g: %s", p.mu, p.E,
                 [w.tau for w in winners])
    best = max(w.tau for w in winners)
    return PotentialLandscape(p, grid, F, minima, best, tie=tie,
                              boundary=boundary and best == minima[0].tau, is_min=is_min)
