"""PUPE achievability bounds and minimum-Eb/N0 curves.

The coupled bound evaluates the per-block error term at the largest global
minimiser of the potential; the uncoupled (scalar AMP) bound evaluates it at
the largest fixed point of uncoupled state evolution.  Minimum Eb/N0 is
found by an ascending scan on a fixed dB lattice followed by bisection,
because the bound jumps where the potential changes its global minimiser.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .potential import SystemParams, global_minimizer, uncoupled_fixed_points
from .scalar_channel import ChannelModel, _as_model, pi_star, pupe_term, q_tail_inverse_log

log = logging.getLogger(__name__)

COARSE_DB = 0.25
FINE_DB = 0.01
TOL_DB = 1e-4
WARM_BACKOFF_DB = 0.5
JUMP_DB = 1.0
JUMP_RATIO = 1.05

CSV_COLUMNS = ("mu", "ebn0_db", "E", "tau_star", "pupe", "phase_flag")


class WindowError(ValueError):
    """The Eb/N0 window does not bracket the solution."""

    def __init__(self, message, side, result=None):
        super().__init__(message)
        self.side = side
        self.result = result


def energy_from_ebn0(ch, ebn0_db: float) -> float:
    """Total energy E: 2 Eb/N0 k for the real channel, Eb/N0 k for QSF."""
    ch = _as_model(ch)
    scale = 1.0 if ch.is_complex else 2.0
    return scale * ch.k * 10.0 ** (ebn0_db / 10.0)


def ebn0_from_energy(ch, E: float) -> float:
    ch = _as_model(ch)
    scale = 1.0 if ch.is_complex else 2.0
    return 10.0 * math.log10(E / (scale * ch.k))


@dataclass(frozen=True)
class BoundResult:
    pupe: float
    tau_star: float
    phase_flag: str


def evaluate_bound(ch, mu: float, E: float, coupled: bool = True) -> BoundResult:
    ch = _as_model(ch)
    p = SystemParams(mu, E, ch)
    if coupled:
        land = global_minimizer(p)
        tau, flag = land.global_argmin_max, land.phase_flag
    else:
        fps = uncoupled_fixed_points(p)
        tau, flag = max(fps), f"fp{len(fps)}"
    return BoundResult(min(1.0, max(0.0, pupe_term(ch, tau))), tau, flag)


def pupe_bound(ch, mu: float, E: float, coupled: bool = True) -> float:
    """pi*(tau) for QSF or 2 eps*(tau) for AWGN at the bound's tau."""
    return evaluate_bound(ch, mu, E, coupled).pupe


def single_user_energy(ch, eps: float) -> float:
    """Energy E at which the mu -> 0 bound equals ``eps``.

    AWGN: sqrt(E) = Qinv(eps/2) + Qinv(eps/(2(M-1))).  QSF: pi*(1/E) = eps.
    """
    ch = _as_model(ch)
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if ch.is_complex:
        f = lambda lt: math.log(pi_star(math.exp(lt), ch.k)) - math.log(eps)
        lo, hi = -50.0, 5.0
        while f(lo) > 0:
            lo *= 2
        return math.exp(-brentq(f, lo, hi, xtol=1e-14, rtol=1e-15))
    lp = math.log(eps / 2.0)
    return (q_tail_inverse_log(lp) + q_tail_inverse_log(lp - ch.log_m1)) ** 2


def single_user_ebn0_db(ch, eps: float) -> float:
    return ebn0_from_energy(ch, single_user_energy(ch, eps))


@dataclass(frozen=True)
class BoundQuery:
    ch: ChannelModel
    mu: float
    target_eps: float
    window: tuple[float, float] = (-5.0, 60.0)
    coupled: bool = True

    def __post_init__(self):
        if not 0 < self.target_eps < 1:
            raise ValueError(f"target_eps must lie in (0, 1), got {self.target_eps}")
        lo, hi = self.window
        if not lo < hi:
            raise ValueError(f"empty Eb/N0 window {self.window}")
        if not self.mu >= 0:
            raise ValueError(f"mu must be non-negative, got {self.mu}")


@dataclass
class CurveRecord:
    mu: float
    ebn0_db: float
    E: float
    tau_star: float
    pupe: float
    phase_flag: str
    ok: bool = True
    message: str = ""

    def row(self):
        return [repr(float(self.mu)), repr(float(self.ebn0_db)), repr(float(self.E)),
                repr(float(self.tau_star)), repr(float(self.pupe)), self.phase_flag]


class _Predicate:
    """Memoised 'bound <= eps' as a function of Eb/N0 in dB."""

    def __init__(self, q: BoundQuery):
        self.q = q
        self.cache = {}

    def result(self, x: float) -> BoundResult:
        if x not in self.cache:
            E = energy_from_ebn0(self.q.ch, x)
            self.cache[x] = evaluate_bound(self.q.ch, self.q.mu, E, self.q.coupled)
        return self.cache[x]

    def __call__(self, x: float) -> bool:
        return self.result(x).pupe <= self.q.target_eps


def _lattice_scan(pred, lo: float, hi: float, step: float):
    """Ascending scan over integer multiples of ``step`` strictly inside
    (lo, hi); returns the tightest (false, true) bracket.  pred(lo) is false
    and pred(hi) is true on entry.
    """
    j = math.floor(lo / step) + 1
    prev = lo
    while True:
        x = j * step
        if x >= hi:
            return prev, hi
        if pred(x):
            return prev, x
        prev = x
        j += 1


def min_ebn0(q: BoundQuery, start: float | None = None) -> CurveRecord:
    """Smallest Eb/N0 (dB) in the window with bound <= target_eps.

    ``start`` is an optional warm-start lower end; it is used only if the
    predicate is false there.  Scan points sit on fixed multiples of the
    coarse and fine steps, so the result does not depend on the start.
    """
    pred = _Predicate(q)
    lo, hi = q.window
    if not pred(hi):
        raise WindowError(f"bound {pred.result(hi).pupe:.3g} > eps at window top {hi} dB",
                          "hi", pred.result(hi))
    if start is not None and lo < start < hi and not pred(start):
        lo = start
    elif pred(lo):
        raise WindowError(f"bound already <= eps at window bottom {lo} dB", "lo", pred.result(lo))
    a, b = _lattice_scan(pred, lo, hi, COARSE_DB)
    a, b = _lattice_scan(pred, a, b, FINE_DB)
    while b - a > TOL_DB:
        m = 0.5 * (a + b)
        if pred(m):
            b = m
        else:
            a = m
    res = pred.result(b)
    return CurveRecord(q.mu, b, energy_from_ebn0(q.ch, b), res.tau_star, res.pupe, res.phase_flag)


def _failed(mu: float, exc: Exception) -> CurveRecord:
    if isinstance(exc, WindowError) and exc.side == "hi":
        # the bound never reaches eps inside the window: a valid, if empty, answer
        return CurveRecord(mu, math.inf, math.inf, exc.result.tau_star, exc.result.pupe,
                           "above_window", message=str(exc))
    return CurveRecord(mu, math.nan, math.nan, math.nan, math.nan, "failed", ok=False,
                       message=str(exc))


def default_mu_grid() -> np.ndarray:
    return np.geomspace(1e-3, 20.0, 120)


def sweep_curve(ch, mu_grid, eps: float, window=(-5.0, 60.0), coupled: bool = True,
                warm_start: bool = True, refine_jumps: bool = False) -> list[CurveRecord]:
    """min_ebn0 for every mu (ascending).  Failed points become flagged rows.

    With ``refine_jumps`` every pair of neighbours whose Eb/N0 rises by more
    than 1 dB is bisected geometrically in mu until the ratio is below 1.05,
    which resolves the near-vertical part of the curve.
    """
    ch = _as_model(ch)
    mus = [float(m) for m in mu_grid]
    if any(b < a for a, b in zip(mus, mus[1:])):
        raise ValueError("mu_grid must be sorted ascending")
    out = []
    prev = None
    for mu in mus:
        start = prev - WARM_BACKOFF_DB if (warm_start and prev is not None) else None
        try:
            rec = min_ebn0(BoundQuery(ch, mu, eps, tuple(window), coupled), start)
            prev = rec.ebn0_db
        except (WindowError, ValueError, ArithmeticError) as exc:
            rec = _failed(mu, exc)
            if not rec.ok:
                log.warning("mu=%g failed: %s", mu, exc)
        out.append(rec)
    if refine_jumps:
        out = _refine_jumps(ch, out, eps, window, coupled)
    return out


def _refine_jumps(ch, recs, eps, window, coupled):
    recs = list(recs)
    i = 0
    while i < len(recs) - 1:
        a, b = recs[i], recs[i + 1]
        if (a.ok and b.ok and math.isfinite(b.ebn0_db) and b.ebn0_db - a.ebn0_db > JUMP_DB
                and b.mu / a.mu > JUMP_RATIO):
            mu = math.sqrt(a.mu * b.mu)
            try:
                rec = min_ebn0(BoundQuery(ch, mu, eps, tuple(window), coupled),
                               a.ebn0_db - WARM_BACKOFF_DB)
            except (WindowError, ValueError, ArithmeticError) as exc:
                rec = _failed(mu, exc)
            recs.insert(i + 1, rec)
            continue  # re-examine the left half first
        i += 1
    return recs


def curve_csv(records, meta: dict | None = None) -> str:
    """CSV text with a header row and a trailing '#' metadata block."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(r.row())
    for key, val in (meta or {}).items():
        buf.write(f"# {key}={val}\n")
    return buf.getvalue()
