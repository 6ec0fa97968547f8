"""Scalar equivalent channel V = X + sqrt(tau) W.

AWGN: X ~ Bernoulli(1/M) on {0, 1}, W ~ N(0, 1).
QSF:  X ~ Bernoulli-Gaussian(1, 1/M), W ~ CN(0, 1).

M = 2**k can be astronomically large (k = 100), so the prior enters only
through ln M and ln(M - 1).  Quantities that scale like 1/M are returned in
M-scaled form (``mmse_scaled`` is M * mmse, ``mutual_info_scaled`` is M * I)
and every expectation is evaluated under the *active* conditional law via
the change of measure (M - 1) f0 = f1 exp(-llr), which turns each of them
into a single well-conditioned log-concave integral.
"""

from __future__ import annotations

import enum
import logging
import math
import os
import tempfile
import threading
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import special
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from ._quadrature import log_expect

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class Channel(str, enum.Enum):
    AWGN = "awgn"
    QSF = "qsf"


class TrivialBoundError(ValueError):
    """Raised when the AWGN fixed-point equation has no solution in (0, 1/2)."""


@dataclass(frozen=True)
class ChannelModel:
    """Channel kind plus payload size k (M = 2**k messages per user)."""

    kind: Channel
    k: int

    def __post_init__(self):
        object.__setattr__(self, "kind", Channel(self.kind))
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be an integer >= 1, got {self.k!r}")
        object.__setattr__(self, "k", int(self.k))

    @property
    def log_m(self) -> float:
        return self.k * LN2

    @property
    def log_m1(self) -> float:
        return log_m_minus_1(self.k)

    @property
    def is_complex(self) -> bool:
        return self.kind is Channel.QSF

    @property
    def potential_weight(self) -> float:
        """1/2 for the real channel, 1 for the complex one."""
        return 1.0 if self.is_complex else 0.5


@dataclass(frozen=True)
class ScalarObservation:
    value: complex | float
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def log_m_minus_1(k: int) -> float:
    """ln(2**k - 1) without forming 2**k."""
    return k * LN2 + math.log1p(-math.exp(-k * LN2))


def _as_model(ch) -> ChannelModel:
    if isinstance(ch, ChannelModel):
        return ch
    kind, k = ch
    return ChannelModel(kind, k)


# ---------------------------------------------------------------------------
# Gaussian tail


def log_q_tail(x):
    """ln Q(x), Q the standard normal upper tail.

    For x > 0 uses the scaled erfc so the result stays accurate far into the
    tail (ln Q(40) is about -804); for x <= 0 uses ln(1 - Q(-x)).
    """
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        pos = np.log(0.5 * special.erfcx(np.abs(x) / math.sqrt(2.0))) - 0.5 * x * x
        neg = np.log1p(-0.5 * special.erfc(np.abs(x) / math.sqrt(2.0)))
    out = np.where(x > 0, pos, neg)
    return float(out) if out.ndim == 0 else out


def _log_phi(x):
    return -0.5 * x * x - _LOG_SQRT_2PI


def q_tail_inverse_log(log_p: float) -> float:
    """Inverse of ``log_q_tail``: x with ln Q(x) = log_p.

    Safeguarded Newton iteration seeded by sqrt(2L - ln(4 pi L)), L = -log_p,
    falling back to bisection whenever a Newton step leaves the bracket.
    """
    log_p = float(log_p)
    if not log_p < 0.0:
        raise ValueError(f"log_p must be negative, got {log_p}")
    big_l = -log_p
    if big_l > 1.0:
        x = math.sqrt(max(2.0 * big_l - math.log(4.0 * math.pi * big_l), 0.0))
    else:
        x = float(-special.ndtri(math.exp(log_p)))
    lo, hi = x - 1.0, x + 1.0
    while log_q_tail(lo) < log_p:
        lo -= 2.0 * (hi - lo)
    while log_q_tail(hi) > log_p:
        hi += 2.0 * (hi - lo)
    x = min(max(x, lo), hi)
    for _ in range(200):
        lq = log_q_tail(x)
        f = lq - log_p
        if f > 0:
            lo = x
        else:
            hi = x
        if f == 0.0 or hi - lo <= 1e-15 * max(1.0, abs(x)):
            return x
        xn = x + f / math.exp(_log_phi(x) - lq)
        if not (lo < xn < hi):
            xn = 0.5 * (lo + hi)
        if abs(xn - x) <= 1e-15 * max(1.0, abs(x)):
            return xn
        x = xn
    return x


# ---------------------------------------------------------------------------
# Stable elementwise helpers


def _softplus(x):
    return np.logaddexp(0.0, x)


def _log_softplus(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", under="ignore", divide="ignore"):
        return np.where(x < -35.0, x, np.log(np.logaddexp(0.0, np.maximum(x, -35.0))))


def _log_expit(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


_R_SERIES = np.array([1.0 / (j + 2) for j in range(32)])


def _log_r(x):
    """ln(1 - softplus(x) e^{-x}), i.e. ln((y - ln(1+y))/y) with y = e^x."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < -2.0
    if np.any(small):
        y = np.exp(x[small])
        series = np.zeros_like(y)
        for c in _R_SERIES[::-1]:
            series = c - y * series
        out[small] = x[small] + np.log(series)
    big = ~small
    if np.any(big):
        xb = x[big]
        with np.errstate(over="ignore", under="ignore"):
            t = _softplus(xb) * np.exp(-xb)
        out[big] = np.log1p(-t)
    return out


def _scaled_g_minus_inv_m(log_m: float) -> float:
    """M * (-1/M - ln(1 - 1/M)), positive and about 1/(2M)."""
    x = math.exp(-log_m)
    if x < 1e-4:
        return x / 2.0 + x * x / 3.0 + x ** 3 / 4.0
    return -1.0 - math.log1p(-x) / x


# ---------------------------------------------------------------------------
# Posterior, denoiser


def posterior_log_odds(ch, value, tau):
    """ln P(X active | V = v) / P(X inactive | V = v)."""
    ch = _as_model(ch)
    v = np.asarray(value)
    if ch.is_complex:
        s = np.abs(v) ** 2
        tau = np.asarray(tau, dtype=float)
        return -ch.log_m1 - np.log1p(1.0 / tau) + s / (tau * (1.0 + tau))
    return -ch.log_m1 + (2.0 * v.real - 1.0) / (2.0 * tau)


def denoise(ch, obs, tau=None):
    """Posterior mean E[X | V = v] for the scalar channel.

    ``obs`` is either a ScalarObservation or an array of observations with
    ``tau`` given separately (scalar, or broadcastable per entry).
    """
    ch = _as_model(ch)
    if isinstance(obs, ScalarObservation):
        value, tau = obs.value, obs.tau
    else:
        value = obs
    if np.any(np.asarray(tau) <= 0):
        raise ValueError("tau must be positive")
    post = special.expit(posterior_log_odds(ch, value, tau))
    if ch.is_complex:
        out = post * np.asarray(value) / (1.0 + np.asarray(tau))
    else:
        out = post
    return out.item() if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# MMSE and mutual information


def _llr_affine(ch: ChannelModel, tau: float):
    """Posterior log-odds as a + b*z under the active law.

    AWGN: z ~ N(0,1) with V = 1 + sqrt(tau) z.
    QSF:  z ~ Exp(1) with |V|^2 = (1 + tau) z.
    Returns (a, b, dist, E[log-likelihood ratio under the active law]).
    """
    if ch.is_complex:
        l1p = math.log1p(1.0 / tau)
        return -ch.log_m1 - l1p, 1.0 / tau, "exp", 1.0 / tau - l1p
    return -ch.log_m1 + 0.5 / tau, 1.0 / math.sqrt(tau), "normal", 0.5 / tau


def log_mmse_scaled(ch, tau: float) -> float:
    """ln(M * mmse(tau)); finite even when the mmse underflows."""
    ch = _as_model(ch)
    tau = float(tau)
    if not tau > 0:
        raise ValueError("tau must be positive")
    if math.isinf(tau):
        return math.log(-math.expm1(-ch.log_m)) if not ch.is_complex else 0.0
    a, b, dist, _ = _llr_affine(ch, tau)
    hint = -a / b
    if not ch.is_complex:
        # M * mmse = E_1[P(inactive | V)] <= 1 - 1/M
        val = log_expect(lambda z: _log_expit(-(a + b * z)), dist, hint)
        return min(val, math.log(-math.expm1(-ch.log_m)))
    # M * mmse = tau/(1+tau) + E_1[P(inactive | V) |V|^2] / (1+tau)^2
    with np.errstate(divide="ignore"):
        le = log_expect(lambda z: np.log(z) + _log_expit(-(a + b * z)), dist, hint)
    return min(float(np.logaddexp(math.log(tau) - math.log1p(tau), le - math.log1p(tau))), 0.0)


def mmse_scaled(ch, tau: float) -> float:
    """M * E|X - eta(V, tau)|^2, in [0, 1]."""
    return math.exp(log_mmse_scaled(ch, tau))


def mutual_info_scaled(ch, tau: float) -> float:
    """M * I(X; V_tau) in nats.

    The support part M * I(S; V) is split into a constant M*g(-1/M), a
    positive integral E_1[r(llr)] and E_1[lambda - softplus(llr)], the last
    one evaluated on whichever side avoids cancellation.  For QSF the
    Gaussian part adds ln(1 + 1/tau) (the active symbol's own information).
    """
    ch = _as_model(ch)
    tau = float(tau)
    if not tau > 0:
        raise ValueError("tau must be positive")
    if math.isinf(tau):
        return 0.0
    a, b, dist, mean_lambda = _llr_affine(ch, tau)
    hint = -a / b
    l1 = ch.log_m1
    total = _scaled_g_minus_inv_m(ch.log_m)
    total += math.exp(log_expect(lambda z: _log_r(a + b * z), dist, hint))
    if mean_lambda - l1 >= 0.0:
        total += l1 - math.exp(log_expect(lambda z: _log_softplus(-(a + b * z)), dist, hint))
    else:
        total += mean_lambda - math.exp(log_expect(lambda z: _log_softplus(a + b * z), dist, hint))
    if ch.is_complex:
        total += math.log1p(1.0 / tau)
    return max(total, 0.0)


# ---------------------------------------------------------------------------
# Support recovery by thresholding


def log_scaled_psi(ch, tau: float, theta: float) -> float:
    """ln(M * psi(tau, theta)) for the threshold detector of the support."""
    ch = _as_model(ch)
    if ch.is_complex:
        miss = math.log(-math.expm1(-theta / (1.0 + tau))) if theta > 0 else -math.inf
        false_alarm = ch.log_m1 - theta / tau
    else:
        sd = math.sqrt(tau)
        false_alarm = ch.log_m1 + log_q_tail(theta / sd)
        miss = log_q_tail((1.0 - theta) / sd)
    return float(np.logaddexp(false_alarm, miss))


def scaled_psi(ch, tau: float, theta: float) -> float:
    """M * psi(tau, theta)."""
    return math.exp(log_scaled_psi(ch, tau, theta))


def psi_support_error(ch, tau: float, theta: float) -> float:
    """P(support bit of X != threshold decision), unscaled."""
    ch = _as_model(ch)
    if not (tau > 0 and theta > 0):
        raise ValueError("tau and theta must be positive")
    return math.exp(log_scaled_psi(ch, tau, theta) - ch.log_m)


def optimal_threshold(ch, tau):
    """Threshold minimising psi.

    QSF (on |V|^2): tau (1 + tau) ln((M - 1)(1 + 1/tau)).
    AWGN (on V): 1/2 + tau ln(M - 1), where the weighted densities cross.
    """
    ch = _as_model(ch)
    tau = np.asarray(tau, dtype=float)
    if ch.is_complex:
        out = tau * (1.0 + tau) * (ch.log_m1 + np.log1p(1.0 / tau))
    else:
        out = 0.5 + tau * ch.log_m1
    return float(out) if out.ndim == 0 else out


def pi_star(tau, k: int):
    """1 - (1/(1+tau)) ((M-1)(1/tau + 1))^(-tau), clamped to [0, 1]."""
    tau = np.asarray(tau, dtype=float)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        expo = np.log1p(tau) + tau * (log_m_minus_1(k) + np.log1p(1.0 / tau))
        out = np.clip(-np.expm1(-expo), 0.0, 1.0)
    out = np.where(np.isinf(tau), 1.0, out)
    return float(out) if out.ndim == 0 else out


def log_epsilon_star(tau: float, k: int) -> float:
    """ln eps*, where 1/sqrt(tau) = Qinv(eps*) + Qinv(eps*/(M - 1)).

    The right-hand side is strictly decreasing in eps*, so a bracketed root
    search in ln eps over [ln 1e-300, ln 0.5] (extended downward if needed)
    finds the unique solution.  Raises TrivialBoundError if even eps* = 1/2
    cannot satisfy the equation.
    """
    tau = float(tau)
    if not tau > 0:
        raise ValueError("tau must be positive")
    l1 = log_m_minus_1(k)
    target = 1.0 / math.sqrt(tau)

    def excess(y):
        return q_tail_inverse_log(y) + q_tail_inverse_log(y - l1) - target

    hi = math.log(0.5)
    if excess(hi) > 0:
        raise TrivialBoundError(f"no eps* < 1/2 for tau={tau:g}, k={k}")
    lo = math.log(1e-300)
    while excess(lo) < 0:
        lo *= 2.0
    return brentq(excess, lo, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps, maxiter=500)


def epsilon_star(tau: float, k: int) -> float:
    return math.exp(log_epsilon_star(tau, k))


def epsilon_tilde_star(tau: float, k: int) -> float:
    """2 eps*/M, the per-entry error rate paired with eps*."""
    return math.exp(log_epsilon_star(tau, k) + LN2 - k * LN2)


def awgn_pupe_term(tau: float, k: int) -> float:
    """2 eps*(tau, M), or 1 when the fixed-point equation has no solution."""
    try:
        return min(1.0, 2.0 * epsilon_star(tau, k))
    except TrivialBoundError:
        return 1.0


def pupe_term(ch, tau: float) -> float:
    """Per-block PUPE contribution with an optimised threshold."""
    ch = _as_model(ch)
    if ch.is_complex:
        return pi_star(tau, ch.k)
    return awgn_pupe_term(tau, ch.k)


# ---------------------------------------------------------------------------
# Memoised tables for repeated evaluation


class ScalarTable:
    """Cubic interpolation of ln(M mmse) and ln(M I) on a log-tau grid.

    Built once per channel model and read-only afterwards; calls outside the
    grid fall back to direct quadrature.
    """

    def __init__(self, ch, tau_min=1e-9, tau_max=1e6, per_decade=400, values=None):
        self.ch = _as_model(ch)
        decades = math.log10(tau_max) - math.log10(tau_min)
        n = int(round(decades * per_decade)) + 1
        self.log_tau = np.linspace(math.log(tau_min), math.log(tau_max), n)
        if values is None:
            taus = np.exp(self.log_tau)
            log_mmse = np.array([log_mmse_scaled(self.ch, t) for t in taus])
            # mmse is non-decreasing in tau; remove quadrature-level wiggles
            log_mmse = np.maximum.accumulate(log_mmse)
            mi = np.array([mutual_info_scaled(self.ch, t) for t in taus])
        else:
            log_mmse, mi = values
        self.log_mmse_values = log_mmse
        self.mi_values = mi
        self._log_mmse = CubicSpline(self.log_tau, log_mmse)
        self._log_mi = CubicSpline(self.log_tau, np.log(np.maximum(mi, 1e-300)))
        self.tau_min, self.tau_max = tau_min, tau_max
        self._log_mmse_inf = log_mmse_scaled(self.ch, math.inf)

    def _eval(self, spline, tau, direct, at_inf):
        tau = np.asarray(tau, dtype=float)
        flat = tau.ravel()
        out = np.empty_like(flat)
        inside = (flat >= self.tau_min) & (flat <= self.tau_max)
        if np.any(inside):
            out[inside] = spline(np.log(flat[inside]))
        for i in np.flatnonzero(~inside):
            out[i] = at_inf if math.isinf(flat[i]) else direct(flat[i])
        return out.reshape(tau.shape)

    def log_mmse_scaled(self, tau):
        return self._eval(self._log_mmse, tau, lambda t: log_mmse_scaled(self.ch, t),
                          self._log_mmse_inf)

    def mmse_scaled(self, tau):
        return np.exp(self.log_mmse_scaled(tau))

    def mutual_info_scaled(self, tau):
        return np.exp(self._eval(self._log_mi, tau,
                                 lambda t: math.log(max(mutual_info_scaled(self.ch, t), 1e-300)),
                                 -np.inf))


_table_lock = threading.Lock()
_TABLE_FORMAT = 1


def _cache_dir():
    root = os.environ.get("MACBOUND_CACHE_DIR")
    if root == "":
        return None
    return Path(root) if root else Path.home() / ".cache" / "macbound"


@lru_cache(maxsize=None)
def _build_table(kind: Channel, k: int) -> ScalarTable:
    ch = ChannelModel(kind, k)
    cache = _cache_dir()
    path = cache / f"table-v{_TABLE_FORMAT}-{kind.value}-k{k}.npz" if cache else None
    if path is not None and path.exists():
        try:
            data = np.load(path)
            return ScalarTable(ch, values=(data["log_mmse"], data["mi"]))
        except (OSError, KeyError, ValueError):
            log.warning("ignoring unreadable table cache %s", path)
    table = ScalarTable(ch)
    if path is not None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with tempfile.NamedTemporaryFile(dir=path.parent, suffix=".npz", delete=False) as fh:
                np.savez(fh, log_mmse=table.log_mmse_values, mi=table.mi_values)
            os.replace(fh.name, path)
        except OSError:
            log.warning("could not write table cache %s", path)
    return table


def scalar_table(ch) -> ScalarTable:
    """Shared, lazily built table for ``ch``.

    Tables are also cached on disk under $MACBOUND_CACHE_DIR (default
    ~/.cache/macbound; set it to the empty string to disable).
    """
    ch = _as_model(ch)
    with _table_lock:
        return _build_table(ch.kind, ch.k)
