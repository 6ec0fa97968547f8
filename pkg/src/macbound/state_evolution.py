"""Spatially coupled state evolution.

All per-block error quantities are carried multiplied by M (``psi`` holds
M psi_c and ``gamma_scaled`` holds M gamma_r) so that nothing underflows for
large k.  One step of the recursion reads

    M gamma_r = sum_c B[r, c] M psi_c
    phi_r     = 1/E + mu_eff M gamma_r,        mu_eff = (R/C) mu
    tau_c     = 1 / sum_r (B[r, c] / phi_r)
    M psi_c'  = M mmse(tau_c)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scalar_channel import ChannelModel, _as_model, optimal_threshold, pupe_term, scalar_table

MONOTONE_RTOL = 1e-12


class MonotonicityError(RuntimeError):
    """tau increased between iterations, which the recursion cannot do."""


@dataclass(frozen=True)
class BaseMatrix:
    omega: int
    Lambda: int
    rho: float
    B: np.ndarray

    @property
    def R(self) -> int:
        return self.B.shape[0]

    @property
    def C(self) -> int:
        return self.B.shape[1]


def base_matrix(omega: int, Lambda: int, rho: float = 0.0) -> BaseMatrix:
    """(omega, Lambda, rho) band matrix with R = Lambda + omega - 1 rows.

    Entry (r, c) is (1 - rho)/omega on the band c <= r <= c + omega - 1 and
    rho/(Lambda - 1) elsewhere, so every column sums to one.
    """
    if int(omega) != omega or omega < 1:
        raise ValueError(f"omega must be an integer >= 1, got {omega}")
    if int(Lambda) != Lambda or Lambda < 2 * omega - 1:
        raise ValueError(f"Lambda must be an integer >= 2*omega-1 = {2 * omega - 1}, got {Lambda}")
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    if rho > 0 and Lambda == 1:
        raise ValueError("rho > 0 needs Lambda >= 2")
    omega, Lambda = int(omega), int(Lambda)
    R = Lambda + omega - 1
    r = np.arange(R)[:, None]
    c = np.arange(Lambda)[None, :]
    band = (r >= c) & (r <= c + omega - 1)
    off = rho / (Lambda - 1) if Lambda > 1 else 0.0
    B = np.where(band, (1.0 - rho) / omega, off)
    B.setflags(write=False)
    return BaseMatrix(omega, Lambda, float(rho), B)


def uncoupled_matrix() -> BaseMatrix:
    return base_matrix(1, 1, 0.0)


@dataclass(frozen=True)
class SeState:
    t: int
    psi: np.ndarray
    gamma_scaled: np.ndarray
    phi: np.ndarray
    tau: np.ndarray


def effective_density(B: BaseMatrix, mu: float) -> float:
    return B.R / B.C * mu


def _complete(B: BaseMatrix, mu: float, E: float, t: int, psi: np.ndarray) -> SeState:
    gamma = B.B @ psi
    phi = 1.0 / E + effective_density(B, mu) * gamma
    with np.errstate(divide="ignore"):
        tau = 1.0 / (B.B.T @ (1.0 / phi))
    return SeState(t, psi, gamma, phi, tau)


def initial_state(B: BaseMatrix, mu: float, E: float, init: str = "infinite") -> SeState:
    """State at t = 0.

    ``init="infinite"`` takes psi = infinity, so phi and tau are infinite and
    the first step returns M mmse(inf) = M Var(X).  ``init="matched"`` uses
    M psi = M E|X|^2 = 1, which is what AMP started from U = 0 sees.
    """
    if init == "infinite":
        inf = np.full(B.C, math.inf)
        return SeState(0, inf, np.full(B.R, math.inf), np.full(B.R, math.inf), inf)
    if init == "matched":
        return _complete(B, mu, E, 0, np.ones(B.C))
    raise ValueError(f"unknown init {init!r}; use 'infinite' or 'matched'")


def se_step(ch, B: BaseMatrix, mu: float, E: float, state: SeState, table=None) -> SeState:
    """Advance the recursion by one iteration."""
    ch = _as_model(ch)
    table = table if table is not None else scalar_table(ch)
    psi = np.minimum(table.mmse_scaled(state.tau), 1.0)
    return _complete(B, mu, E, state.t + 1, psi)


@dataclass
class SeResult:
    ch: ChannelModel
    base: BaseMatrix
    mu: float
    E: float
    tau: np.ndarray      # (T+1, C), row t is tau^(t)
    psi: np.ndarray      # (T+1, C), M psi^(t)
    gamma: np.ndarray    # (T+1, R), M gamma^(t)
    phi: np.ndarray      # (T+1, R)
    converged: bool
    iterations: int
    tol: float
    init: str = "infinite"

    @property
    def profile(self) -> np.ndarray:
        return self.tau[-1]

    @property
    def mu_eff(self) -> float:
        return effective_density(self.base, self.mu)

    def first_converged(self, tol: float) -> int:
        """First t with max relative change of tau below ``tol`` (or the last t)."""
        for t in range(1, self.tau.shape[0]):
            if _rel_change(self.tau[t], self.tau[t - 1]) <= tol:
                return t
        return self.tau.shape[0] - 1


def _rel_change(new, old) -> float:
    with np.errstate(invalid="ignore"):
        d = np.abs(new - old) / new
    return float(np.max(np.where(np.isnan(d), math.inf, d)))


def se_run(ch, B: BaseMatrix, mu: float, E: float, tol: float = 1e-10, t_max: int = 10000,
           init: str = "infinite", table=None, t_min: int = 0) -> SeResult:
    """Iterate until max_c |tau_c^t - tau_c^(t-1)| <= tol tau_c^t or t = t_max.

    ``t_min`` forces at least that many iterations (useful when AMP needs a
    trajectory of given length).  A non-converged run is reported through the
    flag; an increase of tau beyond 1e-12 relative raises MonotonicityError.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    ch = _as_model(ch)
    table = table if table is not None else scalar_table(ch)
    state = initial_state(B, mu, E, init)
    hist = [state]
    converged = False
    while state.t < t_max:
        new = se_step(ch, B, mu, E, state, table)
        bad = new.tau > state.tau * (1.0 + MONOTONE_RTOL)
        if np.any(bad):
            c = int(np.flatnonzero(bad)[0])
            raise MonotonicityError(
                f"tau_{c} rose from {state.tau[c]!r} to {new.tau[c]!r} at t={new.t}")
        hist.append(new)
        done = _rel_change(new.tau, state.tau) <= tol
        state = new
        if done:
            converged = True
            if state.t >= t_min:
                break
    return SeResult(
        ch, B, float(mu), float(E),
        tau=np.array([s.tau for s in hist]),
        psi=np.array([s.psi for s in hist]),
        gamma=np.array([s.gamma_scaled for s in hist]),
        phi=np.array([s.phi for s in hist]),
        converged=converged, iterations=state.t,
        tol=float(tol), init=init,
    )


def coupled_pupe_prediction(ch, profile):
    """Average per-block PUPE term with optimal thresholds.

    Returns ``(pupe, thresholds)``: the block average of pi*(tau_c) (QSF) or
    2 eps*(tau_c) (AWGN), and theta_c* for every column block.
    """
    ch = _as_model(ch)
    profile = np.asarray(profile, dtype=float)
    terms = np.array([pupe_term(ch, t) for t in profile])
    return float(np.mean(terms)), np.asarray(optimal_threshold(ch, profile), dtype=float)
