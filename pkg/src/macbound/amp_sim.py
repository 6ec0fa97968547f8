"""Finite-n Monte Carlo of the spatially coupled scalar-AMP decoder.

The codebook A is n x p with p = K M; entry (i, j) has variance
E (R/n) B[r(i), c(j)], so every column has squared norm E on average.  Each
user sends one column of its section (times a unit circular Gaussian fade
for QSF) and Y = A U + Z with unit noise.

AMP works on the matched-filter output scaled by 1/E, which is the
observation whose effective noise state evolution tracks.  Because
Q[i, j] = tau_c(j) / phi_r(i) factors into a column and a row part, the
weighted adjoint (Q . A)^* R equals tau_c . A^* (R / phi_r), so only two
dense products are needed per iteration.

Indexing used here (the SE trajectory must come from the matched start
M psi^(0) = 1, which is what U^(0) = 0 produces):

    s^(t)   = U^(t) + tau^(t) . A^* (R^(t) / phi^(t)) / E      noise tau^(t)
    U^(t+1) = eta(s^(t), tau^(t))
    R^(t+1) = Y - A U^(t+1) + mu_eff M gamma^(t+1) / phi^(t) . R^(t)
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .scalar_channel import (ChannelModel, _as_model, denoise, log_scaled_psi, optimal_threshold)
from .state_evolution import BaseMatrix, SeResult, coupled_pupe_prediction, se_run

log = logging.getLogger(__name__)

MAX_K = 12
MAX_CODEBOOK_BYTES = 2 * 1024 ** 3
DEFAULT_T_TOL = 1e-8

ROLE_CODEBOOK, ROLE_SIGNAL, ROLE_FADES, ROLE_NOISE = range(4)


@dataclass(frozen=True)
class SimConfig:
    ch: ChannelModel
    n: int
    K: int
    base: BaseMatrix
    E: float
    T: int | None = None
    trials: int = 1
    master_seed: int = 0

    def __post_init__(self):
        ch = _as_model(self.ch)
        object.__setattr__(self, "ch", ch)
        if ch.k > MAX_K:
            raise ValueError(f"simulation needs k <= {MAX_K}, got k={ch.k}")
        if self.n < 1 or self.K < 1:
            raise ValueError("n and K must be positive")
        if self.n % self.base.R:
            raise ValueError(f"n={self.n} is not divisible by R={self.base.R}")
        if self.p % self.base.C:
            raise ValueError(f"p=K*M={self.p} is not divisible by C={self.base.C}")
        if self.E < 0:
            raise ValueError("E must be non-negative")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.T is not None and self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.n * self.p * (16 if ch.is_complex else 8) > MAX_CODEBOOK_BYTES:
            raise ValueError(f"codebook of {self.n}x{self.p} entries exceeds the memory cap")

    @property
    def M(self) -> int:
        return 2 ** self.ch.k

    @property
    def p(self) -> int:
        return self.K * self.M

    @property
    def mu(self) -> float:
        return self.K / self.n


@dataclass
class SimInstance:
    A: np.ndarray
    U: np.ndarray
    S: np.ndarray
    Y: np.ndarray
    row_block: np.ndarray
    col_block: np.ndarray


def _rng(cfg: SimConfig, trial: int, role: int) -> np.random.Generator:
    seq = np.random.SeedSequence(cfg.master_seed, spawn_key=(int(trial), role))
    return np.random.Generator(np.random.Philox(seq))


def _normal(rng, shape, complex_: bool):
    if not complex_:
        return rng.standard_normal(shape)
    out = rng.standard_normal(shape + (2,)).view(np.complex128)[..., 0]
    out *= math.sqrt(0.5)
    return out


def sample_instance(cfg: SimConfig, trial: int) -> SimInstance:
    """Deterministic in (master_seed, trial); each role has its own stream."""
    cx = cfg.ch.is_complex
    R, C = cfg.base.R, cfg.base.C
    nr, pc = cfg.n // R, cfg.p // C

    A = _normal(_rng(cfg, trial, ROLE_CODEBOOK), (cfg.n, cfg.p), cx)
    scale = np.sqrt(cfg.E * R / cfg.n * cfg.base.B)
    A.reshape(R, nr, C, pc)[...] *= scale[:, None, :, None]

    msg = _rng(cfg, trial, ROLE_SIGNAL).integers(0, cfg.M, size=cfg.K)
    idx = np.arange(cfg.K) * cfg.M + msg
    S = np.zeros(cfg.p, dtype=bool)
    S[idx] = True
    U = np.zeros(cfg.p, dtype=np.complex128 if cx else float)
    U[idx] = _normal(_rng(cfg, trial, ROLE_FADES), (cfg.K,), True) if cx else 1.0

    Y = A @ U + _normal(_rng(cfg, trial, ROLE_NOISE), (cfg.n,), cx)
    return SimInstance(A, U, S, Y, np.repeat(np.arange(R), nr), np.repeat(np.arange(C), pc))


@dataclass
class AmpResult:
    u_hat: np.ndarray
    tau: np.ndarray          # per-block noise level of u_hat, tau^(T)
    T: int
    resid_var: np.ndarray    # (T+1, C) empirical per-block variance of s^(t) - U


def _block_var(err: np.ndarray, col_block: np.ndarray, C: int) -> np.ndarray:
    sq = np.abs(err) ** 2
    return np.bincount(col_block, weights=sq, minlength=C) / np.bincount(col_block, minlength=C)


def amp_run(inst: SimInstance, se: SeResult, T: int, E: float) -> AmpResult:
    """T iterations of coupled AMP driven by the SE trajectory ``se``."""
    if se.init != "matched":
        raise ValueError("AMP needs an SE trajectory started from M psi = 1 (init='matched')")
    R, C = se.base.R, se.base.C
    n, p = inst.A.shape
    if inst.Y.shape != (n,) or inst.U.shape != (p,) or n % R or p % C:
        raise ValueError("instance dimensions do not match the base matrix")
    if T < 0 or T > se.tau.shape[0] - 1:
        raise ValueError(f"T={T} outside the SE trajectory (0..{se.tau.shape[0] - 1})")
    if not E > 0:
        raise ValueError("AMP needs E > 0")
    ch = se.ch
    rb, cb = inst.row_block, inst.col_block
    b_coef = se.mu_eff

    def observe(U, Rt, t):
        back = inst.A.conj().T @ (Rt / se.phi[t][rb])
        return U + se.tau[t][cb] * back / E

    U = np.zeros_like(inst.U)
    Rt = inst.Y.copy()
    s = observe(U, Rt, 0)
    resid = [_block_var(s - inst.U, cb, C)]
    for t in range(T):
        U = denoise(ch, s, se.tau[t][cb])
        onsager = b_coef * se.gamma[t + 1] / se.phi[t]
        Rt = inst.Y - inst.A @ U + onsager[rb] * Rt
        s = observe(U, Rt, t + 1)
        resid.append(_block_var(s - inst.U, cb, C))
    return AmpResult(s, se.tau[T].copy(), T, np.array(resid))


def decode_support(ch, u_hat: np.ndarray, thresholds, col_block: np.ndarray) -> np.ndarray:
    """1[u > theta_c] (AWGN) or 1[|u|^2 > theta_c] (QSF) entry by entry."""
    ch = _as_model(ch)
    th = np.asarray(thresholds, dtype=float)[col_block]
    stat = np.abs(u_hat) ** 2 if ch.is_complex else np.real(u_hat)
    return stat > th


def section_error_rate(S: np.ndarray, S_hat: np.ndarray, M: int):
    """(fraction of sections with any mismatch, M * Hamming distance)."""
    S, S_hat = np.asarray(S, bool), np.asarray(S_hat, bool)
    if S.shape != S_hat.shape or S.size % M:
        raise ValueError("supports must have equal length divisible by M")
    diff = S != S_hat
    K = S.size // M
    return float(np.mean(diff.reshape(K, M).any(axis=1))), float(diff.sum()) / K


def log_predicted_ser(ch, taus, thresholds) -> float:
    logs = [log_scaled_psi(ch, t, th) for t, th in zip(taus, thresholds)]
    return float(np.logaddexp.reduce(logs) - math.log(len(logs)))


def predicted_ser(ch, taus, thresholds) -> float:
    """(1/C) sum_c M psi(tau_c, theta_c)."""
    return math.exp(log_predicted_ser(ch, taus, thresholds))


@dataclass
class TrialResult:
    trial: int
    ser: float
    m_dh: float
    energy_mean: float
    resid_var: np.ndarray
    ok: bool = True
    message: str = ""


@dataclass
class MonteCarloReport:
    cfg: SimConfig
    T: int
    tau: np.ndarray
    thresholds: np.ndarray
    predicted_ser: float
    predicted_bound: float
    trials: list[TrialResult] = field(default_factory=list)

    @property
    def good(self) -> list[TrialResult]:
        return [t for t in self.trials if t.ok]

    @property
    def failed(self) -> int:
        return sum(not t.ok for t in self.trials)

    def _mean_se(self, values):
        v = np.asarray(values, dtype=float)
        if v.size == 0:
            return math.nan, math.nan
        se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
        return float(math.fsum(v) / v.size), se

    @property
    def ser(self):
        return self._mean_se([t.ser for t in self.good])

    @property
    def m_dh(self):
        return self._mean_se([t.m_dh for t in self.good])

    @property
    def energy(self):
        return self._mean_se([t.energy_mean for t in self.good])

    def resid_var(self, t: int | None = None):
        """Per-block mean and standard error over trials of the residual
        variance at iteration ``t`` (default T)."""
        t = self.T if t is None else t
        v = np.array([tr.resid_var[t] for tr in self.good])
        n = v.shape[0]
        se = v.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(v.shape[1], math.nan)
        return v.mean(axis=0), se

    def csv(self, meta: dict | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "ser", "m_dh", "energy_mean"])
        for t in self.trials:
            w.writerow([t.trial, repr(t.ser), repr(t.m_dh), repr(t.energy_mean)] if t.ok
                       else [t.trial, "nan", "nan", "nan"])
        ser, ser_se = self.ser
        mdh, _ = self.m_dh
        en, _ = self.energy
        w.writerow(["mean", repr(ser), repr(mdh), repr(en)])
        summary = {
            "ser_stderr": repr(ser_se),
            "predicted_ser": repr(self.predicted_ser),
            "predicted_bound": repr(self.predicted_bound),
            "T": self.T,
            "failed_trials": self.failed,
            "tau_se": " ".join(repr(float(x)) for x in self.tau),
            "resid_var": " ".join(repr(float(x)) for x in self.resid_var()[0]),
        }
        for key, val in {**summary, **(meta or {})}.items():
            buf.write(f"# {key}={val}\n")
        return buf.getvalue()


def run_trial(cfg: SimConfig, se: SeResult, T: int, thresholds, trial: int) -> TrialResult:
    inst = sample_instance(cfg, trial)
    amp = amp_run(inst, se, T, cfg.E)
    S_hat = decode_support(cfg.ch, amp.u_hat, thresholds, inst.col_block)
    ser, m_dh = section_error_rate(inst.S, S_hat, cfg.M)
    cols = inst.A[:, inst.S]
    energy = float(np.mean(np.sum(np.abs(cols) ** 2, axis=0)))
    return TrialResult(trial, ser, m_dh, energy, amp.resid_var)


def simulation_se(cfg: SimConfig) -> tuple[SeResult, int]:
    """Matched-start SE trajectory and the iteration count T to run."""
    se = se_run(cfg.ch, cfg.base, cfg.mu, cfg.E, tol=DEFAULT_T_TOL, init="matched",
                t_min=cfg.T or 0, t_max=max(10000, cfg.T or 0))
    T = cfg.T if cfg.T is not None else se.first_converged(DEFAULT_T_TOL)
    return se, T


def monte_carlo(cfg: SimConfig, threshold_scale: float = 1.0, threads: int | None = None,
                thresholds=None) -> MonteCarloReport:
    """Run ``cfg.trials`` independent trials and compare with SE.

    Thresholds default to theta_c* at tau^(T); ``threshold_scale`` multiplies
    them (for sensitivity checks).  Trials run on up to ``threads`` workers;
    results are ordered by trial index so output does not depend on timing.
    """
    se, T = simulation_se(cfg)
    tau = se.tau[T]
    if thresholds is None:
        thresholds = np.asarray(optimal_threshold(cfg.ch, tau), dtype=float) * threshold_scale
    thresholds = np.broadcast_to(np.asarray(thresholds, dtype=float), tau.shape).copy()
    report = MonteCarloReport(cfg, T, tau.copy(), thresholds,
                              predicted_ser(cfg.ch, tau, thresholds),
                              coupled_pupe_prediction(cfg.ch, tau)[0])

    def one(trial):
        try:
            return run_trial(cfg, se, T, thresholds, trial)
        except (ValueError, ArithmeticError, MemoryError) as exc:
            log.error("trial %d failed: %s", trial, exc)
            return TrialResult(trial, math.nan, math.nan, math.nan,
                               np.full((T + 1, cfg.base.C), math.nan), ok=False, message=str(exc))

    workers = max(1, min(threads or 1, cfg.trials))
    if workers == 1:
        report.trials = [one(t) for t in range(cfg.trials)]
    else:
        with ThreadPoolExecutor(workers) as pool:
            report.trials = list(pool.map(one, range(cfg.trials)))
    return report


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MACBOUND_THREADS", "1")))
    except ValueError:
        return 1


def calibrate_energy(ch, n: int, K: int, base: BaseMatrix, target: float,
                     lo: float = 1e-2, hi: float = 1e4) -> float:
    """E at which the SE prediction (1/C) sum_c M psi(tau_c^(T), theta_c*) equals
    ``target``, by a root search in ln E."""
    def gap(log_e):
        cfg = SimConfig(ch, n, K, base, math.exp(log_e))
        se, T = simulation_se(cfg)
        tau = se.tau[T]
        return log_predicted_ser(cfg.ch, tau, optimal_threshold(cfg.ch, tau)) - math.log(target)

    return math.exp(brentq(gap, math.log(lo), math.log(hi), xtol=1e-6))
