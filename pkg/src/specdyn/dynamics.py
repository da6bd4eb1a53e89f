"""Deterministic risk dynamics driven by kernel tables.

Everything here iterates or bounds the row-risk recursion

    r_i(t+1) = r_i(t) - 2 eta d_i r_i(t) / sqrt(F(t)) + eta^2 v_i,   F = 1/2 sum mu_i r_i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from numba import njit
from scipy import integrate, optimize, special

from .kernels import DomainError, KernelTable
from .optim import ConstantRate, OptimizerSpec, RiskProportionalRate, run_trajectory
from .model import ProblemSpec

Phase = Literal["A", "B", "C", "isotropic"]


class CalibrationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# the recursion


@njit(cache=True)
def _recursion(mu, drift, vol, r, mode, eta0, etas, steps, stop, record, out):
    n = r.size
    f = 0.0
    for i in range(n):
        f += mu[i] * r[i]
    f *= 0.5
    if record:
        out[0] = f
    clamped = False
    if stop > 0.0 and f <= stop:
        return 0, clamped, 0, f
    for t in range(steps):
        if mode == 0:
            eta = eta0
        elif mode == 1:
            eta = etas[t] if t < etas.size else etas[etas.size - 1]
        else:
            eta = eta0 * math.sqrt(f)
        if f <= 0.0:
            return -1, clamped, t, f
        prev = f
        inv = 1.0 / math.sqrt(f)
        eta2 = eta * eta
        acc = 0.0
        for i in range(n):
            ri = r[i] - 2.0 * eta * drift[i] * r[i] * inv + eta2 * vol[i]
            if ri < 0.0:
                ri = 0.0
                clamped = True
            r[i] = ri
            acc += mu[i] * ri
        f = 0.5 * acc
        if record:
            out[t + 1] = f
        if stop > 0.0 and f <= stop:
            return t + 1, clamped, t + 1, prev
    return -1, clamped, steps, f


@dataclass
class TheoryTrajectory:
    risk: np.ndarray
    row_risks: np.ndarray
    steps_run: int
    clamped: bool
    hit_step: int | None = None
    schedule: str = ""
    risk_before_hit: float | None = None
    level: float | None = None
    final_risk: float | None = None

    @property
    def crossing_time(self) -> float | None:
        """Hit step interpolated geometrically between the last two risks."""
        if self.hit_step is None or self.risk_before_hit is None or self.level is None:
            return None
        if self.hit_step == 0:
            return 0.0
        f_prev, f_hit = self.risk_before_hit, float(self.final_risk)
        if f_hit <= 0.0:
            return float(self.hit_step)
        return self.hit_step - 1 + math.log(f_prev / self.level) / math.log(f_prev / f_hit)


def _schedule_args(schedule):
    if isinstance(schedule, RiskProportionalRate):
        return 2, float(schedule.coef), np.zeros(1), f"risk_proportional({schedule.coef!r})"
    if isinstance(schedule, ConstantRate):
        schedule = schedule.eta
    if np.ndim(schedule) == 0:
        eta = float(schedule)
        if eta < 0:
            raise DomainError("learning rate must be nonnegative")
        return 0, eta, np.zeros(1), f"constant({eta!r})"
    etas = np.ascontiguousarray(schedule, dtype=float)
    if etas.size == 0 or np.any(etas < 0):
        raise DomainError("learning-rate table must be nonempty and nonnegative")
    return 1, 0.0, etas, "table"


def evolve(
    table: KernelTable,
    initial_row_risks,
    eta_schedule,
    steps: int,
    *,
    stop_below: float | None = None,
    record: bool = True,
) -> TheoryTrajectory:
    """Iterate the recursion exactly for ``steps`` steps (or until F <= stop_below).

    ``eta_schedule`` is a constant, a per-step table (the last entry repeats),
    or a ``RiskProportionalRate`` giving eta_t = coef * sqrt(F_t).  Row risks
    that a step would drive negative are clamped to zero and ``clamped`` is set.
    """
    r = np.array(initial_row_risks, dtype=float)
    mu = np.ascontiguousarray(table.mu, dtype=float)
    if r.shape != mu.shape:
        raise ValueError(f"initial row risks have shape {r.shape}, expected {mu.shape}")
    if 0.5 * float(mu @ r) <= 0:
        raise DomainError("initial risk must be positive (the drift divides by sqrt(F))")
    mode, eta0, etas, label = _schedule_args(eta_schedule)
    out = np.full(steps + 1 if record else 1, np.nan)
    stop = -1.0 if stop_below is None else float(stop_below)
    hit, clamped, done, before = _recursion(
        mu,
        np.ascontiguousarray(table.drift, dtype=float),
        np.ascontiguousarray(table.volatility, dtype=float),
        r,
        mode,
        eta0,
        etas,
        int(steps),
        stop,
        record,
        out,
    )
    risk = out[: done + 1] if record else np.array([0.5 * float(mu @ r)])
    return TheoryTrajectory(
        risk=risk,
        row_risks=r,
        steps_run=int(done),
        clamped=bool(clamped),
        hit_step=None if hit < 0 else int(hit),
        schedule=label,
        risk_before_hit=None if hit < 0 else float(before),
        level=None if stop_below is None else float(stop_below),
        final_risk=0.5 * float(mu @ r),
    )


def evolve_scalar(drift: float, total_volatility: float, f0: float, eta_schedule, steps: int) -> np.ndarray:
    """Isotropic scalar form F <- F - 2 eta d sqrt(F) + eta^2 v / 2."""
    if f0 <= 0:
        raise DomainError("initial risk must be positive")
    out = np.empty(steps + 1)
    out[0] = f = float(f0)
    for t in range(steps):
        if isinstance(eta_schedule, RiskProportionalRate):
            eta = eta_schedule.coef * math.sqrt(f)
        elif np.ndim(eta_schedule) == 0:
            eta = float(eta_schedule)
        else:
            eta = float(eta_schedule[min(t, len(eta_schedule) - 1)])
        f = max(f - 2.0 * eta * drift * math.sqrt(f) + 0.5 * eta * eta * total_volatility, 0.0)
        out[t + 1] = f
    return out


def greedy_rate(table: KernelTable) -> RiskProportionalRate:
    """eta_t = (2 d / v_total) sqrt(F_t)... for isotropic tables; the per-step optimum."""
    d = float(table.drift[0])
    v_total = float(np.sum(table.volatility))
    if not (np.allclose(table.drift, d) and np.allclose(table.mu, table.mu[0])):
        raise DomainError("greedy scalar rate is defined for isotropic tables")
    return RiskProportionalRate(2.0 * d / v_total)


def initial_row_risks(n: int, beta: float) -> np.ndarray:
    """r_i(0) = i^(-beta), the projected row risks of the sampled initial error."""
    return np.arange(1, n + 1, dtype=float) ** (-beta)


# ---------------------------------------------------------------------------
# noise constant and time to epsilon


def limit_loss(table: KernelTable, eta: float) -> float:
    return (eta * table.noise_constant / 2.0) ** 2


def plateau_radius(table: KernelTable) -> float:
    """Spectral radius of the constant-rate map's Jacobian at its fixed point.

    At the fixed point sqrt(F) = eta S / 2 the Jacobian is
    diag(1 - 4 d_i / S) + v mu^T / S^2, independent of eta.  The plateau
    attracts only when this radius is below 1.
    """
    s = table.noise_constant
    jac = np.diag(1.0 - 4.0 * table.drift / s) + np.outer(table.volatility, table.mu) / (s * s)
    return float(np.max(np.abs(np.linalg.eigvals(jac))))


def eta_star(table: KernelTable, epsilon: float) -> float:
    """Constant rate whose limit loss is epsilon."""
    return 2.0 * math.sqrt(epsilon) / table.noise_constant


@dataclass(frozen=True)
class TteRecord:
    algorithm: str
    epsilon: float
    t_multiplier: float
    eta_star: float
    t_hit: int | None
    censored: bool
    t_cross: float | None
    predicted_exponent: float
    phase: Phase
    lower_bound: float | None = None
    upper_bound: float | None = None


def classify_phase(alpha: float, beta: float) -> Phase:
    """A: beta < 1, B: 1 <= beta <= alpha + 1, C: beta > alpha + 1."""
    if alpha == 0:
        return "isotropic"
    if beta < 1:
        return "A"
    if beta <= alpha + 1:
        return "B"
    return "C"


def time_to_eps(
    table: KernelTable,
    initial_row_risks,
    epsilon: float,
    T: float = 4.0,
    *,
    beta: float = 0.0,
    max_steps: int = 50_000_000,
) -> TteRecord:
    """First step with F <= T * epsilon at the matched constant rate eta*(epsilon)."""
    if T <= 1:
        raise DomainError("T must exceed 1")
    r0 = np.asarray(initial_row_risks, dtype=float)
    f0 = 0.5 * float(table.mu @ r0)
    if not epsilon * T < f0:
        raise DomainError(f"need T * epsilon < F(0) = {f0:.4g}")
    eta = eta_star(table, epsilon)
    traj = evolve(table, r0, eta, max_steps, stop_below=T * epsilon, record=False)
    alpha = table.alpha
    asym = tte_asymptotic(table.algorithm, alpha, beta, table.n, table.batch, epsilon)
    return TteRecord(
        algorithm=table.algorithm,
        epsilon=epsilon,
        t_multiplier=T,
        eta_star=eta,
        t_hit=traj.hit_step,
        censored=traj.hit_step is None,
        t_cross=traj.crossing_time,
        predicted_exponent=asym.exponent,
        phase=asym.phase,
    )


def fit_exponent(
    epsilons: Sequence[float], times: Sequence[float], use_smallest: int = 3, *, log_corrected: bool = False
) -> float:
    """Least-squares slope of log t against log(1/eps) over the smallest epsilons.

    With ``log_corrected`` the fit is of t / log(1/eps), for boundary cases
    where t ~ eps^(-p) log(1/eps).
    """
    eps = np.asarray(epsilons, dtype=float)
    t = np.asarray(times, dtype=float)
    if log_corrected:
        t = t / np.log(1.0 / eps)
    order = np.argsort(eps)[:use_smallest]
    if order.size < 2:
        raise ValueError("need at least two points to fit an exponent")
    slope, _ = np.polyfit(np.log(1.0 / eps[order]), np.log(t[order]), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# asymptotic predictions


@dataclass(frozen=True)
class TteAsymptotic:
    algorithm: str
    phase: Phase
    branch: str
    exponent: float
    prefactor: float
    log_corrected: bool

    def time(self, epsilon: float) -> float:
        t = self.prefactor * epsilon ** (-self.exponent)
        return t * math.log(1.0 / epsilon) if self.log_corrected else t


def _shell_saturation_constant(r: float, q_delta: float, t0: float, f0: float) -> float:
    """(2 (r - 1))^-1 (u*/T0)^(1-r) T0 with u* = T0 (C_F / F0)^(1/(2r))."""
    c_f = special.gamma(2.0 * r) / (2.0 * q_delta)
    u_star = t0 * (c_f / f0) ** (1.0 / (2.0 * r))
    return (u_star / t0) ** (1.0 - r) * t0 / (2.0 * (r - 1.0))


def tte_asymptotic(algorithm: str, alpha: float, beta: float, n: int, batch: int, epsilon: float) -> TteAsymptotic:
    """Leading-order t_{T eps} for power-law data with matched constant rate."""
    gamma = n / batch
    if alpha == 0:
        return TteAsymptotic(algorithm, "isotropic", "isotropic", 0.5, float("nan"), False)
    if alpha + beta <= 1:
        raise DomainError("need alpha + beta > 1")
    phase = classify_phase(alpha, beta)
    f0 = 0.5 * float(special.zeta(alpha + beta))
    if algorithm == "sign_svd":
        r = (alpha + beta - 1.0) / alpha
        if alpha < 2:
            size = n ** (1.0 - alpha / 2.0) / (2.0 - alpha)
        elif alpha == 2:
            size = math.log(n) / 2.0
        else:
            size = float(special.zeta(alpha / 2.0)) / 2.0
        if beta < 1:
            return TteAsymptotic(algorithm, phase, "forcing", alpha / (2 * (alpha + beta - 1)), gamma * size / (1 - r), False)
        if beta == 1:
            return TteAsymptotic(algorithm, phase, "boundary", 0.5, gamma * size, True)
        c_beta = _shell_saturation_constant(r, alpha / 2.0, math.sqrt(gamma), f0)
        return TteAsymptotic(algorithm, phase, "saturated", 0.5, math.sqrt(gamma) * size * c_beta, False)
    if algorithm == "sign_sgd":
        mu = np.arange(1, n + 1, dtype=float) ** (-alpha)
        mbar = float(mu.mean())
        c = math.sqrt(batch / (math.pi * mbar))
        noise = n * n * math.sqrt(math.pi * mbar / batch) / 2.0
        r = (alpha + beta - 1.0) / (2.0 * alpha)
        if beta < alpha + 1:
            return TteAsymptotic(algorithm, phase, "forcing", alpha / (alpha + beta - 1), noise / (c * (1 - r)), False)
        if beta == alpha + 1:
            return TteAsymptotic(algorithm, phase, "boundary", 0.5, noise / c, True)
        c_beta = _shell_saturation_constant(r, alpha, 1.0 / c, f0)
        return TteAsymptotic(algorithm, phase, "saturated", 0.5, noise * c_beta, False)
    raise ValueError(f"unknown algorithm {algorithm!r}")


# ---------------------------------------------------------------------------
# Volterra sandwich


@dataclass(frozen=True)
class VolterraBounds:
    lower: float
    upper: float
    c_ratio: float
    mu_coef: float
    threshold_constant: float
    tau_lower: float
    tau_c0: float


def _forcing(table: KernelTable, r0: np.ndarray):
    w = 0.5 * table.mu * r0
    d2 = 2.0 * table.drift

    def forcing(tau):
        return float(w @ np.exp(-d2 * tau))

    return forcing


def _first_below(fn, level: float) -> float:
    """Smallest tau with fn(tau) <= level for a decreasing fn."""
    if fn(0.0) <= level:
        return 0.0
    hi = 1.0
    while fn(hi) > level:
        hi *= 2.0
        if hi > 1e300:
            raise DomainError("forcing never reaches the requested level")
    return optimize.brentq(lambda t: fn(t) - level, 0.0, hi, xtol=1e-12 * hi, rtol=1e-14, maxiter=500)


def _quad(fn, a: float, b: float) -> float:
    # the integrands vary on the scales 1/(2 d_i); break the range geometrically
    if b <= a:
        return 0.0
    pts = [a] + list(np.geomspace(max(b * 1e-8, 1e-12), b, 40)) if a == 0 else list(np.linspace(a, b, 41))
    total = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        val, _ = integrate.quad(fn, lo, hi, limit=200, epsabs=0.0, epsrel=1e-10)
        total += val
    return total


def volterra_bounds(
    table: KernelTable,
    initial_row_risks,
    epsilon: float,
    c0: float,
    T: float | None = None,
) -> VolterraBounds:
    """Lower and upper bounds on t_{T eps} at eta = eta*(epsilon).

    ``T`` defaults to the threshold constant K(c0) = c0 + mu(c0) sqrt(c0),
    the smallest multiplier for which the upper bound applies.
    """
    r0 = np.asarray(initial_row_risks, dtype=float)
    forcing = _forcing(table, r0)
    f_start = forcing(0.0)
    if c0 <= 1:
        raise DomainError("c0 must exceed 1")
    if not c0 * epsilon < f_start:
        raise DomainError(f"need c0 * epsilon < F(0) = {f_start:.4g}")
    eta = eta_star(table, epsilon)
    kw = 0.5 * eta * table.mu * table.volatility
    d2 = 2.0 * table.drift

    tau_c0 = _first_below(forcing, c0 * epsilon)
    # I(tau) = int_0^tau K(tau - u) sqrt(F(u)) / eta du with K(s) = eta^2/2 sum mu v e^{-2 d s}
    inner = _quad(lambda u: float(kw @ np.exp(-d2 * (tau_c0 - u))) * math.sqrt(forcing(u)), 0.0, tau_c0)
    c_ratio = inner / math.sqrt(epsilon * forcing(tau_c0))
    mu_coef = c_ratio / (1.0 - 1.0 / (2.0 * math.sqrt(c0)))
    k_c0 = c0 + mu_coef * math.sqrt(c0)
    if T is None:
        T = k_c0
    tau_low = _first_below(forcing, T * epsilon)
    lower = _quad(lambda u: math.sqrt(forcing(u)), 0.0, tau_low) / eta
    upper = _quad(lambda u: math.sqrt(forcing(u) + mu_coef * math.sqrt(epsilon * forcing(u))), 0.0, tau_c0) / eta
    return VolterraBounds(lower, upper, c_ratio, mu_coef, k_c0, tau_low, tau_c0)


# ---------------------------------------------------------------------------
# N_eff calibration


@dataclass(frozen=True)
class Calibration:
    n_eff: float
    plateau: float
    slope: float
    slope_se: float
    trials: int


def calibrate_neff(
    problem: ProblemSpec,
    optimizer: OptimizerSpec,
    eta_probe: float,
    warmup_steps: int,
    plateau_window: int,
    *,
    trials: int = 4,
    workers: int = 1,
    trend_sigmas: float = 3.0,
) -> Calibration:
    """Back out N_eff = 2 sqrt(R_inf) / eta_probe from a constant-rate plateau.

    The plateau is the risk averaged over the last ``plateau_window`` steps and
    all trials.  A least-squares trend over the window larger than
    ``trend_sigmas`` standard errors means the run has not settled.
    """
    if eta_probe <= 0:
        raise DomainError("eta_probe must be positive")
    traj = run_trajectory(
        problem,
        optimizer,
        warmup_steps + plateau_window,
        trials,
        ConstantRate(eta_probe),
        workers=workers,
    )
    if traj.diverged.any():
        raise CalibrationError("a calibration trial diverged")
    window = traj.risks[:, warmup_steps + 1 :]
    mean_curve = window.mean(axis=0)
    t = np.arange(mean_curve.size, dtype=float)
    slope, intercept = np.polyfit(t, mean_curve, 1)
    resid = mean_curve - (slope * t + intercept)
    # successive risks are correlated; inflate the naive error by the lag-1 factor
    rho = float(np.corrcoef(resid[:-1], resid[1:])[0, 1]) if resid.size > 3 else 0.0
    rho = min(max(rho, 0.0), 0.99)
    inflate = math.sqrt((1 + rho) / (1 - rho))
    se = math.sqrt(resid.var(ddof=2) / np.sum((t - t.mean()) ** 2)) * inflate
    if abs(slope) > trend_sigmas * se:
        raise CalibrationError(
            f"plateau not stationary: slope {slope:.3e} per step exceeds {trend_sigmas} x {se:.3e}"
        )
    plateau = float(window.mean())
    return Calibration(2.0 * math.sqrt(plateau) / eta_probe, plateau, float(slope), se, trials)


def momentum_law(beta_mom: float) -> float:
    """sqrt((1 + beta) / (1 - beta)): predicted N_eff inflation from a momentum buffer."""
    return math.sqrt((1.0 + beta_mom) / (1.0 - beta_mom))
