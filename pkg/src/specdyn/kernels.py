"""Drift and volatility kernels for SignSVD and SignSGD.

Kernels enter the projected-risk recursion

    r_i(t+1) = r_i(t) - 2 eta d_i r_i(t) / sqrt(F(t)) + eta^2 v_i,   F = 1/2 sum_i mu_i r_i,

so a ``KernelTable`` is the whole interface between this module and ``dynamics``.
"""

from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Literal

import numpy as np
from scipy.optimize import brentq

from . import rmt
from .model import stream

KernelAlgorithm = Literal["sign_svd", "sign_sgd"]


class DomainError(ValueError):
    pass


class OutOfModelWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# kernel table


@dataclass(frozen=True)
class KernelTable:
    algorithm: KernelAlgorithm
    mu: np.ndarray
    drift: np.ndarray
    volatility: np.ndarray
    n: int
    batch: int
    alpha: float = 0.0
    lam: float | None = None

    def __post_init__(self):
        for a in (self.mu, self.drift, self.volatility):
            a.setflags(write=False)

    @property
    def gamma(self) -> float:
        return self.n / self.batch

    @property
    def noise_constant(self) -> float:
        return noise_constant(self.mu, self.drift, self.volatility)


def noise_constant(mu, drift, volatility) -> float:
    """S = sum_i mu_i v_i / (2 d_i); the constant-rate plateau is (eta S / 2)^2."""
    drift = np.asarray(drift, dtype=float)
    if np.any(drift <= 0):
        raise DomainError("noise constant needs strictly positive drift")
    return float(np.sum(np.asarray(mu) * np.asarray(volatility) / (2.0 * drift)))


def _mu_of(spectrum) -> np.ndarray:
    return np.asarray(getattr(spectrum, "values", spectrum), dtype=float)


def _alpha_of(spectrum, mu: np.ndarray) -> float:
    alpha = getattr(spectrum, "alpha", None)
    if alpha is not None:
        return float(alpha)
    if mu.size < 2 or mu[1] == mu[0]:
        return 0.0
    return float(-np.log(mu[1] / mu[0]) / np.log(2.0))


# ---------------------------------------------------------------------------
# lambda and the resolution threshold


def lambda_asymptotic(alpha: float, n: int, batch: int) -> float:
    """Leading-order lambda for N, N/B -> infinity."""
    if alpha > 1:
        return (alpha * math.sin(math.pi / alpha) / math.pi * batch) ** alpha
    if alpha == 1:
        gamma = n / batch
        return batch / math.log(gamma)
    return (1.0 - alpha) * n**alpha / (n / batch)


def solve_lambda(spectrum, batch: int) -> float:
    """Unique root of sum_i lam mu_i / (1 + lam mu_i) = B, for B < N."""
    mu = _mu_of(spectrum)
    n = mu.size
    if batch >= n:
        raise DomainError(f"lambda is defined only for B < N (got B={batch}, N={n})")
    if batch <= 0:
        raise DomainError("batch must be positive")

    def excess(log_lam: float) -> float:
        lam = math.exp(log_lam)
        return float(np.sum(lam * mu / (1.0 + lam * mu))) - batch

    alpha = _alpha_of(spectrum, mu)
    try:
        hint = lambda_asymptotic(alpha, n, batch) / mu[0] if alpha > 0 else batch / (n - batch) / mu.mean()
    except (ValueError, ZeroDivisionError):
        hint = 1.0
    if not np.isfinite(hint) or hint <= 0:
        hint = 1.0
    lo = hi = math.log(hint)
    while excess(lo) > 0:
        lo -= 2.0
    while excess(hi) < 0:
        hi += 2.0
    root = brentq(excess, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    lam = math.exp(root)
    if abs(excess(root)) > 1e-10 * batch:
        raise RuntimeError(f"lambda root residual {excess(root):.3e} above tolerance")
    return lam


@dataclass(frozen=True)
class ResolutionThreshold:
    index: float
    asymptotic: float


def resolution_threshold(alpha: float, n: int, batch: int) -> ResolutionThreshold:
    """i_# = lambda^(1/alpha): modes above it are resolved by the gradient's column space."""
    if n <= batch:
        return ResolutionThreshold(float(n), float(n))
    mu = np.arange(1, n + 1, dtype=float) ** (-alpha)
    lam = solve_lambda(mu, batch)
    if alpha > 1:
        asym = float(batch)
    elif alpha == 1:
        asym = batch / math.log(n / batch)
    else:
        asym = batch ** (1.0 / alpha) / n ** (1.0 / alpha - 1.0)
    return ResolutionThreshold(lam ** (1.0 / alpha), asym)


# ---------------------------------------------------------------------------
# N_B = E sqrt(sum_a x_a^2 y_a^2)

NB_SEED = 20_240_601
NB_SAMPLES = 1_000_000
# total draws per call; large B uses fewer samples since the estimator
# concentrates like 1/sqrt(B)
NB_DRAW_BUDGET = 50_000_000

_nb_lock = threading.Lock()
_nb_cache: dict[tuple[int, int, int], tuple[float, float]] = {}


def n_b_stats(batch: int, samples: int = NB_SAMPLES, seed: int = NB_SEED) -> tuple[float, float]:
    """Monte Carlo estimate of N_B and its standard error."""
    if batch < 1:
        raise DomainError("batch must be >= 1")
    samples = int(min(samples, max(10_000, NB_DRAW_BUDGET // batch)))
    key = (int(batch), samples, int(seed))
    with _nb_lock:
        if key in _nb_cache:
            return _nb_cache[key]
    rng = stream(seed, "n_b", batch)
    chunk = max(1, 4_000_000 // batch)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        x = rng.standard_normal((m, batch))
        y = rng.standard_normal((m, batch))
        r = np.sqrt(np.einsum("ij,ij->i", x * x, y * y))
        total += r.sum()
        total_sq += (r * r).sum()
        done += m
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0)
    out = (float(mean), float(math.sqrt(var / samples)))
    with _nb_lock:
        _nb_cache[key] = out
    return out


def n_b(batch: int) -> float:
    return n_b_stats(batch)[0]


def n_b_curve(b_max: int, samples: int = 200_000, seed: int = NB_SEED) -> tuple[np.ndarray, np.ndarray]:
    """N_B for B = 1..b_max from one set of draws (common random numbers across B)."""
    rng = stream(seed, "n_b_curve", b_max)
    x = rng.standard_normal((samples, b_max))
    y = rng.standard_normal((samples, b_max))
    r = np.sqrt(np.cumsum(x * x * y * y, axis=1))
    return r.mean(axis=0), r.std(axis=0) / math.sqrt(samples)


# ---------------------------------------------------------------------------
# isotropic drift constant C


def iso_drift_closed_form(gamma: float) -> float:
    """Elementary approximation [pi gamma (9 pi / 32 + gamma)]^(-1/2)."""
    return (math.pi * gamma * (9.0 * math.pi / 32.0 + gamma)) ** -0.5


def iso_drift_small_gamma(gamma: float) -> float:
    return 8.0 / (3.0 * math.pi * math.sqrt(2.0 * gamma))


def iso_drift_large_gamma(gamma: float) -> float:
    return 1.0 / (gamma * math.sqrt(math.pi))


@dataclass(frozen=True)
class DriftConstant:
    value: float
    closed_form: float | None
    error_estimate: float


def _iso_integral(gamma_out: float, gamma_in: float, eta_rel: float, u: np.ndarray) -> np.ndarray:
    scale = gamma_out * gamma_in / min(gamma_out, gamma_in, 1.0)
    z = scale * u * u + 1j * eta_rel * scale
    sol = rmt.solve_fixed_point_path([1.0], None, gamma_out, gamma_in, z, method="homotopy")
    return 2.0 * math.sqrt(scale) * (sol.s1_tilde * sol.sigma).imag


@lru_cache(maxsize=256)
def iso_drift_C(gamma_in: float, gamma_out: float | None = None, *, points: int = 24_000) -> DriftConstant:
    """Isotropic SignSVD drift constant by quadrature of the fixed-point solution.

    C = (1 / (pi sqrt(2) gamma_in gamma_out)) int_0^inf x^(-1/2) Im f(xi(x + i0)) dx.
    The substitution x = scale * u^2 removes the endpoint singularity; the
    i0 limit uses two small offsets and linear extrapolation, and the error
    estimate adds that correction to the grid-halving difference.
    """
    if gamma_out is None:
        gamma_out = gamma_in
    if gamma_in <= 0 or gamma_out <= 0:
        raise DomainError("aspect ratios must be positive")
    u = np.linspace(0.0, 12.0, points + 1)[1:]
    pref = 1.0 / (math.pi * math.sqrt(2.0) * gamma_in * gamma_out)
    eta = 1e-8
    vals_fine = _iso_integral(gamma_out, gamma_in, eta / 2, u)
    vals_coarse = _iso_integral(gamma_out, gamma_in, eta, u)
    # integrand vanishes at u = 0, so prepend it for the trapezoid
    grid = np.concatenate([[0.0], u])

    def trap(vals, stride=1):
        return float(np.trapezoid(np.concatenate([[0.0], vals])[::stride], grid[::stride]))

    fine = trap(vals_fine)
    extrap = 2.0 * fine - trap(vals_coarse)
    grid_err = abs(fine - trap(vals_fine, 2))
    err = pref * (abs(extrap - fine) + grid_err)
    value = pref * extrap
    if not np.isfinite(value) or err > 1e-3 * abs(value):
        raise RuntimeError(f"C quadrature did not converge (estimate {value:.6g}, achieved tolerance {err:.2e})")
    closed = iso_drift_closed_form(gamma_in) if gamma_in == gamma_out else None
    return DriftConstant(value=value, closed_form=closed, error_estimate=err)


# ---------------------------------------------------------------------------
# kernel tables


def iso_kernels(algorithm: KernelAlgorithm, n: int, batch: int) -> KernelTable:
    """Isotropic tables, spread evenly over the N row modes."""
    mu = np.ones(n)
    if algorithm == "sign_svd":
        drift = np.full(n, iso_drift_C(n / batch).value)
        vol = np.full(n, min(batch, n) / n)
    elif algorithm == "sign_sgd":
        drift = np.full(n, n_b(batch) / math.sqrt(math.pi))
        vol = np.full(n, float(n))
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    return KernelTable(algorithm, mu, drift, vol, n, batch, 0.0)


def svd_kernels(
    spectrum,
    batch: int,
    *,
    drift_method: Literal["aggregate", "spectral"] = "aggregate",
) -> KernelTable:
    """SignSVD kernels for a power-law or flat Sigma_out with Sigma_in = I.

    With B >= N every mode is resolved and d_i = sqrt(mu_i / gamma), v_i = 1.
    With B < N the volatility is the projection mass lam mu_i / (1 + lam mu_i)
    and the drift interpolates between mu_i sqrt(2 lam / (pi gamma)) for
    unresolved modes and sqrt(mu_i / gamma) for resolved ones.
    """
    mu = _mu_of(spectrum).copy()
    n = mu.size
    gamma = n / batch
    alpha = _alpha_of(spectrum, mu)
    lam = None
    if gamma <= 1:
        drift = np.sqrt(mu / gamma)
        vol = np.ones(n)
    else:
        lam = solve_lambda(mu, batch)
        drift = mu / np.sqrt(gamma * (mu + math.pi / (2.0 * lam)))
        vol = lam * mu / (1.0 + lam * mu)
    if drift_method == "spectral":
        drift = drift_kernel_spectral(mu, batch)
    return KernelTable("sign_svd", mu, drift, vol, n, batch, alpha, lam)


def sgd_kernels(spectrum, batch: int) -> KernelTable:
    """SignSGD kernels for a Haar-rotated Sigma_out and Sigma_in = I."""
    mu = _mu_of(spectrum).copy()
    n = mu.size
    mbar = mu.mean()
    drift = mu * n_b(batch) / math.sqrt(math.pi * mbar)
    vol = n * (1.0 + (2.0 / math.pi) * (mu / mbar - 1.0))
    if np.any(vol < 0):
        warnings.warn(
            f"{int(np.sum(vol < 0))} SignSGD volatility entries are negative; spectrum is outside the model's range",
            OutOfModelWarning,
            stacklevel=2,
        )
    return KernelTable("sign_sgd", mu, drift, vol, n, batch, _alpha_of(spectrum, mu))


def kernel_table(
    algorithm: KernelAlgorithm,
    spectrum,
    batch: int,
    *,
    drift_method: Literal["aggregate", "spectral"] = "aggregate",
) -> KernelTable:
    mu = _mu_of(spectrum)
    if np.all(mu == mu[0]) and mu[0] == 1.0:
        return iso_kernels(algorithm, mu.size, batch)
    if algorithm == "sign_svd":
        return svd_kernels(spectrum, batch, drift_method=drift_method)
    if algorithm == "sign_sgd":
        return sgd_kernels(spectrum, batch)
    raise ValueError(f"unknown algorithm {algorithm!r}")


# ---------------------------------------------------------------------------
# general spectral drift


def _inverse_sqrt(s):
    return 1.0 / np.sqrt(s)


def _identity(s):
    return s


PHI = {"inverse_sqrt": _inverse_sqrt, "identity": _identity}


def _drift_grid(mu: np.ndarray, gamma: float, points: int) -> np.ndarray:
    top = 4.0 * max(1.0, gamma) * mu.max() * 10.0
    return np.geomspace(1e-7 * min(1.0, gamma) * mu.min(), top, points)


def drift_kernel_spectral(
    mu,
    batch: int,
    modes=None,
    *,
    phi: str | Callable = "inverse_sqrt",
    risk: float = 1.0,
    points: int = 3000,
    rel_eta: float = 1e-2,
) -> np.ndarray:
    """Per-mode drift by quadrature of the spectral integral over the positive axis.

    For Sigma_in = I and input mode j this is

        d_i = -(2 sqrt(F) mu_i / pi) int_0^inf x phi(2 F x) Im[xi^2 f(xi) R_i(z) Rt(z)] dx

    with R_i = 1/(s1_tilde mu_i - z) and Rt = 1/(s1 - z).  The boundary value is
    taken on z = x (1 + i delta) and extrapolated linearly to delta = 0 from
    delta and delta / 2.  For phi(s) = s^(-1/2) the result does not depend on F.
    """
    mu = _mu_of(mu)
    n = mu.size
    gamma = n / batch
    modes = np.arange(n) if modes is None else np.asarray(modes)
    phi_fn = PHI[phi] if isinstance(phi, str) else phi
    x = _drift_grid(mu, gamma, points)
    sqrt_f = math.sqrt(risk)

    def integral(delta: float) -> np.ndarray:
        z = x * (1.0 + 1j * delta)
        order = np.argsort(x)[::-1]
        sol = rmt.solve_fixed_point_path(mu, None, gamma, gamma, z[order])
        inv = np.empty(x.size, dtype=int)
        inv[order] = np.arange(x.size)
        st, s1, xi, zz = sol.s1_tilde[inv], sol.s1[inv], sol.xi[inv], z
        core = xi**2 * rmt.f_xi(xi) / (s1 - zz)
        weight = x * phi_fn(2.0 * risk * x)
        r_i = 1.0 / (st[:, None] * mu[modes] - zz[:, None])
        integrand = (core[:, None] * r_i).imag * weight[:, None]
        # trapezoid in log x
        return np.trapezoid(integrand * x[:, None], np.log(x), axis=0)

    coarse = integral(rel_eta)
    fine = integral(rel_eta / 2)
    return -(2.0 * sqrt_f * mu[modes] / math.pi) * (2.0 * fine - coarse)


def drift_from_row_measure(measure: rmt.RowMeasure, gamma: float) -> float:
    """SignSVD drift as the sqrt(x)-moment of the row measure, divided by sqrt(2) gamma."""
    return measure.moment(0.5) / (math.sqrt(2.0) * gamma)
