"""Deterministic equivalents for the spectrum of the normalised gradient Gram matrix.

For a minibatch gradient G and risk R, the matrix H = G G^T / (2R) has a
limiting spectrum described by three scalar unknowns (sigma, sigma_tilde,
s1_tilde) tied together through

    s1_tilde * sigma = s1 * sigma_tilde = f(xi),   xi = 1 / sqrt(-2 z sigma sigma_tilde),
    sigma       = (1/B) sum_i mu_i  / (s1_tilde mu_i - z),
    sigma_tilde = (1/B) sum_j lam_j / (s1 lam_j - z),

with f(xi) = 1 - sqrt(pi) xi erfcx(xi).  The solvers below run Newton's method
on (s1_tilde, s1), or on s1_tilde alone when Sigma_in is a multiple of the
identity, and reach hard spectral points through a homotopy in z.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import erfcx

SQRT_PI = float(np.sqrt(np.pi))

# |xi| beyond which the continued fraction replaces erfcx (relative error
# of 80 terms stays below 2e-13 on Re xi >= 0 there)
_CF_SWITCH = 6.0
_CF_TERMS = 80
_SERIES_SWITCH = 30.0


class HalfPlaneError(ValueError):
    """Spectral point is neither in the upper half-plane nor on the negative axis."""


class FixedPointError(RuntimeError):
    def __init__(self, message: str, residual: float, index: int | None = None):
        where = "" if index is None else f" at grid point {index}"
        super().__init__(f"{message}{where} (last residual {residual:.3e})")
        self.residual = residual
        self.index = index


# ---------------------------------------------------------------------------
# special function


def _tail_fraction(xi: np.ndarray) -> np.ndarray:
    """K(xi) with sqrt(pi) erfcx(xi) = 1 / (xi + K), from the Laplace continued fraction."""
    k_val = np.zeros_like(xi)
    for k in range(_CF_TERMS, 0, -1):
        k_val = (0.5 * k) / (xi + k_val)
    return k_val


def f_xi(xi):
    """f(xi) = 1 - sqrt(pi) xi erfcx(xi), stable for large |xi| with Re xi >= 0."""
    arr = np.asarray(xi, dtype=complex)
    flat = arr.reshape(-1)
    out = np.empty_like(flat)
    big = np.abs(flat) >= _CF_SWITCH
    small = ~big
    out[small] = 1.0 - SQRT_PI * flat[small] * erfcx(flat[small])
    if big.any():
        xb = flat[big]
        k_val = _tail_fraction(xb)
        out[big] = k_val / (xb + k_val)
    out = out.reshape(arr.shape)
    return out[()] if out.ndim == 0 else out


def f_xi_prime(xi):
    """Derivative f'(xi) = 2 xi f(xi) - sqrt(pi) erfcx(xi)."""
    arr = np.asarray(xi, dtype=complex)
    flat = arr.reshape(-1)
    out = np.empty_like(flat)
    mag = np.abs(flat)
    small = mag < _CF_SWITCH
    mid = (mag >= _CF_SWITCH) & (mag < _SERIES_SWITCH)
    far = mag >= _SERIES_SWITCH
    xs = flat[small]
    e = erfcx(xs)
    out[small] = 2.0 * xs * (1.0 - SQRT_PI * xs * e) - SQRT_PI * e
    if mid.any():
        xm = flat[mid]
        k_val = _tail_fraction(xm)
        out[mid] = 2.0 * xm * k_val / (xm + k_val) - 1.0 / (xm + k_val)
    if far.any():
        inv2 = 1.0 / flat[far] ** 2
        out[far] = (-1.0 + inv2 * (3.0 + inv2 * (-45.0 / 4.0 + inv2 * 105.0 / 2.0))) * inv2 / flat[far]
    out = out.reshape(arr.shape)
    return out[()] if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# spectra as weighted point masses


@dataclass(frozen=True)
class _Side:
    """Distinct eigenvalues with weights multiplicity / B."""

    values: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_eigenvalues(cls, eigenvalues, batch: float) -> "_Side":
        vals, counts = np.unique(np.asarray(eigenvalues, dtype=float), return_counts=True)
        return cls(vals, counts / float(batch))

    @property
    def gamma(self) -> float:
        return float(self.weights.sum())

    @property
    def first_moment(self) -> float:
        return float(self.weights @ self.values)

    @property
    def is_flat(self) -> bool:
        return self.values.size == 1

    def _chunks(self, n: int):
        size = max(1, 4_000_000 // max(1, self.values.size))
        for start in range(0, n, size):
            yield slice(start, min(n, start + size))

    def sigma(self, s: np.ndarray, z: np.ndarray):
        """(1/B) sum w mu / (s mu - z) and its derivative in s."""
        wv = self.weights * self.values
        wvv = wv * self.values
        sig = np.empty(s.shape, dtype=complex)
        dsig = np.empty(s.shape, dtype=complex)
        for sl in self._chunks(s.size):
            inv = 1.0 / (s[sl, None] * self.values - z[sl, None])
            sig[sl] = inv @ wv
            dsig[sl] = -(inv * inv) @ wvv
        return sig, dsig

    def resolvent_trace(self, s: np.ndarray, z: np.ndarray) -> np.ndarray:
        out = np.empty(s.shape, dtype=complex)
        for sl in self._chunks(s.size):
            out[sl] = (1.0 / (s[sl, None] * self.values - z[sl, None])) @ self.weights
        return out


def _values_of(spectrum) -> np.ndarray:
    vals = getattr(spectrum, "values", spectrum)
    return np.atleast_1d(np.asarray(vals, dtype=float))


@dataclass(frozen=True)
class _System:
    out: _Side
    inp: _Side

    @property
    def half(self) -> bool:
        """Input side is c * I, so sigma_tilde follows algebraically from s1_tilde."""
        return self.inp.is_flat

    @property
    def scale(self) -> float:
        # rough size of the top of the spectrum, used to place the homotopy start
        return float(
            (self.out.values.max() * max(1.0, self.out.gamma)) * (self.inp.values.max() * max(1.0, self.inp.gamma))
        )


def _make_system(spectrum_out, spectrum_in, gamma_out: float, gamma_in: float) -> _System:
    mu = _values_of(spectrum_out)
    if gamma_out <= 0 or gamma_in <= 0:
        raise ValueError("aspect ratios must be positive")
    batch = mu.size / gamma_out
    if spectrum_in is None:
        lam_side = _Side(np.array([1.0]), np.array([float(gamma_in)]))
    else:
        lam = _values_of(spectrum_in)
        if not np.isclose(lam.size / batch, gamma_in, rtol=1e-9):
            raise ValueError(f"gamma_in={gamma_in} inconsistent with N_in={lam.size} and B={batch:g}")
        lam_side = _Side.from_eigenvalues(lam, batch)
    return _System(_Side.from_eigenvalues(mu, batch), lam_side)


# ---------------------------------------------------------------------------
# residuals and Newton iteration


@dataclass
class _State:
    z: np.ndarray
    s_tilde: np.ndarray
    s: np.ndarray
    sigma: np.ndarray
    sigma_tilde: np.ndarray
    xi: np.ndarray
    fval: np.ndarray
    res: np.ndarray


def _evaluate(sys: _System, z: np.ndarray, s_tilde: np.ndarray, s: np.ndarray, jac: bool = True):
    """Residuals (r1, r2) and, optionally, their Jacobian in (s_tilde, s)."""
    sig, dsig = sys.out.sigma(s_tilde, z)
    if sys.half:
        c = sys.inp.values[0]
        prod = s_tilde * sig
        sig_t = c * (prod - sys.inp.gamma) / z
        dsig_t_dst = c * (sig + s_tilde * dsig) / z
        s = prod / np.where(sig_t == 0, 1.0, sig_t)
        dsig_t = np.zeros_like(sig_t)
    else:
        sig_t, dsig_t = sys.inp.sigma(s, z)
        dsig_t_dst = np.zeros_like(sig_t)
    pp = -2.0 * z * sig * sig_t
    xi = 1.0 / np.sqrt(pp)
    fval = f_xi(xi)
    r1 = s_tilde * sig - fval
    r2 = np.zeros_like(r1) if sys.half else s * sig_t - fval
    if not jac:
        return r1, r2, None, (sig, sig_t, s, xi, fval)
    fp = f_xi_prime(xi)
    # dxi/dp = -xi^3 / 2 with p = -2 z sigma sigma_tilde
    dxi_dst = xi**3 * z * (dsig * sig_t + sig * dsig_t_dst)
    dxi_ds = xi**3 * z * sig * dsig_t
    j11 = sig + s_tilde * dsig - fp * dxi_dst
    j12 = -fp * dxi_ds
    j21 = -fp * dxi_dst
    j22 = sig_t + s * dsig_t - fp * dxi_ds
    return r1, r2, (j11, j12, j21, j22), (sig, sig_t, s, xi, fval)


def _newton(
    sys: _System,
    z: np.ndarray,
    s_tilde: np.ndarray,
    s: np.ndarray,
    tol: float,
    max_iter: int,
):
    """Damped Newton on every point at once; returns (s_tilde, s, residual, converged, iterations)."""
    s_tilde = s_tilde.astype(complex).copy()
    s = s.astype(complex).copy()
    r1, r2, jac, _ = _evaluate(sys, z, s_tilde, s)
    res = np.maximum(np.abs(r1), np.abs(r2))
    active = np.isfinite(res) & (res > tol)
    iters = 0
    while active.any() and iters < max_iter:
        iters += 1
        idx = np.flatnonzero(active)
        j11, j12, j21, j22 = (j[idx] for j in jac)
        a1, a2 = r1[idx], r2[idx]
        if sys.half:
            d1 = a1 / j11
            d2 = np.zeros_like(d1)
        else:
            det = j11 * j22 - j12 * j21
            d1 = (j22 * a1 - j12 * a2) / det
            d2 = (j11 * a2 - j21 * a1) / det
        bad = ~np.isfinite(d1) | ~np.isfinite(d2)
        d1[bad] = 0.0
        d2[bad] = 0.0
        step = np.ones(idx.size)
        old = res[idx]
        zi = z[idx]
        for _ in range(12):
            st_new = s_tilde[idx] - step * d1
            s_new = s[idx] - step * d2
            n1, n2, _, _ = _evaluate(sys, zi, st_new, s_new, jac=False)
            new = np.maximum(np.abs(n1), np.abs(n2))
            worse = ~np.isfinite(new) | (new > old)
            if not worse.any():
                break
            step = np.where(worse, 0.5 * step, step)
        s_tilde[idx] = st_new
        s[idx] = s_new
        r1, r2, jac, _ = _evaluate(sys, z, s_tilde, s)
        res = np.maximum(np.abs(r1), np.abs(r2))
        stalled = np.zeros(z.shape, dtype=bool)
        stalled[idx] = (step < 2.0**-11) | bad
        active = np.isfinite(res) & (res > tol) & ~stalled
    return s_tilde, s, res, np.isfinite(res) & (res <= tol), iters


def _picard(sys: _System, z, s_tilde, s, tol: float, max_iter: int = 20000, damping: float = 0.5):
    """Damped fixed-point iteration s <- f / sigma; slow but keeps to the Herglotz branch."""
    s_tilde = s_tilde.astype(complex).copy()
    s = s.astype(complex).copy()
    for it in range(max_iter):
        r1, r2, _, (sig, sig_t, s_h, _, fval) = _evaluate(sys, z, s_tilde, s, jac=False)
        res = np.maximum(np.abs(r1), np.abs(r2))
        if np.all(res <= tol):
            return s_tilde, s, res, True, it
        s_tilde = damping * s_tilde + (1 - damping) * fval / sig
        if not sys.half:
            s = damping * s + (1 - damping) * fval / sig_t
    return s_tilde, s, res, bool(np.all(res <= tol)), max_iter


def _far_field(sys: _System, n: int):
    return (
        np.full(n, sys.inp.first_moment, dtype=complex),
        np.full(n, sys.out.first_moment, dtype=complex),
    )


def _check_points(z: np.ndarray) -> None:
    bad = (z.imag < 0) | ((z.imag == 0) & (z.real >= 0))
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise HalfPlaneError(f"spectral point {z[k]} must satisfy Im z > 0 or be real negative")


def _homotopy_path(sys: _System, z: np.ndarray, levels: int) -> np.ndarray:
    """(levels+1, P) array of points walking from far away to z."""
    far = 100.0 * max(sys.scale, float(np.max(np.abs(z))))
    t = np.linspace(0.0, 1.0, levels + 1)[:, None]
    upper = z.imag > 0
    path = np.empty((levels + 1, z.size), dtype=complex)
    if upper.any():
        im = z.imag[upper]
        path[:, upper] = z.real[upper] + 1j * im * (far / im) ** (1.0 - t)
    if (~upper).any():
        mag = -z.real[~upper]
        path[:, ~upper] = -mag * (np.maximum(far, mag) / mag) ** (1.0 - t)
    return path


def _solve_homotopy(sys: _System, z: np.ndarray, tol: float, max_iter: int, levels: int | None = None):
    n = z.size
    far = 100.0 * max(sys.scale, float(np.max(np.abs(z))))
    span = far / np.minimum(np.where(z.imag > 0, z.imag, np.abs(z)), far)
    if levels is None:
        levels = int(np.ceil(np.log2(span.max()))) + 1
    path = _homotopy_path(sys, z, levels)
    s_tilde, s = _far_field(sys, n)
    for k in range(levels + 1):
        last = k == levels
        s_tilde, s, res, ok, its = _newton(sys, path[k], s_tilde, s, tol if last else max(tol, 1e-10), max_iter)
    return s_tilde, s, res, ok, its


# ---------------------------------------------------------------------------
# public solution object


@dataclass(frozen=True)
class FixedPointSolution:
    """Solution at one spectral point, or a batch of points when the fields are arrays."""

    z: complex
    sigma: complex
    sigma_tilde: complex
    s1_tilde: complex
    s1: complex
    xi: complex
    m: complex
    residual: float
    coupling_residual: float
    anchor_residual: float
    iterations: int


def _package(sys: _System, z, s_tilde, s, iters) -> FixedPointSolution:
    r1, r2, _, (sig, sig_t, s_full, xi, fval) = _evaluate(sys, z, s_tilde, s, jac=False)
    if sys.half:
        s = s_full
    m = sys.out.resolvent_trace(s_tilde, z)
    return FixedPointSolution(
        z=z,
        sigma=sig,
        sigma_tilde=sig_t,
        s1_tilde=s_tilde,
        s1=s,
        xi=xi,
        m=m,
        residual=np.maximum(np.abs(r1), np.abs(r2)),
        coupling_residual=np.abs(s * sig_t - s_tilde * sig),
        anchor_residual=np.abs(s_tilde * sig - sys.out.gamma - z * m),
        iterations=iters,
    )


def _scalar(sol: FixedPointSolution) -> FixedPointSolution:
    return FixedPointSolution(
        **{
            k: (complex(v[0]) if np.iscomplexobj(v) else float(v[0])) if isinstance(v, np.ndarray) else v
            for k, v in sol.__dict__.items()
        }
    )


def _herglotz_ok(sys: _System, z, sig) -> np.ndarray:
    """Branch test for Im z > 0.

    A measure of mass M has Im sigma >= Im z |sigma|^2 / M (Cauchy-Schwarz), and
    Im sigma >= Im z M / ((|x| + T)^2 + Im z^2) when its support lies in [0, T].
    The second bound rules out the spurious root sigma = 0, xi = infinity.
    """
    mass = sys.out.first_moment
    top = 100.0 * sys.scale
    floor = np.maximum(
        z.imag * np.abs(sig) ** 2 / mass,
        z.imag * mass / ((np.abs(z.real) + top) ** 2 + z.imag**2),
    )
    floor *= 0.5
    return (z.imag == 0) | (sig.imag >= floor)


def _solve_points(
    sys: _System,
    z: np.ndarray,
    *,
    warm: tuple[np.ndarray, np.ndarray] | None = None,
    tol: float = 1e-12,
    max_iter: int = 60,
):
    """Solve independently at each z (vectorised), falling back as needed."""
    iters = 0
    if warm is not None:
        st, s, res, ok, iters = _newton(sys, z, warm[0], warm[1], tol, max_iter)
        sig = sys.out.sigma(st, z)[0]
        ok &= _herglotz_ok(sys, z, sig)
    else:
        st = np.zeros(z.size, dtype=complex)
        s = np.zeros(z.size, dtype=complex)
        ok = np.zeros(z.size, dtype=bool)
    if not ok.all():
        idx = np.flatnonzero(~ok)
        h_st, h_s, h_res, h_ok, its = _solve_homotopy(sys, z[idx], tol, max_iter)
        retry = ~h_ok
        if retry.any():
            levels = 4 * (int(np.ceil(np.log2(1e3 * sys.scale / np.min(np.abs(z[idx][retry]).clip(1e-300))))) + 1)
            r_st, r_s, r_res, r_ok, _ = _solve_homotopy(sys, z[idx][retry], tol, max_iter, levels=levels)
            if not r_ok.all():
                p_st, p_s, p_res, _, _ = _picard(sys, z[idx][retry], r_st, r_s, tol)
                r_st, r_s = p_st, p_s
            h_st[retry], h_s[retry] = r_st, r_s
        st[idx], s[idx] = h_st, h_s
        iters = max(iters, its)
    return st, s, iters


def solve_fixed_point(
    spectrum_out,
    spectrum_in,
    gamma_out: float,
    gamma_in: float,
    z: complex,
    *,
    warm: FixedPointSolution | None = None,
    tol: float = 1e-12,
    max_iter: int = 60,
    accept: float = 1e-9,
) -> FixedPointSolution:
    """Solve the fixed-point system at one spectral point.

    ``spectrum_in=None`` means Sigma_in = I with N_in = gamma_in * B.  Without a
    warm start, the solver follows a homotopy from far out in the plane (where
    s1_tilde is close to the first moment of Sigma_in) down to ``z``.
    """
    sys = _make_system(spectrum_out, spectrum_in, gamma_out, gamma_in)
    zz = np.array([complex(z)])
    _check_points(zz)
    w = None if warm is None else (np.array([warm.s1_tilde], dtype=complex), np.array([warm.s1], dtype=complex))
    st, s, iters = _solve_points(sys, zz, warm=w, tol=tol, max_iter=max_iter)
    sol = _scalar(_package(sys, zz, st, s, iters))
    if not sol.residual <= accept:
        raise FixedPointError("fixed-point iteration did not converge", sol.residual)
    return sol


def solve_fixed_point_path(
    spectrum_out,
    spectrum_in,
    gamma_out: float,
    gamma_in: float,
    z_path,
    *,
    method: Literal["continuation", "homotopy"] = "continuation",
    tol: float = 1e-12,
    max_iter: int = 60,
    accept: float = 1e-9,
) -> FixedPointSolution:
    """Solve along a sequence of points; the result has array-valued fields.

    ``continuation`` solves the points in the given order, warm-starting each
    from its predecessor.  ``homotopy`` solves all points at once, each from
    the far field, which vectorises well for long grids.
    """
    sys = _make_system(spectrum_out, spectrum_in, gamma_out, gamma_in)
    z = np.atleast_1d(np.asarray(z_path, dtype=complex))
    _check_points(z)
    if method == "homotopy":
        st, s, iters = _solve_points(sys, z, tol=tol, max_iter=max_iter)
    elif method == "continuation":
        st = np.empty(z.size, dtype=complex)
        s = np.empty(z.size, dtype=complex)
        iters = 0
        prev = None
        for k in range(z.size):
            a, b, its = _solve_points(sys, z[k : k + 1], warm=prev, tol=tol, max_iter=max_iter)
            st[k], s[k] = a[0], b[0]
            iters = max(iters, its)
            prev = (a, b)
    else:
        raise ValueError(f"unknown method {method!r}")
    sol = _package(sys, z, st, s, iters)
    bad = ~(sol.residual <= accept)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise FixedPointError("fixed-point iteration did not converge", float(sol.residual[k]), index=k)
    return sol


# ---------------------------------------------------------------------------
# densities and row measures


def default_eta(n: int) -> float:
    return max(1e-3, 1.0 / np.sqrt(n))


def default_grid(mu, gamma: float, points: int = 400) -> np.ndarray:
    """Log grid from 1e-4 * gamma * mu_min up to 4 * gamma * mu_max."""
    mu = _values_of(mu)
    return np.geomspace(1e-4 * gamma * mu.min(), 4.0 * gamma * mu.max(), points)


def spectral_density(
    spectrum_out,
    spectrum_in,
    gamma_out: float,
    gamma_in: float,
    x_grid,
    eta_im: float | None = None,
    *,
    order: Literal["descending", "ascending"] = "descending",
    trace: Literal["sigma", "m"] = "sigma",
) -> np.ndarray:
    """Im sigma(x + i eta) / pi on the grid (or Im m / pi with ``trace="m"``).

    ``sigma`` weights each eigenvector of H by its Sigma_out energy; ``m`` is the
    plain normalised eigenvalue density (1/B) Tr delta(x - H).
    """
    x = np.asarray(x_grid, dtype=float)
    if eta_im is None:
        eta_im = default_eta(_values_of(spectrum_out).size)
    if eta_im <= 0:
        raise ValueError("eta_im must be positive")
    perm = np.argsort(x)
    if order == "descending":
        perm = perm[::-1]
    z = x[perm] + 1j * eta_im
    sol = solve_fixed_point_path(spectrum_out, spectrum_in, gamma_out, gamma_in, z)
    vals = sol.sigma if trace == "sigma" else sol.m
    out = np.empty_like(x)
    out[perm] = np.maximum(vals.imag, 0.0) / np.pi
    return out


@dataclass(frozen=True)
class RowMeasure:
    mode_index: int
    atom_at_zero: float
    grid: np.ndarray
    density: np.ndarray

    @property
    def ac_mass(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    @property
    def total_mass(self) -> float:
        return self.atom_at_zero + self.ac_mass

    def moment(self, power: float) -> float:
        return float(np.trapezoid(self.density * self.grid**power, self.grid))


def row_resolvents(mu, batch: int, z, modes=None, *, method: Literal["continuation", "homotopy"] = "continuation"):
    """R_i(z) = 1 / (s1_tilde(z) mu_i - z) for Sigma_in = I, shape (len(z), len(modes))."""
    mu = _values_of(mu)
    n = mu.size
    modes = np.arange(n) if modes is None else np.asarray(modes)
    sol = solve_fixed_point_path(mu, None, n / batch, n / batch, z, method=method)
    return 1.0 / (sol.s1_tilde[:, None] * mu[modes] - np.asarray(z)[:, None]), sol


def row_measure(
    i: int,
    spectrum_out,
    n: int,
    batch: int,
    x_grid=None,
    eta_im: float | None = None,
    *,
    rel_eta: float = 1e-2,
    lam: float | None = None,
) -> RowMeasure:
    """Spectral measure of H seen from the i-th output eigenvector (1-based i).

    The density is Im R_i / pi with the null-space atom's own Lorentzian
    removed, so ``atom + integral`` estimates the unit mass directly.  With
    ``eta_im=None`` each grid point uses Im z = rel_eta * x, which keeps the
    smoothing proportional to the local scale on log grids.
    """
    mu = _values_of(spectrum_out)
    if mu.size != n:
        raise ValueError("spectrum length differs from n")
    if not 1 <= i <= n:
        raise ValueError(f"mode index {i} outside 1..{n}")
    gamma = n / batch
    x = default_grid(mu, gamma) if x_grid is None else np.asarray(x_grid, dtype=float)
    if np.any(x <= 0):
        raise ValueError("x_grid must be positive")
    if batch < n:
        if lam is None:
            from .kernels import solve_lambda

            lam = solve_lambda(mu, batch)
        atom = 1.0 / (1.0 + lam * mu[i - 1])
    else:
        atom = 0.0
    z = x * (1.0 + 1j * rel_eta) if eta_im is None else x + 1j * eta_im
    order = np.argsort(x)[::-1]
    res, _ = row_resolvents(mu, batch, z[order], [i - 1])
    r_i = np.empty(x.size, dtype=complex)
    r_i[order] = res[:, 0]
    dens = (r_i.imag + atom * (1.0 / z).imag) / np.pi
    return RowMeasure(mode_index=i, atom_at_zero=float(atom), grid=x, density=np.maximum(dens, 0.0))


# ---------------------------------------------------------------------------
# empirical spectra


@dataclass(frozen=True)
class EmpiricalSpectrum:
    """Nonzero eigenvalues of H over several samples, with their Sigma_out weights.

    ``atom_weight`` is the sigma-mass carried by the exact zero eigenvalues
    (there are N_out - rank of them per sample).
    """

    eigenvalues: np.ndarray
    weights: np.ndarray
    batch: int
    atom_weight: float

    def bin_mass(self, edges) -> np.ndarray:
        """sigma-mass per bin, averaged over samples."""
        mass, _ = np.histogram(self.eigenvalues.ravel(), bins=edges, weights=self.weights.ravel())
        return mass / (self.batch * self.eigenvalues.shape[0])

    def smoothed_bin_mass(self, edges, eta_im: float) -> np.ndarray:
        """Bin mass after convolving each eigenvalue with a Lorentzian of width eta_im.

        This is what Im s(x + i eta)/pi of the empirical measure integrates to,
        so it is directly comparable with the theory at the same eta. The end
        bins are open like in theory_bin_mass.
        """
        edges = np.asarray(edges, dtype=float)
        lam = self.eigenvalues.ravel()
        w = self.weights.ravel()
        cum = np.array([w @ (np.arctan((e - lam) / eta_im) / np.pi + 0.5) for e in edges])
        cum[0], cum[-1] = 0.0, w.sum()
        return np.diff(cum) / (self.batch * self.eigenvalues.shape[0])


def sample_gradient_spectrum(inst, samples: int, rng: np.random.Generator, delta=None) -> EmpiricalSpectrum:
    """Eigenvalues of H = G G^T / (2R) over independent minibatches at a fixed error.

    Each eigenvector u_k is weighted by u_k^T Sigma_out u_k, which is what the
    output-side trace sigma measures.
    """
    from .model import minibatch_gradient, population_risk

    delta = inst.delta0 if delta is None else delta
    risk = population_risk(delta, inst)
    if risk <= 0:
        raise ValueError("H is undefined at zero risk")
    spec = inst.spec
    rank = min(spec.n_out, spec.n_in, spec.batch)
    drop = spec.n_out - rank
    eigs = np.empty((samples, rank))
    weights = np.empty((samples, rank))
    atom = 0.0
    for k in range(samples):
        g = minibatch_gradient(delta, inst, spec.batch, rng)
        vals, vecs = np.linalg.eigh(g @ g.T / (2.0 * risk))
        proj = inst.u_basis.T @ vecs
        w = inst.mu @ (proj * proj)
        eigs[k] = vals[drop:]
        weights[k] = w[drop:]
        atom += w[:drop].sum()
    return EmpiricalSpectrum(eigs, weights, spec.batch, atom / (spec.batch * samples))


def sigma_atom(spectrum_out, spectrum_in, gamma_out: float, gamma_in: float, eps: float = 1e-9) -> float:
    """Mass of the atom at zero in the sigma measure, from eps * Im sigma(i eps)."""
    sol = solve_fixed_point(spectrum_out, spectrum_in, gamma_out, gamma_in, 1j * eps)
    return float(eps * np.asarray(sol.sigma).imag)


def theory_bin_mass(spectrum_out, spectrum_in, gamma_out, gamma_in, edges, eta_im: float, *, atom: float = 0.0, points: int = 4000):
    """Mass of Im sigma(x + i eta)/pi per bin, minus an atom's Lorentzian.

    The first and last bins are open, so the Lorentzian tails that smoothing
    pushes below the first edge or above the last edge still count.
    """
    edges = np.asarray(edges, dtype=float)
    lo, hi = edges[0], edges[-1]
    span = hi - lo
    tail = np.geomspace(eta_im * 1e-2, 100.0 * span, points // 4)
    x = np.unique(np.concatenate([lo - tail, np.linspace(lo, hi, points), hi + tail]))
    sol = solve_fixed_point_path(spectrum_out, spectrum_in, gamma_out, gamma_in, x[::-1] + 1j * eta_im)
    dens = np.maximum(sol.sigma[::-1].imag, 0.0) / np.pi
    if atom:
        dens = dens - atom * eta_im / np.pi / (x * x + eta_im * eta_im)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(x))])
    inner = np.interp(edges, x, cum)
    inner[0], inner[-1] = 0.0, cum[-1]
    return np.diff(inner)


def binned_l1(theory_mass, empirical_mass) -> float:
    """L1 distance between two bin-mass vectors after normalising each to unit sum."""
    p = np.asarray(theory_mass, dtype=float)
    q = np.asarray(empirical_mass, dtype=float)
    return float(np.abs(p / p.sum() - q / q.sum()).sum())
