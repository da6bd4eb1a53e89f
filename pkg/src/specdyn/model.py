"""Matrix-valued Gaussian regression: spectra, instances, gradients and risks.

The model observes y = x_out^T W x_in with x_out ~ N(0, Sigma_out) and
x_in ~ N(0, Sigma_in).  Only the error matrix Delta = W - W_star enters the
dynamics, so the teacher is fixed to zero and W_t coincides with Delta_t.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

SpectrumKind = Literal["isotropic", "power_law"]


class InvalidDimension(ValueError):
    pass


class InvalidSpec(ValueError):
    pass


# ---------------------------------------------------------------------------
# random streams


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError("stream keys must be nonnegative")
    return int(key)


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Generator for the named sub-stream ``seed / key0 / key1 / ...``.

    Streams are derived with ``SeedSequence`` spawn keys, so the stream for a
    given path does not depend on how many other streams were drawn before it.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# spectra


@dataclass(frozen=True)
class Spectrum:
    kind: SpectrumKind
    n: int
    alpha: float
    values: np.ndarray = field(repr=False, compare=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


def make_spectrum(kind: SpectrumKind, n: int, alpha: float = 0.0) -> Spectrum:
    """Eigenvalues mu_i = i^(-alpha) (power law) or all ones (isotropic)."""
    if n < 1:
        raise InvalidDimension(f"spectrum dimension must be >= 1, got {n}")
    if kind == "isotropic":
        vals = np.ones(n)
        alpha = 0.0
    elif kind == "power_law":
        if alpha < 0:
            raise InvalidSpec(f"alpha must be nonnegative, got {alpha}")
        vals = np.arange(1, n + 1, dtype=float) ** (-float(alpha))
    else:
        raise InvalidSpec(f"unknown spectrum kind {kind!r}")
    vals.setflags(write=False)
    return Spectrum(kind=kind, n=n, alpha=float(alpha), values=vals)


# ---------------------------------------------------------------------------
# problem specification and instances


@dataclass(frozen=True)
class ProblemSpec:
    n_out: int
    n_in: int
    batch: int
    spectrum_out: Spectrum
    spectrum_in: Spectrum
    beta_init: float = 0.0
    rotate_output: bool = True
    seed: int = 0

    @property
    def gamma(self) -> float:
        return self.n_out / self.batch

    @property
    def gamma_in(self) -> float:
        return self.n_in / self.batch

    def validate(self) -> None:
        for name in ("n_out", "n_in", "batch"):
            if getattr(self, name) < 1:
                raise InvalidDimension(f"{name} must be >= 1")
        if self.spectrum_out.n != self.n_out or self.spectrum_in.n != self.n_in:
            raise InvalidSpec("spectrum dimensions do not match n_out / n_in")
        if self.beta_init < 0:
            raise InvalidSpec("beta_init must be nonnegative")
        if self.spectrum_out.kind == "power_law" and self.spectrum_out.alpha + self.beta_init <= 1:
            raise InvalidSpec(
                f"alpha + beta_init must exceed 1 (got {self.spectrum_out.alpha} + {self.beta_init})"
            )
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec("seed must be an unsigned 64-bit integer")


def square_problem(
    n: int,
    batch: int,
    alpha: float = 0.0,
    beta: float = 0.0,
    *,
    seed: int = 0,
    rotate_output: bool = True,
) -> ProblemSpec:
    """Square N x N problem with Sigma_in = I and power-law (or flat) Sigma_out."""
    kind: SpectrumKind = "power_law" if alpha > 0 else "isotropic"
    spec = ProblemSpec(
        n_out=n,
        n_in=n,
        batch=batch,
        spectrum_out=make_spectrum(kind, n, alpha),
        spectrum_in=make_spectrum("isotropic", n),
        beta_init=beta,
        rotate_output=rotate_output,
        seed=seed,
    )
    spec.validate()
    return spec


@dataclass(frozen=True)
class ProblemInstance:
    spec: ProblemSpec
    w_star: np.ndarray
    u_basis: np.ndarray
    sigma_out_sqrt: np.ndarray
    sigma_in_sqrt: np.ndarray
    delta0: np.ndarray

    @property
    def mu(self) -> np.ndarray:
        return self.spec.spectrum_out.values

    @property
    def lam(self) -> np.ndarray:
        return self.spec.spectrum_in.values


def haar_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR with sign-corrected R diagonal)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    return q * d


def sample_instance(spec: ProblemSpec, rng: np.random.Generator | None = None) -> ProblemInstance:
    """Draw U (output eigenbasis) and Delta_0 = U diag(i^(-beta/2)) Q^T.

    Q is an independent Haar matrix on the input side, so the i-th projected row
    risk of Delta_0 is exactly i^(-beta).
    """
    spec.validate()
    if rng is None:
        rng = stream(spec.seed, "instance")
    n_out, n_in = spec.n_out, spec.n_in
    u = haar_orthogonal(n_out, rng) if spec.rotate_output else np.eye(n_out)
    q = haar_orthogonal(n_in, rng)
    k = min(n_out, n_in)
    scale = np.arange(1, k + 1, dtype=float) ** (-spec.beta_init / 2.0)
    delta0 = (u[:, :k] * scale) @ q[:, :k].T

    mu = spec.spectrum_out.values
    s_out = (u * np.sqrt(mu)) @ u.T
    s_in = np.diag(np.sqrt(spec.spectrum_in.values))
    for a in (u, s_out, s_in, delta0):
        a.setflags(write=False)
    return ProblemInstance(
        spec=spec,
        w_star=np.zeros((n_out, n_in)),
        u_basis=u,
        sigma_out_sqrt=s_out,
        sigma_in_sqrt=s_in,
        delta0=delta0,
    )


# ---------------------------------------------------------------------------
# data, gradients, risks


def sample_features(inst: ProblemInstance, batch: int, rng: np.random.Generator):
    """Return (Y, X): columns are x_out and x_in samples."""
    g_out = rng.standard_normal((inst.spec.n_out, batch))
    g_in = rng.standard_normal((inst.spec.n_in, batch))
    # U diag(sqrt(mu)) g has the same law as Sigma_out^{1/2} g and costs one product
    y = np.sqrt(inst.mu)[:, None] * g_out
    if inst.spec.rotate_output and inst.spec.spectrum_out.kind != "isotropic":
        y = inst.u_basis @ y
    x = np.sqrt(inst.lam)[:, None] * g_in
    return y, x


def gradient_from_samples(delta: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    residual = np.einsum("ia,ia->a", y, delta @ x)
    return (y * residual) @ x.T / y.shape[1]


def minibatch_gradient(
    delta: np.ndarray, inst: ProblemInstance, batch: int, rng: np.random.Generator
) -> np.ndarray:
    """(1/B) Y D X^T with D = diag(x_out^a . Delta x_in^a)."""
    if delta.shape != (inst.spec.n_out, inst.spec.n_in):
        raise ValueError(f"delta has shape {delta.shape}, expected {(inst.spec.n_out, inst.spec.n_in)}")
    if batch < 1:
        raise InvalidDimension("batch must be >= 1")
    y, x = sample_features(inst, batch, rng)
    return gradient_from_samples(delta, y, x)


def population_risk(delta: np.ndarray, inst: ProblemInstance) -> float:
    """R = 1/2 Tr(Sigma_out Delta Sigma_in Delta^T), summed mode by mode.

    Uses R = 1/2 sum_ij mu_i lam_j (u_i^T Delta e_j)^2, which needs one product
    with U instead of two with the dense square roots.
    """
    if inst.spec.spectrum_out.kind == "isotropic" and inst.spec.spectrum_in.kind == "isotropic":
        return 0.5 * float(np.sum(delta * delta))
    p = inst.u_basis.T @ delta if inst.spec.rotate_output else delta
    return 0.5 * float(inst.mu @ (p * p) @ inst.lam)


def projected_row_risks(delta: np.ndarray, inst: ProblemInstance) -> np.ndarray:
    """r_i = ||Delta^T u_i||^2 for each output eigenvector u_i."""
    p = inst.u_basis.T @ delta
    return np.sum(p * p, axis=1)
