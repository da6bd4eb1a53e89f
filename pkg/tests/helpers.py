"""Cached computations shared by the unit and acceptance tests."""

from __future__ import annotations

import csv
import os
import tempfile
from functools import lru_cache
from pathlib import Path

import numpy as np

from specdyn import dynamics, kernels, model, optim

TTE_EPS = tuple(2.0**-k for k in range(4, 15))
WORKERS = os.cpu_count() or 1


@lru_cache(maxsize=None)
def table(algorithm: str, n: int, batch: int, alpha: float, drift: str = "aggregate") -> kernels.KernelTable:
    if alpha == 0:
        return kernels.iso_kernels(algorithm, n, batch)
    spectrum = model.make_spectrum("power_law", n, alpha)
    return kernels.kernel_table(algorithm, spectrum, batch, drift_method=drift)


@lru_cache(maxsize=None)
def tte_sweep(algorithm: str, alpha: float, beta: float, n: int = 1024, batch: int = 2048, T: float = 4.0):
    """Deterministic t_{T eps} over TTE_EPS; returns (epsilons, hit steps, records)."""
    tab = table(algorithm, n, batch, alpha)
    r0 = np.ones(n) if alpha == 0 else dynamics.initial_row_risks(n, beta)
    recs = [dynamics.time_to_eps(tab, r0, e, T, beta=beta) for e in TTE_EPS]
    assert not any(r.censored for r in recs)
    return TTE_EPS, tuple(r.t_hit for r in recs), tuple(recs)


def sweep_exponent(algorithm: str, alpha: float, beta: float, *, log_corrected: bool = False, **kw) -> float:
    eps, times, _ = tte_sweep(algorithm, alpha, beta, **kw)
    return dynamics.fit_exponent(eps, times, log_corrected=log_corrected)


def first_decade_agreement(mc_mean: np.ndarray, theory: np.ndarray, tol: float = 0.05):
    """Fraction of steps in the first decade of decay where |mc - th| <= tol * th, and the max relative error."""
    n = min(mc_mean.size, theory.size)
    mc, th = mc_mean[:n], theory[:n]
    below = np.flatnonzero(th <= th[0] / 10.0)
    end = below[0] if below.size else n - 1
    rel = np.abs(mc[: end + 1] - th[: end + 1]) / th[: end + 1]
    return float(np.mean(rel <= tol)), float(rel.max())


@lru_cache(maxsize=None)
def isotropic_greedy(algorithm: str, n: int, trials: int = 32):
    """Simulated and deterministic risk at the greedy rate, isotropic gamma = 1."""
    tab = table(algorithm, n, n, 0.0)
    sched = dynamics.greedy_rate(tab)
    contraction = 1.0 - 2.0 * float(tab.drift[0]) ** 2 / float(np.sum(tab.volatility))
    steps = int(np.ceil(np.log(0.1) / np.log(contraction))) + 5
    th = dynamics.evolve(tab, np.ones(n), sched, steps).risk
    prob = model.square_problem(n, n, seed=n)
    tr = optim.run_trajectory(prob, optim.OptimizerSpec(algorithm), steps, trials, sched, workers=WORKERS)
    return tr.risk_mean, th


MUON_EPS = (2.0**-9, 2.0**-10, 2.0**-11)


@lru_cache(maxsize=None)
def muon_runs(n: int = 256, batch: int = 512, alpha: float = 1.5, beta: float = 0.7, trials: int = 16):
    """Muon at eta*(eps) for each eps in MUON_EPS against the spectral-drift SignSVD table.

    Returns (table, r0, rows) with rows of (eps, theory t_2eps, MC t_2eps, MC mean risk).
    """
    prob = model.square_problem(n, batch, alpha, beta, seed=11)
    inst = model.sample_instance(prob)
    tab = table("sign_svd", n, batch, alpha, "spectral")
    r0 = dynamics.initial_row_risks(n, beta)
    rows = []
    for eps in MUON_EPS:
        th = dynamics.time_to_eps(tab, r0, eps, 2.0, beta=beta).t_hit
        steps = int(1.2 * th) + 10
        sched = optim.ConstantRate(dynamics.eta_star(tab, eps))
        tr = optim.run_trajectory(prob, optim.OptimizerSpec("muon"), steps, trials, sched, instance=inst, workers=WORKERS)
        hit = np.flatnonzero(tr.risk_mean <= 2.0 * eps)
        rows.append((eps, th, int(hit[0]) if hit.size else None, tr.risk_mean))
    return tab, r0, tuple(rows)


@lru_cache(maxsize=None)
def momentum_desk_run():
    """The reduced-scale momentum recipe, run once per session; returns (summary, rows)."""
    from specdyn import harness

    out = Path(tempfile.mkdtemp(prefix="specdyn-momentum-"))
    cfg = harness.resolve_config(dict(harness.canned_experiments()["momentum_law"].desk))
    summary = harness.run(cfg, out)
    with (out / "momentum.csv").open() as fh:
        rows = tuple((float(r["beta_mom"]), float(r["n_eff"]), float(r["ratio"])) for r in csv.DictReader(fh))
    return summary, rows
