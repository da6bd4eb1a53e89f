"""Experiment runner: configuration files, sweeps, artifacts and canned recipes.

Configuration is a flat text file of ``key = value`` lines.  Values are typed
(int, float, bool, string) and any sweep axis may be given as a list
``[a, b, c]``.  ``#`` starts a comment.  Example::

    experiment = tte
    algorithm  = [sign_svd, sign_sgd]
    n          = 1024
    batch      = 2048
    alpha      = 1.5
    beta       = [0.7, 1.5, 3.0]
    epsilon    = [0.0625, 0.03125, 0.015625]

Every run writes ``manifest.json`` (the resolved configuration, seeds and a
code fingerprint) next to its CSV outputs.  Passing that manifest back through
``--config`` replays the run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import dynamics, kernels, model, optim, rmt

OUTPUT_ROOT_ENV = "SPECDYN_OUT"
EXPERIMENTS = ("simulate", "theory", "compare", "density", "tte", "phase", "momentum", "validate")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID_CONFIG = 2
EXIT_NUMERICAL = 3

TRAJECTORY_COLUMNS = ("step", "risk_mean", "risk_lo", "risk_hi", "theory_risk")
TTE_COLUMNS = (
    "algorithm",
    "alpha",
    "beta",
    "N",
    "B",
    "epsilon",
    "T",
    "eta_star",
    "t_hit",
    "lower_bound",
    "upper_bound",
    "predicted_exponent",
    "phase",
)
DENSITY_COLUMNS = ("x", "theory_density", "empirical_density")
MOMENTUM_COLUMNS = ("beta_mom", "n_eff", "plateau", "law", "ratio")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Key:
    kind: type
    default: Any
    doc: str
    sweep: bool = False


KEYS: dict[str, Key] = {
    "experiment": Key(str, None, "one of " + ", ".join(EXPERIMENTS)),
    "algorithm": Key(str, "sign_svd", "sgd | sign_sgd | sign_svd | muon", sweep=True),
    "n": Key(int, 128, "output dimension N", sweep=True),
    "n_in": Key(int, 0, "input dimension; 0 means equal to n"),
    "batch": Key(int, 128, "minibatch size B", sweep=True),
    "alpha": Key(float, 0.0, "output power-law exponent; 0 is isotropic", sweep=True),
    "alpha_in": Key(float, 0.0, "input power-law exponent; 0 is isotropic"),
    "beta": Key(float, 0.0, "initial row-risk exponent", sweep=True),
    "rotate_output": Key(bool, True, "Haar-rotate the output eigenbasis"),
    "drift": Key(str, "aggregate", "SignSVD drift kernel: aggregate | spectral"),
    "schedule": Key(str, "eta_star", "eta_star | greedy | constant"),
    "lr": Key(float, 0.0, "learning rate for schedule = constant"),
    "epsilon": Key(float, 2.0**-8, "target limit loss for eta_star", sweep=True),
    "T": Key(float, 4.0, "hit level multiplier for time-to-epsilon"),
    "c0": Key(float, 2.0, "Volterra bound parameter; 0 disables bounds"),
    "momentum": Key(float, 0.0, "Muon momentum coefficient", sweep=True),
    "ns_iterations": Key(int, 5, "Newton-Schulz iterations for muon"),
    "seed": Key(int, 0, "root seed"),
    "trials": Key(int, 8, "Monte Carlo trials"),
    "steps": Key(int, 1000, "steps for trajectory experiments; step cap for tte"),
    "threads": Key(int, 1, "worker processes for independent sweep cells"),
    "samples": Key(int, 50, "gradient samples for density"),
    "eta_im": Key(float, 1e-3, "imaginary part of z for density"),
    "bins": Key(int, 40, "uniform bins for density"),
    "error": Key(str, "whitened", "error matrix for density: whitened | initial"),
    "eps_probe": Key(float, 0.25, "plateau level targeted by the momentum probe rate"),
    "warmup": Key(int, 2000, "momentum calibration warmup steps"),
    "window": Key(int, 2000, "momentum calibration plateau window"),
}

SWEEP_AXES = tuple(k for k, v in KEYS.items() if v.sweep)


def _parse_scalar(text: str, kind: type, key: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text.strip("'\"")
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def parse_config(text: str) -> dict[str, Any]:
    """Parse the flat key = value format into a dict of typed values."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        spec = KEYS[key]
        if value.startswith("["):
            if not value.endswith("]"):
                raise ConfigError(f"line {lineno}: unterminated list")
            if not spec.sweep:
                raise ConfigError(f"line {lineno}: {key} is not a sweep axis")
            items = [v for v in value[1:-1].split(",") if v.strip()]
            out[key] = [_parse_scalar(v, spec.kind, key) for v in items]
        else:
            out[key] = _parse_scalar(value, spec.kind, key)
    return out


def resolve_config(raw: dict[str, Any], overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Fill defaults, apply overrides and validate value ranges."""
    cfg = {k: v.default for k, v in KEYS.items()}
    cfg.update(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    if cfg["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {cfg['experiment']!r}")
    for key in SWEEP_AXES:
        vals = cfg[key] if isinstance(cfg[key], list) else [cfg[key]]
        if key == "algorithm" and any(a not in optim.ALGORITHMS for a in vals):
            raise ConfigError(f"algorithm must be in {optim.ALGORITHMS}")
        if key in ("n", "batch") and any(v < 1 for v in vals):
            raise ConfigError(f"{key} must be >= 1")
        if key == "epsilon" and any(v <= 0 for v in vals):
            raise ConfigError("epsilon must be positive")
        if key == "momentum" and any(not 0 <= v < 1 for v in vals):
            raise ConfigError("momentum must lie in [0, 1)")
        if key in ("alpha", "beta") and any(v < 0 for v in vals):
            raise ConfigError(f"{key} must be nonnegative")
    if cfg["schedule"] not in ("eta_star", "greedy", "constant"):
        raise ConfigError("schedule must be eta_star, greedy or constant")
    if cfg["error"] not in ("whitened", "initial"):
        raise ConfigError("error must be whitened or initial")
    if cfg["drift"] not in ("aggregate", "spectral"):
        raise ConfigError("drift must be aggregate or spectral")
    for key in ("trials", "steps", "threads", "samples", "bins"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    if cfg["T"] <= 1:
        raise ConfigError("T must exceed 1")
    if not 0 <= cfg["seed"] < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return cfg


def sweep_cells(cfg: dict[str, Any]) -> list[dict[str, Any]]:
    """Cartesian product over list-valued sweep axes (an empty list counts as unset)."""
    axes = []
    for key in SWEEP_AXES:
        v = cfg[key]
        if isinstance(v, list):
            axes.append([KEYS[key].default] if not v else v)
        else:
            axes.append([v])
    cells = []
    for combo in itertools.product(*axes):
        cell = dict(cfg)
        cell.update(zip(SWEEP_AXES, combo))
        cells.append(cell)
    return cells


# ---------------------------------------------------------------------------
# problem construction shared by experiments


def derive_seed(root: int, *keys: int | str) -> int:
    return int(model.stream(root, *keys).integers(0, 2**63))


def problem_of(cell: dict[str, Any], seed: int) -> model.ProblemSpec:
    n, n_in = cell["n"], cell["n_in"] or cell["n"]
    kind_out = "power_law" if cell["alpha"] > 0 else "isotropic"
    kind_in = "power_law" if cell["alpha_in"] > 0 else "isotropic"
    spec = model.ProblemSpec(
        n_out=n,
        n_in=n_in,
        batch=cell["batch"],
        spectrum_out=model.make_spectrum(kind_out, n, cell["alpha"]),
        spectrum_in=model.make_spectrum(kind_in, n_in, cell["alpha_in"]),
        beta_init=cell["beta"],
        rotate_output=cell["rotate_output"],
        seed=seed,
    )
    try:
        spec.validate()
    except (model.InvalidSpec, model.InvalidDimension) as exc:
        raise ConfigError(str(exc)) from None
    return spec


def theory_algorithm(algorithm: str) -> str | None:
    """Kernel family that models an optimizer (Muon is modelled by SignSVD)."""
    return {"sign_svd": "sign_svd", "muon": "sign_svd", "sign_sgd": "sign_sgd"}.get(algorithm)


def table_of(cell: dict[str, Any], algorithm: str | None = None) -> kernels.KernelTable:
    alg = theory_algorithm(algorithm or cell["algorithm"])
    if alg is None:
        raise ConfigError(f"no kernel theory for algorithm {cell['algorithm']!r}")
    if cell["alpha_in"] > 0 or (cell["n_in"] and cell["n_in"] != cell["n"]):
        raise ConfigError("kernel tables need a square problem with isotropic inputs")
    kind = "power_law" if cell["alpha"] > 0 else "isotropic"
    spectrum = model.make_spectrum(kind, cell["n"], cell["alpha"])
    return kernels.kernel_table(alg, spectrum, cell["batch"], drift_method=cell["drift"])


def schedule_of(cell: dict[str, Any], table: kernels.KernelTable | None):
    if cell["schedule"] == "constant":
        return optim.ConstantRate(cell["lr"])
    if table is None:
        raise ConfigError(f"schedule {cell['schedule']} needs kernel theory for the algorithm")
    if cell["schedule"] == "greedy":
        try:
            return dynamics.greedy_rate(table)
        except kernels.DomainError as exc:
            raise ConfigError(str(exc)) from None
    return optim.ConstantRate(dynamics.eta_star(table, cell["epsilon"]))


# ---------------------------------------------------------------------------
# experiments; each returns {"files": {name: (columns, rows)}, "checks": {...}}


def _trajectory_cell(cell: dict[str, Any], seed: int, *, simulate: bool, theory: bool) -> dict:
    problem = problem_of(cell, seed)
    table = table_of(cell) if theory or cell["schedule"] != "constant" else None
    sched = schedule_of(cell, table)
    steps = cell["steps"]
    rows_theory = np.full(steps + 1, np.nan)
    if theory:
        r0 = dynamics.initial_row_risks(cell["n"], cell["beta"])
        th = dynamics.evolve(table, r0, sched if not isinstance(sched, optim.ConstantRate) else sched.eta, steps)
        rows_theory[: th.risk.size] = th.risk
    mean = lo = hi = np.full(steps + 1, np.nan)
    if simulate:
        opt = optim.OptimizerSpec(cell["algorithm"], ns_iterations=cell["ns_iterations"], momentum=cell["momentum"])
        try:
            opt.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        traj = optim.run_trajectory(problem, opt, steps, cell["trials"], sched)
        mean, lo, hi = traj.risk_mean, traj.risk_lo, traj.risk_hi
    rows = [(t, mean[t], lo[t], hi[t], rows_theory[t]) for t in range(steps + 1)]
    checks = {}
    if theory:
        after = rows_theory[1:]
        after = after[np.isfinite(after)]
        checks["theory_monotone_after_first_step"] = bool(np.all(np.diff(after) <= 0))
    if simulate and theory:
        first = rows_theory >= rows_theory[0] / 10
        rel = np.abs(mean - rows_theory) / rows_theory
        checks["within_5pct_fraction_first_decade"] = float(np.mean(rel[first] <= 0.05))
    return {"files": {"trajectory.csv": (TRAJECTORY_COLUMNS, rows)}, "checks": checks}


def _density_cell(cell: dict[str, Any], seed: int) -> dict:
    problem = problem_of(cell, seed)
    inst = model.sample_instance(problem)
    delta = whitened_error(inst, model.stream(seed, "density", "error")) if cell["error"] == "whitened" else None
    emp = rmt.sample_gradient_spectrum(inst, cell["samples"], model.stream(seed, "density", "samples"), delta=delta)
    comparison = compare_density(problem, emp, cell["eta_im"], cell["bins"])
    rows = list(zip(comparison.centers, *comparison.densities()))
    return {"files": {"density.csv": (DENSITY_COLUMNS, rows)}, "checks": {"l1": comparison.l1}}


def _tte_rows(cell: dict[str, Any], epsilons: list[float], algorithms: list[str]) -> tuple[list, dict]:
    rows = []
    checks = {}
    r0 = dynamics.initial_row_risks(cell["n"], cell["beta"])
    for alg in algorithms:
        table = table_of(cell, alg)
        times = []
        for eps in epsilons:
            try:
                rec = dynamics.time_to_eps(table, r0, eps, cell["T"], beta=cell["beta"], max_steps=cell["steps"])
            except kernels.DomainError as exc:
                raise ConfigError(str(exc)) from None
            lower = upper = float("nan")
            if cell["c0"] > 0:
                try:
                    vb = dynamics.volterra_bounds(table, r0, eps, cell["c0"], cell["T"])
                    lower, upper = vb.lower, vb.upper
                except kernels.DomainError:
                    pass
            rows.append(
                (
                    alg,
                    cell["alpha"],
                    cell["beta"],
                    cell["n"],
                    cell["batch"],
                    eps,
                    cell["T"],
                    rec.eta_star,
                    "" if rec.t_hit is None else rec.t_hit,
                    lower,
                    upper,
                    rec.predicted_exponent,
                    rec.phase,
                )
            )
            times.append(rec.t_hit)
        if len(epsilons) >= 2 and all(t is not None and t > 0 for t in times):
            asym = dynamics.tte_asymptotic(alg, cell["alpha"], cell["beta"], cell["n"], cell["batch"], epsilons[0])
            fit = dynamics.fit_exponent(epsilons, times, log_corrected=asym.log_corrected)
            checks[f"{alg}:alpha={cell['alpha']}:beta={cell['beta']}:fitted_exponent"] = fit
    return rows, checks


def _tte_cell(cell: dict[str, Any], epsilons: list[float], algorithms: list[str]) -> dict:
    rows, checks = _tte_rows(cell, epsilons, algorithms)
    return {"files": {"tte.csv": (TTE_COLUMNS, rows)}, "checks": checks}


def _momentum_cell(cell: dict[str, Any], seed: int, betas: list[float]) -> dict:
    problem = problem_of(cell, seed)
    table = table_of(dict(cell, algorithm="sign_svd"))
    eta = dynamics.eta_star(table, cell["eps_probe"])
    rows = []
    base = None
    for b in betas:
        opt = optim.OptimizerSpec("muon", ns_iterations=cell["ns_iterations"], momentum=b)
        cal = dynamics.calibrate_neff(problem, opt, eta, cell["warmup"], cell["window"], trials=cell["trials"])
        law = dynamics.momentum_law(b)
        if base is None:
            base = cal.n_eff
        rows.append((b, cal.n_eff, cal.plateau, law, cal.n_eff / (base * law)))
    # rho(0) = 1 by construction, so flatness is judged over the nonzero momenta
    ratios = [r[-1] for r in rows if r[0] > 0] or [1.0]
    spread = max(ratios) / min(ratios) - 1.0
    return {"files": {"momentum.csv": (MOMENTUM_COLUMNS, rows)}, "checks": {"ratio_spread": spread}}


# ---------------------------------------------------------------------------
# density comparison helpers


def whitened_error(inst: model.ProblemInstance, rng: np.random.Generator) -> np.ndarray:
    """Delta = Sigma_out^(-1/2) Q Sigma_in^(-1/2) for a Haar Q.

    The whitened error spreads the risk evenly over all directions, so no
    single feature coordinate carries an O(1) share of the residual.
    """
    spec = inst.spec
    if spec.n_out != spec.n_in:
        raise ConfigError("whitened error needs a square problem")
    q = model.haar_orthogonal(spec.n_out, rng)
    left = (inst.u_basis / np.sqrt(inst.mu)) @ inst.u_basis.T
    return left @ q / np.sqrt(inst.lam)[None, :]


@dataclass(frozen=True)
class DensityComparison:
    edges: np.ndarray
    theory_mass: np.ndarray
    empirical_mass: np.ndarray
    l1: float

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def densities(self) -> tuple[np.ndarray, np.ndarray]:
        width = np.diff(self.edges)
        return (
            self.theory_mass / self.theory_mass.sum() / width,
            self.empirical_mass / self.empirical_mass.sum() / width,
        )


def compare_density(
    problem: model.ProblemSpec, emp: rmt.EmpiricalSpectrum, eta_im: float, bins: int
) -> DensityComparison:
    """Bin theory and empirical sigma-densities on uniform bins over [0, 1.05 x top eigenvalue].

    Both sides carry the same Lorentzian smoothing of width eta_im. When G is
    rank deficient the atom at zero is left out of both sides.
    """
    top = float(emp.eigenvalues.max())
    edges = np.linspace(0.0, 1.05 * top, bins + 1)
    g_out, g_in = problem.gamma, problem.gamma_in
    s_out, s_in = problem.spectrum_out, problem.spectrum_in
    rank_deficient = problem.batch < min(problem.n_out, problem.n_in) or problem.n_in < problem.n_out
    atom = rmt.sigma_atom(s_out, s_in, g_out, g_in) if rank_deficient else 0.0
    theory = rmt.theory_bin_mass(s_out, s_in, g_out, g_in, edges, eta_im, atom=atom)
    empirical = emp.smoothed_bin_mass(edges, eta_im)
    return DensityComparison(edges, theory, empirical, rmt.binned_l1(theory, empirical))


# ---------------------------------------------------------------------------
# validate: the invariant suite


def invariant_checks(seed: int = 0) -> dict[str, bool]:
    """Quick property checks at small sizes; every value must be True."""
    rng = model.stream(seed, "validate")
    out: dict[str, bool] = {}
    g = rng.standard_normal((24, 16))
    p = optim.sign_svd(g)
    out["sign_svd_idempotent"] = bool(np.allclose(optim.sign_svd(p), p, atol=1e-10))
    out["sign_svd_scale_invariant"] = bool(np.allclose(optim.sign_svd(3.7 * g), p, atol=1e-10))
    low = rng.standard_normal((24, 5)) @ rng.standard_normal((5, 16))
    proj = optim.sign_svd(low)
    out["projection_trace_is_rank"] = bool(abs(np.trace(proj @ proj.T) - 5) < 1e-8)
    s = optim.sign_entrywise(np.where(rng.random((8, 8)) < 0.2, 0.0, rng.standard_normal((8, 8))))
    out["sign_sgd_entries"] = bool(np.all(np.isin(s, (-1.0, 0.0, 1.0))))
    mu = model.make_spectrum("power_law", 60, 1.0)
    z = np.sort(rng.uniform(0.01, 3.0, 20))[::-1] + 1e-3j
    sol = rmt.solve_fixed_point_path(mu, None, 0.8, 0.8, z)
    out["herglotz_positive"] = bool(np.all(sol.sigma.imag > 0))
    tab = kernels.kernel_table("sign_svd", mu, 120)
    eta = 0.05
    traj = dynamics.evolve(tab, np.ones(60), eta, 20000)
    out["plateau_law"] = bool(abs(traj.risk[-1] / dynamics.limit_loss(tab, eta) - 1) < 0.02)
    problem = model.square_problem(16, 16, seed=seed)
    opt = optim.OptimizerSpec("sign_svd")
    a = optim.run_trajectory(problem, opt, 20, 2, optim.ConstantRate(0.01))
    b = optim.run_trajectory(problem, opt, 20, 2, optim.ConstantRate(0.01))
    out["replay_bit_identical"] = bool(np.array_equal(a.risks, b.risks))
    return out


# ---------------------------------------------------------------------------
# running


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    write_atomic(path, buf.getvalue())


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def code_version() -> str:
    """Package version plus a hash of the module sources."""
    from . import __version__

    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _run_cell(job):
    kind, cell, seed, extra = job
    if kind in ("simulate", "theory", "compare"):
        return _trajectory_cell(cell, seed, simulate=kind != "theory", theory=kind != "simulate")
    if kind == "density":
        return _density_cell(cell, seed)
    if kind in ("tte", "phase"):
        return _tte_cell(cell, *extra)
    if kind == "momentum":
        return _momentum_cell(cell, seed, *extra)
    raise ConfigError(f"unknown experiment {kind!r}")


def _list(cfg, key):
    v = cfg[key]
    if isinstance(v, list):
        return v or [KEYS[key].default]
    return [v]


def _plan(cfg: dict[str, Any], seed: int) -> list[tuple]:
    kind = cfg["experiment"]
    if kind in ("tte", "phase"):
        epsilons = sorted(_list(cfg, "epsilon"), reverse=True)
        algorithms = _list(cfg, "algorithm")
        if kind == "phase" and not isinstance(cfg["algorithm"], list):
            algorithms = ["sign_svd", "sign_sgd"]
        base = dict(cfg, epsilon=epsilons, algorithm=algorithms)
        cells = sweep_cells(dict(base, epsilon=epsilons[0], algorithm=algorithms[0]))
        return [(kind, c, seed, (epsilons, algorithms)) for c in cells]
    if kind == "momentum":
        betas = _list(cfg, "momentum")
        cells = sweep_cells(dict(cfg, momentum=0.0))
        return [(kind, c, seed, (betas,)) for c in cells]
    return [(kind, c, seed, ()) for c in sweep_cells(cfg)]


def run(cfg: dict[str, Any], out_dir: Path) -> dict[str, Any]:
    """Execute a resolved configuration and write all artifacts under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = cfg["experiment"]
    seed = derive_seed(cfg["seed"], kind)
    started = time.time()
    manifest = {
        "config": cfg,
        "seeds": {"root": cfg["seed"], "experiment": seed},
        "code_version": code_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    if kind == "validate":
        checks = invariant_checks(cfg["seed"])
        summary = {"experiment": kind, "checks": checks, "passed": all(checks.values())}
        summary["wall_clock_s"] = round(time.time() - started, 3)
        write_atomic(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return summary

    jobs = _plan(cfg, seed)
    if cfg["threads"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg["threads"]) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]

    # single-threaded finalizer: merge self-describing tables, split the rest per cell
    merged: dict[str, tuple] = {}
    cell_rows = []
    for k, ((_, cell, _, _), res) in enumerate(zip(jobs, results)):
        cell_rows.append([k] + [_fmt(cell[a]) for a in SWEEP_AXES])
        for name, (cols, rows) in res["files"].items():
            if name in ("tte.csv", "momentum.csv") or len(jobs) == 1:
                merged.setdefault(name, (cols, []))[1].extend(rows)
            else:
                write_csv(out_dir / "cells" / f"cell-{k:03d}" / name, cols, rows)
    for name, (cols, rows) in merged.items():
        write_csv(out_dir / name, cols, rows)
    if len(jobs) > 1:
        write_csv(out_dir / "cells.csv", ("cell",) + SWEEP_AXES, cell_rows)
    checks = {f"cell-{k:03d}": r["checks"] for k, r in enumerate(results)} if len(jobs) > 1 else results[0]["checks"]
    summary = {"experiment": kind, "cells": len(jobs), "checks": checks, "passed": _passed(kind, results)}
    summary["wall_clock_s"] = round(time.time() - started, 3)
    write_atomic(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _passed(kind: str, results: list[dict]) -> bool:
    ok = True
    for r in results:
        c = r["checks"]
        if "theory_monotone_after_first_step" in c:
            ok &= c["theory_monotone_after_first_step"]
        if "within_5pct_fraction_first_decade" in c:
            ok &= c["within_5pct_fraction_first_decade"] >= 0.9
        if "l1" in c:
            ok &= c["l1"] < 0.05
        if "ratio_spread" in c:
            ok &= c["ratio_spread"] <= 0.07
    return bool(ok)


# ---------------------------------------------------------------------------
# canned experiments


@dataclass(frozen=True)
class Recipe:
    name: str
    reproduces: str
    desk: dict[str, Any]
    full: dict[str, Any]
    scale_note: str
    desk_wall_clock_s: float


def _eps_grid(hi_exp: int, lo_exp: int) -> list[float]:
    return [2.0**-k for k in range(hi_exp, lo_exp + 1)]


def canned_experiments() -> dict[str, Recipe]:
    """Named one-command reproductions; wall clocks are single-core desk-scale estimates."""
    recipes = [
        Recipe(
            "muon_vs_signsvd",
            "Muon (NS-5) risk curves against SignSVD theory, power-law phase A",
            dict(experiment="compare", algorithm="muon", n=256, batch=512, alpha=1.5, beta=0.7,
                 drift="spectral", epsilon=2.0**-11, steps=600, trials=16),
            dict(experiment="compare", algorithm="muon", n=1024, batch=2048, alpha=1.5, beta=0.7,
                 drift="spectral", epsilon=2.0**-11, steps=2000, trials=16),
            "N reduced 4x (1024 -> 256) at fixed gamma = 0.5",
            200.0,
        ),
        Recipe(
            "gradient_density",
            "fixed-point density of H against 50 sampled minibatch gradients, gamma in {2, 1, 1/2}",
            dict(experiment="density", n=400, batch=[200, 400, 800], alpha=0.5, alpha_in=0.5, beta=1.0,
                 error="whitened", samples=50),
            dict(experiment="density", n=400, batch=[200, 400, 800], alpha=0.5, alpha_in=0.5, beta=1.0,
                 error="whitened", samples=50),
            "full scale (N = 400)",
            60.0,
        ),
        Recipe(
            "isotropic_greedy",
            "isotropic SignSVD and SignSGD at the greedy rate, 32 runs",
            dict(experiment="compare", algorithm=["sign_svd", "sign_sgd"], n=128, batch=128,
                 schedule="greedy", steps=800, trials=32),
            dict(experiment="compare", algorithm=["sign_svd", "sign_sgd"], n=[128, 256, 512], batch=[128, 256, 512],
                 schedule="greedy", steps=3000, trials=32),
            "N = 128 only (full sweep reaches N = 512; cost grows like N^4 per decade)",
            90.0,
        ),
        Recipe(
            "phase_diagram",
            "phase labels and fitted exponents on the (alpha, beta) grid",
            dict(experiment="phase", n=1024, batch=2048, alpha=1.5, beta=[0.7, 1.5, 3.0],
                 epsilon=_eps_grid(4, 14), steps=50_000_000),
            dict(experiment="phase", n=1024, batch=2048, alpha=[0.5, 1.0, 1.5, 2.5], beta=[0.3, 0.7, 1.5, 3.0, 4.0],
                 epsilon=_eps_grid(4, 14), steps=50_000_000),
            "three cells instead of the full grid",
            5.0,
        ),
        Recipe(
            "time_to_eps",
            "deterministic t_4eps sweeps over eps in [2^-14, 2^-4] with Volterra bounds",
            dict(experiment="tte", algorithm=["sign_svd", "sign_sgd"], n=1024, batch=2048, alpha=[0.0, 1.5],
                 beta=[0.7, 1.5, 3.0], epsilon=_eps_grid(4, 14), steps=50_000_000),
            dict(experiment="tte", algorithm=["sign_svd", "sign_sgd"], n=1024, batch=2048, alpha=[0.0, 1.5],
                 beta=[0.7, 1.5, 3.0], epsilon=_eps_grid(4, 14), steps=50_000_000),
            "full scale",
            120.0,
        ),
        Recipe(
            "momentum_law",
            "calibrated N_eff of Muon with momentum against sqrt((1+b)/(1-b))",
            dict(experiment="momentum", n=256, batch=512, alpha=1.5, beta=0.7, momentum=[0.0, 0.9, 0.95, 0.99],
                 drift="spectral", trials=4, warmup=2000, window=2000),
            dict(experiment="momentum", n=1024, batch=2048, alpha=1.5, beta=0.7, momentum=[0.0, 0.9, 0.95, 0.99],
                 drift="spectral", trials=16, warmup=4000, window=4000),
            "N reduced 4x (1024 -> 256) at fixed gamma = 0.5",
            1500.0,
        ),
        Recipe(
            "validate",
            "invariant suite",
            dict(experiment="validate"),
            dict(experiment="validate"),
            "no scaling",
            5.0,
        ),
    ]
    return {r.name: r for r in recipes}


# ---------------------------------------------------------------------------
# command line


def _error_report(kind: str, message: str, **extra) -> str:
    return json.dumps({"error": kind, "message": message, **extra}, sort_keys=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specdyn", description="Spectral optimizer risk dynamics experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key = value file, or a manifest.json to replay")
        p.add_argument("--recipe", help="start from a canned experiment")
        p.add_argument("--full-scale", action="store_true", help="use the recipe's full-scale configuration")
        p.add_argument("--out", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--trials", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--threads", type=int)
    sub.add_parser("recipes", help="list canned experiments")
    return parser


def load_config_file(path: Path) -> dict[str, Any]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad manifest: {exc}") from None
        cfg = data.get("config", data)
        unknown = set(cfg) - set(KEYS)
        if unknown:
            raise ConfigError(f"unknown keys in manifest: {sorted(unknown)}")
        return cfg
    return parse_config(text)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "recipes":
        for r in canned_experiments().values():
            print(f"{r.name:24s} {r.desk['experiment']:9s} ~{r.desk_wall_clock_s:>6.0f}s  {r.reproduces}")
        return EXIT_OK

    out_dir = None
    try:
        raw: dict[str, Any] = {}
        if args.recipe:
            recipes = canned_experiments()
            if args.recipe not in recipes:
                raise ConfigError(f"unknown recipe {args.recipe!r}")
            raw.update(recipes[args.recipe].full if args.full_scale else recipes[args.recipe].desk)
        if args.config:
            raw.update(load_config_file(args.config))
        if raw.get("experiment", args.command) != args.command:
            raise ConfigError(f"config is for {raw['experiment']!r}, not {args.command!r}")
        raw["experiment"] = args.command
        cfg = resolve_config(
            raw, {"seed": args.seed, "trials": args.trials, "steps": args.steps, "threads": args.threads}
        )
        out_dir = args.out or Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / (
            f"{args.command}-" + hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:10]
        )
        summary = run(cfg, out_dir)
    except ConfigError as exc:
        report = _error_report("invalid_config", str(exc))
        print(report, file=sys.stderr)
        if out_dir is not None:
            write_atomic(out_dir / "error.json", report + "\n")
        return EXIT_INVALID_CONFIG
    except (rmt.FixedPointError, rmt.HalfPlaneError, dynamics.CalibrationError, kernels.DomainError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        extra = {}
        if isinstance(exc, rmt.FixedPointError):
            extra = {"residual": exc.residual, "index": exc.index}
        report = _error_report("numerical_failure", str(exc), module=module, **extra)
        print(report, file=sys.stderr)
        if out_dir is not None:
            write_atomic(out_dir / "error.json", report + "\n")
        return EXIT_NUMERICAL
    print(json.dumps({"out": str(out_dir), "passed": summary["passed"]}))
    if args.command == "validate" and not summary["passed"]:
        return EXIT_CHECK_FAILED
    return EXIT_OK
