"""Experiment protocol: macro replications, convergence curves, summaries.

A comparison grid crosses estimator kinds with replication counts.  Every
cell runs M independent training macro-replications; macro h of every
cell uses the same root seed and macro index, so cells share random
streams (common random numbers) and differences between cells reflect the
estimators, not sampling noise.  Each iteration's post-update policy is
scored by fresh rollouts against the true transition model; curves report
the across-macro mean, standard error and a 95% confidence band.

Outputs are tidy CSV files (one curve file per cell plus a summary table)
whose bytes are a pure function of (scenario, config, seed).
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bioenv import ChromatographyEnv, Scenario, scenario_to_jsonable
from .core import Environment, Policy, rollout_batch, trajectory_return
from .trainer import TrainConfig, train

__all__ = [
    "CurveStats",
    "MacroResult",
    "SummaryRow",
    "aggregate_curves",
    "evaluate_policy",
    "run_comparison",
    "summarize_last_window",
    "write_curve_csv",
    "write_summary_csv",
]


def evaluate_policy(
    theta: np.ndarray,
    env: Environment,
    omega,
    policy: Policy,
    r_test: int,
    rng: np.random.Generator,
    gamma: float = 1.0,
) -> float:
    """Mean return of ``r_test`` rollouts under ``(policy(theta), omega)``."""
    if r_test < 1:
        raise ValueError("r_test must be >= 1")
    trajectories = rollout_batch(env, policy, theta, omega, r_test, rng)
    return float(np.mean([trajectory_return(t, gamma) for t in trajectories]))


@dataclass(frozen=True)
class CurveStats:
    """Per-iteration across-macro statistics."""

    mean: np.ndarray
    se: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


@dataclass(frozen=True)
class MacroResult:
    """Raw per-macro evaluation rewards of one grid cell."""

    estimator: str
    n_i: int
    rewards: np.ndarray  # (M, total_iterations)
    seed: int
    config_digest: str


@dataclass(frozen=True)
class SummaryRow:
    estimator: str
    n_i: int
    mean: float
    se: float


def aggregate_curves(rewards: np.ndarray) -> CurveStats:
    """Mean, standard error and 95% band across macro replications.

    ``rewards`` has one row per macro.  The standard error follows the
    across-replication formula ``sqrt(sum (r_h - rbar)^2) / sqrt(M(M-1))``
    and the band is ``mean +/- 1.96 * se``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 2 or rewards.shape[0] < 2:
        raise ValueError("need a (M, iterations) array with M >= 2")
    m = rewards.shape[0]
    mean = rewards.mean(axis=0)
    se = np.sqrt(np.sum((rewards - mean) ** 2, axis=0)) / np.sqrt(m * (m - 1))
    return CurveStats(mean=mean, se=se, lo=mean - 1.96 * se, hi=mean + 1.96 * se)


def summarize_last_window(
    curve: np.ndarray, window: int = 100, estimator: str = "", n_i: int = 0
) -> SummaryRow:
    """Mean and standard error of the final ``window`` curve values.

    The standard error treats the window as a sample:
    ``sqrt((1/(window-1)) sum (r - mean)^2) / sqrt(window)``; a window of
    1 therefore has no defined standard error and is an error.
    """
    curve = np.asarray(curve, dtype=np.float64)
    if window > curve.shape[0]:
        raise ValueError(f"window {window} exceeds curve length {curve.shape[0]}")
    if window < 2:
        raise ValueError("window must be >= 2 for the standard error to exist")
    tail = curve[-window:]
    mean = float(tail.mean())
    se = float(np.sqrt(np.sum((tail - mean) ** 2) / (window - 1)) / np.sqrt(window))
    return SummaryRow(estimator=estimator, n_i=n_i, mean=mean, se=se)


# --- comparison grid ----------------------------------------------------------


def _config_digest(scn: Scenario, cfg: TrainConfig, extra: dict) -> str:
    payload = {
        "scenario": scenario_to_jsonable(scn),
        "config": {k: v for k, v in cfg.__dict__.items()},
        **extra,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _run_macro_task(args) -> tuple[str, int, int, np.ndarray]:
    scn, cfg, macro, r_test = args
    env = ChromatographyEnv(scn)
    omega_true = scn.true_model

    def eval_fn(theta, policy, rng):
        return evaluate_policy(theta, env, omega_true, policy, r_test, rng, cfg.gamma)

    history = train(scn, cfg, macro=macro, eval_fn=eval_fn)
    return cfg.estimator, cfg.replications, macro, history.eval_curve()


def run_comparison(
    scn: Scenario,
    base_cfg: TrainConfig,
    estimator_kinds: list[str],
    n_i_grid: list[int],
    macros: int,
    seed: int,
    out_dir: str | Path | None = None,
    r_test: int = 200,
    window: int = 100,
    threads: int | None = None,
) -> tuple[list[SummaryRow], list[MacroResult], list[str]]:
    """Run the full (estimator x n_i) grid with common random numbers.

    Returns summary rows, raw per-cell results, and per-cell error
    strings (failed cells are isolated; the others complete).  When
    ``out_dir`` is given, writes ``curves/<estimator>_<n_i>.csv``,
    ``summary.csv`` and ``manifest.json`` there.
    """
    if macros < 2:
        raise ValueError("need at least 2 macro replications")
    digest = _config_digest(
        scn, base_cfg, {"macros": macros, "seed": seed, "r_test": r_test, "window": window}
    )
    tasks = []
    for kind in estimator_kinds:
        for n_i in n_i_grid:
            cfg = replace(base_cfg, estimator=kind, replications=n_i, seed=seed)
            for h in range(macros):
                tasks.append((scn, cfg, h, r_test))

    outcomes: dict[tuple[str, int, int], np.ndarray | Exception] = {}
    if threads is not None and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [(t, pool.submit(_run_macro_task, t)) for t in tasks]
            for (scn_, cfg_, h, _), fut in futures:
                try:
                    kind, n_i, macro, curve = fut.result()
                    outcomes[(kind, n_i, macro)] = curve
                except Exception as exc:  # isolate the failing cell
                    outcomes[(cfg_.estimator, cfg_.replications, h)] = exc
    else:
        for t in tasks:
            _, cfg_, h, _ = t
            try:
                kind, n_i, macro, curve = _run_macro_task(t)
                outcomes[(kind, n_i, macro)] = curve
            except Exception as exc:
                outcomes[(cfg_.estimator, cfg_.replications, h)] = exc

    rows: list[SummaryRow] = []
    results: list[MacroResult] = []
    errors: list[str] = []
    for kind in estimator_kinds:
        for n_i in n_i_grid:
            cell = [outcomes[(kind, n_i, h)] for h in range(macros)]
            failed = [c for c in cell if isinstance(c, Exception)]
            if failed:
                errors.append(f"{kind}/n_i={n_i}: {failed[0]!r}")
                continue
            rewards = np.stack(cell)
            results.append(
                MacroResult(estimator=kind, n_i=n_i, rewards=rewards, seed=seed, config_digest=digest)
            )
            stats = aggregate_curves(rewards)
            rows.append(summarize_last_window(stats.mean, window, estimator=kind, n_i=n_i))

    if out_dir is not None:
        _write_outputs(Path(out_dir), results, rows, errors, digest, seed, macros, r_test, window)
    return rows, results, errors


def write_curve_csv(stats: CurveStats, fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(["iteration", "mean", "se", "lo", "hi"])
    for k in range(stats.mean.shape[0]):
        writer.writerow(
            [k + 1, repr(stats.mean[k]), repr(stats.se[k]), repr(stats.lo[k]), repr(stats.hi[k])]
        )


def write_summary_csv(rows: list[SummaryRow], fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(["estimator", "n_i", "mean", "se"])
    for row in rows:
        writer.writerow([row.estimator, row.n_i, repr(row.mean), repr(row.se)])


def _write_outputs(
    out_dir: Path,
    results: list[MacroResult],
    rows: list[SummaryRow],
    errors: list[str],
    digest: str,
    seed: int,
    macros: int,
    r_test: int,
    window: int,
) -> None:
    curves_dir = out_dir / "curves"
    curves_dir.mkdir(parents=True, exist_ok=True)
    for result in results:
        stats = aggregate_curves(result.rewards)
        with open(curves_dir / f"{result.estimator}_{result.n_i}.csv", "w", newline="") as fh:
            write_curve_csv(stats, fh)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        write_summary_csv(rows, fh)
    manifest = {
        "config_digest": digest,
        "seed": seed,
        "macros": macros,
        "r_test": r_test,
        "window": window,
        "version": __version__,
        "errors": errors,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
