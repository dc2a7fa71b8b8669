"""The three benchmark experiments and their table/figure data.

* Gaussian scalar inference: N(1, 2) prior, Gaussian likelihood with
  variance 2 and observed value 0.1, posterior N(0.55, 1).
* Uniform-prior scalar inference: same likelihood against U[0, 1], posterior
  a truncated Gaussian on [0, 1].
* Lorenz-63 assimilation sweep comparing the transport particle filter with
  the ensemble square root filter over ensemble sizes and inflation factors.

All experiments are deterministic given their seeds; sweep cells are
independent and can run in parallel (see ``OTPF_THREADS`` in the CLI).
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtri

from .dynamics import linear_observation_model, lorenz63_field, propagate, synthesize_observations
from .ensemble_transform import Ensemble, et_transform
from .filters import FilterConfig, run_filter
from .inference import (
    GaussianPosterior,
    TruncatedGaussianPosterior,
    WeightedSamples,
    importance_weights_from_log,
    moment_summary,
)
from .transport import MarginalPair, cost_matrix, solve_transport, transition_from_coupling


__all__ = [
    "OBSERVED_VALUE",
    "LIKELIHOOD_VAR",
    "GAUSS_PRIOR_MEAN",
    "GAUSS_PRIOR_VAR",
    "MomentTable",
    "TransformMap",
    "SweepRow",
    "SweepResult",
    "deterministic_quantile_samples",
    "scalar_transform_analysis",
    "scalar_gaussian_experiment",
    "scalar_uniform_experiment",
    "gaussian_example_posterior",
    "uniform_example_posterior",
    "transform_map_export",
    "support_pattern_export",
    "lorenz_attractor_state",
    "make_lorenz_setup",
    "lorenz_sweep",
    "moment_table",
    "write_moment_table",
    "write_transform_map",
    "write_support_pattern",
    "write_sweep_result",
]

# Scalar benchmark setting: likelihood exp(-(y0 - x)^2 / 4), observed 0.1.
OBSERVED_VALUE = 0.1
LIKELIHOOD_VAR = 2.0
GAUSS_PRIOR_MEAN = 1.0
GAUSS_PRIOR_VAR = 2.0

# Lorenz-63 assimilation setting: all three components observed with error
# variance 8 every 0.12 time units; midpoint step 0.01.
LORENZ_DT = 0.01
LORENZ_DT_OBS = 0.12
LORENZ_OBS_VAR = 8.0
LORENZ_SPIN_UP = 1000.0


def deterministic_quantile_samples(M: int, prior: str = "uniform01",
                                   mean: float = 0.0, variance: float = 1.0) -> np.ndarray:
    """Sorted quantile samples x_i at levels u_i = 1/(2M) + (i-1)/M.

    ``prior`` is "uniform01" (x_i = u_i) or "gaussian" (x_i = mean +
    sqrt(variance) * Phi^-1(u_i)).
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    u = (np.arange(M) + 0.5) / M
    if prior == "uniform01":
        return u
    if prior == "gaussian":
        if variance <= 0:
            raise ValueError("variance must be positive")
        return mean + np.sqrt(variance) * ndtri(u)
    raise ValueError(f"unknown prior kind {prior!r}")


def scalar_transform_analysis(samples: np.ndarray):
    """Run the transform analysis on scalar prior samples.

    Returns (posterior ensemble, coupling, importance weights) for the
    shared likelihood exp(-(y0 - x)^2 / (2 * LIKELIHOOD_VAR)).
    """
    samples = np.asarray(samples, dtype=float)
    ensemble = Ensemble(states=samples[np.newaxis, :])
    log_lik = -((OBSERVED_VALUE - samples) ** 2) / (2.0 * LIKELIHOOD_VAR)
    weights = importance_weights_from_log(log_lik)
    uniform = np.full(samples.size, 1.0 / samples.size)
    coupling = solve_transport(
        cost_matrix(ensemble), MarginalPair(row=weights, col=uniform)
    )
    posterior = et_transform(ensemble, transition_from_coupling(coupling, uniform))
    return posterior, coupling, weights


def _posterior_moments(posterior: Ensemble) -> tuple[float, float, float, float]:
    # Benchmark-table convention: the variance column is the unbiased
    # (M-1)-normalized sample variance; third and fourth moments are plain
    # central moments.
    mean, var, third, fourth = moment_summary(
        WeightedSamples(values=posterior.states, weights=posterior.weight_vector)
    )
    m = posterior.size
    return (mean, var * m / (m - 1), third, fourth)


def scalar_gaussian_experiment(M: int) -> tuple[float, float, float, float]:
    """First four posterior moments from the transform on the Gaussian prior."""
    if M < 2:
        raise ValueError("M must be >= 2")
    samples = deterministic_quantile_samples(
        M, "gaussian", mean=GAUSS_PRIOR_MEAN, variance=GAUSS_PRIOR_VAR
    )
    posterior, _, _ = scalar_transform_analysis(samples)
    return _posterior_moments(posterior)


def scalar_uniform_experiment(M: int) -> tuple[float, float, float, float]:
    """First four posterior moments from the transform on the uniform prior."""
    if M < 2:
        raise ValueError("M must be >= 2")
    samples = deterministic_quantile_samples(M, "uniform01")
    posterior, _, _ = scalar_transform_analysis(samples)
    return _posterior_moments(posterior)


def gaussian_example_posterior() -> GaussianPosterior:
    """Exact posterior of the Gaussian scalar problem (conjugate update)."""
    precision = 1.0 / GAUSS_PRIOR_VAR + 1.0 / LIKELIHOOD_VAR
    variance = 1.0 / precision
    mean = variance * (GAUSS_PRIOR_MEAN / GAUSS_PRIOR_VAR + OBSERVED_VALUE / LIKELIHOOD_VAR)
    return GaussianPosterior(mean=mean, variance=variance)


def uniform_example_posterior() -> TruncatedGaussianPosterior:
    """Exact posterior of the uniform-prior problem: truncated Gaussian."""
    return TruncatedGaussianPosterior(center=OBSERVED_VALUE, scale2=LIKELIHOOD_VAR)


@dataclass(frozen=True)
class MomentTable:
    """Moment rows keyed by ensemble size."""

    rows: dict

    def __post_init__(self):
        for M, (mean, var, third, fourth) in self.rows.items():
            if var < 0 or fourth < 0:
                raise ValueError(f"invalid even moments in row M={M}")


def moment_table(M_values, experiment) -> MomentTable:
    return MomentTable(rows={int(M): experiment(int(M)) for M in M_values})


@dataclass(frozen=True)
class TransformMap:
    """Numerical transform pairs alongside the exact affine map."""

    prior: np.ndarray
    transformed: np.ndarray
    exact: np.ndarray


def transform_map_export(M: int) -> TransformMap:
    """Transform map of the Gaussian scalar problem against the exact one.

    The exact Gaussian-to-Gaussian map is affine: it sends the prior mean to
    the posterior mean with slope posterior_std / prior_std.
    """
    samples = deterministic_quantile_samples(
        M, "gaussian", mean=GAUSS_PRIOR_MEAN, variance=GAUSS_PRIOR_VAR
    )
    posterior, _, _ = scalar_transform_analysis(samples)
    target = gaussian_example_posterior()
    slope = np.sqrt(target.variance / GAUSS_PRIOR_VAR)
    exact = target.mean + slope * (samples - GAUSS_PRIOR_MEAN)
    return TransformMap(prior=samples, transformed=posterior.states[0], exact=exact)


def support_pattern_export(M: int):
    """Support of the optimal coupling for the Gaussian scalar problem.

    Returns (pairs, weights): sorted (i, j) indices with their transported
    masses.  Nondegenerate samples give exactly 2M-1 entries.
    """
    samples = deterministic_quantile_samples(
        M, "gaussian", mean=GAUSS_PRIOR_MEAN, variance=GAUSS_PRIOR_VAR
    )
    _, coupling, _ = scalar_transform_analysis(samples)
    pairs = coupling.support
    return pairs, [float(coupling.t[i, j]) for i, j in pairs]


@lru_cache(maxsize=None)
def lorenz_attractor_state(spin_up: float = LORENZ_SPIN_UP, dt: float = LORENZ_DT) -> tuple:
    """Reference start on the attractor: spin-up from (1, 1, 1)."""
    field = lorenz63_field()
    state = propagate(field, np.array([1.0, 1.0, 1.0]), spin_up, dt)
    return tuple(state)


def make_lorenz_setup():
    """Field and observation model of the assimilation benchmark."""
    field = lorenz63_field()
    model = linear_observation_model(
        np.eye(3), LORENZ_OBS_VAR * np.eye(3), LORENZ_DT_OBS
    )
    return field, model


def _synthesize_for_seed(seed: int, steps: int):
    field, model = make_lorenz_setup()
    x0 = np.array(lorenz_attractor_state())
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 101])))
    return synthesize_observations(field, model, x0, steps, rng, LORENZ_DT)


def _sweep_cell(args):
    """One (method, M, inflation, seed) filter run; picklable for pools."""
    method, M, inflation, steps, seed = args
    field, model = make_lorenz_setup()
    data = _synthesize_for_seed(seed, steps)
    config = FilterConfig(
        ensemble_size=M,
        inflation=inflation,
        model=model,
        field=field,
        dt=LORENZ_DT,
        steps=steps,
        seed=seed,
    )
    diagnostics = run_filter(config, method, data)
    return (method, M, inflation, seed), (diagnostics.time_avg_rmse, diagnostics.diverged)


@dataclass(frozen=True)
class SweepRow:
    method: str
    ensemble_size: int
    rmse: float
    inflation: float
    diverged: bool


@dataclass(frozen=True)
class SweepResult:
    """Best-inflation RMSE per (method, ensemble size)."""

    rows: list

    def cell(self, method: str, M: int) -> SweepRow:
        for row in self.rows:
            if row.method == method and row.ensemble_size == M:
                return row
        raise KeyError((method, M))


def lorenz_sweep(M_values, inflation_grid, steps: int, seeds,
                 methods=("ETPF", "ESRF"), threads: int = 1) -> SweepResult:
    """Grid-search inflation per (method, M) on shared synthetic data.

    For each cell the inflation factor minimizing the seed-averaged
    time-averaged RMSE among divergence-free factors is selected; a cell
    with no divergence-free factor is marked diverged.  Results are merged
    in deterministic key order regardless of ``threads``.
    """
    M_values = [int(M) for M in M_values]
    inflation_grid = [float(lam) for lam in inflation_grid]
    seeds = [int(s) for s in seeds]
    tasks = [
        (method, M, lam, steps, seed)
        for method in methods
        for M in M_values
        for lam in inflation_grid
        for seed in seeds
    ]
    results = {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for key, value in pool.map(_sweep_cell, tasks, chunksize=1):
                results[key] = value
    else:
        for task in tasks:
            key, value = _sweep_cell(task)
            results[key] = value

    rows = []
    for method in methods:
        for M in M_values:
            best = None  # (rmse, lam) among divergence-free factors
            fallback = None  # (n_diverged, rmse, lam) otherwise
            for lam in inflation_grid:
                cells = [results[(method, M, lam, seed)] for seed in seeds]
                rmses = [rmse for rmse, div in cells if not div]
                n_div = sum(div for _, div in cells)
                mean_rmse = float(np.mean(rmses)) if rmses else float("nan")
                if n_div == 0 and (best is None or mean_rmse < best[0]):
                    best = (mean_rmse, lam)
                key = (n_div, mean_rmse if rmses else np.inf, lam)
                if fallback is None or key < fallback:
                    fallback = key
            if best is not None:
                rows.append(SweepRow(method, M, best[0], best[1], False))
            else:
                rmse = fallback[1] if np.isfinite(fallback[1]) else float("nan")
                rows.append(SweepRow(method, M, rmse, fallback[2], True))
    return SweepResult(rows=rows)


def _open_csv(path):
    return open(path, "w", newline="")


def _writer(fh):
    # LF line endings on every platform
    return csv.writer(fh, lineterminator="\n")


def write_moment_table(path, table: MomentTable) -> None:
    """Four-decimal CSV with one row per ensemble size."""
    with _open_csv(path) as fh:
        writer = _writer(fh)
        writer.writerow(["M", "mean", "variance", "third_central", "fourth_central"])
        for M in sorted(table.rows):
            writer.writerow([M] + [f"{x:.4f}" for x in table.rows[M]])


def write_transform_map(path, tmap: TransformMap) -> None:
    with _open_csv(path) as fh:
        writer = _writer(fh)
        writer.writerow(["x_prior", "x_transform", "x_exact"])
        for xf, xa, xe in zip(tmap.prior, tmap.transformed, tmap.exact):
            writer.writerow([f"{xf:.12g}", f"{xa:.12g}", f"{xe:.12g}"])


def write_support_pattern(path, pairs, weights) -> None:
    with _open_csv(path) as fh:
        writer = _writer(fh)
        writer.writerow(["i", "j", "weight"])
        for (i, j), w in zip(pairs, weights):
            writer.writerow([i, j, f"{w:.12g}"])


def write_sweep_result(path, result: SweepResult) -> None:
    with _open_csv(path) as fh:
        writer = _writer(fh)
        writer.writerow(["method", "M", "rmse", "inflation", "diverged"])
        for row in result.rows:
            writer.writerow(
                [
                    row.method,
                    row.ensemble_size,
                    f"{row.rmse:.6f}",
                    f"{row.inflation:g}",
                    int(row.diverged),
                ]
            )
