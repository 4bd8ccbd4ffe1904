# Synthetic-data scenarios, the ER/GR matrix-rank baselines, and the
# benchmark driver producing rank-recovery and held-out MSE reports.

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .distributions import RngHandle, as_generator, sample_invgamma
from .engine import GAUSSIAN, PROBIT, FitConfig, run_chain
from .tensors import DenseTensor, matricize, tucker_reconstruct, vectorize


@dataclass
class Scenario:
    """One synthetic-data configuration.

    Factor rows are centred normals whose per-column variances follow
    InvGamma(2, 2); core entries are standard normal with a fraction zeroed
    out; noise is additive Gaussian.  Probit scenarios threshold the latent
    continuous tensor at zero.
    """

    name: str
    dims: tuple
    true_ranks: tuple
    core_sparsity: float = 0.4
    noise_var: float = 0.1
    missing_frac: float = 0.3
    replicates: int = 5
    likelihood: str = GAUSSIAN
    seed: int = 0

    def validate(self) -> None:
        if len(self.dims) != len(self.true_ranks):
            raise ValueError("dims and true_ranks must have equal length")
        if any(r > n for r, n in zip(self.true_ranks, self.dims)):
            raise ValueError("true ranks cannot exceed the dimensions")
        if not 0 <= self.core_sparsity < 1:
            raise ValueError("core_sparsity must lie in [0, 1)")
        if not 0 <= self.missing_frac < 1:
            raise ValueError("missing_frac must lie in [0, 1)")
        if self.noise_var <= 0:
            raise ValueError("noise_var must be positive")
        if self.likelihood not in (GAUSSIAN, PROBIT):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")


@dataclass
class SimulatedData:
    """A simulated tensor with its ground truth."""

    scenario: Scenario
    full: DenseTensor      # fully observed data
    masked: DenseTensor    # same values with the holdout mask applied
    signal: np.ndarray     # noiseless latent tensor
    factors: list
    core: np.ndarray

    @property
    def holdout_idx(self) -> np.ndarray:
        return np.nonzero(~self.masked.mask)[0]


def simulate(scenario: Scenario, rng) -> SimulatedData:
    """Generate one replicate of a scenario."""
    scenario.validate()
    gen = as_generator(rng)
    dims, ranks = scenario.dims, scenario.true_ranks

    factors = []
    for n_k, r_k in zip(dims, ranks):
        col_var = sample_invgamma(2.0, 2.0, rng, size=r_k)
        factors.append(gen.normal(size=(n_k, r_k)) * np.sqrt(col_var)[None, :])

    core = gen.normal(size=ranks)
    r_total = core.size
    n_zero = int(np.floor(scenario.core_sparsity * r_total))
    if n_zero:
        flat = core.reshape(-1)
        flat[gen.permutation(r_total)[:n_zero]] = 0.0

    signal = tucker_reconstruct(core, factors)
    noise = gen.normal(0.0, np.sqrt(scenario.noise_var), size=dims)
    latent = signal + noise
    values = (latent > 0).astype(np.float64) if scenario.likelihood == PROBIT else latent

    n = int(np.prod(dims))
    mask = np.ones(n, dtype=bool)
    n_miss = int(round(scenario.missing_frac * n))
    if n_miss:
        mask[gen.permutation(n)[:n_miss]] = False

    full = DenseTensor.from_array(values)
    masked = DenseTensor(full.dims, full.values.copy(), mask)
    return SimulatedData(scenario, full, masked, signal, factors, core)


# ----------------------------------------------------------------------
# Eigenvalue-ratio / growth-ratio rank criteria on matricizations
# ----------------------------------------------------------------------

def mean_impute(t: DenseTensor) -> DenseTensor:
    """Replace missing entries by the mean of the observed ones."""
    if not t.mask.any():
        raise ValueError("cannot mean-impute a fully missing tensor")
    fill = float(t.values[t.mask].mean())
    values = np.where(t.mask, t.values, fill)
    return DenseTensor(t.dims, values)


def er_gr_ranks(t: DenseTensor, mean_impute_missing: bool = False) -> list:
    """Per-mode (ER, GR) rank estimates from each matricization's spectrum.

    The eigenvalues mu_1 >= mu_2 >= ... of Y_(k) Y_(k)^T / (n_k * n/n_k)
    feed the eigenvalue-ratio statistic mu_r / mu_{r+1} and the growth-ratio
    statistic log(V_{r-1}/V_r) / log(V_r/V_{r+1}) with V_r the tail sum
    beyond r; each rank is the maximizer over 1 <= r <= min(n_k, n/n_k)/2.
    Requires complete data; mean imputation is applied only when explicitly
    requested (it is known to wreck the spectrum).
    """
    if t.n_missing:
        if not mean_impute_missing:
            raise ValueError(
                "matricization criteria need complete data; pass "
                "mean_impute_missing=True to fill with the observed mean"
            )
        t = mean_impute(t)
    arr = t.to_array()
    out = []
    for k in range(len(t.dims)):
        y_k = matricize(arr, k)
        n_k, ncol = y_k.shape
        gram = y_k @ y_k.T / (n_k * ncol)
        mu = np.linalg.eigvalsh(gram)[::-1]
        if mu[0] <= 0:
            raise ValueError(f"mode {k}: degenerate (zero) matricization")
        mu = np.maximum(mu, mu[0] * 1e-15)
        rmax = max(1, min(n_k, ncol) // 2)
        rmax = min(rmax, mu.size - 1)
        er = mu[:-1] / mu[1:]
        tail = np.concatenate([np.cumsum(mu[::-1])[::-1], [0.0]])  # V_{r-1}=tail[r-1]
        v = np.maximum(tail, mu[0] * 1e-18)
        with np.errstate(divide="ignore", invalid="ignore"):
            gr = np.log(v[:-2] / v[1:-1]) / np.log(v[1:-1] / v[2:])
        gr = np.where(np.isnan(gr), -np.inf, gr)  # 0/0 beyond an exact rank
        er_rank = int(np.argmax(er[:rmax])) + 1
        gr_rank = int(np.argmax(gr[:rmax])) + 1
        out.append((er_rank, gr_rank))
    return out


# ----------------------------------------------------------------------
# Benchmark driver
# ----------------------------------------------------------------------

@dataclass
class ReplicateResult:
    scenario: str
    replicate: int
    mse_predictive: float
    mse_signal: float
    ranks: tuple
    seconds: float
    er_ranks: tuple = None
    gr_ranks: tuple = None


REPORT_COLUMNS = ("scenario", "replicate", "mse_predictive", "mse_signal")


def _replicate_seeds(scenario: Scenario, b: int):
    ss = np.random.SeedSequence([int(scenario.seed), int(b)])
    sim_seed, fit_seed = ss.generate_state(2)
    return int(sim_seed), int(fit_seed)


def run_replicate(scenario: Scenario, b: int, cfg: FitConfig,
                  baseline_er_gr: bool = False) -> ReplicateResult:
    """Simulate one replicate, fit the sampler, and score the holdout."""
    sim_seed, fit_seed = _replicate_seeds(scenario, b)
    sim = simulate(scenario, RngHandle(sim_seed))
    cfg_b = replace(cfg, seed=fit_seed, likelihood=scenario.likelihood)
    t0 = time.perf_counter()
    samples = run_chain(sim.masked, cfg_b)
    seconds = time.perf_counter() - t0

    held = sim.holdout_idx
    truth = sim.full.values[held]
    z_mean = vectorize(samples.z_mean_array())[held]
    mse_signal = float(np.mean((z_mean - truth) ** 2))
    if samples.predictive_draws is not None and samples.predictive_draws.size:
        mse_predictive = float(np.mean((samples.predictive_draws - truth[None, :]) ** 2))
    else:
        mse_predictive = mse_signal

    er = gr = None
    if baseline_er_gr:
        pairs = er_gr_ranks(sim.masked, mean_impute_missing=sim.masked.n_missing > 0)
        er = tuple(p[0] for p in pairs)
        gr = tuple(p[1] for p in pairs)

    return ReplicateResult(
        scenario=scenario.name,
        replicate=b,
        mse_predictive=mse_predictive,
        mse_signal=mse_signal,
        ranks=samples.median_ranks(),
        seconds=seconds,
        er_ranks=er,
        gr_ranks=gr,
    )


def _run_replicate_star(args):
    return run_replicate(*args)


def run_benchmark(scenarios, cfg: FitConfig, *, jobs: int = 1,
                  baseline_er_gr: bool = False, progress=None) -> list:
    """All replicates of all scenarios; returns a flat list of results."""
    tasks = [
        (scenario, b, cfg, baseline_er_gr)
        for scenario in scenarios
        for b in range(scenario.replicates)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_replicate_star, tasks))
    else:
        results = []
        for task in tasks:
            results.append(_run_replicate_star(task))
            if progress is not None:
                progress(results[-1])
    return results


def _iqr(x: np.ndarray) -> float:
    return float(np.quantile(x, 0.75) - np.quantile(x, 0.25))


def summarize_benchmark(results) -> list:
    """Per-scenario medians/IQRs of the held-out MSEs plus the Monte Carlo
    mean of the per-replicate posterior-median ranks."""
    out = []
    names = []
    for r in results:
        if r.scenario not in names:
            names.append(r.scenario)
    for name in names:
        rows = [r for r in results if r.scenario == name]
        pred = np.array([r.mse_predictive for r in rows])
        sig = np.array([r.mse_signal for r in rows])
        ranks = np.array([r.ranks for r in rows], dtype=np.float64)
        summary = {
            "scenario": name,
            "replicates": len(rows),
            "mse_predictive_median": float(np.median(pred)),
            "mse_predictive_iqr": _iqr(pred),
            "mse_signal_median": float(np.median(sig)),
            "mse_signal_iqr": _iqr(sig),
            "rank_mean": tuple(np.round(ranks.mean(axis=0), 3)),
            "rank_median": tuple(int(v) for v in np.round(np.median(ranks, axis=0))),
            "seconds_median": float(np.median([r.seconds for r in rows])),
        }
        if rows[0].er_ranks is not None:
            er = np.array([r.er_ranks for r in rows], dtype=np.float64)
            gr = np.array([r.gr_ranks for r in rows], dtype=np.float64)
            summary["er_rank_median"] = tuple(float(v) for v in np.median(er, axis=0))
            summary["er_rank_iqr"] = tuple(_iqr(er[:, j]) for j in range(er.shape[1]))
            summary["gr_rank_median"] = tuple(float(v) for v in np.median(gr, axis=0))
            summary["gr_rank_iqr"] = tuple(_iqr(gr[:, j]) for j in range(gr.shape[1]))
        out.append(summary)
    return out


def write_report(results, path) -> None:
    """Tab-separated per-replicate table (one row per scenario x replicate)."""
    if not results:
        raise ValueError("no results to write")
    kmodes = len(results[0].ranks)
    with_baseline = results[0].er_ranks is not None
    cols = list(REPORT_COLUMNS) + [f"rank_mode_{j + 1}" for j in range(kmodes)]
    if with_baseline:
        cols += [f"er_rank_mode_{j + 1}" for j in range(kmodes)]
        cols += [f"gr_rank_mode_{j + 1}" for j in range(kmodes)]
    cols.append("seconds")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in results:
            row = [r.scenario, str(r.replicate),
                   f"{r.mse_predictive:.6g}", f"{r.mse_signal:.6g}"]
            row += [str(v) for v in r.ranks]
            if with_baseline:
                row += [str(v) for v in r.er_ranks]
                row += [str(v) for v in r.gr_ranks]
            row.append(f"{r.seconds:.3f}")
            fh.write("\t".join(row) + "\n")


def write_summary(results, path) -> None:
    """Tab-separated per-scenario medians/IQRs (plot-ready)."""
    summaries = summarize_benchmark(results)
    keys = []
    for s in summaries:
        for key in s:
            if key not in keys:
                keys.append(key)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(keys) + "\n")
        for s in summaries:
            cells = []
            for key in keys:
                v = s.get(key, "")
                if isinstance(v, tuple):
                    cells.append(",".join(str(x) for x in v))
                elif isinstance(v, float):
                    cells.append(f"{v:.6g}")
                else:
                    cells.append(str(v))
            fh.write("\t".join(cells) + "\n")
