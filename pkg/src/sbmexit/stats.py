"""Estimator containers, seeded RNG streams, and parallel chunk scheduling.

Every Monte Carlo routine draws from streams derived from (master seed,
purpose tag, chunk index) via numpy SeedSequence spawn keys, so results are
bit-exact for a given config and seed and do not depend on the worker count.
Replica batches are split into fixed-size chunks; workers parallelize over
chunks and results are reduced in chunk order.
"""

from __future__ import annotations

import multiprocessing as mp
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

# Fixed purpose tags for RNG stream derivation (never reorder; append only).
STREAM_CLOUD = 1
STREAM_TREES = 2
STREAM_PATHS = 3
STREAM_IMMIGRATION = 4
STREAM_CALIBRATION = 5


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Deterministic generator for (seed, purpose..., chunk) keys."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class EstimatorResult:
    """A Monte Carlo estimate with its standard error and provenance."""

    mean: float
    se: float
    reps: int
    config_hash: str = ""
    seed: int = 0

    def within(self, target: float, n_se: float = 3.0) -> bool:
        return abs(self.mean - target) <= n_se * self.se

    def combined_gap(self, other: "EstimatorResult") -> float:
        """|difference| measured in combined standard errors."""
        se = float(np.hypot(self.se, other.se))
        if se == 0.0:
            return 0.0 if self.mean == other.mean else float("inf")
        return abs(self.mean - other.mean) / se

    def as_dict(self) -> dict:
        return {
            "mean": float(self.mean),
            "se": float(self.se),
            "reps": int(self.reps),
            "config_hash": self.config_hash,
            "seed": int(self.seed),
        }


def mean_se(samples: np.ndarray) -> tuple[float, float]:
    x = np.asarray(samples, dtype=float)
    n = len(x)
    if n == 0:
        raise ValueError("no samples")
    m = float(np.mean(x))
    se = float(np.std(x, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return m, se


def estimate(samples: np.ndarray, *, config_hash: str = "", seed: int = 0) -> EstimatorResult:
    m, se = mean_se(samples)
    return EstimatorResult(m, se, len(np.asarray(samples)), config_hash, seed)


def log_mean_estimate(samples: np.ndarray, *, config_hash: str = "",
                      seed: int = 0) -> EstimatorResult:
    """Delta-method estimate of -log(mean of samples) for samples in (0, 1]."""
    x = np.asarray(samples, dtype=float)
    m, se = mean_se(x)
    if m <= 0.0:
        raise ValueError("mean of exp-functional samples must be positive")
    return EstimatorResult(-np.log(m), se / m, len(x), config_hash, seed)


def ratio_estimate(num: np.ndarray, den: np.ndarray, *, config_hash: str = "",
                   seed: int = 0) -> EstimatorResult:
    """Delta-method estimate of E[num]/E[den] from paired replicas."""
    a = np.asarray(num, dtype=float)
    b = np.asarray(den, dtype=float)
    n = len(a)
    ma, mb = float(np.mean(a)), float(np.mean(b))
    if mb == 0.0:
        raise ValueError("denominator mean is zero")
    r = ma / mb
    resid = (a - r * b) / mb
    se = float(np.std(resid, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return EstimatorResult(r, se, n, config_hash, seed)


def batch_statistic(samples: Sequence[np.ndarray], statistic: Callable,
                    nbatches: int = 25, *, config_hash: str = "",
                    seed: int = 0) -> EstimatorResult:
    """Batch-means SE for a nonlinear statistic of replica-aligned arrays."""
    arrays = [np.asarray(s, dtype=float) for s in samples]
    n = len(arrays[0])
    nbatches = min(nbatches, n)
    edges = np.linspace(0, n, nbatches + 1).astype(int)
    vals = []
    for i in range(nbatches):
        sl = slice(edges[i], edges[i + 1])
        vals.append(statistic(*[a[sl] for a in arrays]))
    vals = np.asarray(vals, dtype=float)
    mean = float(statistic(*arrays))
    se = float(np.std(vals, ddof=1) / np.sqrt(nbatches)) if nbatches > 1 else 0.0
    return EstimatorResult(mean, se, n, config_hash, seed)


# ----------------------------------------------------------------------------
# Two-sample tests


def histogram_pvalue(a: np.ndarray, b: np.ndarray, bins: Sequence[float]) -> float:
    """Two-sample chi-square p-value on pooled histogram counts.

    Cells with fewer than 5 expected counts are pooled into the tail.
    """
    ca, _ = np.histogram(a, bins=bins)
    cb, _ = np.histogram(b, bins=bins)
    table = np.stack([ca, cb])
    keep = table.sum(axis=0) > 0
    table = table[:, keep]
    # Pool sparse tail cells so the chi-square approximation is valid.
    while table.shape[1] > 2 and table.sum(axis=0)[-1] < 10:
        table[:, -2] += table[:, -1]
        table = table[:, :-1]
    if table.shape[1] < 2:
        return 1.0
    _, p, _, _ = sps.chi2_contingency(table)
    return float(p)


def ks_pvalue(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        return float("nan")
    return float(sps.ks_2samp(a, b, method="asymp").pvalue)


# ----------------------------------------------------------------------------
# Chunked parallel map


def chunk_sizes(total: int, chunk: int) -> list[int]:
    if total <= 0:
        raise ValueError(f"need a positive replica count, got {total}")
    if chunk <= 0:
        raise ValueError(f"need a positive chunk size, got {chunk}")
    full, rem = divmod(total, chunk)
    return [chunk] * full + ([rem] if rem else [])


def parallel_map(fn: Callable, args_list: Sequence, workers: int = 1) -> list:
    """Map preserving order; results identical whatever the worker count."""
    if workers <= 1 or len(args_list) <= 1:
        return [fn(a) for a in args_list]
    ctx = mp.get_context("fork")
    with ctx.Pool(processes=min(workers, len(args_list))) as pool:
        return pool.map(fn, args_list)


_FORK_FN: Callable | None = None


def _fork_call(arg):
    return _FORK_FN(arg)


def forked_map(fn: Callable, args_list: Sequence, workers: int = 1) -> list:
    """parallel_map for closures: fn reaches workers via fork, never pickled.

    The callable (often a closure over solver fields) is stashed in a module
    global before the pool forks, so children inherit it; only the small
    per-chunk argument tuples and results cross process boundaries.  Results
    are reduced in argument order, so the outcome is worker-count independent.
    """
    global _FORK_FN
    if workers <= 1 or len(args_list) <= 1:
        return [fn(a) for a in args_list]
    _FORK_FN = fn
    try:
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=min(workers, len(args_list))) as pool:
            return pool.map(_fork_call, args_list)
    finally:
        _FORK_FN = None
