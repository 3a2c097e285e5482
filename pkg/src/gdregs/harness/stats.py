"""Sample moments of gradient estimators, z-tests, and per-replicate RNG streams."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based stream for replicate ``key`` under a master seed.

    Streams depend only on (seed, key), so results do not change with the
    order or grouping in which replicates are evaluated.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=tuple(key))))


@dataclass
class GradStats:
    """Per-parameter mean, unbiased variance and SNR = |mean| / std over draws.

    SNR is ``inf`` where the variance is exactly zero but the mean is not, and
    NaN where both are zero (a parameter the estimator never touches); such
    parameters are left out of ``avg_snr``.
    """

    mean: np.ndarray
    variance: np.ndarray
    snr: np.ndarray
    n: int

    @property
    def avg_variance(self) -> float:
        return float(np.mean(self.variance))

    @property
    def avg_snr(self) -> float:
        defined = self.snr[~np.isnan(self.snr)]
        return float(np.mean(defined)) if defined.size else float("nan")


def summarize(draws) -> GradStats:
    """Moments over axis 0 of an ``(n, n_params)`` array of estimator draws."""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim == 1:
        draws = draws[:, None]
    n = draws.shape[0]
    if n < 2:
        raise ValueError("need at least 2 draws")
    mean = draws.mean(axis=0)
    var = draws.var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = np.where(var > 0, np.abs(mean) / np.sqrt(var), np.where(mean != 0, np.inf, np.nan))
    return GradStats(mean, var, snr, n)


@dataclass
class ZTest:
    passed: bool
    z: np.ndarray
    threshold: float

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z)))


def bonferroni_threshold(significance: float, m: int) -> float:
    """Two-sided normal critical value for m simultaneous tests."""
    return float(norm.ppf(1.0 - significance / (2 * m)))


def unbiasedness_test(a, b=None, *, oracle=None, significance: float = 0.01,
                      min_n: int = 10_000) -> ZTest:
    """Per-parameter z-test of equal means.

    ``a`` (and ``b``) are ``(n, m)`` arrays of estimator draws. Give either
    ``b`` for a two-sample test or ``oracle``, an ``(m,)`` vector of exact
    values, for a one-sample test. Passes when every |z| is below the
    Bonferroni threshold for m tests.
    """
    if (b is None) == (oracle is None):
        raise ValueError("give exactly one of b or oracle")

    def draws(x):
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(x.shape[0], -1)
        if x.shape[0] < min_n:
            raise ValueError(f"need at least {min_n} draws for the normal approximation, got {x.shape[0]}")
        return x

    a = draws(a)
    se2 = a.var(axis=0, ddof=1) / a.shape[0]
    if b is not None:
        b = draws(b)
        diff = a.mean(axis=0) - b.mean(axis=0)
        se2 = se2 + b.var(axis=0, ddof=1) / b.shape[0]
    else:
        diff = a.mean(axis=0) - np.asarray(oracle, dtype=np.float64).reshape(-1)
    if np.any(se2 == 0):
        bad = np.flatnonzero(se2 == 0)
        raise ValueError(f"zero variance for parameters {bad[:10].tolist()}; the z-test is undefined")
    z = diff / np.sqrt(se2)
    threshold = bonferroni_threshold(significance, z.size)
    return ZTest(bool(np.all(np.abs(z) < threshold)), z, threshold)
