"""Estimators and tests that turn trajectory batches into verdicts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InsufficientSamples, PreconditionError
from .rates import RateSequence
from .simulate import TrajectoryBatch

__all__ = [
    "exp_rate_mle",
    "kolmogorov_p",
    "ks_exponential",
    "ks_two_sample",
    "DominationVerdict",
    "domination_test",
    "lag1_autocorrelation",
    "GapStats",
    "GapStatsReport",
    "thinned_samples",
    "stationarity_report",
    "DecayDiagnostic",
    "decay_diagnostic",
    "coupling_violation",
]

MIN_SAMPLES = 100


def _sample(x, what="sample"):
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise InsufficientSamples(f"{what} is empty")
    if not np.all(np.isfinite(x)):
        raise PreconditionError(f"{what} contains non-finite values")
    return x


def exp_rate_mle(sample, allow_zero: bool = False) -> float:
    """1 / mean.  ``allow_zero`` admits exact zeros, as produced by projected gap steps."""
    x = _sample(sample)
    if np.any(x < 0) or (not allow_zero and np.any(x == 0)):
        raise PreconditionError("exponential samples must be positive")
    mean = float(np.mean(x))
    if mean == 0:
        raise PreconditionError("all samples are zero")
    return 1.0 / mean


def kolmogorov_p(d: float, n_eff: float) -> float:
    """Asymptotic P(D > d) with the usual finite-n correction of the scale."""
    if d <= 0:
        return 1.0
    rt = math.sqrt(n_eff)
    lam = (rt + 0.12 + 0.11 / rt) * d
    if lam < 0.2:
        return 1.0
    total = 0.0
    for k in range(1, 101):
        term = (-1) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam)
        total += term
        if abs(term) < 1e-16:
            break
    return float(min(1.0, max(0.0, 2.0 * total)))


def ks_exponential(sample, rate: float):
    """(statistic, p) of the one-sample KS test against Exp(rate)."""
    if not rate > 0:
        raise PreconditionError("rate must be positive")
    x = np.sort(_sample(sample))
    n = x.size
    cdf = -np.expm1(-rate * np.maximum(x, 0.0))
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))
    return d, kolmogorov_p(d, n)


def _ecdf(sorted_x, points):
    return np.searchsorted(sorted_x, points, side="right") / sorted_x.size


def ks_two_sample(a, b):
    a, b = np.sort(_sample(a, "first sample")), np.sort(_sample(b, "second sample"))
    pts = np.concatenate([a, b])
    d = float(np.max(np.abs(_ecdf(a, pts) - _ecdf(b, pts))))
    return d, kolmogorov_p(d, a.size * b.size / (a.size + b.size))


@dataclass(frozen=True)
class DominationVerdict:
    statistic: float
    p_value: float
    alpha: float
    rejected: bool
    direction: str = "A <= B"

    def to_json(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "alpha": self.alpha,
                "rejected": self.rejected, "direction": self.direction}


def domination_test(sample_a, sample_b, alpha: float = 0.01) -> DominationVerdict:
    """One-sided KS test of the hypothesis that A is stochastically below B.

    The statistic is sup_x (S_A(x) - S_B(x)) = sup_x (F_B(x) - F_A(x)); its
    one-sided asymptotic tail is exp(-2 m D^2) with m = n_A n_B / (n_A + n_B).
    """
    a, b = np.sort(_sample(sample_a, "sample A")), np.sort(_sample(sample_b, "sample B"))
    pts = np.concatenate([a, b])
    d = max(0.0, float(np.max(_ecdf(b, pts) - _ecdf(a, pts))))
    m = a.size * b.size / (a.size + b.size)
    p = math.exp(-2.0 * m * d * d)
    return DominationVerdict(d, p, alpha, p < alpha)


def lag1_autocorrelation(series) -> float:
    """Pooled lag-1 autocorrelation of rows (replicas) of a 2-d array of frames."""
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] < 2:
        return 0.0
    c = x - x.mean()
    var = float(np.mean(c * c))
    if var == 0:
        return 0.0
    return float(np.mean(c[:, 1:] * c[:, :-1]) / var)


@dataclass(frozen=True)
class GapStats:
    index: int
    n: int
    rate_mle: float
    target_rate: float
    ks_stat: float
    ks_p: float
    zero_fraction: float = 0.0

    def passed(self, alpha) -> bool:
        return self.ks_p > alpha


@dataclass
class GapStatsReport:
    gaps: list
    correlation: np.ndarray
    stride: int
    lag1: float
    alpha: float
    burn_in: float
    meta: dict = field(default_factory=dict)

    @property
    def ks_passed(self) -> bool:
        return all(g.passed(self.alpha) for g in self.gaps)

    def max_abs_correlation(self) -> float:
        c = self.correlation
        if c.shape[0] < 2:
            return 0.0
        return float(np.max(np.abs(c[~np.eye(c.shape[0], dtype=bool)])))

    def to_json(self) -> dict:
        return {**self.meta,
                "burn_in": self.burn_in, "stride": self.stride, "lag1": self.lag1,
                "alpha": self.alpha, "ks_passed": self.ks_passed,
                "max_abs_correlation": self.max_abs_correlation(),
                "correlation": self.correlation.tolist(),
                "gaps": [{"index": g.index, "n": g.n, "rate_mle": g.rate_mle,
                          "target_rate": g.target_rate, "ks_stat": g.ks_stat, "ks_p": g.ks_p,
                          "zero_fraction": g.zero_fraction}
                         for g in self.gaps]}

    def csv_rows(self) -> list:
        return [(g.index, g.n, g.rate_mle, g.target_rate, g.ks_stat, g.ks_p) for g in self.gaps]


def thinned_samples(batch: TrajectoryBatch, indices: Sequence[int], burn_in: float,
                    max_lag1: float = 0.2):
    """Post-burn-in gap samples per index, pooled over non-aborted replicas.

    Returns (samples, stride, lag1): the stride is the smallest one making the
    lag-1 autocorrelation of every requested gap series fall below ``max_lag1``.
    """
    keep = ~batch.aborted if batch.aborted is not None else np.ones(batch.replicas, bool)
    start = int(np.searchsorted(batch.times, burn_in - 1e-12))
    series = {k: batch.gap(k)[keep, start:] for k in indices}
    frames = next(iter(series.values())).shape[1]
    stride = 1
    while True:
        lag = max(lag1_autocorrelation(v[:, ::stride]) for v in series.values())
        if lag < max_lag1 or stride >= frames:
            break
        stride += 1
    return {k: v[:, ::stride].ravel() for k, v in series.items()}, stride, float(lag)


def stationarity_report(batch: TrajectoryBatch, target: RateSequence, burn_in: float | None = None,
                        central_indices: Sequence[int] | None = None, alpha: float = 0.01,
                        max_lag1: float = 0.2) -> GapStatsReport:
    """Pool post-burn-in gap samples, thin them, and test each against its target rate."""
    if burn_in is None:
        burn_in = float(batch.times[-1]) / 2
    if central_indices is None:
        central_indices = list(target.indices)
    samples, stride, lag = thinned_samples(batch, central_indices, burn_in, max_lag1)
    gaps = []
    for k in central_indices:
        x = samples[k]
        if x.size < MIN_SAMPLES:
            raise InsufficientSamples(f"gap {k} has {x.size} samples, need {MIN_SAMPLES}")
        rate = float(target[k])
        d, p = ks_exponential(x, rate)
        # exact zeros only arise from projected (gap engine) steps; they are kept so KS sees them
        gaps.append(GapStats(k, int(x.size), exp_rate_mle(x, allow_zero=True), rate, d, p,
                             float(np.mean(x == 0))))
    stacked = np.vstack([samples[k] for k in central_indices])
    corr = np.atleast_2d(np.corrcoef(stacked)) if len(central_indices) > 1 else np.ones((1, 1))
    return GapStatsReport(gaps, corr, stride, lag, alpha, float(burn_in))


@dataclass(frozen=True)
class DecayDiagnostic:
    times: tuple
    means: tuple
    half_widths: tuple
    trend: float
    z: float

    @property
    def decreasing(self) -> bool:
        """True when the last mean sits below the first by more than ``z`` standard errors."""
        return self.trend > self.z

    def to_json(self) -> dict:
        return {"times": list(self.times), "means": list(self.means),
                "half_widths": list(self.half_widths), "trend": self.trend, "z": self.z,
                "decreasing": self.decreasing}


def decay_diagnostic(samples_by_time: Mapping[float, np.ndarray], z: float = 3.0) -> DecayDiagnostic:
    """Mean gap per time with ``z``-standard-error bands and a first-vs-last trend statistic."""
    times = sorted(samples_by_time)
    if len(times) < 2:
        raise InsufficientSamples("need at least two time points")
    means, ses = [], []
    for t in times:
        x = _sample(samples_by_time[t], f"sample at t = {t}")
        if x.size < 2:
            raise InsufficientSamples(f"need at least two replicas at t = {t}")
        means.append(float(np.mean(x)))
        ses.append(float(np.std(x, ddof=1) / math.sqrt(x.size)))
    denom = math.hypot(ses[0], ses[-1])
    diff = means[0] - means[-1]
    trend = diff / denom if denom > 0 else (math.inf if diff > 0 else 0.0)
    return DecayDiagnostic(tuple(times), tuple(means), tuple(z * s for s in ses), trend, z)


def coupling_violation(pair, tolerance: float = 0.0, floor: float = 0.0):
    """Mean over replicas and frames of max_k (Z_A,k - Z_B,k)+, and the fraction of frames above ``tolerance``.

    Per-frame violations at or below ``floor`` count as zero; recorded gaps are
    differences of reconstructed positions, so they carry rounding of order
    1e-16 times the position scale.
    """
    a, b = pair
    if a.Z.shape != b.Z.shape:
        raise PreconditionError("coupled batches must have the same shape")
    v = np.max(np.maximum(a.Z - b.Z, 0.0), axis=2)
    v = np.where(v <= floor, 0.0, v)
    return float(np.mean(v)), float(np.mean(v > tolerance))
