"""Stationary gap rates: the (a, b) families, finite product forms and window limits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (AssumptionViolated, InternalConsistencyError, ParametersOutsideSigma,
                     PreconditionError)
from .model import DriftField, GapVector, Window

__all__ = [
    "RateSequence",
    "StabilityViolation",
    "SigmaRegion",
    "LimitVerdict",
    "lambda_ab",
    "lambda_ab_sequence",
    "difference_residual",
    "finite_rates",
    "window_rates",
    "lambda_limit",
    "sigma_region",
    "sample_pi_ab",
    "linear_strategy",
    "power_strategy",
    "geometric_strategy",
]


@dataclass(frozen=True)
class RateSequence:
    """Rates ``values[i]`` for gap index ``start + i``."""

    start: int
    values: tuple
    provenance: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))

    @property
    def indices(self) -> range:
        return range(self.start, self.start + len(self.values))

    def __getitem__(self, n: int):
        if n not in self.indices:
            raise IndexError(f"rate index {n} outside {self.indices}")
        return self.values[n - self.start]

    def __len__(self):
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def to_csv(self) -> str:
        rows = ["index,rate"] + [f"{n},{float(v)!r}" for n, v in zip(self.indices, self.values)]
        return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class StabilityViolation:
    """Returned (not raised) when a finite system has no stationary gap law."""

    first_failing: int
    values: tuple


def lambda_ab(g: DriftField, a: float, b: float, n):
    """Rate of gap ``n`` in the (a, b) family: ``2 Phi_{n+1}(g) + a + b n``."""
    lam = 2.0 * g.phi(np.asarray(n) + 1) + a + b * np.asarray(n, dtype=float)
    return lam if np.ndim(n) else float(lam)


def lambda_ab_sequence(g: DriftField, a: float, b: float, lo: int, hi: int) -> RateSequence:
    n = np.arange(lo, hi + 1)
    return RateSequence(lo, tuple(float(v) for v in lambda_ab(g, a, b, n)), "ab_family",
                        {"a": a, "b": b})


def difference_residual(lam: RateSequence, g: DriftField, boundary=None) -> RateSequence:
    """Residuals ``lam_{n-1}/2 - lam_n + lam_{n+1}/2 - (g_{n+1} - g_n)``.

    ``boundary`` supplies values just outside ``lam``; finite product-form
    rates default to the zero boundary values of their boundary value problem.
    """
    values = list(lam.values)
    start = lam.start
    if boundary is None and lam.provenance == "finite_product_form":
        boundary = (0, 0)
    if boundary is not None:
        values = [boundary[0], *values, boundary[1]]
        start -= 1
    if len(values) < 3:
        raise PreconditionError("need at least three consecutive rates")
    out = []
    for i in range(1, len(values) - 1):
        n = start + i
        out.append(values[i - 1] / 2 - values[i] + values[i + 1] / 2 - (g(n + 1) - g(n)))
    return RateSequence(start + 1, tuple(out), "residual")


def finite_rates(g: Sequence) -> RateSequence | StabilityViolation:
    """Product-form rates ``mu_n = 2 (g_1 + ... + g_n - n gbar_N)`` for n = 1..N-1."""
    g = list(g)
    count = len(g)
    if count < 2:
        raise PreconditionError("a finite system needs at least two particles")
    total = 0
    for v in g:
        total = total + v
    mu = []
    running = 0
    for n in range(1, count):
        running = running + g[n - 1]
        mu.append(2 * (running - n * total / count))
    bad = [n for n, m in enumerate(mu, start=1) if not m > 0]
    if bad:
        return StabilityViolation(bad[0], tuple(mu))
    return RateSequence(1, tuple(mu), "finite_product_form")


def window_rates(g: DriftField, w: Window) -> tuple[RateSequence, bool]:
    """Finite-window rates ``2 (k - M + 1)(gbar[M:k] - gbar[M:N])`` for k = M..N-1.

    Evaluated in the arithmetic of the field values, in the rearranged form
    ``2 (S[M:k] - (k - M + 1) S[M:N] / (N - M + 1))``.
    """
    vals = [g(n) for n in range(w.M, w.N + 1)]
    count = len(vals)
    total = 0
    for v in vals:
        total = total + v
    lam = []
    running = 0
    for i in range(count - 1):
        running = running + vals[i]
        lam.append(2 * (running - (i + 1) * total / count))
    holds = all(v > 0 for v in lam)
    return RateSequence(w.M, tuple(lam), "window_formula", {"M": w.M, "N": w.N}), holds


# --- limits over approximating windows --------------------------------------

Strategy = Callable[[np.ndarray], tuple]

_EXACT_INT = float(2 ** 53)


def linear_strategy(j):
    """M_j = -j + 1, N_j = j."""
    j = np.asarray(j, dtype=float)
    return 1.0 - j, j


def power_strategy(p: float = 2.0) -> Strategy:
    """M_j = -j + 1, N_j = max(j^p, 1)."""
    def strategy(j):
        j = np.asarray(j, dtype=float)
        return 1.0 - j, np.maximum(np.floor(j ** p), 1.0)
    return strategy


def geometric_strategy(base: float = 2.0, scale: float = 2.0) -> Strategy:
    """M_j = -j + 1, N_j = floor(scale * base^j)."""
    def strategy(j):
        j = np.asarray(j, dtype=float)
        return 1.0 - j, np.floor(scale * base ** j)
    return strategy


def _window_rates_at(g: DriftField, M, N, k):
    """lambda_k^{(M, N)} for window arrays M, N (shape (n,)) and fixed indices k (shape (c,)).

    Direct form ``2 (S[M:k] - (k - M + 1) S[M:N] / (N - M + 1))``; entries with
    k outside [M, N - 1] are NaN.
    """
    k = np.asarray(k, dtype=float)[None, :]
    M = M[:, None]
    N = N[:, None]
    base = g.cumulative(M - 1)
    avg = (g.cumulative(N) - base) / (N - M + 1)
    lam = 2.0 * ((g.cumulative(k) - base) - (k - M + 1) * avg)
    return np.where((k >= M) & (k < N), lam, np.nan)


def _assumption_minimum(g: DriftField, M, N):
    """Minimum over k in [M, N-1] of the window rate, for every window.

    On each tail segment the rate is affine in k, so the minimum sits at a
    segment endpoint or a core index.  The outer endpoints use closed forms
    that stay accurate for huge N:
    ``lambda_M = 2 (g_- - avg)`` when M is below the core and
    ``lambda_{N-1} = 2 (S[M:p] - g_+ (p - M + 1)) / (N - M + 1)`` when N - 1 is above it.
    """
    p = g.n_plus
    length = N - M + 1
    base = g.cumulative(M - 1)
    avg = (g.cumulative(N) - base) / length
    direct = _window_rates_at(g, M, N, np.arange(g.n_minus - 1, p + 2))
    low = np.where(M < g.n_minus, 2.0 * (float(g.tail_minus) - avg),
                   2.0 * (g.cumulative(M) - base - avg))
    high = np.where(N - 1 > p,
                    2.0 * (g.cumulative(float(p)) - base - float(g.tail_plus) * (p - M + 1)) / length,
                    2.0 * (g.cumulative(N - 1) - base - (N - M) * avg))
    return np.minimum(np.fmin.reduce(direct, axis=1, initial=np.inf), np.minimum(low, high))


@dataclass(frozen=True)
class LimitVerdict:
    """Per-index outcome: ("finite", value) | ("infinite", None) | ("inconclusive", last)."""

    outcomes: dict
    j_used: int
    history: dict = field(default_factory=dict, repr=False)

    @property
    def kind(self) -> str:
        kinds = {o[0] for o in self.outcomes.values()}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    def value(self, k: int) -> float:
        kind, v = self.outcomes[k]
        return math.inf if kind == "infinite" else v

    def to_json(self) -> dict:
        return {"j_used": self.j_used, "kind": self.kind,
                "outcomes": {str(k): {"kind": o[0], "value": o[1]} for k, o in sorted(self.outcomes.items())}}


def lambda_limit(g: DriftField, strategy: Strategy = linear_strategy, tol: float = 1e-9,
                 j_max: int = 2_000_000, indices: Sequence[int] = range(-3, 4),
                 divergence: float = 1e6, chunk: int = 1 << 16,
                 keep_history: bool = False) -> LimitVerdict:
    """Classify lim_j lambda_k^{(j)} for the tracked indices.

    Every window the strategy produces is checked for strictly positive rates
    (else :class:`AssumptionViolated`), and each tracked sequence is checked to
    be nondecreasing in j.
    """
    indices = sorted(set(int(k) for k in indices))
    kk = np.asarray(indices, dtype=float)
    prev = np.full(len(indices), np.nan)
    outcome: dict[int, tuple] = {}
    history = {k: [] for k in indices} if keep_history else {}
    prev_M = prev_N = None
    j0 = 1
    while j0 <= j_max and len(outcome) < len(indices):
        js = np.arange(j0, min(j0 + chunk, j_max + 1))
        M, N = (np.asarray(v, dtype=float) for v in strategy(js))
        M = np.broadcast_to(M, js.shape).astype(float)
        N = np.broadcast_to(N, js.shape).astype(float)
        if np.any(M >= N):
            raise PreconditionError("strategy produced a window with M >= N")
        if np.any(np.abs(M) > _EXACT_INT) or np.any(N > _EXACT_INT):
            raise PreconditionError("window endpoints beyond 2**53 are not exactly representable")
        allM = np.concatenate([[prev_M], M]) if prev_M is not None else M
        allN = np.concatenate([[prev_N], N]) if prev_N is not None else N
        if np.any(np.diff(allM) > 0) or np.any(np.diff(allN) < 0):
            raise PreconditionError("strategy windows must be nested")
        changed = (np.diff(allM) != 0) | (np.diff(allN) != 0)
        if prev_M is None:
            changed = np.concatenate([[True], changed])
        mins = _assumption_minimum(g, M, N)
        bad = np.flatnonzero(~(mins > 0))
        if bad.size:
            i = bad[0]
            raise AssumptionViolated((int(M[i]), int(N[i])))
        lam = _window_rates_at(g, M, N, kk)
        for c, k in enumerate(indices):
            if k in outcome:
                continue
            seq = lam[:, c]
            if keep_history:
                history[k].extend((int(j), float(v)) for j, v in zip(js, seq) if not np.isnan(v))
            series = np.concatenate([[prev[c]], seq])
            step = np.diff(series)
            valid = ~np.isnan(step)
            scale = np.maximum(1.0, np.abs(series[1:]))
            if np.any(valid & (step < -1e-12 * scale)):
                i = np.flatnonzero(valid & (step < -1e-12 * scale))[0]
                raise InternalConsistencyError(
                    f"lambda_{k}^(j) decreased at j={int(js[i])}: {series[i]} -> {series[i + 1]}")
            over = np.flatnonzero(seq > divergence)
            # a repeated window carries no information about convergence
            cauchy = np.flatnonzero(valid & changed & (np.abs(step) < tol))
            first_over = over[0] if over.size else None
            first_cauchy = cauchy[0] if cauchy.size else None
            if first_over is not None and (first_cauchy is None or first_over < first_cauchy):
                outcome[k] = ("infinite", None, int(js[first_over]))
            elif first_cauchy is not None:
                outcome[k] = ("finite", float(seq[first_cauchy]), int(js[first_cauchy]))
            if not np.isnan(seq[-1]):
                prev[c] = seq[-1]
        prev_M, prev_N = M[-1], N[-1]
        j0 = int(js[-1]) + 1
    j_used = max(o[2] for o in outcome.values()) if len(outcome) == len(indices) else j0 - 1
    final = {}
    for c, k in enumerate(indices):
        if k in outcome:
            final[k] = outcome[k][:2]
        else:
            final[k] = ("inconclusive", None if np.isnan(prev[c]) else float(prev[c]))
    kinds = {o[0] for o in final.values()} - {"inconclusive"}
    if len(kinds) > 1:
        raise InternalConsistencyError(f"limits are neither all finite nor all infinite: {final}")
    return LimitVerdict(final, j_used, history)


# --- parameter region --------------------------------------------------------

@dataclass(frozen=True)
class SigmaRegion:
    """The set of (a, b) with every rate ``2 Phi_{n+1}(g) + a + b n`` strictly positive.

    ``lines`` holds pairs (n, c_n) with a_min(b) = max_n (-c_n - b n), taken over
    the finite candidate set that controls the minimum.
    """

    b_min: float
    b_max: float
    lines: tuple
    breakpoints: tuple

    @property
    def empty(self) -> bool:
        return self.b_min > self.b_max

    def a_min(self, b: float) -> float:
        return max(-c - b * n for n, c in self.lines)

    def contains(self, a: float, b: float) -> bool:
        if self.empty or not self.b_min <= b <= self.b_max:
            return False
        return a > self.a_min(b)

    def to_json(self) -> dict:
        return {"b_min": self.b_min, "b_max": self.b_max,
                "breakpoints": [list(p) for p in self.breakpoints], "empty": self.empty}


def _upper_envelope(lines, lo, hi):
    """Breakpoints of b -> max(-c - b n) on [lo, hi]; lines are (n, c)."""
    def val(line, b):
        return -line[1] - b * line[0]

    pts = []
    b = lo
    while True:
        best = max(lines, key=lambda ln: (val(ln, b), -ln[0]))
        pts.append((b, val(best, b)))
        if b >= hi:
            break
        nxt = hi
        for ln in lines:
            if ln[0] < best[0]:
                # line with a larger slope (-n) overtakes best at this b
                cross = (ln[1] - best[1]) / (best[0] - ln[0])
                if b < cross < nxt:
                    nxt = cross
        b = nxt
    return tuple(pts)


def sigma_region(g: DriftField) -> SigmaRegion:
    b_min = -2.0 * float(g.tail_plus) + 0.0
    b_max = -2.0 * float(g.tail_minus) + 0.0
    # rates are affine in n for n >= n_plus and for n <= n_minus - 1
    ns = range(min(g.n_minus, 0) - 1, max(g.n_plus, 0) + 1)
    lines = tuple((n, float(2.0 * g.phi(n + 1))) for n in ns)
    if b_min > b_max:
        return SigmaRegion(b_min, b_max, lines, ())
    return SigmaRegion(b_min, b_max, lines, _upper_envelope(lines, b_min, b_max))


def sample_pi_ab(g: DriftField, a: float, b: float, w: Window, seed=0,
                 region: SigmaRegion | None = None) -> GapVector:
    """Independent exponential gaps over ``w`` with the (a, b) family rates."""
    region = region or sigma_region(g)
    if not region.contains(a, b):
        raise ParametersOutsideSigma(f"(a, b) = ({a}, {b}) is outside the positivity region")
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), 0x70695F6162]))
    rates = lambda_ab(g, a, b, np.arange(w.M, w.N))
    return GapVector(w, rng.exponential(1.0 / rates))
