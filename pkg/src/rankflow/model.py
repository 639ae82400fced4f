"""Coefficient fields, configurations, ranking and the gap/position maps.

Two-sided sequences are stored as a finite core ``[n_minus, n_plus]`` plus
one constant on each side.  Partial sums over arbitrary integer ranges are
evaluated in closed form through the cumulative function

    F(n) = sum_{i = n_minus}^{n} c_i      (F(n_minus - 1) = 0),

continued affinely into both tails, so ``sum_{i=a}^{b} c_i = F(b) - F(a-1)``
for every ``a <= b + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import PreconditionError

__all__ = [
    "CoefficientField",
    "DriftField",
    "DiffusionField",
    "Window",
    "Configuration",
    "RankAssignment",
    "GapVector",
    "rank",
    "ranked_configuration",
    "gaps_from_ranked",
    "phi",
    "positions_from_gaps",
    "truncate_field",
]


@dataclass(frozen=True)
class CoefficientField:
    n_minus: int
    n_plus: int
    core: tuple
    tail_minus: float
    tail_plus: float
    _prefix: np.ndarray = field(init=False, repr=False, compare=False)

    # JSON key names for the two tail constants
    _json_tails = ("g_minus", "g_plus")

    def __post_init__(self):
        object.__setattr__(self, "n_minus", int(self.n_minus))
        object.__setattr__(self, "n_plus", int(self.n_plus))
        object.__setattr__(self, "core", tuple(self.core))
        if self.n_minus > self.n_plus:
            raise PreconditionError("n_minus must not exceed n_plus")
        if len(self.core) != self.n_plus - self.n_minus + 1:
            raise PreconditionError(
                f"core has {len(self.core)} values, window [{self.n_minus}, {self.n_plus}] "
                f"needs {self.n_plus - self.n_minus + 1}"
            )
        values = [float(v) for v in self.core] + [float(self.tail_minus), float(self.tail_plus)]
        if not all(math.isfinite(v) for v in values):
            raise PreconditionError("coefficients must be finite")
        prefix = np.concatenate([[0.0], np.cumsum(np.asarray(self.core[:], dtype=float))])
        prefix.setflags(write=False)
        object.__setattr__(self, "_prefix", prefix)

    # construction helpers -------------------------------------------------

    @classmethod
    def constant(cls, value, n_minus: int = 0, n_plus: int = 0):
        return cls(n_minus, n_plus, (value,) * (n_plus - n_minus + 1), value, value)

    @classmethod
    def finite(cls, values: Sequence, first_index: int = 1):
        """Field for a finite system; tails repeat the end values and are never used."""
        values = tuple(values)
        if not values:
            raise PreconditionError("need at least one coefficient")
        return cls(first_index, first_index + len(values) - 1, values, values[0], values[-1])

    @classmethod
    def from_function(cls, f: Callable[[int], float], n_minus: int, n_plus: int,
                      tail_minus=None, tail_plus=None):
        core = tuple(f(n) for n in range(n_minus, n_plus + 1))
        return cls(n_minus, n_plus, core,
                   core[0] if tail_minus is None else tail_minus,
                   core[-1] if tail_plus is None else tail_plus)

    # evaluation -----------------------------------------------------------

    def __call__(self, n):
        """Coefficient at integer index ``n`` (scalar or integer array)."""
        if np.ndim(n) == 0:
            n = int(n)
            if n < self.n_minus:
                return self.tail_minus
            if n > self.n_plus:
                return self.tail_plus
            return self.core[n - self.n_minus]
        n = np.asarray(n)
        core = np.asarray(self.core, dtype=float)
        idx = np.clip(n - self.n_minus, 0, len(core) - 1).astype(np.int64)
        out = core[idx]
        out = np.where(n < self.n_minus, float(self.tail_minus), out)
        return np.where(n > self.n_plus, float(self.tail_plus), out)

    def values(self, lo: int, hi: int) -> list:
        return [self(n) for n in range(lo, hi + 1)]

    def sup(self) -> float:
        return max(abs(float(v)) for v in (*self.core, self.tail_minus, self.tail_plus))

    def cumulative(self, n):
        """F(n) from the module docstring, for scalar or array ``n`` (float result)."""
        n = np.asarray(n, dtype=float)
        last = self._prefix[-1]
        k = np.clip(n - self.n_minus + 1, 0, len(self._prefix) - 1).astype(np.int64)
        out = self._prefix[k]
        out = np.where(n < self.n_minus - 1,
                       -float(self.tail_minus) * (self.n_minus - 1 - n), out)
        out = np.where(n > self.n_plus, last + float(self.tail_plus) * (n - self.n_plus), out)
        return out if out.ndim else float(out)

    def partial_sum(self, a, b):
        """sum_{i=a}^{b} c_i (zero for b = a - 1); float, vectorized."""
        return self.cumulative(np.asarray(b)) - self.cumulative(np.asarray(a) - 1)

    def exact_partial_sum(self, a: int, b: int):
        """Same as :meth:`partial_sum` but in the arithmetic of the stored values."""
        if b < a - 1:
            raise PreconditionError("empty range needs b == a - 1")
        total = 0
        for i in range(a, b + 1):
            total = total + self(i)
        return total

    def phi(self, n):
        """Phi_n applied to the sequence itself: F(n - 1) - F(-1)."""
        return self.cumulative(np.asarray(n) - 1) - self.cumulative(-1)

    # serialization --------------------------------------------------------

    def to_json(self) -> dict:
        lo, hi = self._json_tails
        return {"n_minus": self.n_minus, "n_plus": self.n_plus,
                "core": [float(v) for v in self.core],
                lo: float(self.tail_minus), hi: float(self.tail_plus)}

    @classmethod
    def from_json(cls, obj: dict):
        lo, hi = cls._json_tails
        missing = [k for k in ("n_minus", "n_plus", "core", lo, hi) if k not in obj]
        if missing:
            raise PreconditionError(f"field JSON is missing {missing}")
        return cls(obj["n_minus"], obj["n_plus"], obj["core"], obj[lo], obj[hi])


class DriftField(CoefficientField):
    _json_tails = ("g_minus", "g_plus")


class DiffusionField(CoefficientField):
    _json_tails = ("s_minus", "s_plus")

    def __post_init__(self):
        super().__post_init__()
        if min(float(v) for v in (*self.core, self.tail_minus, self.tail_plus)) <= 0:
            raise PreconditionError("diffusion coefficients must be strictly positive")


def truncate_field(f: Callable[[int], float], limit_minus: float, limit_plus: float,
                   l2_tol: float = 1e-9, start: int = 1, max_half_width: int = 1 << 20,
                   cls=DriftField):
    """Widen a core around 0 until the square-summable perturbation left outside is small.

    The remainder outside ``[-K, K]`` is estimated by the squared deviation on
    ``[-2K, -K)`` and ``(K, 2K]``; K doubles until both estimates drop below ``l2_tol``.
    """
    k = max(int(start), 1)
    while True:
        left = sum((f(n) - limit_minus) ** 2 for n in range(-2 * k, -k))
        right = sum((f(n) - limit_plus) ** 2 for n in range(k + 1, 2 * k + 1))
        if left < l2_tol and right < l2_tol:
            return cls.from_function(f, -k, k, limit_minus, limit_plus)
        k *= 2
        if k > max_half_width:
            raise PreconditionError("perturbation does not decay fast enough to truncate")


@dataclass(frozen=True)
class Window:
    M: int
    N: int

    def __post_init__(self):
        if not self.M < self.N:
            raise PreconditionError(f"window needs M < N, got [{self.M}, {self.N}]")

    @property
    def ranks(self) -> range:
        return range(self.M, self.N + 1)

    @property
    def gap_indices(self) -> range:
        return range(self.M, self.N)

    def contains(self, other: "Window") -> bool:
        return self.M <= other.M and other.N <= self.N


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Configuration:
    names: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        names = _frozen(self.names, dtype=np.int64)
        positions = _frozen(self.positions)
        if names.shape != positions.shape or names.ndim != 1:
            raise PreconditionError("names and positions must be 1-d and of equal length")
        if len(np.unique(names)) != len(names):
            raise PreconditionError("particle names must be distinct")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "positions", positions)

    @classmethod
    def ranked(cls, positions, first_name: int = 0):
        positions = np.asarray(positions, dtype=float)
        return cls(np.arange(first_name, first_name + len(positions)), positions)

    def __len__(self):
        return len(self.names)


@dataclass(frozen=True)
class RankAssignment:
    """Names listed from the bottom rank to the top rank."""

    permutation: tuple

    def apply(self, config: Configuration) -> Configuration:
        where = {int(n): i for i, n in enumerate(config.names)}
        order = [where[n] for n in self.permutation]
        return Configuration(np.asarray(self.permutation), config.positions[order])

    def is_identity_for(self, config: Configuration) -> bool:
        return tuple(int(n) for n in config.names) == self.permutation


def rank(config: Configuration) -> RankAssignment:
    # lexsort: last key is primary, so ties in position fall back to ascending name
    order = np.lexsort((config.names, config.positions))
    return RankAssignment(tuple(int(n) for n in config.names[order]))


def ranked_configuration(config: Configuration) -> Configuration:
    return rank(config).apply(config)


@dataclass(frozen=True)
class GapVector:
    window: Window
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != (self.window.N - self.window.M,):
            raise PreconditionError(
                f"window {self.window} needs {self.window.N - self.window.M} gaps, got {values.shape}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise PreconditionError("gaps must be finite and nonnegative")
        object.__setattr__(self, "values", values)

    def __getitem__(self, k: int) -> float:
        if not self.window.M <= k < self.window.N:
            raise IndexError(f"gap index {k} outside {self.window}")
        return float(self.values[k - self.window.M])


def gaps_from_ranked(ranked_positions, window: Window | None = None) -> GapVector:
    y = np.asarray(ranked_positions, dtype=float)
    if window is None:
        window = Window(0, len(y) - 1)
    if len(y) != window.N - window.M + 1:
        raise PreconditionError(f"{len(y)} positions do not fit window {window}")
    z = np.diff(y)
    if np.any(z < 0):
        raise PreconditionError("ranked positions must be nondecreasing")
    return GapVector(window, z)


def phi(z: GapVector, n: int) -> float:
    """Position of rank ``n`` relative to rank 0, from the gaps alone."""
    w = z.window
    if not (w.M <= 0 <= w.N):
        raise PreconditionError(f"rank 0 must lie in the window {w}")
    if not w.M <= n <= w.N:
        raise PreconditionError(f"index {n} outside window {w}")
    if n >= 0:
        return float(np.sum(z.values[-w.M: n - w.M]))
    return -float(np.sum(z.values[n - w.M: -w.M]))


def positions_from_gaps(z: GapVector, anchor: float = 0.0) -> np.ndarray:
    """Ranked positions over ``z.window.ranks`` with rank 0 placed at ``anchor``."""
    w = z.window
    if not (w.M <= 0 <= w.N):
        raise PreconditionError(f"rank 0 must lie in the window {w}")
    cum = np.concatenate([[0.0], np.cumsum(z.values)])
    return anchor + (cum - cum[-w.M])
