"""Stochastic engines for competing Brownian particles.

Three schemes share one noise addressing (see :mod:`rankflow.noise`):

* ``simulate_named_finite``: Euler steps on named particles, re-ranked every step.
* ``simulate_gap_srbm``: the gap process as a reflected Brownian motion, with a
  discrete Skorokhod problem solved per step and local times kept explicitly.
* ``simulate_two_sided_adaptive``: a finite core plus lazily instantiated tail
  particles that move as free Brownian motions until they cross into the core.

All engines record frames at steps ``0, stride, 2 stride, ...`` and at the last step.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import (ExhaustedTailBudget, InternalConsistencyError, ParametersOutsideSigma,
                     PreconditionError, SkorokhodNonconvergence)
from .model import Configuration, DiffusionField, DriftField, GapVector, Window
from .noise import NoiseStream, PhiloxNoise
from .rates import lambda_ab, sigma_region

__all__ = [
    "SimConfig",
    "TrajectoryBatch",
    "AbsorptionEvent",
    "GapLaw",
    "ExponentialGaps",
    "NiceGaps",
    "PiGaps",
    "FixedGaps",
    "nice_gaps",
    "pi_ab_gaps",
    "TwoSidedInit",
    "normal_tail",
    "simulate_named_finite",
    "simulate_gap_srbm",
    "simulate_two_sided_adaptive",
    "simulate_coupled_pair",
    "concat_batches",
    "worker_count",
    "run_replicas",
]

_CHUNK = 4096


@dataclass(frozen=True)
class SimConfig:
    dt: float
    T: float
    replicas: int = 1
    seed: int = 0
    record_stride: int = 1
    first_replica: int = 0

    def __post_init__(self):
        if not self.dt > 0 or not math.isfinite(self.dt):
            raise PreconditionError("dt must be positive")
        if not self.T >= 0 or not math.isfinite(self.T):
            raise PreconditionError("horizon T must be nonnegative")
        if self.replicas < 1:
            raise PreconditionError("need at least one replica")
        if self.record_stride < 1:
            raise PreconditionError("record_stride must be at least 1")
        if self.first_replica < 0:
            raise PreconditionError("first_replica must be nonnegative")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def frame_steps(self) -> np.ndarray:
        n = self.steps
        frames = np.arange(0, n + 1, self.record_stride)
        return frames if frames[-1] == n else np.append(frames, n)

    @property
    def replica_ids(self) -> range:
        return range(self.first_replica, self.first_replica + self.replicas)


@dataclass
class TrajectoryBatch:
    """Recorded frames of a batch of replicas.

    ``Y[r, f, i]`` is the position of rank ``first_rank + i`` and ``Z[r, f, i]`` the
    gap between ranks ``first_rank + i`` and ``first_rank + i + 1``.  ``X`` holds
    named positions with columns ``names`` (finite named engine only);
    ``occupants`` holds the name at each recorded rank (adaptive engine only).
    """

    times: np.ndarray
    first_rank: int
    Y: np.ndarray
    Z: np.ndarray
    X: np.ndarray | None = None
    names: np.ndarray | None = None
    occupants: np.ndarray | None = None
    local_time: np.ndarray | None = None
    aborted: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def replicas(self) -> int:
        return self.Y.shape[0]

    def gap(self, k: int) -> np.ndarray:
        """Gap ``k`` (between ranks k and k+1) as an array ``(replicas, frames)``."""
        i = k - self.first_rank
        if not 0 <= i < self.Z.shape[2]:
            raise PreconditionError(f"gap {k} not recorded")
        return self.Z[:, :, i]

    def frame_index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if not np.isclose(self.times[i], t, rtol=0, atol=1e-9 * max(1.0, abs(t))):
            raise PreconditionError(f"no frame at t = {t}")
        return i


@dataclass(frozen=True)
class AbsorptionEvent:
    replica: int
    time: float
    name: int
    side: str
    window: tuple

    def to_json(self) -> dict:
        return {"replica": self.replica, "time": self.time, "name": self.name,
                "side": self.side, "window": list(self.window)}


def normal_tail(u):
    """P(N(0, 1) > u)."""
    out = ndtr(-np.asarray(u, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def concat_batches(batches: Sequence[TrajectoryBatch]) -> TrajectoryBatch:
    """Stack batches over disjoint consecutive replica ranges, in the given order."""
    first = batches[0]

    def cat(name):
        parts = [getattr(b, name) for b in batches]
        return None if parts[0] is None else np.concatenate(parts, axis=0)

    diagnostics = {}
    for b in batches:
        for key, value in b.diagnostics.items():
            if isinstance(value, list):
                diagnostics.setdefault(key, []).extend(value)
            elif isinstance(value, (int, float)):
                diagnostics[key] = max(diagnostics.get(key, value), value)
    return TrajectoryBatch(first.times, first.first_rank, cat("Y"), cat("Z"), cat("X"),
                           first.names, cat("occupants"), cat("local_time"), cat("aborted"),
                           diagnostics)


def worker_count(default: int = 1) -> int:
    """Process count for replica pools, capped by RANKFLOW_THREADS."""
    raw = os.environ.get("RANKFLOW_THREADS")
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise PreconditionError(f"RANKFLOW_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _split(cfg: SimConfig, parts: int):
    parts = max(1, min(parts, cfg.replicas))
    sizes = [cfg.replicas // parts + (i < cfg.replicas % parts) for i in range(parts)]
    out, first = [], cfg.first_replica
    for size in sizes:
        out.append(replace(cfg, replicas=size, first_replica=first))
        first += size
    return out


def run_replicas(engine: Callable, *args, cfg: SimConfig, workers: int | None = None, **kwargs):
    """Run ``engine(*args, cfg=part, **kwargs)`` over contiguous replica ranges and merge in order.

    Noise is addressed by replica index, so the result does not depend on ``workers``.
    """
    workers = worker_count() if workers is None else workers
    parts = _split(cfg, workers)
    if len(parts) == 1:
        return engine(*args, cfg=cfg, **kwargs)
    with ProcessPoolExecutor(max_workers=len(parts)) as pool:
        results = list(pool.map(partial(_call, engine, args, kwargs), parts))
    if isinstance(results[0], tuple):
        return concat_batches([r[0] for r in results]), [e for r in results for e in r[1]]
    return concat_batches(results)


def _call(engine, args, kwargs, cfg):
    return engine(*args, cfg=cfg, **kwargs)


def _noise_block(noise, replicas, series, names, start, count):
    # (count, replicas, names)
    return np.stack([noise.block(r, series, names, start, count) for r in replicas], axis=1)


def _coefficients(values, n, what):
    arr = np.asarray(values, dtype=float)
    if arr.shape != (n,):
        raise PreconditionError(f"{what} needs {n} entries, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise PreconditionError(f"{what} must be finite")
    return arr


# --- named finite system ----------------------------------------------------------

def simulate_named_finite(g, s, x0: Configuration, cfg: SimConfig,
                          noise: NoiseStream | None = None) -> TrajectoryBatch:
    """Euler scheme for a finite system; ``g[i]``, ``s[i]`` belong to rank ``i + 1``."""
    n = len(x0)
    g = _coefficients(g, n, "drift")
    s = _coefficients(s, n, "diffusion")
    if np.any(s <= 0):
        raise PreconditionError("diffusion coefficients must be positive")
    noise = noise or PhiloxNoise(cfg.seed)
    # columns in ascending name order so a stable sort breaks ties by name
    cols = np.argsort(x0.names, kind="stable")
    names = x0.names[cols]
    reps = list(cfg.replica_ids)
    R = len(reps)
    X = np.tile(x0.positions[cols], (R, 1))
    sqdt = math.sqrt(cfg.dt)
    frames = cfg.frame_steps
    Xrec = np.empty((R, len(frames), n))
    aborted = np.zeros(R, dtype=bool)
    reasons = []
    rows = np.arange(R)[:, None]
    rank_of = np.empty((R, n), dtype=np.int64)
    fi = 0
    step = 0
    total = cfg.steps
    while True:
        if fi < len(frames) and frames[fi] == step:
            Xrec[:, fi] = X
            fi += 1
        if step == total:
            break
        count = min(_CHUNK, total - step)
        xi = _noise_block(noise, reps, "particle", names, step, count)
        for c in range(count):
            order = np.argsort(X, axis=1, kind="stable")
            rank_of[rows, order] = np.arange(n)
            X += g[rank_of] * cfg.dt + s[rank_of] * sqdt * xi[c]
            step += 1
            if not np.isfinite(X).all():
                bad = ~np.isfinite(X).all(axis=1) & ~aborted
                for r in np.flatnonzero(bad):
                    reasons.append({"replica": reps[r], "step": step, "reason": "non-finite position"})
                aborted |= bad
                X[aborted] = np.nan
            if fi < len(frames) and frames[fi] == step and c < count - 1:
                Xrec[:, fi] = X
                fi += 1
    Y = np.sort(Xrec, axis=2, kind="stable")
    return TrajectoryBatch(frames * cfg.dt, 1, Y, np.diff(Y, axis=2), Xrec, names,
                           aborted=aborted, diagnostics={"aborted": reasons})


# --- gap process as a reflected Brownian motion -------------------------------------

def _solve_skorokhod(zstar, tol, max_iter):
    """Projected Gauss-Seidel for z = z* + R dl >= 0, dl >= 0, z.dl = 0.

    R has unit diagonal and -1/2 on the first off-diagonals.  Rows of ``zstar``
    are independent problems.
    """
    m = zstar.shape[1]
    dl = np.zeros_like(zstar)
    for _ in range(max_iter):
        change = 0.0
        for k in range(m):
            w = zstar[:, k].copy()
            if k > 0:
                w -= 0.5 * dl[:, k - 1]
            if k < m - 1:
                w -= 0.5 * dl[:, k + 1]
            new = np.maximum(0.0, -w)
            change = max(change, float(np.max(np.abs(new - dl[:, k]))))
            dl[:, k] = new
        if change <= tol:
            return dl
    raise SkorokhodNonconvergence(f"no convergence to {tol} within {max_iter} sweeps")


def _reflect(dl):
    push = dl.copy()
    push[:, 1:] -= 0.5 * dl[:, :-1]
    push[:, :-1] -= 0.5 * dl[:, 1:]
    return push


def _initial_gaps(z0, R, m):
    if isinstance(z0, GapVector):
        z0 = z0.values
    z = np.asarray(z0, dtype=float)
    if z.ndim == 1:
        z = np.tile(z, (R, 1))
    if z.shape != (R, m):
        raise PreconditionError(f"initial gaps need shape ({m},) or ({R}, {m}), got {z.shape}")
    if np.any(z < 0) or not np.all(np.isfinite(z)):
        raise PreconditionError("initial gaps must be finite and nonnegative")
    return z.copy()


def simulate_gap_srbm(g, s, z0, cfg: SimConfig, noise: NoiseStream | None = None,
                      anchor: float = 0.0, tol: float = 1e-12,
                      max_iter: int = 1000) -> TrajectoryBatch:
    """Reflected gap dynamics of a finite system with explicit local times.

    ``z0`` is a :class:`GapVector`, a vector of gaps, or one row per replica.
    The bottom particle starts at ``anchor``.  ``local_time[r, f, i]`` is the
    cumulative collision local time of ranks ``i + 1`` and ``i + 2``.
    """
    n = len(g)
    g = _coefficients(g, n, "drift")
    s = _coefficients(s, n, "diffusion")
    if n < 2:
        raise PreconditionError("need at least two particles")
    if np.any(s <= 0):
        raise PreconditionError("diffusion coefficients must be positive")
    noise = noise or PhiloxNoise(cfg.seed)
    reps = list(cfg.replica_ids)
    R = len(reps)
    z = _initial_gaps(z0, R, n - 1)
    bottom = np.full(R, float(anchor))
    ledger = np.zeros((R, n - 1))
    frames = cfg.frame_steps
    zrec = np.empty((R, len(frames), n - 1))
    brec = np.empty((R, len(frames)))
    lrec = np.empty((R, len(frames), n - 1))
    sqdt = math.sqrt(cfg.dt)
    ranks = np.arange(1, n + 1)
    worst = 0.0
    clamp = 0.0
    fi = 0
    step = 0
    total = cfg.steps
    while True:
        if fi < len(frames) and frames[fi] == step:
            zrec[:, fi], brec[:, fi], lrec[:, fi] = z, bottom, ledger
            fi += 1
        if step == total:
            break
        count = min(_CHUNK, total - step)
        xi = _noise_block(noise, reps, "rank", ranks, step, count)
        for c in range(count):
            free = g * cfg.dt + s * sqdt * xi[c]
            zstar = z + np.diff(free, axis=1)
            dl = np.zeros_like(z)
            hit = np.flatnonzero((zstar < 0).any(axis=1))
            if hit.size:
                dl[hit] = _solve_skorokhod(zstar[hit], tol, max_iter)
            znew = zstar + _reflect(dl)
            clamp = max(clamp, float(-znew.min(initial=0.0)))
            z = np.maximum(znew, 0.0)
            if hit.size:
                worst = max(worst, float(np.max(np.minimum(z[hit], dl[hit]))))
            bottom = bottom + free[:, 0] - 0.5 * dl[:, 0]
            ledger = ledger + dl
            step += 1
            if fi < len(frames) and frames[fi] == step and c < count - 1:
                zrec[:, fi], brec[:, fi], lrec[:, fi] = z, bottom, ledger
                fi += 1
    Y = brec[:, :, None] + np.concatenate([np.zeros((R, len(frames), 1)),
                                           np.cumsum(zrec, axis=2)], axis=2)
    return TrajectoryBatch(frames * cfg.dt, 1, Y, np.diff(Y, axis=2), local_time=lrec,
                           aborted=np.zeros(R, dtype=bool),
                           diagnostics={"complementarity": worst, "clamp": clamp})


def simulate_coupled_pair(gA, gB, sA, sB, z0A, z0B, cfg: SimConfig,
                          noise: NoiseStream | None = None):
    """Two gap engines driven by the same increments per (rank, step)."""
    if len(gA) != len(gB) or len(sA) != len(sB) or len(gA) != len(sA):
        raise PreconditionError("coupled systems must have the same number of particles")
    zA = np.asarray(z0A.values if isinstance(z0A, GapVector) else z0A, dtype=float)
    zB = np.asarray(z0B.values if isinstance(z0B, GapVector) else z0B, dtype=float)
    if zA.shape != zB.shape:
        raise PreconditionError(f"initial gap shapes differ: {zA.shape} vs {zB.shape}")
    noise = noise or PhiloxNoise(cfg.seed)
    return (simulate_gap_srbm(gA, sA, zA, cfg, noise),
            simulate_gap_srbm(gB, sB, zB, cfg, noise))


# --- initial gap laws for two-sided systems ---------------------------------------

class GapLaw:
    """Law of the gap sequence; ``sample(indices, rng)`` draws gaps at those indices."""

    def sample(self, indices: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class _RateGaps(GapLaw):
    def rate(self, n):
        raise NotImplementedError

    def sample(self, indices, rng):
        rates = np.asarray(self.rate(np.asarray(indices)), dtype=float)
        if np.any(rates <= 0):
            raise PreconditionError("gap rates must be positive")
        return rng.exponential(1.0 / rates)


@dataclass(frozen=True)
class ExponentialGaps(_RateGaps):
    """Independent exponential gaps, gap ``n`` with rate ``rate_fn(n)``."""

    rate_fn: Callable

    def rate(self, n):
        return self.rate_fn(n)


@dataclass(frozen=True)
class NiceGaps(_RateGaps):
    """Rates ``c1 + c2 |n|``: linearly growing, so initial positions stay locally finite."""

    c1: float
    c2: float

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 < 0:
            raise PreconditionError("need c1 > 0 and c2 >= 0")

    def rate(self, n):
        return self.c1 + self.c2 * np.abs(n)


@dataclass(frozen=True)
class PiGaps(_RateGaps):
    """The product law with rates ``lambda_n`` of the (a, b) family."""

    g: DriftField
    a: float
    b: float

    def __post_init__(self):
        if not sigma_region(self.g).contains(self.a, self.b):
            raise ParametersOutsideSigma(
                f"(a, b) = ({self.a}, {self.b}) is outside the positivity region")

    def rate(self, n):
        return lambda_ab(self.g, self.a, self.b, n)


@dataclass(frozen=True)
class FixedGaps(GapLaw):
    """Deterministic gaps ``value(n)``; for scripted runs."""

    value: Callable

    def sample(self, indices, rng):
        return np.array([float(self.value(int(n))) for n in indices])


def nice_gaps(c1: float, c2: float) -> NiceGaps:
    return NiceGaps(float(c1), float(c2))


def pi_ab_gaps(g: DriftField, a: float, b: float) -> PiGaps:
    return PiGaps(g, float(a), float(b))


@dataclass(frozen=True)
class TwoSidedInit:
    """Initial state: core ranks, a gap law for all gaps, and the position of rank 0."""

    core: Window
    law: GapLaw
    anchor: float = 0.0


# --- adaptive two-sided engine --------------------------------------------------------

def _hit_probability(distance, gbar, sbar, T):
    if T <= 0:
        return np.zeros_like(distance)
    return np.minimum(1.0, 2.0 * normal_tail((distance - gbar * T) / (sbar * math.sqrt(T))))


def _tail(law, rng, start, sign, gbar, sbar, T, eps, max_particles):
    """Gaps of one tail, drawn outward until the next particle is out of reach."""
    gaps = []
    distance = 0.0
    block = 64
    n = start
    while True:
        idx = n + sign * np.arange(block)
        z = law.sample(idx, rng)
        if np.any(z <= 0):
            raise PreconditionError("initial spacings must be strictly positive")
        d = distance + np.cumsum(z)
        p = _hit_probability(d, gbar, sbar, T)
        far = np.flatnonzero(p <= eps)
        if far.size:
            gaps.extend(z[:far[0]])
            return np.asarray(gaps)
        gaps.extend(z)
        distance = float(d[-1])
        n += sign * block
        block *= 2
        if len(gaps) > max_particles:
            raise ExhaustedTailBudget(f"more than {max_particles} tail particles within reach")


def simulate_two_sided_adaptive(g: DriftField, s: DiffusionField, init: TwoSidedInit,
                                cfg: SimConfig, activation_eps: float = 1e-8,
                                noise: NoiseStream | None = None, max_absorptions: int = 10_000,
                                max_tail_particles: int = 1_000_000):
    """Two-sided system: finite core plus free tails, absorbing tail particles that cross in.

    Particle names are initial ranks.  Only tail particles whose chance of
    reaching the core within the horizon exceeds ``activation_eps`` are
    created.  Returns the batch over the initial core ranks and the list of
    absorption events.
    """
    core = init.core
    if not (core.M <= 0 < core.N):
        raise PreconditionError(f"core {core} must contain ranks 0 and 1")
    for f in (g, s):
        if not (core.M <= f.n_minus and f.n_plus <= core.N):
            raise PreconditionError(f"core {core} must contain the coefficient core "
                                    f"[{f.n_minus}, {f.n_plus}]")
    if not 0 < activation_eps < 1:
        raise PreconditionError("activation_eps must lie in (0, 1)")
    noise = noise or PhiloxNoise(cfg.seed)
    frames = cfg.frame_steps
    width = core.N - core.M + 1
    reps = list(cfg.replica_ids)
    Y = np.empty((len(reps), len(frames), width))
    occ = np.empty((len(reps), len(frames), width), dtype=np.int64)
    aborted = np.zeros(len(reps), dtype=bool)
    events, tails, reasons = [], [], []
    # largest drift of a tail particle relative to any rank, per side
    drifts = np.array([*g.core, g.tail_minus, g.tail_plus], dtype=float)
    gbar = (float(np.max(np.abs(drifts - g.tail_minus))), float(np.max(np.abs(drifts - g.tail_plus))))
    for i, r in enumerate(reps):
        out = _run_two_sided(g, s, init, cfg, activation_eps, noise, r, frames, gbar,
                             max_absorptions, max_tail_particles)
        Y[i], occ[i], ev, ntail, reason = out
        events.extend(ev)
        tails.append(ntail)
        if reason:
            aborted[i] = True
            reasons.append({"replica": r, **reason})
        if isinstance(noise, PhiloxNoise):
            noise.release(r)
    batch = TrajectoryBatch(frames * cfg.dt, core.M, Y, np.diff(Y, axis=2), occupants=occ,
                            aborted=aborted,
                            diagnostics={"tail_particles": tails, "aborted": reasons})
    return batch, events


def _rank_order(X, perm, names):
    """Re-sort the core permutation by position; exact ties fall back to name order."""
    xc = X[perm]
    q = np.argsort(xc, kind="stable")
    xs = xc[q]
    if np.any(xs[1:] == xs[:-1]):
        q = np.lexsort((names[perm], xc))
        xs = xc[q]
    return perm[q], xs


def _run_two_sided(g, s, init, cfg, eps, noise, replica, frames, gbar, max_abs, max_tail):
    core = init.core
    rng = noise.generator(replica, "init")
    zc = init.law.sample(np.arange(core.M, core.N), rng)
    if np.any(zc <= 0):
        raise PreconditionError("initial spacings must be strictly positive")
    yc = np.concatenate([[0.0], np.cumsum(zc)])
    yc = init.anchor + (yc - yc[-core.M])
    T = cfg.T
    zu = _tail(init.law, rng, core.N, 1, gbar[1], math.hypot(float(s.tail_plus), s.sup()),
               T, eps, max_tail)
    zl = _tail(init.law, rng, core.M - 1, -1, gbar[0], math.hypot(float(s.tail_minus), s.sup()),
               T, eps, max_tail)
    nl, nu = len(zl), len(zu)
    # all particles in ascending name order: lower tail, core, upper tail
    X = np.concatenate([yc[0] - np.cumsum(zl)[::-1], yc, yc[-1] + np.cumsum(zu)])
    names = np.arange(core.M - nl, core.N + nu + 1)
    perm = np.arange(nl, nl + len(yc))          # core particles, bottom rank first
    up = np.arange(nl + len(yc), len(X))
    lo = np.arange(nl)
    r_lo, r_hi = core.M, core.N
    sqdt = math.sqrt(cfg.dt)
    dt = cfg.dt
    g_up, s_up = float(g.tail_plus), float(s.tail_plus)
    g_lo, s_lo = float(g.tail_minus), float(s.tail_minus)

    def coefficients():
        ranks = np.arange(r_lo, r_hi + 1)
        return np.asarray(g(ranks), dtype=float), np.asarray(s(ranks), dtype=float)

    gk, sk = coefficients()
    width = core.N - core.M + 1
    Yf = np.empty((len(frames), width))
    Of = np.empty((len(frames), width), dtype=np.int64)
    events = []
    reason = None

    def record(fi):
        order, xs = _rank_order(X, perm, names)
        off = core.M - r_lo
        Yf[fi] = xs[off:off + width]
        Of[fi] = names[order[off:off + width]]

    fi = 0
    step = 0
    total = cfg.steps
    while True:
        if fi < len(frames) and frames[fi] == step:
            record(fi)
            fi += 1
        if step == total or reason:
            break
        count = min(_CHUNK, total - step)
        xi = noise.block(replica, "particle", names, step, count)
        for c in range(count):
            perm, xs = _rank_order(X, perm, names)
            X[perm] = xs + (gk * dt + sk * sqdt * xi[c, perm])
            if up.size:
                X[up] = X[up] + (g_up * dt + s_up * sqdt * xi[c, up])
            if lo.size:
                X[lo] = X[lo] + (g_lo * dt + s_lo * sqdt * xi[c, lo])
            step += 1
            if not np.isfinite(X).all():
                reason = {"step": step, "reason": "non-finite position"}
                X[:] = np.nan
                break
            changed = False
            while up.size:
                i = int(np.argmin(X[up]))
                j = up[i]
                if not X[j] < X[perm].max():
                    break
                perm = np.append(perm, j)
                up = np.delete(up, i)
                r_hi += 1
                events.append(AbsorptionEvent(replica, step * dt, int(names[j]), "upper", (r_lo, r_hi)))
                changed = True
            while lo.size:
                i = int(np.argmax(X[lo]))
                j = lo[i]
                if not X[j] > X[perm].min():
                    break
                perm = np.insert(perm, 0, j)
                lo = np.delete(lo, i)
                r_lo -= 1
                events.append(AbsorptionEvent(replica, step * dt, int(names[j]), "lower", (r_lo, r_hi)))
                changed = True
            if changed:
                if len(events) > max_abs:
                    raise ExhaustedTailBudget(
                        f"replica {replica}: more than {max_abs} absorptions by t = {step * dt}")
                gk, sk = coefficients()
            if fi < len(frames) and frames[fi] == step and c < count - 1:
                record(fi)
                fi += 1
    if reason:
        Yf[fi:] = np.nan
        Of[fi:] = -1
    if len(perm) != r_hi - r_lo + 1:
        raise InternalConsistencyError("core size out of step with its rank window")
    return Yf, Of, events, nl + nu, reason
