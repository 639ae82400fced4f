"""Reference experiments with fixed seeds and tolerances.

Each ``criterion_*`` function runs one experiment and returns a
:class:`Outcome`; ``passed`` is decided here against the stated tolerance so
the CLI and the test suite share one definition.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .io import batch_to_bytes, dumps_json, events_to_jsonl
from .model import Configuration, DiffusionField, DriftField, Window
from .noise import PhiloxNoise
from .rates import (difference_residual, finite_rates, geometric_strategy,
                    lambda_ab_sequence, lambda_limit, linear_strategy, sigma_region, window_rates)
from .simulate import (SimConfig, TwoSidedInit, nice_gaps, pi_ab_gaps, run_replicas,
                       simulate_coupled_pair, simulate_gap_srbm, simulate_named_finite,
                       simulate_two_sided_adaptive)
from .stats import (coupling_violation, decay_diagnostic, ks_exponential, ks_two_sample,
                    stationarity_report)

__all__ = ["Outcome", "CRITERIA", "run_criterion", "run_all",
           "ZERO", "EX3", "EX4", "example5_drift", "UNIT"]

ZERO = DriftField.constant(0.0)
EX3 = DriftField(0, 1, (0.0, 1.0), 0.0, 1.0)
EX4 = DriftField(0, 1, (1.0, 0.0), 1.0, 0.0)
UNIT = DiffusionField.constant(1.0)
ALPHA = 0.01


def example5_drift(depth: int = 80) -> DriftField:
    """g_n = 2^(n-1) for n <= 0, 0 above; the left tail is cut where it drops below 2^-81."""
    return DriftField.from_function(lambda n: 2.0 ** (n - 1), -depth, 0, 0.0, 0.0)


@dataclass
class Outcome:
    number: int
    title: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number}: {self.title} ({self.seconds:.1f} s)"

    def to_json(self) -> dict:
        return {"number": self.number, "title": self.title, "passed": self.passed,
                "details": self.details}


def _random_field(rng):
    n_minus = int(rng.integers(-5, 4))
    size = int(rng.integers(1, 8))
    core = tuple(float(v) for v in np.round(rng.uniform(-3, 3, size), 6))
    return DriftField(n_minus, n_minus + size - 1, core,
                      float(np.round(rng.uniform(-3, 3), 6)), float(np.round(rng.uniform(-3, 3), 6)))


def criterion_1(seed: int = 1) -> Outcome:
    rng = np.random.default_rng(seed)
    worst = 0.0
    window_mismatch = 0
    exact_failures = 0
    for _ in range(100):
        g = _random_field(rng)
        a, b = rng.uniform(-5, 5, 2)
        lam = lambda_ab_sequence(g, float(a), float(b), g.n_minus - 10, g.n_plus + 10)
        worst = max(worst, max(abs(r) for r in difference_residual(lam, g).values))
        values = list(np.round(rng.uniform(-3, 3, int(rng.integers(2, 10))), 6))
        rates, _ = window_rates(DriftField.finite(values), Window(1, len(values)))
        mu = finite_rates(values)
        window_mismatch += rates.values != mu.values
        q = [Fraction(v).limit_denominator(10**6) for v in values]
        exact = finite_rates(q).values
        qbar = sum(q) / len(q)
        for l in range(1, len(q)):
            for k in range(l + 1, len(q)):
                exact_failures += exact[k - 1] - exact[l - 1] != 2 * sum(q[l:k]) - 2 * (k - l) * qbar
    passed = worst <= 1e-12 and window_mismatch == 0 and exact_failures == 0
    return Outcome(1, "rate algebra identities", passed,
                   {"max_residual": worst, "window_mismatches": window_mismatch,
                    "bvp_failures": exact_failures})


def criterion_2() -> Outcome:
    r1, r3, r4 = sigma_region(ZERO), sigma_region(EX3), sigma_region(EX4)
    ok1 = (r1.b_min == r1.b_max == 0.0 and r1.a_min(0.0) == 0.0
           and r1.contains(1e-12, 0.0) and not r1.contains(0.0, 0.0))
    ok3 = ((r3.b_min, r3.b_max) == (-2.0, 0.0)
           and all(r3.a_min(b) == 0.0 for b in np.linspace(-2.0, 0.0, 41))
           and not r3.contains(0.0, -1.0))
    ok4 = r4.empty
    return Outcome(2, "positivity region golden values", ok1 and ok3 and ok4,
                   {"example_1": r1.to_json(), "example_3": r3.to_json(), "example_4": r4.to_json()})


def criterion_3() -> Outcome:
    g5 = example5_drift()
    v5 = lambda_limit(g5, geometric_strategy(2.0, 2.0), j_max=52)
    errors = {}
    for k, (kind, value) in v5.outcomes.items():
        oracle = 2 * sum(2.0 ** (n - 1) for n in range(-400, min(k, 0) + 1))
        errors[k] = abs(value - oracle) if kind == "finite" else float("inf")
    v4 = lambda_limit(EX4, linear_strategy, indices=range(-3, 4), keep_history=True,
                      divergence=1e3, j_max=5000)
    monotone = all(b >= a for hist in v4.history.values()
                   for (_, a), (_, b) in zip(hist, hist[1:]))
    passed = v5.kind == "finite" and max(errors.values()) <= 1e-6 and v4.kind == "infinite" and monotone
    return Outcome(3, "limit classification", passed,
                   {"example_5": v5.to_json(), "max_error": max(errors.values()),
                    "example_4": v4.to_json(), "monotone": monotone})


def criterion_4(seed: int = 4, replicas: int = 200) -> Outcome:
    details = {}
    passed = True
    for g, name in (([1.0, 0.0], "N=2"), ([2.0, 1.0, 0.0], "N=3")):
        # 200 replicas x 1000 frames in (100, 200] = 2e5 post-burn-in samples before thinning
        cfg = SimConfig(dt=1e-3, T=200.0, replicas=replicas, seed=seed, record_stride=100)
        x0 = Configuration.ranked(np.arange(len(g), dtype=float))
        batch = run_replicas(simulate_named_finite, g, [1.0] * len(g), x0, cfg=cfg)
        target = finite_rates(g)
        rep = stationarity_report(batch, target, burn_in=100.0, alpha=ALPHA)
        raw = int(batch.Z[:, batch.times > 100.0, 0].size)
        rates_ok = all(abs(s.rate_mle - s.target_rate) <= 0.05 * s.target_rate for s in rep.gaps)
        ok = rates_ok and rep.ks_passed
        if len(g) == 3:
            ok = ok and rep.max_abs_correlation() < 0.05
        passed &= ok
        details[name] = {"raw_samples": raw, **rep.to_json()}
    return Outcome(4, "finite-system stationarity", passed, details)


def _two_sided(g, a, b, seed, replicas, eps):
    cfg = SimConfig(dt=1e-3, T=1.0, replicas=replicas, seed=seed, record_stride=1000)
    init = TwoSidedInit(Window(-20, 20), pi_ab_gaps(g, a, b))
    return run_replicas(simulate_two_sided_adaptive, g, UNIT, init, cfg=cfg,
                        activation_eps=eps, max_absorptions=10**6)


def criterion_5(seed: int = 5, replicas: int = 400) -> Outcome:
    batch, events = _two_sided(ZERO, 1.0, 0.0, seed, replicas, 1e-8)
    d0, p0 = ks_exponential(batch.gap(0)[:, -1], 1.0)
    # log-dense tails: a coarser activation threshold keeps the particle count near 4e3
    batch3, events3 = _two_sided(EX3, 1.0, -1.0, seed, replicas, 1e-2)
    per_gap = {}
    for n in range(-3, 4):
        rate = 1 - n + 2 * max(n, 0)
        per_gap[n] = ks_exponential(batch3.gap(n)[:, -1], rate)
    passed = p0 > ALPHA and all(p > ALPHA for _, p in per_gap.values())
    return Outcome(5, "two-sided stationarity", passed,
                   {"zero_drift": {"ks_stat": d0, "ks_p": p0, "absorptions": len(events)},
                    "example_3": {str(n): {"ks_stat": d, "ks_p": p} for n, (d, p) in per_gap.items()},
                    "example_3_absorptions": len(events3)})


def criterion_6(seed: int = 6, replicas: int = 400) -> Outcome:
    cfg = SimConfig(dt=5e-3, T=10.0, replicas=replicas, seed=seed, record_stride=200)
    init = TwoSidedInit(Window(-20, 20), nice_gaps(1.0, 0.01))
    batch, events = run_replicas(simulate_two_sided_adaptive, EX4, UNIT, init, cfg=cfg)
    z0 = batch.gap(0)
    diag = decay_diagnostic({1.0: z0[:, batch.frame_index(1.0)], 10.0: z0[:, batch.frame_index(10.0)]})
    return Outcome(6, "convergence of gaps to zero", diag.decreasing,
                   {**diag.to_json(), "absorptions": len(events)})


def criterion_7(seed: int = 7, replicas: int = 200) -> Outcome:
    z0B = PhiloxNoise(seed).generator(0, "init").exponential(1.0, size=(replicas, 1))
    results = {}
    for dt in (1e-3, 5e-4):
        cfg = SimConfig(dt=dt, T=5.0, replicas=replicas, seed=seed, record_stride=1)
        pair = simulate_coupled_pair([1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 1.0],
                                     0.5 * z0B, z0B, cfg)
        mean, frac = coupling_violation(pair, tolerance=10 * dt, floor=1e-12)
        results[dt] = {"mean_violation": mean, "fraction_above_10dt": frac}
    coarse, fine = results[1e-3]["mean_violation"], results[5e-4]["mean_violation"]
    return Outcome(7, "coupling preserves gap order", fine <= 0.5 * coarse,
                   {str(k): v for k, v in results.items()})


def criterion_8(seed: int = 8, replicas: int = 8) -> Outcome:
    z0 = PhiloxNoise(seed).generator(0, "init").exponential(1.0, size=(replicas, 1))
    cfg = SimConfig(dt=1e-3, T=500.0, replicas=replicas, seed=seed, record_stride=10_000)
    batch = simulate_gap_srbm([1.0, 0.0], [1.0, 1.0], z0, cfg)
    rate = float(np.mean(batch.local_time[:, -1, 0]) / cfg.T)
    comp = batch.diagnostics["complementarity"]
    monotone = bool(np.all(np.diff(batch.local_time, axis=1) >= 0))
    passed = abs(rate - 1.0) <= 0.1 and comp <= 1e-12 and monotone
    return Outcome(8, "local-time rate", passed,
                   {"rate": rate, "complementarity": comp, "ledger_monotone": monotone})


def _conditioned(values, ok, count):
    idx = np.flatnonzero(ok)[:count]
    return values[idx], int(ok.sum())


def criterion_9(seed: int = 9, replicas: int = 1400, wanted: int = 1000,
                threshold: float = 0.2) -> Outcome:
    g = [0.5, 0.25, 0.0, -0.25, -0.5]
    x0 = [-2.5, -0.5, 0.0, 0.5, 2.5]
    cfg = SimConfig(dt=1e-3, T=0.5, replicas=replicas, seed=seed, record_stride=1)
    five = simulate_named_finite(g, [1.0] * 5, Configuration.ranked(x0), cfg)
    outer_ok = (five.Z[:, :, 0].min(axis=1) > threshold) & (five.Z[:, :, 3].min(axis=1) > threshold)
    inc5 = five.Z[:, -1, 2] - five.Z[:, 0, 2]
    # standalone: three ranked particles plus two free Brownian motions, independent noise
    cfg3 = SimConfig(dt=1e-3, T=0.5, replicas=replicas, seed=seed + 1, record_stride=1)
    three = simulate_named_finite(g[1:4], [1.0] * 3, Configuration.ranked(x0[1:4], first_name=1), cfg3)
    noise = PhiloxNoise(seed + 1)
    steps = cfg3.steps
    free = np.stack([noise.block(r, "outer", [0, 4], 0, steps) for r in cfg3.replica_ids])
    walk = np.concatenate([np.zeros((replicas, 1, 2)), np.cumsum(free, axis=1)], axis=1)
    t = three.times[None, :]
    bottom = x0[0] + g[0] * t + np.sqrt(cfg3.dt) * walk[:, :, 0]
    top = x0[4] + g[4] * t + np.sqrt(cfg3.dt) * walk[:, :, 1]
    ok3 = ((three.Y[:, :, 0] - bottom).min(axis=1) > threshold) & \
          ((top - three.Y[:, :, 2]).min(axis=1) > threshold)
    inc3 = three.Z[:, -1, 1] - three.Z[:, 0, 1]
    a, n5 = _conditioned(inc5, outer_ok, wanted)
    b, n3 = _conditioned(inc3, ok3, wanted)
    d, p = ks_two_sample(a, b)
    passed = len(a) == wanted and len(b) == wanted and p > ALPHA
    return Outcome(9, "locality of the interior gap", passed,
                   {"ks_stat": d, "ks_p": p, "conditioned_five": n5, "conditioned_three": n3,
                    "used": [len(a), len(b)]})


def _artifacts(seed: int) -> dict:
    cfg = SimConfig(dt=1e-2, T=1.0, replicas=4, seed=seed, record_stride=1)
    named = simulate_named_finite([2.0, 1.0, 0.0], [1.0] * 3, Configuration.ranked([0.0, 0.5, 1.0]), cfg)
    gaps = simulate_gap_srbm([2.0, 1.0, 0.0], [1.0] * 3, [0.5, 0.5], cfg)
    two, events = simulate_two_sided_adaptive(
        EX4, UNIT, TwoSidedInit(Window(-5, 5), nice_gaps(1.0, 0.1)), cfg)
    rep = stationarity_report(named, finite_rates([2.0, 1.0, 0.0]), burn_in=0.0, alpha=ALPHA,
                              max_lag1=1.0)
    blobs = {"named.rkfl": batch_to_bytes(named), "gaps.rkfl": batch_to_bytes(gaps),
             "two_sided.rkfl": batch_to_bytes(two), "events.jsonl": events_to_jsonl(events).encode(),
             "report.json": dumps_json(rep.to_json()).encode(),
             "criterion_2.json": dumps_json(criterion_2().to_json()).encode()}
    return {k: hashlib.sha256(v).hexdigest() for k, v in blobs.items()}


def criterion_10(seed: int = 10) -> Outcome:
    first, second = _artifacts(seed), _artifacts(seed)
    return Outcome(10, "determinism", first == second, {"sha256": first})


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10}


def run_criterion(number: int, **kwargs) -> Outcome:
    start = time.perf_counter()
    out = CRITERIA[number](**kwargs)
    out.seconds = time.perf_counter() - start
    return out


def run_all(numbers=None):
    return [run_criterion(n) for n in (numbers or sorted(CRITERIA))]
