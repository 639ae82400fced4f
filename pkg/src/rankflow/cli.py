"""Command line runner: config files in, reproducible artifacts out.

Exit codes: 0 success, 1 a verification verdict went against the claim,
2 config or usage error, 3 precondition violated, 4 numerical failure.
Errors are printed to stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from . import __version__
from .acceptance import CRITERIA, EX3, EX4, ZERO, example5_drift, run_criterion
from .errors import NumericalError, PreconditionError, RankflowError
from .io import (batch_to_bytes, batch_to_csv, config_hash, dumps_json, events_to_jsonl,
                 meta_comment, report_csv)
from .model import Configuration, DiffusionField, DriftField, Window
from .rates import (StabilityViolation, difference_residual, finite_rates, geometric_strategy,
                    lambda_ab_sequence, lambda_limit, linear_strategy, power_strategy,
                    sigma_region, window_rates)
from .simulate import (FixedGaps, SimConfig, TwoSidedInit, nice_gaps, pi_ab_gaps, run_replicas,
                       simulate_gap_srbm, simulate_named_finite, simulate_two_sided_adaptive)
from .stats import decay_diagnostic, domination_test, stationarity_report, thinned_samples

__all__ = ["main", "load_schema", "validate_config", "ConfigError"]

EXIT_VERDICT, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_NUMERICAL = 1, 2, 3, 4
EXAMPLES = ("example-1", "example-2", "example-3", "example-4", "example-5", "example-6")


class ConfigError(RankflowError):
    def __init__(self, message, pointer=""):
        super().__init__(message)
        self.pointer = pointer


def load_schema() -> dict:
    return json.loads(resources.files("rankflow").joinpath("config.schema.json").read_text())


def _pointer(parts) -> str:
    return "".join(f"/{p}" for p in parts)


def validate_config(config) -> None:
    """Raise ConfigError for the first schema violation, pointing at the offending key."""
    errors = sorted(Draft202012Validator(load_schema()).iter_errors(config),
                    key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path)), e.message))
    if not errors:
        return
    err = errors[0]
    path = list(err.absolute_path)
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        path += missing[:1]
    elif err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        path += sorted(k for k in err.instance if k not in allowed)[:1]
    raise ConfigError(err.message, _pointer(path))


# --- config to objects ------------------------------------------------------------------

def _drift(config, required=True):
    raw = config.get("drift")
    if raw is None:
        if required:
            raise ConfigError("this command needs a drift", "/drift")
        return None
    return list(map(float, raw)) if isinstance(raw, list) else DriftField.from_json(raw)


def _drift_field(config) -> DriftField:
    g = _drift(config)
    return DriftField.finite(g) if isinstance(g, list) else g


def _diffusion(config, count=None):
    raw = config.get("diffusion", 1.0)
    if isinstance(raw, (int, float)):
        return [float(raw)] * count if count is not None else DiffusionField.constant(float(raw))
    if isinstance(raw, list):
        if count is not None:
            if len(raw) != count:
                raise PreconditionError(f"diffusion has {len(raw)} values for {count} particles")
            return list(map(float, raw))
        return DiffusionField.finite(raw)
    field = DiffusionField.from_json(raw)
    return [float(field(n)) for n in range(1, count + 1)] if count is not None else field


def _sim_config(config, seed) -> SimConfig:
    if "sim" not in config:
        raise ConfigError("'sim' is a required property", "/sim")
    sim = config["sim"]
    return SimConfig(dt=float(sim["dt"]), T=float(sim["T"]), replicas=int(sim.get("replicas", 1)),
                     seed=seed, record_stride=int(sim.get("record_stride", 1)))


def _two_sided_init(config, g) -> TwoSidedInit:
    init = config.get("initial", {})
    core = Window(*init.get("core", [-20, 20]))
    law = init.get("law", "nice")
    if law == "pi":
        gaps = pi_ab_gaps(g, init.get("a", 1.0), init.get("b", 0.0))
    elif law == "nice":
        gaps = nice_gaps(init.get("c1", 1.0), init.get("c2", 0.0))
    else:
        gaps = FixedGaps(_Constant(float(init.get("value", 1.0))))
    return TwoSidedInit(core, gaps, float(init.get("anchor", 0.0)))


class _Constant:
    def __init__(self, value):
        self.value = value

    def __call__(self, n):
        return self.value


def _simulate(config, cfg: SimConfig):
    """Run the configured engine; returns (batch, events)."""
    engine = config.get("engine", "named")
    if engine == "two_sided":
        g = _drift_field(config)
        ts = config.get("two_sided", {})
        kwargs = {"activation_eps": ts.get("activation_eps", 1e-8),
                  "max_absorptions": ts.get("max_absorptions", 10000),
                  "max_tail_particles": ts.get("max_tail_particles", 1_000_000)}
        return run_replicas(simulate_two_sided_adaptive, g, _diffusion(config),
                            _two_sided_init(config, g), cfg=cfg, **kwargs)
    g = _drift(config)
    if not isinstance(g, list):
        raise PreconditionError(f"the {engine} engine needs a finite drift list")
    s = _diffusion(config, len(g))
    init = config.get("initial", {})
    if engine == "named":
        x0 = Configuration.ranked(np.asarray(init.get("positions", np.arange(len(g))), dtype=float))
        return run_replicas(simulate_named_finite, g, s, x0, cfg=cfg), []
    z0 = init.get("gaps", [1.0] * (len(g) - 1))
    return run_replicas(simulate_gap_srbm, g, s, z0, cfg=cfg), []


def _target_rates(config, batch):
    engine = config.get("engine", "named")
    if engine == "two_sided":
        rates = config.get("rates", {})
        init = config.get("initial", {})
        a = rates.get("a", init.get("a", 1.0))
        b = rates.get("b", init.get("b", 0.0))
        lo = batch.first_rank
        return lambda_ab_sequence(_drift_field(config), a, b, lo, lo + batch.Z.shape[2] - 1)
    target = finite_rates(_drift(config))
    if isinstance(target, StabilityViolation):
        raise PreconditionError(f"finite system is unstable: rate {target.first_failing} is not positive")
    return target


# --- subcommands ------------------------------------------------------------------------

class Run:
    """Collects artifacts of one invocation and writes them with shared metadata."""

    def __init__(self, args, config):
        self.args = args
        self.config = config
        self.meta = {"config_hash": config_hash(config), "seed": config.get("seed", 0)}
        out = args.out or config.get("output", {}).get("dir")
        self.out = Path(out) if out else None
        self.files = []

    def emit(self, name, text, show=True):
        if show and not self.args.quiet:
            sys.stdout.write(text)
        self.write(name, text.encode())

    def write(self, name, data: bytes):
        if self.out is None:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / name).write_bytes(data)
        self.files.append(name)

    def json(self, name, obj, show=True):
        self.emit(name, dumps_json({**self.meta, **obj}), show)

    def csv(self, name, text, show=True):
        self.emit(name, meta_comment(self.meta) + text, show)


def cmd_rates(run: Run):
    args, config = run.args, run.config
    if args.finite is not None:
        g = [float(v) for v in args.finite.split(",")]
        mu = finite_rates(g)
        if isinstance(mu, StabilityViolation):
            raise PreconditionError(f"finite system is unstable: rate {mu.first_failing} is not positive")
        run.csv("rates.csv", mu.to_csv())
        return 0
    g = _drift(config)
    if isinstance(g, list):
        mu = finite_rates(g)
        if isinstance(mu, StabilityViolation):
            raise PreconditionError(f"finite system is unstable: rate {mu.first_failing} is not positive")
        run.csv("rates.csv", mu.to_csv())
        g = DriftField.finite(g)
        res = difference_residual(mu, g)
        run.csv("residuals.csv", _residual_csv(res), show=False)
    else:
        rates = config.get("rates", {})
        lo, hi = rates.get("range", [-10, 10])
        lam = lambda_ab_sequence(g, rates.get("a", 1.0), rates.get("b", 0.0), lo, hi)
        res = difference_residual(lam, g)
        run.csv("rates.csv", lam.to_csv())
        run.csv("residuals.csv", _residual_csv(res), show=False)
    if "window" in config.get("rates", {}):
        w, holds = window_rates(g, Window(*config["rates"]["window"]))
        run.csv("window_rates.csv", w.to_csv(), show=False)
        if not holds:
            raise PreconditionError("window rates are not all positive on the requested window")
    return 0


def _residual_csv(res):
    return "\n".join(["index,residual"] + [f"{n},{float(v)!r}" for n, v in zip(res.indices, res.values)]) + "\n"


def cmd_sigma_region(run: Run):
    run.json("sigma_region.json", sigma_region(_drift_field(run.config)).to_json())
    return 0


def _strategy(raw):
    name = raw.get("strategy", "linear")
    if name == "power":
        return power_strategy(raw.get("p", 2.0))
    if name == "geometric":
        return geometric_strategy(raw.get("base", 2.0), raw.get("scale", 2.0))
    return linear_strategy


def cmd_lambda_limit(run: Run):
    raw = run.config.get("limit", {})
    kwargs = {k: raw[k] for k in ("tol", "j_max", "divergence") if k in raw}
    verdict = lambda_limit(_drift_field(run.config), _strategy(raw),
                           indices=raw.get("indices", list(range(-3, 4))), **kwargs)
    run.json("lambda_limit.json", verdict.to_json())
    return 0


def cmd_simulate(run: Run):
    cfg = _sim_config(run.config, run.meta["seed"])
    batch, events = _simulate(run.config, cfg)
    if run.out is None:
        run.out = Path("rankflow-out")
    run.write("trajectory.rkfl", batch_to_bytes(batch, run.meta))
    if run.config.get("output", {}).get("csv", False):
        run.write("trajectory.csv", batch_to_csv(batch, run.meta).encode())
    if events or run.config.get("engine") == "two_sided":
        run.write("events.jsonl", events_to_jsonl(events, run.meta).encode())
    aborted = int(np.sum(batch.aborted)) if batch.aborted is not None else 0
    run.json("summary.json", {"replicas": batch.replicas, "frames": len(batch.times),
                              "first_rank": batch.first_rank, "width": batch.Y.shape[2],
                              "absorptions": len(events), "aborted": aborted})
    return 0


def cmd_verify_stationarity(run: Run):
    config = run.config
    tests = config.get("tests", {})
    batch, _ = _simulate(config, _sim_config(config, run.meta["seed"]))
    target = _target_rates(config, batch)
    rep = stationarity_report(batch, target, burn_in=tests.get("burn_in"),
                              central_indices=tests.get("indices"), alpha=tests.get("alpha", 0.01),
                              max_lag1=tests.get("max_lag1", 0.2))
    run.csv("report.csv", report_csv(rep.csv_rows()), show=False)
    run.json("report.json", rep.to_json())
    return 0 if rep.ks_passed else EXIT_VERDICT


def cmd_verify_domination(run: Run):
    """Common gap of a wider window is tested as dominated by that of a narrower one."""
    config = run.config
    tests = config.get("tests", {})
    g = _drift_field(config)
    narrow, wide = Window(*tests.get("narrow", [0, 2])), Window(*tests.get("wide", [-1, 3]))
    if not wide.contains(narrow):
        raise PreconditionError("the wide window must contain the narrow one")
    k = tests.get("gap", narrow.M)
    if k not in narrow.gap_indices:
        raise PreconditionError(f"gap {k} is not inside the narrow window")
    cfg = _sim_config(config, run.meta["seed"])
    burn_in = tests.get("burn_in", cfg.T / 2)
    samples = {}
    for label, w in (("narrow", narrow), ("wide", wide)):
        _, holds = window_rates(g, w)
        if not holds:
            raise PreconditionError(f"the {label} window has no stationary law")
        vals = [float(g(n)) for n in w.ranks]
        s = [float(_diffusion(config)(n)) for n in w.ranks]
        batch = run_replicas(simulate_gap_srbm, vals, s, [1.0] * (len(vals) - 1), cfg=cfg)
        # engine ranks start at 1, so window gap k is engine gap k - M + 1
        got, _, _ = thinned_samples(batch, [k - w.M + 1], burn_in, tests.get("max_lag1", 0.2))
        samples[label] = next(iter(got.values()))
    verdict = domination_test(samples["wide"], samples["narrow"], tests.get("alpha", 0.01))
    run.json("domination.json", {**verdict.to_json(), "gap": k, "narrow": [narrow.M, narrow.N],
                                 "wide": [wide.M, wide.N], "direction": "wide <= narrow",
                                 "n": [samples["wide"].size, samples["narrow"].size]})
    return EXIT_VERDICT if verdict.rejected else 0


def cmd_verify_decay(run: Run):
    config = run.config
    tests = config.get("tests", {})
    cfg = _sim_config(config, run.meta["seed"])
    batch, events = _simulate(config, cfg)
    k = tests.get("gap", 0)
    times = tests.get("times", [cfg.T / 10, cfg.T])
    keep = ~batch.aborted if batch.aborted is not None else slice(None)
    gap = batch.gap(k)[keep]
    diag = decay_diagnostic({float(t): gap[:, batch.frame_index(t)] for t in times}, z=tests.get("z", 3.0))
    run.json("decay.json", {**diag.to_json(), "gap": k, "absorptions": len(events)})
    return 0 if diag.decreasing else EXIT_VERDICT


SUMMABLE = DriftField.from_function(lambda n: 2.0 ** -abs(n), -60, 60, 0.0, 0.0)


def _example(name):
    if name == "example-1":
        return {"sigma_region": sigma_region(ZERO).to_json(),
                "rates": list(lambda_ab_sequence(ZERO, 1.0, 0.0, -3, 3).values)}
    if name == "example-2":
        r = sigma_region(SUMMABLE)
        return {"sigma_region": r.to_json(), "a_min": r.a_min(0.0)}
    if name == "example-3":
        return {"sigma_region": sigma_region(EX3).to_json(),
                "rates": list(lambda_ab_sequence(EX3, 1.0, -1.0, -3, 3).values)}
    if name == "example-4":
        return {"sigma_region": sigma_region(EX4).to_json()}
    if name == "example-5":
        return {"lambda_limit": lambda_limit(example5_drift(), geometric_strategy(2.0, 2.0), j_max=52).to_json()}
    windows = {str(j): list(window_rates(EX4, Window(1 - j, j))[0].values) for j in range(1, 6)}
    return {"window_rates": windows,
            "lambda_limit": lambda_limit(EX4, linear_strategy, divergence=1e3, j_max=5000).to_json()}


def cmd_repro(run: Run):
    target = run.args.target
    if target == "example-3":
        run.json("example-3.json", sigma_region(EX3).to_json())
        return 0
    if target in EXAMPLES:
        run.json(f"{target}.json", _example(target))
        return 0
    numbers = sorted(CRITERIA) if run.args.only is None else [int(v) for v in run.args.only.split(",")]
    outcomes = []
    for n in numbers:
        o = run_criterion(n)
        outcomes.append(o)
        if not run.args.quiet:
            print(o.line(), file=sys.stderr, flush=True)
    run.json("acceptance.json", {"criteria": [o.to_json() for o in outcomes]}, show=False)
    return 0 if all(o.passed for o in outcomes) else EXIT_VERDICT


COMMANDS = {"rates": cmd_rates, "sigma-region": cmd_sigma_region, "lambda-limit": cmd_lambda_limit,
            "simulate": cmd_simulate, "verify-stationarity": cmd_verify_stationarity,
            "verify-domination": cmd_verify_domination, "verify-decay": cmd_verify_decay,
            "repro": cmd_repro}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="master seed (u64), overrides the config")
    common.add_argument("--out", help="directory for artifacts")
    common.add_argument("--replicas", type=int, help="override sim.replicas")
    common.add_argument("--dt", type=float, help="override sim.dt")
    common.add_argument("--quiet", action="store_true", help="no console output")
    parser = argparse.ArgumentParser(prog="rankflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rankflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    rates = sub.add_parser("rates", parents=[common], help="stationary rates and residuals")
    rates.add_argument("--finite", help="comma separated drifts of a finite system")
    for name in ("sigma-region", "lambda-limit", "simulate", "verify-stationarity",
                 "verify-domination", "verify-decay"):
        sub.add_parser(name, parents=[common])
    repro = sub.add_parser("repro", parents=[common], help="reproduce a worked example or the acceptance suite")
    repro.add_argument("target", choices=EXAMPLES + ("acceptance",))
    repro.add_argument("--only", help="comma separated criterion numbers (acceptance only)")
    sub.add_parser("schema", help="print the config JSON schema")
    return parser


def _load_config(args) -> dict:
    if args.config is None:
        config = {"schema_version": 1}
    else:
        try:
            config = json.loads(args.config.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    validate_config(config)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer", "/seed")
        config["seed"] = args.seed
    for key in ("replicas", "dt"):
        value = getattr(args, key)
        if value is not None:
            config.setdefault("sim", {})[key] = value
    if args.command == "repro":
        config["repro"] = args.target
    return config


def _fail(code, kind, message, **extra):
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": str(message), **extra},
                                sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        sys.stdout.write(json.dumps(load_schema(), indent=2) + "\n")
        return 0
    started = datetime.now(timezone.utc)
    clock = time.perf_counter()
    try:
        config = _load_config(args)
        run = Run(args, config)
        code = COMMANDS[args.command](run)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc, pointer=exc.pointer)
    except PreconditionError as exc:
        return _fail(EXIT_PRECONDITION, "precondition", exc, type=type(exc).__name__)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc, type=type(exc).__name__)
    if run.out is not None:
        sidecar = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
                   "started": started.isoformat(), "finished": datetime.now(timezone.utc).isoformat(),
                   "seconds": time.perf_counter() - clock, "exit_code": code,
                   "rankflow": __version__, "python": platform.python_version(),
                   "numpy": np.__version__, "artifacts": sorted(run.files), **run.meta}
        (run.out / "run.sidecar.json").write_text(dumps_json(sidecar))
    return code


if __name__ == "__main__":
    sys.exit(main())
