"""Command line entry point: ``greedyctrl {offline,online,bench,cost}``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

from . import integrate
from .cost import CostModel, measure, naive_cost, offline_cost, online_cost, parameter_independent_cost, write_table
from .gramian import ControllabilityError, UnsupportedModelError
from .greedy import (
    CAP,
    DEPENDENCY,
    GreedyResult,
    OfflineConfig,
    canonical_errors,
    greedy_errors,
    greedy_offline,
    naive_all_minimizers,
)
from .model import ParameterGrid, system_from_spec
from .online import online_control

log = logging.getLogger("greedyctrl")

EXIT_OK, EXIT_USAGE, EXIT_CONTROLLABILITY, EXIT_INCOMPLETE = 0, 2, 3, 4

CONFIG_KEYS = {"system", "grid", "epsilon", "steps", "max_snapshots", "bounds_sample",
               "affine", "reuse_snapshots", "out"}
SYSTEM_KEYS = {
    "heat": {"builder", "dim", "T", "box"},
    "wave": {"builder", "dim", "T", "box"},
    "files": {"builder", "files", "T", "box"},
}
GRID_KEYS = {"k", "delta"}

BENCHMARKS = {
    "heat": {"system": {"builder": "heat", "dim": 50, "T": 0.1, "box": [[1.0, 2.0]]},
             "grid": {"k": 100}, "epsilon": 1e-4, "query": [math.sqrt(2.0)]},
    "wave": {"system": {"builder": "wave", "dim": 50, "T": 3.0, "box": [[1.0, 10.0]]},
             "grid": {"k": 100}, "epsilon": 0.5, "query": [math.pi]},
}
SMALL = {"heat": {"dim": 10, "k": 20, "epsilon": 1e-6}, "wave": {"dim": 10, "k": 20, "epsilon": 0.05}}


class ConfigError(ValueError):
    pass


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")


def parse_config(raw: dict, base_dir=None):
    """Validate a run configuration; returns ``(system, OfflineConfig)``."""
    _check_keys(raw, CONFIG_KEYS, "config")
    for key in ("system", "grid", "epsilon"):
        if key not in raw:
            raise ConfigError(f"missing key {key!r}")
    spec = raw["system"]
    builder = spec.get("builder") if isinstance(spec, dict) else None
    if builder not in SYSTEM_KEYS:
        raise ConfigError(f"unknown system builder {builder!r}")
    _check_keys(spec, SYSTEM_KEYS[builder], "system")
    if set(SYSTEM_KEYS[builder]) - set(spec):
        raise ConfigError(f"system is missing {sorted(SYSTEM_KEYS[builder] - set(spec))}")
    _check_keys(raw["grid"], GRID_KEYS, "grid")
    try:
        if builder != "files" and int(spec["dim"]) < 1:
            raise ConfigError("system dim must be positive")
        system = system_from_spec(spec, base_dir=base_dir)
        g = raw["grid"]
        if "k" in g:
            grid = ParameterGrid.uniform(system.box, g["k"])
        elif "delta" in g:
            grid = ParameterGrid.from_delta(system.box, float(g["delta"]))
        else:
            raise ConfigError("grid needs k or delta")
        cfg = OfflineConfig(
            epsilon=float(raw["epsilon"]),
            grid=grid,
            max_snapshots=raw.get("max_snapshots"),
            steps=raw.get("steps"),
            bounds_sample=int(raw.get("bounds_sample", 5)),
            affine=bool(raw.get("affine", False)),
            reuse_snapshots=bool(raw.get("reuse_snapshots", False)),
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.steps is not None and int(cfg.steps) < 1:
        raise ConfigError("steps must be positive")
    return system, cfg


def _out_dir(args) -> Path:
    out = os.environ.get("GREEDYCTRL_OUT") or args.out
    return Path(out)


def _write_history(path, values, canonical=None):
    with open(path, "w") as f:
        f.write("n,sigma_greedy,sigma_canonical\n")
        for n, v in enumerate(values):
            c = "" if canonical is None or n >= len(canonical) else repr(canonical[n])
            f.write(f"{n},{v!r},{c}\n")


def _write_control(path, control):
    t = control.grid.times
    M = control.samples.shape[1]
    with open(path, "w") as f:
        f.write("t," + ",".join(f"u{i + 1}" for i in range(M)) + "\n")
        for ti, row in zip(t, control.samples):
            f.write(repr(float(ti)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


def _cost_model(result: GreedyResult, N: int, M: int = 1) -> CostModel:
    return CostModel(N=N, k=len(result.grid), n=result.n, T=result.horizon, dt=result.time_grid.dt, M=M)


def run_offline(system, cfg: OfflineConfig, out: Path) -> tuple[int, GreedyResult | None]:
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = greedy_offline(system, cfg)
    except ControllabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTROLLABILITY, None
    result.save(out / "result.json")
    _write_history(out / "history.csv", result.history)
    bounds = {"bounds": None if result.bounds is None else result.bounds.to_dict(), "note": result.bounds_note}
    (out / "bounds.json").write_text(json.dumps(bounds, indent=1))
    model = _cost_model(result, system.state_dim, system.control_dim)
    write_table(out / "cost.csv", [measure("offline", model, result.sweeps, result.elapsed)])
    print(f"n={result.n} termination={result.termination} steps={result.steps} "
          f"elapsed={result.elapsed:.2f}s")
    print("selected nu: " + " ".join(",".join(f"{v:.6g}" for v in s.nu) for s in result.selected))
    code = EXIT_INCOMPLETE if result.termination in (CAP, DEPENDENCY) else EXIT_OK
    return code, result


def cmd_offline(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
        if args.nt is not None:
            raw["steps"] = args.nt
        if args.affine:
            raw["affine"] = True
        if args.reuse_snapshots:
            raw["reuse_snapshots"] = True
        system, cfg = parse_config(raw, base_dir=Path(args.config).parent)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if "out" in raw and args.out is None and not os.environ.get("GREEDYCTRL_OUT"):
        args.out = raw["out"]
    args.out = args.out or "greedyctrl-out"
    try:
        code, _ = run_offline(system, cfg, _out_dir(args))
    except UnsupportedModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return code


def run_online(system, result: GreedyResult, nu, out: Path):
    integrate.reset_sweeps()
    res = online_control(system, nu, result)
    out.mkdir(parents=True, exist_ok=True)
    _write_control(out / "control.csv", res.control)
    integrate.write_trajectory_csv(out / "trajectory.csv", result.time_grid, res.trajectory)
    summary = res.summary()
    summary["sweeps"] = dict(integrate.SWEEPS)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return res


def cmd_online(args) -> int:
    try:
        result = GreedyResult.load(args.result)
        system = system_from_spec(result.system_spec)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: cannot load result: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args.out = args.out or "greedyctrl-out"
    try:
        res = run_online(system, result, args.nu, _out_dir(args))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"endpoint_error={res.endpoint_error:.6e}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.name not in BENCHMARKS:
        print(f"error: unknown benchmark {args.name!r}; choose from {sorted(BENCHMARKS)}", file=sys.stderr)
        return EXIT_USAGE
    bench = json.loads(json.dumps(BENCHMARKS[args.name]))
    query = bench.pop("query")
    if args.small:
        small = SMALL[args.name]
        bench["system"]["dim"] = small["dim"]
        bench["grid"]["k"] = small["k"]
        bench["epsilon"] = small["epsilon"]
    if args.nt is not None:
        bench["steps"] = args.nt
    system, cfg = parse_config(bench)
    out = _out_dir(argparse.Namespace(out=args.out or f"bench-{args.name}"))
    code, result = run_offline(system, cfg, out)
    if result is None:
        return code
    res = run_online(system, result, query, out / "online")
    print(f"online nu={query[0]:.8g} endpoint_error={res.endpoint_error:.6e}")
    if args.small or args.canonical:
        t0 = time.perf_counter()
        integrate.reset_sweeps()
        oracle = naive_all_minimizers(system, cfg.grid, time_grid=result.time_grid)
        naive_elapsed = time.perf_counter() - t0
        greedy = greedy_errors(oracle, result.phis) if result.n else [canonical_errors(oracle, 0)[0]]
        canonical = canonical_errors(oracle, len(greedy) - 1)
        _write_history(out / "curves.csv", greedy, canonical)
        model = _cost_model(result, system.state_dim, system.control_dim)
        write_table(out / "cost.csv", [
            measure("offline", model, result.sweeps, result.elapsed),
            measure("naive", model, dict(integrate.SWEEPS), naive_elapsed),
        ])
    return code


def cmd_cost(args) -> int:
    if args.result:
        try:
            result = GreedyResult.load(args.result)
            system = system_from_spec(result.system_spec)
        except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
            print(f"error: cannot load result: {exc}", file=sys.stderr)
            return EXIT_USAGE
        model = _cost_model(result, system.state_dim, system.control_dim)
    else:
        missing = [k for k in ("N", "k", "n", "T", "dt") if getattr(args, k) is None]
        if missing:
            print(f"error: give --result or all of --N --k --n --T --dt (missing {missing})", file=sys.stderr)
            return EXIT_USAGE
        try:
            model = CostModel(N=args.N, k=args.k, n=args.n, T=args.T, dt=args.dt)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    print("quantity,value")
    print(f"C,{model.C!r}")
    print(f"offline,{offline_cost(model)!r}")
    print(f"online,{online_cost(model)!r}")
    print(f"naive,{naive_cost(model)!r}")
    print(f"parameter_independent,{parameter_independent_cost(model)!r}")
    if args.result:
        row = measure("offline", model, result.sweeps, result.elapsed)
        print(f"offline_model_sweeps,{row['model_sweeps']!r}")
        print(f"offline_measured_sweeps,{row['measured_sweeps']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="greedyctrl", description=__doc__)
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    off = sub.add_parser("offline", help="run the greedy snapshot selection")
    off.add_argument("--config", required=True)
    off.add_argument("--out")
    off.add_argument("--nt", type=int, help="number of time steps")
    off.add_argument("--affine", action="store_true", help="use precomputed affine Gramian terms")
    off.add_argument("--reuse-snapshots", action="store_true")
    off.set_defaults(func=cmd_offline)

    on = sub.add_parser("online", help="control for one parameter from a stored result")
    on.add_argument("--result", required=True)
    on.add_argument("--nu", type=float, nargs="+", required=True)
    on.add_argument("--out")
    on.set_defaults(func=cmd_online)

    b = sub.add_parser("bench", help="run a built-in benchmark end to end")
    b.add_argument("name")
    b.add_argument("--small", action="store_true", help="N=10, k=20 variant with oracle curves")
    b.add_argument("--canonical", action="store_true", help="also compute oracle and canonical curves")
    b.add_argument("--out")
    b.add_argument("--nt", type=int)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("cost", help="operation-count model table")
    c.add_argument("--result")
    c.add_argument("--N", type=int)
    c.add_argument("--k", type=int)
    c.add_argument("--n", type=int)
    c.add_argument("--T", type=float)
    c.add_argument("--dt", type=float)
    c.set_defaults(func=cmd_cost)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=max(1, args.threads)):
            return args.func(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
