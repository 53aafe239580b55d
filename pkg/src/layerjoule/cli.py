"""Command line entry point: profile, estimate, evaluate, prune, integrate."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from .baseline_flops import baseline_from_samples
from .estimator import estimate
from .evaluation import run_comparison
from .gp_core import GpSurface
from .measurement import integrate_trace, make_backend, read_trace_csv
from .model_ir import load_model, serialize_model
from .profiler import (DEFAULT_BUDGET, DEFAULT_VARIANCE_STOP, MAX_GRID_PER_AXIS, PROFILE_ITERATIONS,
                       ProfileDb, ProfilingError, build_plan, run_profiling)
from .pruning import prune_to_budget

DEFAULTS = {
    "model": None,
    "backend": None,
    "out": "out",
    "seed": 0,
    "budget": DEFAULT_BUDGET,
    "var_stop": DEFAULT_VARIANCE_STOP,
    "surrogate": "energy",
    "repeats": 3,
    "n": 100,
    "target_fraction": 0.5,
    "surfaces": None,
    "max_grid": MAX_GRID_PER_AXIS,
    "iterations": PROFILE_ITERATIONS,
    "standby_w": 0.0,
}

# per-command overrides of DEFAULTS
COMMAND_DEFAULTS = {"integrate": {"iterations": 1}, "estimate": {"out": None}}

PROFILE_DB = "profile_db.json"
SURFACE_DIR = "surfaces"


class CliError(Exception):
    pass


def _add_common(p, *names):
    opts = {
        "model": dict(help="model document (JSON)"),
        "backend": dict(help="sim:<config.json> | trace:<dir> | cmd:<command line>"),
        "out": dict(help="output directory"),
        "seed": dict(type=int),
        "budget": dict(type=int, help="max profiled points per layer key"),
        "var_stop": dict(type=float, help="variance stop as a fraction of the mean observed cost"),
        "surrogate": dict(choices=["energy", "time"]),
        "repeats": dict(type=int),
        "n": dict(type=int, help="number of sampled architectures"),
        "target_fraction": dict(type=float),
        "surfaces": dict(help="profile output directory or its surfaces/ subdirectory"),
        "max_grid": dict(type=int, help="max grid values per channel axis"),
        "iterations": dict(type=int, help="training iterations per measurement"),
        "standby_w": dict(type=float, help="standby power in watts"),
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **opts[name])
    p.add_argument("--config", default=None, help="JSON file that may set any flag; flags win")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerjoule", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="profile every layer key and fit its surface")
    _add_common(p, "model", "backend", "out", "seed", "budget", "var_stop", "surrogate", "repeats",
                "max_grid", "iterations", "standby_w")

    p = sub.add_parser("estimate", help="estimate a model's J/iter from fitted surfaces")
    _add_common(p, "model", "surfaces", "out")

    p = sub.add_parser("evaluate", help="compare layer-wise and FLOPs estimates on random architectures")
    _add_common(p, "model", "backend", "surfaces", "out", "seed", "repeats", "n", "iterations", "standby_w")

    p = sub.add_parser("prune", help="randomly prune channels down to an energy budget")
    _add_common(p, "model", "surfaces", "out", "seed", "target_fraction")

    p = sub.add_parser("integrate", help="integrate a power trace CSV into J/iter")
    p.add_argument("trace", help="CSV with header t_s,p_w")
    _add_common(p, "standby_w", "iterations")
    return parser


def resolve(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(getattr(args, "command", None), {}))
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise CliError("config must be a JSON object")
        for k, v in doc.items():
            name = k.replace("-", "_")
            if name not in DEFAULTS:
                raise CliError(f"unknown config key {k!r}")
            cfg[name] = v
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            cfg[k] = v
    return cfg


def _require(cfg, *names):
    for n in names:
        if cfg.get(n) in (None, ""):
            raise CliError(f"--{n.replace('_', '-')} is required")


def _surface_dir(path) -> str:
    sub = os.path.join(path, SURFACE_DIR)
    return sub if os.path.isdir(sub) else path


def load_surfaces(path) -> dict:
    d = _surface_dir(path)
    if not os.path.isdir(d):
        raise CliError(f"surfaces directory {path!r} not found")
    out = {}
    for name in sorted(os.listdir(d)):
        if name.endswith(".json"):
            s = GpSurface.load(os.path.join(d, name))
            out[s.key] = s
    return out


def _profile_db_path(path) -> str:
    for cand in (os.path.join(path, PROFILE_DB), os.path.join(os.path.dirname(os.path.abspath(path)), PROFILE_DB)):
        if os.path.isfile(cand):
            return cand
    raise CliError(f"no {PROFILE_DB} next to {path!r}; the FLOPs baseline is fitted from it")


def save_profile(out_dir, db, surfaces) -> list:
    sdir = os.path.join(out_dir, SURFACE_DIR)
    os.makedirs(sdir, exist_ok=True)
    db.save(os.path.join(out_dir, PROFILE_DB))
    paths = []
    for key, surf in surfaces.items():
        p = os.path.join(sdir, key.slug() + ".json")
        surf.save(p)
        paths.append(p)
    return paths


def cmd_profile(cfg) -> int:
    _require(cfg, "model", "backend")
    model = load_model(cfg["model"])
    backend = make_backend(cfg["backend"], seed=cfg["seed"], standby_power=cfg["standby_w"])
    plan = build_plan(model, budget=cfg["budget"], variance_stop_frac=cfg["var_stop"],
                      surrogate=cfg["surrogate"], max_grid=cfg["max_grid"], repeats=cfg["repeats"],
                      iterations=cfg["iterations"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    marker = os.path.join(out, ".partial")
    t0 = time.perf_counter()
    try:
        result = run_profiling(model, backend, plan)
    except ProfilingError as exc:
        save_profile(out, exc.db, exc.surfaces)
        with open(marker, "w") as fh:
            fh.write(str(exc) + "\n")
        raise
    save_profile(out, result.db, result.surfaces)
    if os.path.exists(marker):
        os.remove(marker)
    wall = time.perf_counter() - t0
    for key in plan.keys:
        n = len(result.db.costs(key))
        print(f"{key.to_str()}: {n} points, stop={result.stops[key].value}")
    print(f"{len(result.surfaces)} surfaces, {result.db.n_measurements()} measurements, "
          f"{result.db.clamp_count()} clamped, wall {wall:.2f} s")
    return 0


def cmd_estimate(cfg) -> int:
    _require(cfg, "model", "surfaces")
    model = load_model(cfg["model"])
    report = estimate(model, load_surfaces(cfg["surfaces"]))
    text = report.to_json()
    print(text)
    if cfg.get("out"):
        os.makedirs(cfg["out"], exist_ok=True)
        with open(os.path.join(cfg["out"], "estimate.json"), "w") as fh:
            fh.write(text + "\n")
    if not report.complete:
        print(report.table().splitlines()[-1], file=sys.stderr)
        return 3
    return 0


def cmd_evaluate(cfg) -> int:
    _require(cfg, "model", "backend", "surfaces")
    model = load_model(cfg["model"])
    surfaces = load_surfaces(cfg["surfaces"])
    baseline = baseline_from_samples(ProfileDb.load(_profile_db_path(cfg["surfaces"])).all_samples())
    # measurement noise stream is offset so it never replays the profiling draws
    backend = make_backend(cfg["backend"], seed=cfg["seed"] + 1_000_003, standby_power=cfg["standby_w"])
    result = run_comparison(model, backend, surfaces, baseline, n=cfg["n"], repeats=cfg["repeats"],
                            seed=cfg["seed"], iterations=cfg["iterations"])
    os.makedirs(cfg["out"], exist_ok=True)
    result.write(os.path.join(cfg["out"], "eval_result.json"), os.path.join(cfg["out"], "cdf.csv"))
    print(f"MAPE layer-wise {result.mape_layerwise:.2f}%  FLOPs {result.mape_flops:.2f}%  "
          f"({len(result.rows)} architectures, {result.excluded} excluded)")
    return 0


def cmd_prune(cfg) -> int:
    _require(cfg, "model", "surfaces")
    model = load_model(cfg["model"])
    pruned, trace = prune_to_budget(model, load_surfaces(cfg["surfaces"]), cfg["target_fraction"], cfg["seed"])
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "pruned_model.json"), "w") as fh:
        fh.write(serialize_model(pruned) + "\n")
    with open(os.path.join(cfg["out"], "prune_trace.json"), "w") as fh:
        fh.write(trace.to_json() + "\n")
    print(f"{trace.stop_reason}: {trace.start:.6f} -> {trace.final:.6f} J/iter "
          f"({trace.final / trace.start:.1%}) in {len(trace.steps)} steps, widths {pruned.interfaces()}")
    return 0 if trace.converged else 4


def cmd_integrate(cfg, path) -> int:
    trace = read_trace_csv(path, standby_power=cfg["standby_w"], iterations=cfg["iterations"])
    print(f"{integrate_trace(trace):.6f} J/iter")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "profile":
            return cmd_profile(cfg)
        if args.command == "estimate":
            return cmd_estimate(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "prune":
            return cmd_prune(cfg)
        return cmd_integrate(cfg, args.trace)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
