"""Command line entry point: ``covrep run|gen|train``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from .. import __version__
from ..datagen import REP_KINDS, gen_taskset, load_taskset, save_taskset
from ..metalearn import DivergenceError, MetaConfig, maml_train, model_to_json
from ..numerics import Rng
from .config import PROTOCOLS, ConfigError, ExperimentConfig, load_config_file
from .protocols import RUNNERS, verify_outputs

log = logging.getLogger("covrep")

# flag name -> config key
_RUN_FLAGS = {
    "d": "d",
    "r": "r",
    "K": "K",
    "n": "n",
    "reps": "reps",
    "p": "p_a",
    "n_seeds": "n_seeds",
    "repeats": "repeats",
    "meta_iters": None,
}


def _seed_fallback(explicit):
    if explicit is not None:
        return explicit
    env = os.environ.get("COVREP_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"COVREP_SEED must be an integer, got {env!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="covrep", description="Covariate representation experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a named protocol")
    run.add_argument("protocol", choices=PROTOCOLS)
    run.add_argument("--config", help="JSON config file; flags override its values")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (default covrep_out/<protocol>)")
    run.add_argument("--verify", action="store_true", help="recompute aggregates from raw rows and compare")
    run.add_argument("--generator", choices=REP_KINDS)
    run.add_argument("--s", type=int, action="append", help="representation dimension (repeatable)")
    run.add_argument("--d", type=int)
    run.add_argument("--r", type=int)
    run.add_argument("--K", type=int)
    run.add_argument("--n", type=int)
    run.add_argument("--p", type=float, help="acceptance probability p_a")
    run.add_argument("--reps", type=int)
    run.add_argument("--n-seeds", dest="n_seeds", type=int)
    run.add_argument("--repeats", type=int)
    run.add_argument("--shots", type=int, nargs="+")
    run.add_argument("--meta-iters", dest="meta_iters", type=int)

    gen = sub.add_parser("gen", help="write a simulated task set as CSVs")
    gen.add_argument("--generator", choices=REP_KINDS, default="linear")
    gen.add_argument("--d", type=int, default=300)
    gen.add_argument("--r", type=int, default=50)
    gen.add_argument("--K", type=int, default=20)
    gen.add_argument("--n", type=int, default=1000)
    gen.add_argument("--propensity", choices=("fixed", "neural"), default="fixed")
    gen.add_argument("--p", type=float, default=0.5)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", required=True)

    train = sub.add_parser("train", help="meta-train on a saved task set and write the model JSON")
    train.add_argument("--tasks", required=True, help="task-set manifest.json")
    train.add_argument("--out", required=True, help="model JSON path")
    train.add_argument("--config", help="JSON file with MetaConfig fields")
    train.add_argument("--seed", type=int)
    train.add_argument("--s", type=int)
    train.add_argument("--meta-iters", dest="meta_iters", type=int)
    return ap


def _run(args) -> int:
    overrides = load_config_file(args.config) if args.config else {}
    seed = _seed_fallback(args.seed)
    if seed is not None:
        overrides["seed"] = seed
    elif "seed" not in overrides:
        overrides["seed"] = 0
    for flag, key in _RUN_FLAGS.items():
        val = getattr(args, flag)
        if val is None:
            continue
        if flag == "meta_iters":
            overrides["meta"] = {**overrides.get("meta", {}), "meta_iters": val}
        else:
            overrides[key] = val
    if args.generator:
        overrides["generators"] = [args.generator]
    if args.s:
        overrides["s"] = args.s
    if args.shots:
        overrides["shots"] = args.shots
    out = Path(args.out or overrides.get("out") or Path("covrep_out") / args.protocol)
    overrides["out"] = str(out)
    cfg = ExperimentConfig.build(args.protocol, overrides)

    manifest_path = out / "manifest.json"
    if args.verify and manifest_path.exists():
        man = json.loads(manifest_path.read_text())
        if man.get("protocol") == args.protocol:
            return _report_verify(args.protocol, out, man["config"]["s"])

    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    files = RUNNERS[args.protocol](cfg, out)
    manifest = {
        "protocol": args.protocol,
        "config": cfg.to_dict(),
        "versions": {"covrep": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "wall_time_s": round(time.perf_counter() - start, 3),
        "files": files + sorted(str(p.relative_to(out)) for p in (out / "models").glob("*.json")) if (out / "models").exists() else files,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(files)} result files to {out}")
    if args.verify:
        return _report_verify(args.protocol, out, cfg.s)
    return 0


def _report_verify(protocol, out, s_values) -> int:
    ok = verify_outputs(protocol, out, s_values)
    print("verify: aggregates match raw rows" if ok else "verify: MISMATCH between aggregates and raw rows")
    return 0 if ok else 1


def _gen(args) -> int:
    seed = _seed_fallback(args.seed) or 0
    ts = gen_taskset(args.generator, args.d, args.r, args.K, args.n, Rng(seed), propensity=args.propensity, p=args.p)
    path = save_taskset(ts, args.out, args.generator, seed)
    print(f"wrote {len(ts.tasks)} tasks and a target to {path.parent}")
    return 0


def _train(args) -> int:
    values = load_config_file(args.config) if args.config else {}
    if args.s is not None:
        values["s"] = args.s
    if args.meta_iters is not None:
        values["meta_iters"] = args.meta_iters
    try:
        mcfg = MetaConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    seed = _seed_fallback(args.seed) or 0
    ts = load_taskset(args.tasks)
    model = maml_train(ts, mcfg, Rng(seed))
    Path(args.out).write_text(model_to_json(model))
    print(f"final outer loss {model.history[-1]:.4f}" if model.history else "no iterations run")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _run, "gen": _gen, "train": _train}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"covrep: error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, ValueError, OSError, ArithmeticError, KeyError) as exc:
        print(f"covrep: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
