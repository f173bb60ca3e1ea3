"""egat-route: generate data, train, evaluate, benchmark, sweep, gradcheck, render."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import baselines, config as C
from .autodiff import NonFiniteError
from .decoding import DecodePolicy, Ensemble, decode, default_temperature, greedy_decode
from .env import CVRP, TSP, generate_cvrp, generate_tsp, tour_length
from .gradcheck import run_suite
from .model import EGATModel
from .problem_io import (
    REFERENCE_OPTIMA, Checkpoint, CheckpointError, MetricsLog, ParseError, apply_checkpoint,
    load_checkpoint, load_dataset, make_row, normalize_instance, parse_file, render_svg,
    save_checkpoint, save_dataset, write_report,
)
from .training import PPOTrainer, RolloutTrainer

OUTPUT_ROOT_ENV = "EGAT_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
LIB_SUFFIXES = (".tsp", ".vrp")

log = logging.getLogger("egat_routing")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out_dir(args, command, cfg_hash):
    path = Path(args.out) if args.out else output_root() / f"{command}-{cfg_hash[:12]}"
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- config handling ---------------------------------------------------------------

def _add_config_args(p):
    p.add_argument("--config", help="JSON run config; flags below override it")
    p.add_argument("--preset", choices=sorted(C.PRESETS), help="start from a named preset")
    p.add_argument("--problem", choices=(TSP, CVRP))
    p.add_argument("--size", type=int, help="customers (CVRP) or nodes (TSP)")
    p.add_argument("--trainer", choices=C.TRAINERS)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="epochs for the selected trainer")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field, e.g. model.n_layers=3 (repeatable)")


def build_config(args):
    if args.config:
        base = C.preset(args.preset) if args.preset else C.default_config()
        cfg = C.merge(base, C.strip_hash(C.load_config(args.config)))
    elif args.preset:
        cfg = C.preset(args.preset)
    else:
        cfg = C.desk_config()
    if args.problem:
        cfg["problem"] = args.problem
        cfg["model"]["problem"] = args.problem
    for key in ("size", "trainer", "seed"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if args.epochs is not None:
        cfg[cfg["trainer"]]["epochs"] = args.epochs
    for assignment in args.set:
        C.apply_override(cfg, assignment)
    if getattr(args, "out", None):
        cfg["output"] = str(args.out)
    return C.validate(cfg)


# -- training ------------------------------------------------------------------------

def make_trainer(cfg, model, init=True):
    cls = PPOTrainer if cfg["trainer"] == "ppo" else RolloutTrainer
    return cls(model, C.trainer_config(cfg), cfg["size"], cfg["seed"], cfg["capacity"], init=init)


def _latest_checkpoint(directory):
    cps = sorted(Path(directory).glob("epoch_*.ckpt"))
    return cps[-1] if cps else None


def run_training(cfg, out, resume=False, quiet=False):
    """Train with one checkpoint per epoch; returns the list of per-epoch metrics."""
    out = Path(out)
    cfg_hash = C.config_hash(cfg)
    C.write_config(cfg, out)
    torch.manual_seed(cfg["seed"])
    model = EGATModel(C.model_config(cfg))
    metrics = MetricsLog(out, cfg_hash)
    last = _latest_checkpoint(out) if resume else None
    if last is not None:
        cp = load_checkpoint(last, expected_config=model.cfg)
        if cp.metadata.get("config_hash") != cfg_hash:
            raise UsageError(f"{last} was written by a different config; refusing to resume")
        apply_checkpoint(model, cp)
        trainer = make_trainer(cfg, model, init=False)
        trainer.load_state(cp.trainer_tensors(), cp.metadata["trainer_state"])
        log.info("resumed from %s at epoch %d", last.name, trainer.epoch)
    else:
        trainer = make_trainer(cfg, model)
        metrics.reset()
        for stale in out.glob("epoch_*.ckpt"):
            stale.unlink()
    for result in trainer.train():
        meta = {"config_hash": cfg_hash, "epoch": result.epoch, "trainer_state": trainer.state_meta()}
        cp = Checkpoint.from_model(model, meta, trainer.state_tensors())
        save_checkpoint(cp, out / f"epoch_{result.epoch:03d}.ckpt")
        metrics.append(result.metrics)
        if not quiet:
            print(f"epoch {result.epoch}: val_gap={result.metrics['val_gap']:.4%} "
                  f"val_length={result.metrics['val_length']:.4f}", flush=True)
    return trainer.history


def cmd_train(args):
    cfg = build_config(args)
    out = _out_dir(args, "train", C.config_hash(cfg))
    run_training(cfg, out, resume=args.resume)
    print(f"wrote checkpoints and metrics to {out}")


def cmd_sweep(args):
    cfg = build_config(args)
    axes = dict(cfg.get("sweep", {}))
    for item in args.axis:
        name, _, values = item.partition("=")
        if name not in C.SWEEP_AXES or not values:
            raise UsageError(f"bad --axis {item!r}; use e.g. n_layers=3,4,5,6")
        axes[name] = [int(v) for v in values.split(",")]
    cells = C.sweep_cells(cfg, axes)
    if not cells:
        raise UsageError("sweep has no cells")
    out = _out_dir(args, "sweep", C.config_hash(cfg))
    summary = []
    for values, cell in cells:
        name = "cell_" + "_".join(f"{k}{v}" for k, v in values.items())
        cell["output"] = str(out / name)
        print(f"{name}: {values}", flush=True)
        if args.dry_run:
            continue
        (out / name).mkdir(exist_ok=True)
        history = run_training(cell, out / name, quiet=True)
        final = history[-1]
        summary.append({"cell": name, **values, "config_hash": C.config_hash(cell),
                        "val_gap": final["val_gap"], "val_length": final["val_length"]})
        print(f"  final val_gap={final['val_gap']:.4%}", flush=True)
    if summary:
        (out / "sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"{len(cells)} cells under {out}")


# -- data ----------------------------------------------------------------------------

def cmd_generate(args):
    if args.n < 1:
        raise UsageError("--n must be positive")
    rng = np.random.default_rng(args.seed)
    if args.kind == TSP:
        insts = [generate_tsp(args.size, rng=rng) for _ in range(args.n)]
        capacity = None
    else:
        insts = [generate_cvrp(args.size, rng=rng, capacity=args.capacity) for _ in range(args.n)]
        capacity = insts[0].capacity
    manifest = {"kind": args.kind, "size": args.size, "n": args.n, "seed": args.seed, "capacity": capacity}
    manifest["config_hash"] = C.config_hash(manifest)
    out = Path(args.out) if args.out else output_root() / f"{args.kind}{args.size}_n{args.n}_s{args.seed}.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, insts, manifest)
    print(f"wrote {args.n} {args.kind.upper()}{args.size} instances to {out}")


def load_instances(args):
    """(name, instance as given, model-ready instance, scale, is_library_file) tuples."""
    items = []
    for path in args.instances:
        path = Path(path)
        if path.suffix in LIB_SUFFIXES:
            inst = parse_file(path)
            norm, scale = normalize_instance(inst)
            items.append((inst.name or path.stem, inst, norm, scale, True))
        else:
            insts, _ = load_dataset(path, kind=getattr(args, "kind", None),
                                    size=getattr(args, "size", None))
            stem = path.stem
            items += [(f"{stem}#{i}", inst, inst, 1.0, False) for i, inst in enumerate(insts)]
    if not items:
        raise UsageError("no instances given")
    return items


def _length(inst, seq, library):
    # library files are scored in their own units with the rounded integer metric
    return tour_length(inst, seq, metric="tsplib" if library else "euclidean")


def _references(args, items):
    mode = args.reference
    if mode == "none":
        return [None] * len(items)
    if mode == "heldkarp":
        refs = []
        for _, inst, _, _, lib in items:
            if inst.kind != TSP or inst.n_nodes > baselines.HELD_KARP_MAX_NODES:
                raise UsageError(f"held-karp reference needs TSP with at most "
                                 f"{baselines.HELD_KARP_MAX_NODES} nodes")
            refs.append(_length(inst, baselines.held_karp(inst)[1], lib))
        return refs
    if mode == "file":
        refs = []
        for name, *_ in items:
            if name not in REFERENCE_OPTIMA:
                raise UsageError(f"no stored reference optimum for {name!r}")
            refs.append(float(REFERENCE_OPTIMA[name]))
        return refs
    if mode.startswith("baseline:"):
        method = mode.split(":", 1)[1]
        return [_length(inst, baselines.solve(inst, method).tour, lib) for _, inst, _, _, lib in items]
    raise UsageError(f"unknown reference {mode!r}")


def _report(args, rows, out_dir, cfg_hash):
    if args.no_timing:
        for r in rows:
            r["seconds"] = 0.0
    path = out_dir / f"report.{args.format}"
    full = write_report(rows, path, config_hash=cfg_hash)
    for r in full:
        if r["instance"] == "__mean__":
            gap = "n/a" if r["gap"] is None else f"{r['gap']:.4%}"
            print(f"{r['method']:>28}: mean length {r['length']:.4f}  gap {gap}")
    print(f"wrote {path}")


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_ensemble(paths):
    files = []
    for p in paths:
        p = Path(p)
        files += sorted(p.glob("epoch_*.ckpt")) if p.is_dir() else [p]
    if not files:
        raise UsageError("no checkpoints found")
    return Ensemble([load_checkpoint(f) for f in files]), files


def cmd_evaluate(args):
    ens, ckpt_files = _load_ensemble(args.checkpoint)
    items = load_instances(args)
    refs = _references(args, items)
    for _, inst, *_ in items:
        if inst.kind != ens.config.problem:
            raise UsageError(f"checkpoint solves {ens.config.problem}, instance is {inst.kind}")
    policy = DecodePolicy(args.decode, args.temperature or 1.0, args.samples)
    method = "ensemble_greedy" if len(ens) > 1 else f"model_{args.decode}"
    # hash file contents, not paths, so a rerun elsewhere gets the same hash
    run = {"checkpoints": [_digest(p) for p in ckpt_files], "decode": args.decode,
           "temperature": args.temperature, "samples": args.samples, "seed": args.seed,
           "reference": args.reference, "instances": [_digest(p) for p in args.instances]}
    cfg_hash = C.config_hash(run)
    out = _out_dir(args, "evaluate", cfg_hash)
    rows = []
    for i, ((name, inst, norm, _, lib), ref) in enumerate(zip(items, refs)):
        start = time.perf_counter()
        if len(ens) > 1:
            if args.decode != "greedy":
                raise UsageError("ensembles decode greedily")
            tr = ens.solve(norm)
        elif args.decode == "greedy":
            tr = greedy_decode(ens.models[0], norm)
        else:
            lam = args.temperature or default_temperature(norm.kind, norm.n_customers)
            tr = decode(ens.models[0], norm, DecodePolicy("sample", lam, args.samples), args.seed, i)
        seconds = time.perf_counter() - start
        rows.append(make_row(name, method, _length(inst, tr.sequence, lib), ref, seconds))
    paths = {"checkpoint_paths": [str(p) for p in ckpt_files], "instance_paths": list(map(str, args.instances))}
    (out / "run.json").write_text(json.dumps(dict(run, config_hash=cfg_hash, **paths), indent=2, sort_keys=True) + "\n")
    _report(args, rows, out, cfg_hash)


def _methods(arg, kind):
    if kind == CVRP:
        return list(baselines.CVRP_METHODS)
    if arg == "all":
        return [m for m in baselines.TSP_METHODS if m != "held_karp"]
    return arg.split(",")


def cmd_baseline(args):
    items = load_instances(args)
    refs = _references(args, items)
    kind = items[0][1].kind
    methods = _methods(args.methods, kind)
    run = {"methods": methods, "reference": args.reference, "seed": args.seed,
           "instances": [_digest(p) for p in args.instances]}
    cfg_hash = C.config_hash(run)
    out = _out_dir(args, "baseline", cfg_hash)
    rows = []
    for method in methods:
        for (name, inst, _, _, lib), ref in zip(items, refs):
            try:
                res = baselines.solve(inst, method, args.seed)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            rows.append(make_row(name, method, _length(inst, res.tour, lib), ref, res.seconds))
    _report(args, rows, out, cfg_hash)


# -- misc ------------------------------------------------------------------------------

def cmd_gradcheck(args):
    start = time.perf_counter()
    results = run_suite(args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        note = " (negative control: must fail)" if r.expect_fail else ""
        print(f"{r.name:<{width}}  err={r.error:.3e}  tol={r.tol:.0e}  {'PASS' if r.passed else 'FAIL'}{note}")
    bad = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    if bad:
        raise NonFiniteError("gradcheck", "failed: " + ", ".join(bad))


def cmd_render(args):
    items = load_instances(args)
    if not 0 <= args.index < len(items):
        raise UsageError(f"--index {args.index} out of range for {len(items)} instances")
    name, inst, norm, _, _ = items[args.index]
    if args.checkpoint:
        seq = greedy_decode(_load_ensemble([args.checkpoint])[0].models[0], norm).sequence
    elif inst.kind == CVRP:
        seq = baselines.cvrp_greedy_reference(inst)
    else:
        seq = baselines.solve(inst, args.method).tour
    out = Path(args.out) if args.out else output_root() / f"{name.replace('#', '_')}.svg"
    out.parent.mkdir(parents=True, exist_ok=True)
    render_svg(inst, seq, out, omit_depot_edges=args.omit_depot_edges)
    print(f"wrote {out}")


def build_parser():
    parser = _Parser(prog="egat-route", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a random instance dataset")
    p.add_argument("--kind", choices=(TSP, CVRP), default=TSP)
    p.add_argument("--size", type=int, default=20)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--capacity", type=float, help="normalised capacity for non-standard CVRP sizes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model, one checkpoint per epoch")
    _add_config_args(p)
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train every cell of the embedding/layer grid")
    _add_config_args(p)
    p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2",
                   help=f"sweep axis, one of {', '.join(C.SWEEP_AXES)} (repeatable)")
    p.add_argument("--dry-run", action="store_true", help="list the cells without training")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    for name, func, helptext in (("evaluate", cmd_evaluate, "decode instances with trained checkpoints"),
                                 ("baseline", cmd_baseline, "run classical heuristics")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("instances", nargs="+", help="dataset .npz files or TSPLIB/CVRPLIB files")
        if name == "evaluate":
            p.add_argument("--checkpoint", nargs="+", required=True,
                           help="checkpoint files or run directories (several -> greedy ensemble)")
            p.add_argument("--decode", choices=("greedy", "sample"), default="greedy")
            p.add_argument("--temperature", type=float, help="sampling temperature (default: tuned per size)")
            p.add_argument("--samples", type=int, default=1280)
        else:
            p.add_argument("--methods", default="all",
                           help="comma separated method names or 'all'")
        p.add_argument("--reference", default="none",
                       help="heldkarp | file (stored optima for library instances) | baseline:<method> | none")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--no-timing", action="store_true",
                       help="write 0 for wall times so reruns are byte-identical")
        p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", help="draw a solution as SVG")
    p.add_argument("instances", nargs="+")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--checkpoint", help="decode greedily with this checkpoint (default: a heuristic)")
    p.add_argument("--method", default="farthest_insertion+2opt")
    p.add_argument("--omit-depot-edges", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, ParseError, CheckpointError) as exc:  # before ValueError: both subclass it
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
