"""Command-line entry point: data synthesis, training, sampling, evaluation and proof checks."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .data import WaxmanConfig, waxman_generate
from .generator import PRESETS, ConfigError
from .graph import GraphError, is_connected, random_connected_graph, read_jsonl, write_jsonl
from .metrics import evaluate, histograms, shared_ranges
from .pooling import chain_length_bound, pooling_chain, replay_chain
from .train import NumericalError, TrainConfig, Trainer, train

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3, 4
DEFAULT_SEED = 0

log = logging.getLogger("ungraph")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc


def _read_graphs(path) -> list:
    if path is None:
        raise ConfigError("a graph file is required")
    try:
        return read_jsonl(path)
    except FileNotFoundError as exc:
        raise GraphError(f"graph file not found: {path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise GraphError(f"malformed graph file {path}: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(args, section: dict) -> TrainConfig:
    rec = dict(section)
    for key in ("preset", "seed", "iters", "mode"):
        value = getattr(args, key, None)
        if value is not None:
            rec[key] = value
    if getattr(args, "spec", None):
        rec["spec_path"] = args.spec
    return TrainConfig.from_dict(rec)


# -- subcommands


def cmd_gen_data(args, cfg: dict) -> int:
    rec = dict(cfg.get("data", {}))
    if args.count is not None:
        rec["n_graphs"] = args.count
    try:
        wcfg = WaxmanConfig(**rec)
    except TypeError as exc:
        raise ConfigError(f"unknown data option: {exc}") from exc
    graphs = waxman_generate(wcfg, np.random.default_rng(args.seed))
    out = Path(args.out or "waxman.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, graphs)
    print(f"kept {len(graphs)} of {wcfg.n_graphs} graphs -> {out}")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    data = _read_graphs(args.data)
    reference = _read_graphs(args.reference) if args.reference else None
    out = _out_dir(args)
    if args.resume:
        trainer = Trainer.load(args.resume, data, reference)
        remaining = (args.iters if args.iters is not None else trainer.cfg.iters) - trainer.iteration
    else:
        tcfg = _train_config(args, cfg.get("train", {}))
        trainer = Trainer(tcfg, data, reference)
        remaining = tcfg.iters
    train(trainer, max(remaining, 0), out)
    print(f"trained to iteration {trainer.iteration} -> {out / 'checkpoint.json'}")
    if trainer.best_iteration >= 0:
        print(f"best evaluation at iteration {trainer.best_iteration} (selection score {trainer.best_score:.4f})")
    return EXIT_OK


def _load_trainer(args) -> Trainer:
    try:
        trainer = Trainer.load(args.checkpoint)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {args.checkpoint}") from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed checkpoint {args.checkpoint}: {exc}") from exc
    if args.best:
        if trainer.best_state is None:
            raise ConfigError("checkpoint holds no evaluated best weights (train with --reference)")
        trainer.use_best()
    return trainer


def cmd_sample(args, cfg: dict) -> int:
    trainer = _load_trainer(args)
    count = args.count if args.count is not None else 16
    rng = np.random.default_rng(args.seed)
    if trainer.cfg.mode == "adj":
        graphs = trainer.gen.sample(count, rng)
        logp = np.full(len(graphs), np.nan)
    else:
        graphs, logp = trainer.gen.sample(count, rng)
    out = Path(args.out or "samples.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for g, lp in zip(graphs, logp):
            rec = json.loads(g.to_json())
            rec["logp"] = float(lp)
            fh.write(json.dumps(rec) + "\n")
    connected = sum(is_connected(g) for g in graphs)
    print(f"wrote {len(graphs)} graphs ({connected} connected) -> {out}")
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    generated = _read_graphs(args.generated)
    reference = _read_graphs(args.reference)
    if not generated or not reference:
        raise GraphError("evaluation needs two nonempty graph sets")
    report = evaluate(generated, reference)
    print(report.to_text())
    if args.out:
        out = _out_dir(args)
        (out / "report.txt").write_text(report.to_text() + "\n")
        (out / "report.csv").write_text(report.to_csv() + "\n")
        with open(out / "histograms.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["property", "set", "bin_left", "bin_right", "frequency"])
            ranges = shared_ranges(generated, reference)
            for label, graphs in (("generated", generated), ("reference", reference)):
                for prop, (edges, dens) in sorted(histograms(graphs, ranges=ranges).items()):
                    for k, d in enumerate(dens):
                        w.writerow([prop, label, edges[k], edges[k + 1], d])
    return EXIT_OK


def cmd_roundtrip(args, cfg: dict) -> int:
    if args.data:
        graphs = _read_graphs(args.data)
    else:
        rng = np.random.default_rng(args.seed)
        count = args.count if args.count is not None else 100
        graphs = [random_connected_graph(int(rng.integers(3, 17)), rng, p_extra=float(rng.random()) * 0.5) for _ in range(count)]
    ok = 0
    lines = []
    for k, g in enumerate(graphs):
        if g.n < 3 or not is_connected(g):
            raise GraphError(f"graph {k} must be connected with at least three nodes")
        steps = pooling_chain(g)
        rebuilt = replay_chain(steps)
        same = g.n == 3 if rebuilt is None else rebuilt.edge_set() == g.structure().edge_set()
        bound = chain_length_bound(g.n)
        good = same and len(steps) == bound
        ok += good
        lines.append(f"{k:>6} n={g.n:<4} chain={len(steps):<3} bound={bound:<3} {'ok' if good else 'FAIL'}")
    if args.verbose:
        print("\n".join(lines))
    print(f"reconstructed {ok}/{len(graphs)} graphs with chain length = ceil(log2(n/3))")
    return EXIT_OK if ok == len(graphs) else EXIT_CHECK


def cmd_gradcheck(args, cfg: dict) -> int:
    from .gradcheck import format_rows, run_gradchecks

    rows = run_gradchecks(args.count if args.count is not None else 5, corrupt=args.corrupt)
    print(format_rows(rows))
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return EXIT_OK if not failed else EXIT_CHECK


def cmd_interpolate(args, cfg: dict) -> int:
    trainer = _load_trainer(args)
    if trainer.cfg.mode == "adj":
        raise ConfigError("interpolation needs an unpooling generator")
    gen = trainer.gen
    d_in = gen.spec.d_in
    z0 = np.random.default_rng(args.seed).standard_normal((1, d_in))
    z1 = np.random.default_rng(args.seed + 1).standard_normal((1, d_in))
    n_steps = int(round(1.0 / args.step)) + 1
    out = Path(args.out or "interpolation.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    gen.eval()
    with open(out, "w") as fh, torch.no_grad():
        for k in range(n_steps):
            t = min(k * args.step, 1.0)
            z = torch.as_tensor(t * z1 + (1 - t) * z0, dtype=torch.float64)
            res = gen(z, np.random.default_rng(args.seed))
            rec = json.loads(res.graphs.to_graphs()[0].to_json())
            rec["t"] = t
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {n_steps} graphs -> {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "roundtrip": cmd_roundtrip,
    "gradcheck": cmd_gradcheck,
    "interpolate": cmd_interpolate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with [data] and [train] tables")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ungraph", description="Graph generation with unpooling layers.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="synthesize a Waxman dataset (JSONL)")
    s.add_argument("--count", type=int, help="number of draws before filtering")

    s = sub.add_parser("train", parents=[common], help="train a generator")
    s.add_argument("--data", required=True, help="training graphs (JSONL)")
    s.add_argument("--reference", help="held-out graphs for periodic evaluation")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--spec", help="generator spec TOML (overrides --preset)")
    s.add_argument("--mode", choices=("gan", "vae", "adj"))
    s.add_argument("--iters", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("sample", parents=[common], help="draw graphs from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--best", action="store_true", help="use the weights of the best periodic evaluation")

    s = sub.add_parser("eval", parents=[common], help="compare two graph sets")
    s.add_argument("--generated", required=True)
    s.add_argument("--reference", required=True)

    s = sub.add_parser("roundtrip", parents=[common], help="pool to three nodes and rebuild by forced unpooling")
    s.add_argument("--data", help="graphs to check (default: random connected graphs)")
    s.add_argument("--count", type=int)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--count", type=int, help="number of random configurations")
    s.add_argument("--corrupt", action="store_true", help="negative control: shift every analytic gradient")

    s = sub.add_parser("interpolate", parents=[common], help="decode along a line between two latent vectors")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--step", type=float, default=0.1)
    s.add_argument("--best", action="store_true", help="use the weights of the best periodic evaluation")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("UNGRAPH_THREADS")
    try:
        if threads:
            try:
                torch.set_num_threads(max(1, int(threads)))
            except ValueError as exc:
                raise ConfigError(f"UNGRAPH_THREADS must be an integer, got {threads!r}") from exc
        if getattr(args, "step", 1.0) <= 0 or getattr(args, "step", 1.0) > 1:
            raise ConfigError("--step must lie in (0, 1]")
        if getattr(args, "count", None) is not None and args.count < 0:
            raise ConfigError("--count must be nonnegative")
        return COMMANDS[args.command](args, _load_config(args.config))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GraphError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
