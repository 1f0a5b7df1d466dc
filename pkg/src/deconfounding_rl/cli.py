"""Command-line entry point.

    deconfounding-rl run --config suite.json --out results/

Exit status: 0 success, 2 bad config, 3 a stage failed (or the report has
FAILED cells).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from . import harness as H
from . import weights as W
from .cmdp import ExperimentConfig, save_dataset

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("deconfounding_rl")


class ConfigError(Exception):
    pass


def _configs(args) -> List[ExperimentConfig]:
    if not args.config:
        return [ExperimentConfig()]
    try:
        return H.load_suite(args.config)
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from exc


def _seeds(args, cfg: ExperimentConfig):
    return (args.seed,) if args.seed is not None else cfg.seeds


def _cache(args) -> str:
    return args.cache or os.path.join(args.out, "cache")


def _unique(configs, keys):
    seen = {}
    for cfg in configs:
        seen.setdefault(cfg.digest(keys), cfg)
    return seen


def cmd_gen_data(args, configs) -> int:
    cache = H.Cache(_cache(args))
    for digest, cfg in _unique(configs, H.DATA_KEYS).items():
        ds, cached = H.stage_data(cfg, cache)
        path = os.path.join(args.out, f"dataset-{digest}.csv")
        save_dataset(ds, path)
        print(f"{path} n={len(ds)} scenario={cfg.scenario}{' (cached)' if cached else ''}")
    return EXIT_OK


def _needing_weights(configs):
    chosen = [c for c in configs if H.weights_needed(c)]
    if not chosen:
        log.warning("no config uses weights (all mode=none or bc); nothing to do")
    return chosen


def cmd_fit_density(args, configs) -> int:
    cache = H.Cache(_cache(args))
    for digest, cfg in _unique(_needing_weights(configs), H.DENSITY_KEYS).items():
        ds, _ = H.stage_data(cfg, cache)
        bundle, cached = H.stage_density(cfg, ds, cache)
        target = os.path.join(args.out, f"density-{digest}")
        W.save_bundle(bundle, target)
        print(f"{target} ratio={cfg.ratio_kind}{' (cached)' if cached else ''}")
    return EXIT_OK


def cmd_weights(args, configs) -> int:
    cache = H.Cache(_cache(args))
    for digest, cfg in _unique(_needing_weights(configs), H.WEIGHT_KEYS).items():
        ds, _ = H.stage_data(cfg, cache)
        wv, cached = H.stage_weights(cfg, ds, None, cache)
        path = os.path.join(args.out, f"weights-{digest}.txt")
        W.save_weights(wv, path)
        print(f"{path} mean_raw={wv.mean_raw:.4f} clipped={wv.fraction_clipped:.4f}"
              f" floored={wv.n_floored}{' (cached)' if cached else ''}")
    return EXIT_OK


def cmd_train(args, configs) -> int:
    cache = H.Cache(_cache(args))
    records = []
    for cfg in configs:
        ds, _ = H.stage_data(cfg, cache)
        wv = H.stage_weights(cfg, ds, None, cache)[0] if H.weights_needed(cfg) else None
        for seed in _seeds(args, cfg):
            recs, _, cached = H.stage_train(cfg, ds, wv, seed, cache)
            records.extend(recs)
            best = max(r.mean_return for r in recs)
            print(f"{H.algo_label(cfg.algo, cfg.mode)} seed={seed} best={best:.2f}{' (cached)' if cached else ''}")
    H.emit_csv(records, os.path.join(args.out, "results.csv"))
    return EXIT_OK


def cmd_eval(args, configs) -> int:
    rows, missing = [], 0
    for cfg in configs:
        for seed in _seeds(args, cfg):
            net = H.load_trained(cfg, seed, _cache(args))
            label = H.algo_label(cfg.algo, cfg.mode)
            if net is None:
                log.error("%s seed %d: no trained parameters; run 'train' first", label, seed)
                missing += 1
                continue
            ret = H.evaluate(cfg, net.greedy, seed, cfg.train_steps)
            rows.append(H.EvalRecord(cfg.scenario, cfg.algo, cfg.mode, seed, cfg.train_steps, ret))
            print(f"{label} seed={seed} mean_return={ret:.2f}")
    H.emit_csv(rows, os.path.join(args.out, "eval.csv"))
    return EXIT_STAGE if missing else EXIT_OK


def _cells_from_records(configs, records):
    cells = []
    for cfg in configs:
        mine = [r for r in records if r.scenario == cfg.scenario and r.algo == cfg.algo and r.mode == cfg.mode]
        cells.append(H.make_cell(cfg, mine))
    return cells


def cmd_report(args, configs) -> int:
    path = os.path.join(args.out, "results.csv")
    records = H.read_csv(path) if os.path.exists(path) else []
    if len({H.setting_of(c) for c in configs}) > 1:
        raise ConfigError("report from results.csv needs configs sharing one setting; use 'run' for grids")
    return _write_report(args, _cells_from_records(configs, records))


def _write_report(args, cells) -> int:
    report = os.path.join(args.out, "report.csv")
    complete = H.emit_report(cells, report)
    with open(report, encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK if complete else EXIT_STAGE


def cmd_run(args, configs) -> int:
    seeds = (args.seed,) if args.seed is not None else None
    records, cells, errors = H.run_suite(configs, _cache(args), seeds, args.workers)
    H.emit_csv(records, os.path.join(args.out, "results.csv"))
    status = _write_report(args, cells)
    return EXIT_STAGE if errors else status


COMMANDS = {
    "gen-data": (cmd_gen_data, "simulate the offline datasets"),
    "fit-density": (cmd_fit_density, "fit the conditional density estimators"),
    "weights": (cmd_weights, "compute deconfounding weights"),
    "train": (cmd_train, "train agents (evaluating along the way)"),
    "eval": (cmd_eval, "evaluate trained agents online"),
    "report": (cmd_report, "render the results table from results.csv"),
    "run": (cmd_run, "full pipeline"),
}


def _add_common(p: argparse.ArgumentParser, suppress: bool) -> None:
    # flags may come before or after the subcommand; the subparser copies
    # use SUPPRESS so they do not reset values given earlier
    def d(value):
        return argparse.SUPPRESS if suppress else value

    p.add_argument("--config", default=d(None), help="JSON config: one experiment or {base, runs}")
    p.add_argument("--seed", type=int, default=d(None), help="train/evaluate only this seed")
    p.add_argument("--out", default=d("out"), help="output directory (default: out)")
    p.add_argument("--cache", default=d(None), help="artifact cache directory (default: <out>/cache)")
    p.add_argument("--workers", type=int, default=d(1), help="processes for per-seed training")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deconfounding-rl", description="Deconfounded offline RL experiments")
    _add_common(parser, False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        _add_common(sub.add_parser(name, help=help_text), True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        configs = _configs(args)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command][0](args, configs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except H.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
