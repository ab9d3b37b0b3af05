"""Command line interface: ``ultrlab <subcommand> ...``.

Exit status is 0 only when every requested artifact was written and read
back successfully; configuration problems exit with 2, runtime failures with 1.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ._io import atomic_write_json
from .data import LetorParseError, generate_synthetic, normalize_features, parse_letor, split_dataset, write_letor
from .harness import TRACE_COLUMNS, ConfigError, ExperimentConfig, _pad_dim, load_splits, repeat_and_compare, run
from .metrics import CUTOFFS, METRICS, evaluate_scores
from .ranker import RankerParams, forward
from .simulator import ClickModel, PropensityEstimationError, estimate_propensity_by_randomization, save_propensities, load_propensities

log = logging.getLogger("ultrlab")

OUTPUT_ENV = "ULTRLAB_OUTPUT_DIR"
CLI_KEYS = ("output_dir", "log_level")


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _positive(name):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {v}")
        return v

    return parse


def _output_dir(flag, config_value=None) -> Path:
    if flag:
        return Path(flag)
    if config_value:
        return Path(config_value)
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def load_config(path) -> tuple[ExperimentConfig, dict]:
    """Parse a JSON config file; returns the experiment config and the CLI-only keys."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", 2) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})", 2) from None
    if not isinstance(raw, dict):
        raise CliError(f"{path}: top level must be an object", 2)
    extra = {k: raw.pop(k) for k in CLI_KEYS if k in raw}
    if extra.get("output_dir"):
        extra["output_dir"] = str((path.parent / extra["output_dir"]).resolve())
    try:
        config = ExperimentConfig.from_dict(raw, base_dir=path.parent)
    except (ConfigError, ValueError, TypeError) as exc:
        raise CliError(f"{path}: {exc}", 2) from None
    return config, extra


def _check_json(path):
    try:
        json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"artifact {path} failed validation: {exc}") from None


def _check_csv(path, columns):
    with open(path, newline="") as fh:
        header = next(csv.reader(fh), None)
    if header != list(columns):
        raise CliError(f"artifact {path} has header {header}, expected {list(columns)}")


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    full = generate_synthetic(args.queries, args.docs, args.dim, args.seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for part in split_dataset(full):
            p = out / f"{part.split_tag}.txt"
            write_letor(part, p)
            paths.append(p)
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}") from None
    total = sum(len(parse_letor(p)) for p in paths)
    if total != args.queries:
        raise CliError(f"wrote {total} queries, expected {args.queries}")
    log.info("wrote %s", ", ".join(map(str, paths)))
    return 0


def cmd_estimate_propensity(args) -> int:
    if args.sessions < 1:
        raise CliError(f"--sessions must be >= 1, got {args.sessions}", 2)
    if args.data:
        try:
            dataset = parse_letor(Path(args.data))
        except FileNotFoundError:
            raise CliError(f"dataset not found: {args.data}") from None
        except LetorParseError as exc:
            raise CliError(f"{args.data}: {exc}") from None
    else:
        dataset = split_dataset(generate_synthetic(1000, 25, 20, args.data_seed))[0]
    try:
        model = ClickModel(eta=args.eta, epsilon=args.epsilon)
        weights = estimate_propensity_by_randomization(dataset, model, args.sessions, np.random.default_rng(args.seed))
    except (ValueError, PropensityEstimationError) as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out)
    try:
        save_propensities(out, weights)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}") from None
    load_propensities(out)
    print(json.dumps([round(float(w), 4) for w in weights]))
    return 0


def cmd_run(args) -> int:
    config, extra = load_config(args.config)
    seed = config.seeds[0] if args.seed is None else args.seed
    out = _output_dir(args.out, extra.get("output_dir"))
    record = run(config, seed)
    stem = out / f"{config.label}_seed{seed}"
    json_path, csv_path = stem.with_suffix(".json"), stem.with_suffix(".csv")
    try:
        out.mkdir(parents=True, exist_ok=True)
        record.save(json_path, csv_path)
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}") from None
    _check_json(json_path)
    _check_csv(csv_path, TRACE_COLUMNS)
    print(f"{config.label} seed={seed} test ndcg@10={record.test_mean():.4f} (step {record.selected_step}) -> {json_path}")
    return 0


def cmd_compare(args) -> int:
    configs = {}
    out_flag = None
    for path in args.configs:
        config, extra = load_config(path)
        if config.label in configs:
            raise CliError(f"duplicate system name {config.label!r}; set distinct 'name' keys", 2)
        configs[config.label] = config
        out_flag = out_flag or extra.get("output_dir")
    if args.baseline is not None and args.baseline not in configs:
        raise CliError(f"baseline {args.baseline!r} is not among {sorted(configs)}", 2)
    try:
        report = repeat_and_compare(configs, args.repeats, args.baseline, args.permutations, args.workers)
    except ValueError as exc:
        raise CliError(str(exc), 2) from None
    out = _output_dir(args.out, out_flag)
    csv_path, json_path = out / f"{args.prefix}.csv", out / f"{args.prefix}.json"
    try:
        out.mkdir(parents=True, exist_ok=True)
        report.save(csv_path, json_path)
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}") from None
    _check_json(json_path)
    _check_csv(csv_path, ("system", "metric", "cutoff", "mean", "std", "p_vs_baseline"))
    for row in report.rows():
        if row["metric"] == "ndcg" and row["cutoff"] == 10:
            p = row["p_vs_baseline"]
            print(f"{row['system']:>16} ndcg@10 {row['mean']:.4f} +- {row['std']:.4f}" + (f"  p={p:.4g}" if p != "" else ""))
    return 0


def _load_checkpoint(path) -> tuple[RankerParams, ExperimentConfig | None]:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    try:
        if "checkpoint" in raw:
            return RankerParams.from_dict(raw["checkpoint"]), ExperimentConfig.from_dict(raw["config"])
        return RankerParams.from_dict(raw), None
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError(f"{path}: not a run record or ranker checkpoint ({exc})") from None


def cmd_evaluate(args) -> int:
    params, config = _load_checkpoint(args.checkpoint)
    try:
        test = parse_letor(Path(args.test), "test")
    except FileNotFoundError:
        raise CliError(f"test file not found: {args.test}") from None
    except LetorParseError as exc:
        raise CliError(f"{args.test}: {exc}") from None
    if test.feature_dim > params.input_dim:
        raise CliError(f"test file has {test.feature_dim} features, checkpoint expects {params.input_dim}")
    if test.feature_dim < params.input_dim:
        test = _pad_dim(test, params.input_dim)
    if not args.raw_features:
        # rescale with the training ranges the checkpoint was fitted on
        if args.train:
            train = parse_letor(Path(args.train))
        elif config is not None and config.data.normalize:
            train = load_splits(dataclasses.replace(config.data, normalize=False)).train
        else:
            train = None
        if train is not None:
            if train.feature_dim < params.input_dim:
                train = _pad_dim(train, params.input_dim)
            _, test = normalize_features(train, test)
    scores = forward(params, test.padded.features, keep_cache=False)
    metrics = evaluate_scores(test, scores)
    summary = {m: {str(k): float(metrics[m][k].mean()) for k in CUTOFFS} for m in METRICS}
    if args.out:
        try:
            atomic_write_json(args.out, {"checkpoint": str(args.checkpoint), "test": str(args.test), "metrics": summary})
        except OSError as exc:
            raise CliError(f"cannot write {args.out}: {exc}") from None
        _check_json(args.out)
    print(json.dumps(summary, indent=2))
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ultrlab", description="Unbiased learning-to-rank experiments on simulated clicks.")
    parser.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic LETOR dataset split 80/10/10")
    g.add_argument("--queries", type=_positive("--queries"), default=1000)
    g.add_argument("--docs", type=_positive("--docs"), default=25)
    g.add_argument("--dim", type=_positive("--dim"), default=20)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", required=True, help="output directory for train.txt/valid.txt/test.txt")
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("estimate-propensity", help="estimate examination propensities by result randomization")
    e.add_argument("--data", help="LETOR file of queries to shuffle (default: the synthetic benchmark's train split)")
    e.add_argument("--data-seed", type=int, default=1)
    e.add_argument("--eta", type=float, default=1.0)
    e.add_argument("--epsilon", type=float, default=0.1)
    e.add_argument("--sessions", type=int, default=200_000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="JSON file for the 10 weights")
    e.set_defaults(func=cmd_estimate_propensity)

    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, default=None, help="overrides the first seed in the config")
    r.add_argument("--out", default=None, help=f"output directory (default: config output_dir, ${OUTPUT_ENV}, ./runs)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="repeat several configurations and test them against a baseline")
    c.add_argument("--configs", nargs="+", required=True)
    c.add_argument("--baseline", default=None, help="system name (config 'name' or algorithm_paradigm)")
    c.add_argument("--repeats", type=_positive("--repeats"), default=5)
    c.add_argument("--permutations", type=_positive("--permutations"), default=10_000)
    c.add_argument("--workers", type=_positive("--workers"), default=1)
    c.add_argument("--prefix", default="report")
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("evaluate", help="score a checkpoint on a LETOR test file")
    v.add_argument("--checkpoint", required=True, help="run record JSON or ranker checkpoint JSON")
    v.add_argument("--test", required=True)
    v.add_argument("--train", default=None, help="LETOR file whose feature ranges were used in training")
    v.add_argument("--raw-features", action="store_true", help="skip min-max rescaling")
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = args.log_level
    if level is None and getattr(args, "config", None):
        try:
            level = json.loads(Path(args.config).read_text()).get("log_level")
        except (OSError, ValueError, AttributeError):
            level = None
    logging.basicConfig(level=level or "WARNING", format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"ultrlab {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"ultrlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
