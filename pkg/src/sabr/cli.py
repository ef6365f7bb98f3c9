"""Command-line driver: preprocess, train, evaluate, ablate, sweep, replay.

Every command writes into one output directory and leaves a
``replay.json`` there; ``sabr replay RUN_DIR --out NEW_DIR`` regenerates the
same outputs from it. Run configs are JSON objects with ``model``,
``train``, ``eval`` and (for generated data) ``data`` sections.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import os
import sys

from sabr import __version__
from sabr.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from sabr.evaluation import SCHEMES, evaluate, pop_baseline, write_report
from sabr.ingest import (PARSERS, EmptyDatasetError, ParseError, PreprocessRules, preprocess, read_dataset,
                         write_dataset)
from sabr.model import ModelConfig, num_parameters, variant_name
from sabr.numerics import NumericsError
from sabr.synthetic import session_signal_dataset, toy_dataset
from sabr.training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("sabr")

OUTPUT_ENV = "SABR_OUTPUT_DIR"
REPLAY_FILE = "replay.json"
REQUIRED_KEYS = {
    "model": ("max_len", "hidden", "layers", "heads"),
    "train": ("batch_size", "lr", "max_epochs"),
}
GENERATORS = {"synthetic:session": session_signal_dataset, "synthetic:toy": toy_dataset}
SWEEP_PARAMS = {"m": ("max_sessions", "use_sse"), "d_T": ("temporal_dim", "use_tas")}
VARIANT_FLAGS = list(itertools.product((False, True), repeat=3))


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# config and data helpers


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str] | None = None) -> dict:
    """Read a JSON config and apply ``section.key=value`` overrides."""
    config: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                config = json.load(f)
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from None
    for item in overrides or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise CliError(f"override must look like section.key=value, got {item!r}")
        config.setdefault(section, {})[name] = _parse_value(value)
    return config


def check_required(config: dict) -> None:
    missing = [f"{sec}.{key}" for sec, keys in REQUIRED_KEYS.items()
               for key in keys if key not in config.get(sec, {})]
    if missing:
        raise CliError("missing config keys: " + ", ".join(missing))


def load_data(source: str, data_kwargs: dict | None = None):
    if source in GENERATORS:
        return GENERATORS[source](**(data_kwargs or {}))
    if not os.path.isdir(source):
        raise CliError(f"data directory not found: {source}")
    return read_dataset(source)


def default_out(command: str) -> str:
    return os.path.join(os.environ.get(OUTPUT_ENV, "runs"), command)


def _write_replay(out: str, command: str, args: dict, config: dict | None) -> None:
    with open(os.path.join(out, REPLAY_FILE), "w", encoding="utf-8") as f:
        json.dump({"command": command, "args": args, "config": config, "version": __version__},
                  f, indent=2, sort_keys=True)
        f.write("\n")


def _configs(config: dict, dataset, seed: int, workers: int | None):
    model = dict(config.get("model", {}), num_items=dataset.num_items)
    train_cfg = dict(config.get("train", {}), seed=seed)
    if workers is not None:
        train_cfg["workers"] = workers
    try:
        return ModelConfig.from_dict(model), TrainConfig.from_dict(train_cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc)) from None


def _eval_settings(config: dict) -> tuple[list[str], int, int]:
    ev = config.get("eval", {})
    schemes = list(ev.get("schemes", SCHEMES))
    unknown = [s for s in schemes if s not in SCHEMES]
    if unknown:
        raise CliError(f"unknown schemes in config: {unknown}")
    return schemes, int(ev.get("k", 10)), int(ev.get("negatives", 100))


def _train_one(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, out: str, data_section: dict):
    os.makedirs(out, exist_ok=True)
    result = train(dataset, model_cfg, train_cfg)
    result.checkpoint.config["data"] = data_section
    save_checkpoint(os.path.join(out, "checkpoint.sabr"), result.checkpoint)
    with open(os.path.join(out, "epochs.csv"), "w", encoding="utf-8", newline="") as f:
        f.write(result.log_csv())
    # wall-clock times differ between runs, so they stay out of the CSV
    with open(os.path.join(out, "timing.json"), "w", encoding="utf-8") as f:
        json.dump({"seconds": [r.seconds for r in result.log]}, f)
    return result


# ---------------------------------------------------------------------------
# commands; each takes resolved arguments so replay can call it directly


def run_preprocess(args: dict, config: dict | None, out: str) -> int:
    fmt = args["format"]
    if fmt not in PARSERS:
        raise CliError(f"unknown format {fmt!r}")
    events = PARSERS[fmt](args["input"])
    rules = PreprocessRules()
    if args.get("no_filter"):
        rules = PreprocessRules(min_item_count=1, min_user_events=1, min_session_items=1, min_user_sessions=1)
    dataset = preprocess(events, rules, name=args.get("name") or fmt)
    write_dataset(dataset, out)
    log.info("wrote %d users, %d items to %s", dataset.num_users, dataset.num_items, out)
    return 0


def run_train(args: dict, config: dict, out: str) -> int:
    check_required(config)
    dataset = load_data(args["data"], config.get("data"))
    model_cfg, train_cfg = _configs(config, dataset, args["seed"], args.get("workers"))
    data_section = {"source": args["data"], "kwargs": config.get("data", {})}
    result = _train_one(dataset, model_cfg, train_cfg, out, data_section)
    log.info("best epoch %d of %d", result.best_epoch, len(result.log))
    return 0


def run_evaluate(args: dict, config: dict | None, out: str) -> int:
    ckpt = load_checkpoint(args["checkpoint"])
    model_cfg = ModelConfig.from_dict(ckpt.config["model"])
    data_section = ckpt.config.get("data", {})
    source = args.get("data") or data_section.get("source")
    if source is None:
        raise CliError("no --data given and the checkpoint records no data source")
    kwargs = data_section.get("kwargs") if source == data_section.get("source") else None
    dataset = load_data(source, kwargs)
    rows = []
    for scheme in args["schemes"]:
        report = evaluate(ckpt.params, model_cfg, dataset, scheme, args["k"], args["seed"],
                          n_negatives=args["negatives"], workers=args.get("workers") or 1)
        rows += report.csv_rows(dataset.name, model_cfg.variant)
    text = write_report(rows, os.path.join(out, "report.csv"))
    sys.stdout.write(text)
    return 0


def _variant_rows(dataset, model_cfg, train_cfg, out, data_section, schemes, k, negatives, seed):
    """Train one variant and return its report rows."""
    _train_one(dataset, model_cfg, train_cfg, out, data_section)
    params = load_checkpoint(os.path.join(out, "checkpoint.sabr")).params
    reports = [evaluate(params, model_cfg, dataset, s, k, seed, n_negatives=negatives,
                        workers=train_cfg.workers) for s in schemes]
    return reports


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_ablate(args: dict, config: dict, out: str) -> int:
    check_required(config)
    dataset = load_data(args["data"], config.get("data"))
    schemes, k, negatives = _eval_settings(config)
    seed = args["seed"]
    data_section = {"source": args["data"], "kwargs": config.get("data", {})}
    long_rows, matrix, failures = [], {}, []

    for use_st, use_sse, use_tas in VARIANT_FLAGS:
        name = variant_name(use_st, use_sse, use_tas)
        cfg = copy.deepcopy(config)
        cfg["model"].update(use_st=use_st, use_sse=use_sse, use_tas=use_tas)
        model_cfg, train_cfg = _configs(cfg, dataset, seed, args.get("workers"))
        log.info("training %s", name)
        try:
            reports = _variant_rows(dataset, model_cfg, train_cfg, os.path.join(out, "variants", name),
                                    data_section, schemes, k, negatives, seed)
        except (ValueError, ArithmeticError, TrainingDiverged) as exc:
            failures.append((name, str(exc)))
            log.error("%s failed: %s", name, exc)
            continue
        matrix[name] = (num_parameters(model_cfg), reports)
        for r in reports:
            long_rows += r.csv_rows(dataset.name, name)

    try:
        pop = [pop_baseline(dataset, s, k, seed, n_negatives=negatives) for s in schemes]
        matrix["POP"] = (0, pop)
        for r in pop:
            long_rows += r.csv_rows(dataset.name, "POP")
    except ValueError as exc:
        failures.append(("POP", str(exc)))

    long_rows.sort(key=lambda r: (r[1], SCHEMES.index(r[3]), r[5]))
    write_report(long_rows, os.path.join(out, "ablation.csv"))
    header = ["variant", "params"] + [f"{m}@{k}_{s}" for s in schemes for m in ("recall", "ndcg")]
    table = []
    for name in sorted(matrix):
        n_params, reports = matrix[name]
        table.append([name, n_params] + [f"{v:.6f}" for r in reports for v in (r.recall, r.ndcg)])
    _write_csv(os.path.join(out, "ablation_matrix.csv"), header, table)
    _write_csv(os.path.join(out, "failures.csv"), ["variant", "error"], failures)
    for name, err in failures:
        print(f"FAILED {name}: {err}", file=sys.stderr)
    return 1 if failures else 0


def run_sweep(args: dict, config: dict, out: str) -> int:
    check_required(config)
    param = args["param"]
    if param not in SWEEP_PARAMS:
        raise CliError(f"--param must be one of {sorted(SWEEP_PARAMS)}")
    values = args["values"]
    if not values:
        raise CliError("--values must not be empty")
    field, flag = SWEEP_PARAMS[param]
    dataset = load_data(args["data"], config.get("data"))
    schemes, k, negatives = _eval_settings(config)
    seed = args["seed"]
    data_section = {"source": args["data"], "kwargs": config.get("data", {})}
    rows = []
    for value in values:
        cfg = copy.deepcopy(config)
        cfg["model"].update({field: value, flag: True})
        model_cfg, train_cfg = _configs(cfg, dataset, seed, args.get("workers"))
        reports = _variant_rows(dataset, model_cfg, train_cfg, os.path.join(out, "runs", f"{param}={value}"),
                                data_section, schemes, k, negatives, seed)
        for r in reports:
            rows.append([dataset.name, model_cfg.variant, param, value, seed, r.scheme, k,
                         f"{r.recall:.6f}", f"{r.ndcg:.6f}", r.users])
    _write_csv(os.path.join(out, "sweep.csv"),
               ["dataset", "variant", "param", "value", "seed", "scheme", "K", "recall", "ndcg", "users"], rows)
    return 0


COMMANDS = {
    "preprocess": run_preprocess,
    "train": run_train,
    "evaluate": run_evaluate,
    "ablate": run_ablate,
    "sweep": run_sweep,
}


def run_replay(run_dir: str, out: str) -> int:
    path = os.path.join(run_dir, REPLAY_FILE)
    try:
        with open(path, encoding="utf-8") as f:
            record = json.load(f)
    except FileNotFoundError:
        raise CliError(f"no {REPLAY_FILE} in {run_dir}") from None
    return execute(record["command"], record["args"], record["config"], out)


def execute(command: str, args: dict, config: dict | None, out: str) -> int:
    os.makedirs(out, exist_ok=True)
    _write_replay(out, command, args, config)
    return COMMANDS[command](args, config, out)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sabr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/<command> or runs/<command>)")
        if config:
            p.add_argument("--data", required=True,
                           help="dataset directory or one of: " + ", ".join(GENERATORS))
            p.add_argument("--config", help="JSON run config")
            p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                           help="override a config value (repeatable)")
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("preprocess", help="parse and filter a raw dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--format", required=True, choices=sorted(PARSERS))
    p.add_argument("--name")
    p.add_argument("--no-filter", action="store_true",
                   help="keep every parsed event (only sorting, truncation and sessionizing apply)")
    common(p, config=False)

    p = sub.add_parser("train", help="train one model")
    common(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--scheme", action="append", choices=SCHEMES, dest="schemes",
                   help="candidate scheme (repeatable; default all three)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negatives", type=int, default=100)
    p.add_argument("--workers", type=int, default=None)
    common(p, config=False)

    p = sub.add_parser("ablate", help="train and evaluate all eight variants plus POP")
    common(p)

    p = sub.add_parser("sweep", help="sweep m (+SSE) or d_T (+TAS)")
    p.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    p.add_argument("--values", required=True, type=int, nargs="*")
    common(p)

    p = sub.add_parser("replay", help="regenerate a run from its replay file")
    p.add_argument("run_dir")
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "replay":
            return run_replay(ns.run_dir, ns.out)
        out = ns.out or default_out(ns.command)
        args = {k: v for k, v in vars(ns).items() if k not in ("command", "verbose", "out", "config", "set")}
        config = None
        if ns.command in ("train", "ablate", "sweep"):
            config = load_config(ns.config, ns.set)
        for key in ("input", "checkpoint", "data"):
            if args.get(key) and args[key] not in GENERATORS:
                args[key] = os.path.abspath(args[key])
        if ns.command == "evaluate" and not ns.schemes:
            args["schemes"] = list(SCHEMES)
        return execute(ns.command, args, config, out)
    except (CliError, CheckpointError, ParseError, EmptyDatasetError, FileNotFoundError,
            NumericsError, TrainingDiverged, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
