"""Command-line entry point: ``cumo <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .aux_loss import SECTIONS
from .checkpoint import load_checkpoint, load_dataset, save_dataset
from .config import RunConfig, load_run_config
from .data import gen_dataset
from .model import build_model, co_upcycle, param_report
from .moe import ConfigError
from .pipeline import run_pipeline
from .report import ARMS, ablate, route_stats_report
from .train import evaluate
from .upcycle import count_params, sections_from_dict, vitl_sections

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; route it through our own code instead
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--output-dir", type=Path, help="overrides $CUMO_OUTPUT_DIR and the config output_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cumo", description="Co-upcycled MoE toy vision-language model.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate and cache the synthetic train/eval sets")
    _common(p)

    p = sub.add_parser("train", help="run the configured stages")
    _common(p)

    p = sub.add_parser("eval", help="held-out caption loss and accuracy of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="cached eval set (default: regenerate from config)")

    p = sub.add_parser("route-stats", help="per-block expert dispatch histograms")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="cached probe set (default: regenerate the eval set)")
    p.add_argument("--chart", action="store_true", help="print a text bar chart")

    p = sub.add_parser("count-params", help="total and activated parameters per section")
    _common(p)
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")

    p = sub.add_parser("ablate", help="compare named arms over one or more seeds")
    _common(p)
    p.add_argument("--arms", nargs="+", required=True, metavar="ARM", help=f"any of: {', '.join(ARMS)}")
    p.add_argument("--seeds", type=int, nargs="+", help="seeds to run (default: the config seed)")
    return parser


def _run_config(args) -> RunConfig:
    try:
        cfg = load_run_config(args.config) if args.config else RunConfig()
    except (OSError, ConfigError) as e:
        raise UsageError(f"bad --config: {e}") from None
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _output_dir(args, cfg: RunConfig) -> Path:
    if args.output_dir is not None:
        return args.output_dir
    env = os.environ.get("CUMO_OUTPUT_DIR")
    if env:
        return Path(env)
    return Path(cfg.output_dir or "runs")


def _eval_set(args, cfg: RunConfig):
    if args.data is not None:
        return load_dataset(args.data)
    return gen_dataset(cfg.data_seed, 1, cfg.data.n_eval, cfg.model.encoder.image_size)[1]


def cmd_gen_data(args) -> None:
    cfg = _run_config(args)
    out = _output_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    train, evals = gen_dataset(cfg.data_seed, cfg.data.n_train, cfg.data.n_eval, cfg.model.encoder.image_size)
    meta = {"seed": cfg.data_seed}
    save_dataset(train, out / "train.bin", {**meta, "split": "train"})
    save_dataset(evals, out / "eval.bin", {**meta, "split": "eval"})
    print(f"wrote {len(train)} train and {len(evals)} eval samples to {out}")


def cmd_train(args) -> None:
    cfg = _run_config(args)
    out = _output_dir(args, cfg)
    res = run_pipeline(cfg, out)
    ev = res.final_eval
    print(f"final eval loss {ev.loss:.4f}  caption token accuracy {ev.accuracy:.4f}")
    print(f"metrics: {out / 'metrics.csv'}")


def cmd_eval(args) -> None:
    cfg = _run_config(args)
    model = load_checkpoint(args.checkpoint)
    ev = evaluate(model, _eval_set(args, cfg))
    print(json.dumps({"loss": ev.loss, "accuracy": ev.accuracy, "tokens": ev.tokens}))


def cmd_route_stats(args) -> None:
    cfg = _run_config(args)
    model = load_checkpoint(args.checkpoint)
    report = route_stats_report(model, _eval_set(args, cfg))
    out = _output_dir(args, cfg)
    for p in report.write(out):
        print(p)
    if args.chart:
        print(report.bar_chart())
    print(f"balance score {report.balance_score:.6f}")


def cmd_count_params(args) -> None:
    """Closed-form counts for a ``{"sections": [...]}`` file, else the live toy model of a run config."""
    if args.config is None:
        report = count_params(vitl_sections())
    else:
        try:
            doc = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"bad --config: {e}") from None
        if isinstance(doc, dict) and "sections" in doc:
            try:
                report = count_params(sections_from_dict(doc))
            except (ConfigError, TypeError) as e:
                raise UsageError(f"bad --config: {e}") from None
        else:
            cfg = _run_config(args)
            model = build_model(cfg.model, cfg.seed)
            co_upcycle(model, SECTIONS, cfg.seed)
            report = param_report(model)
    print(report.to_json() if args.json else report.to_text())


def cmd_ablate(args) -> None:
    cfg = _run_config(args)
    unknown = [a for a in args.arms if a not in ARMS]
    if unknown:
        raise UsageError(f"unknown arms {unknown}; choose from {', '.join(ARMS)}")
    report = ablate(cfg, args.arms, args.seeds, _output_dir(args, cfg))
    print(report.table())


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
    "route-stats": cmd_route_stats, "count-params": cmd_count_params, "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
        COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
