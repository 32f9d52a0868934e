"""Shared argument handling for the experiment scripts."""

import argparse
import logging
from pathlib import Path

from cumo.config import RunConfig, load_run_config


def parser(description: str, seeds=(0, 1, 2, 3)) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", type=Path, help="JSON run config (default: built-in toy config)")
    p.add_argument("--seeds", type=int, nargs="+", default=list(seeds))
    p.add_argument("--output-dir", type=Path, default=Path("runs"))
    p.add_argument("--quiet", action="store_true")
    return p


def setup(args) -> RunConfig:
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    return load_run_config(args.config) if args.config else RunConfig()


def wins(report, better: str, worse: str, metric: str, higher=True) -> str:
    a, b = report.paired(better, metric), report.paired(worse, metric)
    n = sum((a[s] >= b[s]) if higher else (a[s] < b[s]) for s in a)
    return f"{better} vs {worse} on {metric}: {n}/{len(a)} seeds"
