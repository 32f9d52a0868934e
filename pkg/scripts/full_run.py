"""One full three-stage run at the default toy config, with per-stage eval and timing."""

import argparse
import logging
import time
from pathlib import Path

from cumo.config import RunConfig, load_run_config
from cumo.pipeline import run_pipeline

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", type=Path, default=Path("runs/full"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_run_config(args.config) if args.config else RunConfig()
    cfg.seed = args.seed
    t0 = time.perf_counter()
    res = run_pipeline(cfg, args.output_dir)
    for stage, ev in res.stage_evals.items():
        print(f"{stage:<28s} eval loss {ev.loss:.4f}  acc {ev.accuracy:.4f}")
    print(f"wall time {time.perf_counter() - t0:.1f} s; outputs in {args.output_dir}")
