"""Total vs. activated parameters: ViT-L sized sections, then the live toy model."""

import argparse
from pathlib import Path

from cumo.aux_loss import SECTIONS
from cumo.config import RunConfig, load_run_config
from cumo.model import build_model, co_upcycle, param_report
from cumo.upcycle import count_params, vitl_sections

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path, help="toy run config (default: built-in)")
    args = p.parse_args()
    print("ViT-L encoder + connector + 7B decoder, 4 experts, top-2")
    print(count_params(vitl_sections()).to_text())
    cfg = load_run_config(args.config) if args.config else RunConfig()
    model = build_model(cfg.model, cfg.seed)
    co_upcycle(model, SECTIONS, cfg.seed)
    print("\ntoy model after co-upcycling")
    print(param_report(model).to_text())
