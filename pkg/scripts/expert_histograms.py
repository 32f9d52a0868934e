"""Train with and without bzloss, then print per-block expert dispatch histograms."""

import dataclasses

from _common import parser, setup

from cumo.pipeline import datasets_for, run_pipeline
from cumo.report import arm_config, route_stats_report

if __name__ == "__main__":
    args = parser(__doc__, seeds=(0,)).parse_args()
    base = setup(args)
    for seed in args.seeds:
        cfg = dataclasses.replace(base, seed=seed)
        data = datasets_for(cfg)
        for arm in ("moe-upcycle", "moe-upcycle+bzloss"):
            res = run_pipeline(arm_config(cfg, arm), args.output_dir / f"hist_{arm}_seed{seed}", data=data)
            report = route_stats_report(res.model, data[1])
            report.write(args.output_dir / f"hist_{arm}_seed{seed}")
            print(f"== {arm}, seed {seed}")
            print(report.bar_chart())
