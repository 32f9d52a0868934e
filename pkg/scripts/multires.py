"""Single-scale vs. stacked 1x+3x visual features."""

from _common import parser, setup, wins

from cumo.report import ablate, arm_config

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    base = setup(args)
    for arm in ("scales-1", "scales-1+3"):
        enc = arm_config(base, arm).model.encoder
        print(f"{arm}: {enc.num_tokens} visual tokens, connector input width {enc.feature_dim}")
    report = ablate(base, ["scales-1", "scales-1+3"], args.seeds, args.output_dir / "multires")
    print(report.table())
    print(wins(report, "scales-1+3", "scales-1", "eval_acc"))
