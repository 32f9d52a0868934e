"""Dense baseline vs. MoE initialised from scratch vs. co-upcycled MoE."""

from _common import parser, setup, wins

from cumo.report import ablate

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    report = ablate(setup(args), ["dense-baseline", "moe-scratch", "moe-upcycle"], args.seeds,
                    args.output_dir / "upcycle_vs_scratch")
    print(report.table())
    print(wins(report, "moe-upcycle", "moe-scratch", "eval_acc"))
