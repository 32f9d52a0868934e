"""Wider expert pools (top-2 of 8) and skipping the pre-finetuning stage."""

from _common import parser, setup

from cumo.report import ablate

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    report = ablate(setup(args), ["moe-upcycle+bzloss", "top2in8", "no-prefinetune"], args.seeds,
                    args.output_dir / "top2in8_prefinetune")
    print(report.table())
