"""Upcycled MoE decoder vs. a decoder pre-trained as MoE on text."""

from _common import parser, setup, wins

from cumo.report import ablate

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    report = ablate(setup(args), ["moe-upcycle+bzloss", "decoder-upcycle", "decoder-pretrained-moe"], args.seeds,
                    args.output_dir / "decoder_moe")
    print(report.table())
    print(wins(report, "decoder-pretrained-moe", "decoder-upcycle", "eval_acc"))
