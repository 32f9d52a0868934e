"""Same-seed pairs with and without the auxiliary balance and z losses."""

from _common import parser, setup, wins

from cumo.report import ablate

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    report = ablate(setup(args), ["moe-upcycle", "moe-upcycle+bzloss"], args.seeds, args.output_dir / "bzloss")
    print(report.table())
    print(wins(report, "moe-upcycle+bzloss", "moe-upcycle", "balance", higher=False), "(lower balance score)")
