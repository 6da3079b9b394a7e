"""Low versus high resolution for every lighting configuration.

    python scripts/resolution_study.py --seeds 0 1 2 3 4
"""
from _common import base_parser, make_config, print_table

from crackinspect.evalmetrics import SuiteReport
from crackinspect.illumsim import LightingConfig
from crackinspect.pipeline import model_name, run_in_memory


def main() -> None:
    args = base_parser(__doc__).parse_args()
    reports = []
    for s in args.seeds:
        rep = SuiteReport()
        for res in ("low", "high"):
            rep.rows += run_in_memory(make_config(args, s), res).rows
        reports.append(rep)
    name = model_name("ce")
    keys = [(res, c.value) for res in ("low", "high") for c in LightingConfig]
    print_table(f"{name}, seeds {args.seeds}", keys, reports, lambda rep, k: rep.mean(name, k[1], k[0]))


if __name__ == "__main__":
    main()
