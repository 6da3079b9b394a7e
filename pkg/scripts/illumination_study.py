"""Compare the five lighting configurations with the CE baseline.

    python scripts/illumination_study.py --seeds 0 1 2 --tiles 40
"""
from _common import base_parser, make_config, print_table

from crackinspect.illumsim import LightingConfig
from crackinspect.pipeline import model_name, run_in_memory


def main() -> None:
    p = base_parser(__doc__)
    p.add_argument("--resolution", choices=["low", "high"], default="low")
    args = p.parse_args()
    reports = [run_in_memory(make_config(args, s), args.resolution) for s in args.seeds]
    name = model_name("ce")
    keys = [(c.value,) for c in LightingConfig]
    print_table(f"{name}, {args.resolution} resolution, seeds {args.seeds}", keys, reports,
                lambda rep, k: rep.mean(name, k[0]))


if __name__ == "__main__":
    main()
