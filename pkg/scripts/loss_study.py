"""Balanced CE against imbalanced training with MFE and focal loss.

    python scripts/loss_study.py --losses ce mfe focal --lighting AllLights
"""
from _common import base_parser, make_config, print_table

from crackinspect.illumsim import LightingConfig
from crackinspect.pipeline import model_name, run_in_memory


def main() -> None:
    p = base_parser(__doc__)
    p.add_argument("--losses", nargs="+", default=["ce", "mfe", "focal"])
    p.add_argument("--lighting", nargs="+", default=[c.value for c in LightingConfig])
    p.add_argument("--resolution", choices=["low", "high"], default="low")
    args = p.parse_args()
    lighting = [LightingConfig(v) for v in args.lighting]
    reports = [run_in_memory(make_config(args, s), args.resolution, args.losses, lighting) for s in args.seeds]
    keys = [(model_name(l), c.value) for l in args.losses for c in lighting]
    print_table(f"{args.resolution} resolution, seeds {args.seeds}", keys, reports, lambda rep, k: rep.mean(*k))


if __name__ == "__main__":
    main()
