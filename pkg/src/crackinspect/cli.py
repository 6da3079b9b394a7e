"""Command line entry point: ``crackinspect <stage> [options]``.

Exit codes: 0 success, 2 config error, 3 stale or missing stage, 4 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .classify import LossKind, PredictionFormatError, PredictionLookupError
from .config import ConfigError, RunConfig
from .illumsim import LightingConfig
from .imaging import ImageFormatError
from .rig import RigSession
from .stages import DataError, Experiment, StageError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("crackinspect")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="RunConfig JSON file (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="experiment directory")
    p.add_argument("--resolution", choices=("low", "high"), default="low")
    p.add_argument("--lighting", default=None, help="lighting configuration name, comma list, or 'all'")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crackinspect", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("synth", "render the synthetic tile suite"),
        ("extract", "extract and label patches for a resolution regime"),
        ("split", "assign tiles to k folds"),
        ("train", "train the baseline classifier for every fold"),
        ("infer", "sliding-window inference on the test tiles of every fold"),
        ("eval", "compute patch and tile metrics into a suite report"),
        ("report", "summarise all evaluated reports"),
    ]:
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name in ("train", "infer"):
            p.add_argument("--loss", choices=[k.value for k in LossKind], default="ce")
        if name == "infer":
            p.add_argument("--predictions", type=Path,
                           help="directory of external <config>.csv prediction files (tile_id,row,col,score)")
            p.add_argument("--model-name", help="model name reported for external predictions")
    p = sub.add_parser("rig", help="replay a rig protocol script through the LED state machine")
    p.add_argument("script", type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, help="write the transcript here instead of stdout")
    p.add_argument("--strict", action="store_true", help="stop with a nonzero exit at the first ERR reply")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _lighting(text: str | None) -> list[LightingConfig] | None:
    if not text or text.lower() == "all":
        return None
    try:
        return [LightingConfig.parse(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _cmd_rig(args) -> int:
    cfg = _load_config(args)
    if not args.script.is_file():
        raise DataError(f"file not found: {args.script}")
    session = RigSession(cfg.rig)
    out_lines: list[str] = []
    code = EXIT_OK
    for lineno, raw in enumerate(args.script.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        reply = session.handle(line)
        out_lines += [f"> {line}", f"< {reply}"]
        if reply.startswith("ERR"):
            print(f"{args.script}:{lineno}: {reply}", file=sys.stderr)
            if args.strict:
                code = EXIT_DATA
                break
    text = "".join(ln + "\n" for ln in out_lines)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return code


def _print_summary(report) -> None:
    rows = report.mean_rows()
    print(f"{'resolution':10s} {'model':28s} {'config':12s} {'accuracy':>9s} {'mcc':>7s} {'cpa':>6s} {'ccf1':>6s}")
    for r in rows:
        print(f"{r.resolution:10s} {r.model:28s} {r.config:12s} {r.accuracy:9.4f} {r.mcc:7.4f} {r.cpa:6.3f} {r.ccf1:6.3f}")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "rig":
        return _cmd_rig(args)
    cfg = _load_config(args)
    exp = Experiment(cfg, args.out)
    lighting = _lighting(args.lighting)
    res = args.resolution
    if args.command == "synth":
        result = exp.synth()
    elif args.command == "extract":
        result = exp.extract(res)
    elif args.command == "split":
        result = exp.split()
    elif args.command == "train":
        result = exp.train(res, args.loss, lighting)
    elif args.command == "infer":
        if args.predictions is not None:
            result = exp.infer(res, None, lighting, predictions=args.predictions, model=args.model_name)
        else:
            result = exp.infer(res, args.loss, lighting)
    elif args.command == "eval":
        result = exp.evaluate(res, lighting)
    else:
        result, report = exp.report()
        _print_summary(report)
    print(f"{result.key}: {result.status}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (DataError, ImageFormatError, PredictionFormatError, PredictionLookupError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
