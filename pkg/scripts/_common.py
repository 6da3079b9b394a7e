"""Helpers shared by the experiment scripts."""
import argparse
from dataclasses import replace

import numpy as np

from crackinspect.config import RunConfig, SuiteConfig
from crackinspect.evalmetrics import METRICS, SuiteReport


def base_parser(doc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--tiles", type=int, default=40, help="synthetic tiles per run")
    p.add_argument("--config", default=None, help="optional RunConfig JSON to start from")
    return p


def make_config(args, seed: int) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return replace(cfg, seed=seed, suite=replace(cfg.suite if args.config else SuiteConfig(), n_tiles=args.tiles))


def print_table(title: str, keys: list[tuple], reports: list[SuiteReport], key_fn) -> None:
    """Mean and spread over seeds of the fold-mean rows selected by key_fn."""
    print(title)
    print(f"{'':42s}" + "".join(f"{m:>16s}" for m in METRICS))
    for key in keys:
        vals = np.array([[getattr(key_fn(rep, key), m) for m in METRICS] for rep in reports])
        cells = "".join(f"{mu:9.3f} ±{sd:5.3f}" for mu, sd in zip(vals.mean(0), vals.std(0)))
        print(f"{' / '.join(key):42s}{cells}")
    print()
