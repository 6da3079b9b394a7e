"""On-disk pipeline stages with a content-digest ledger.

Layout under the output directory::

    ledger.json
    tiles/<tile_id>/{AllLights,OnlyLevel1..4}.pgm, truth.pgm, meta.json
    tiles/manifest.json
    images/<res>/<tile_id>/...            stacks resampled to the regime
    patches/<res>/manifest.json, patches.csv
    folds.json
    models/<res>/<model>/<config>/fold<k>.json (+ .log.json)
    predictions/<res>/<model>/<config>/fold<k>.csv
    detections/<res>/<model>/<config>/<tile_id>.pgm
    reports/<res>/report.csv, report.json, plot_data.csv
    reports/summary.csv, reports/plot_data.csv

A stage is skipped when its config digest, its input digest and its
recorded outputs all still match; it refuses to run when a prerequisite
is missing or was recorded under a different configuration.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .classify import BaselineModel, LossKind, ingest_predictions, write_predictions
from .config import ConfigError, RunConfig
from .evalmetrics import SuiteReport, evaluate_run
from .illumsim import LightingConfig, TileStack, load_stack, save_stack
from .imaging import load_mask, save_mask
from .patchset import FoldPlan, Label, make_folds
from .pipeline import (
    TileInference,
    TilePatches,
    fold_patch_labels,
    infer_tile,
    model_name,
    regime_stack,
    synth_stack,
    tile_patches,
    train_fold,
)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    pass


class MissingStageError(StageError):
    pass


class StaleStageError(StageError):
    pass


class DataError(ValueError):
    pass


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digest_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass
class StageResult:
    key: str
    ran: bool
    outputs: list[str]

    @property
    def status(self) -> str:
        return "done" if self.ran else "up to date"


class Experiment:
    def __init__(self, cfg: RunConfig, out: str | Path):
        self.cfg = cfg
        self.out = Path(out)
        self.ledger_path = self.out / "ledger.json"

    # -- ledger --------------------------------------------------------------

    def ledger(self) -> dict:
        if self.ledger_path.is_file():
            return json.loads(self.ledger_path.read_text())
        return {"tool_version": __version__, "stages": {}}

    def _save_ledger(self, ledger: dict) -> None:
        ledger["tool_version"] = __version__
        ledger["config_hash"] = self.cfg.digest()
        self.out.mkdir(parents=True, exist_ok=True)
        self.ledger_path.write_text(json.dumps(ledger, indent=2, sort_keys=True))

    def _rel(self, p: Path) -> str:
        return p.relative_to(self.out).as_posix()

    def _digest_files(self, rels: Iterable[str]) -> dict[str, str]:
        out = {}
        for rel in sorted(rels):
            p = self.out / rel
            if not p.is_file():
                raise StaleStageError(f"stale ledger: recorded file {rel} is missing")
            out[rel] = file_digest(p)
        return out

    def _stage_config(self, key: str) -> str:
        kind, _, rest = key.partition("[")
        args = rest.rstrip("]").split(",") if rest else []
        c = self.cfg
        if kind == "synth":
            d = c.digest("seed", "suite", "rig")
        elif kind == "extract":
            d = _digest_obj([c.digest("seed", "suite", "thresholds", "patch_low", "patch_high"), args])
        elif kind == "split":
            d = _digest_obj([c.digest("seed", "suite", "k"), args])
        elif kind == "train":
            d = _digest_obj([c.digest("seed", "train", "lighting"), args])
        elif kind == "infer":
            d = _digest_obj([c.digest("detection_threshold", "lighting"), args])
        elif kind in ("eval", "report"):
            d = _digest_obj([c.digest("lighting"), args])
        else:
            raise ValueError(key)
        return d

    def _run(self, key: str, requires: Sequence[str], action: Callable[[], list[Path]],
             extra_inputs: Sequence[Path] = ()) -> StageResult:
        ledger = self.ledger()
        stages = ledger["stages"]
        inputs: dict[str, str] = {}
        for req in requires:
            if req not in stages:
                raise MissingStageError(f"missing stage: {req.split('[')[0]} ({req})")
            if stages[req]["config"] != self._stage_config(req):
                raise StaleStageError(f"stale stage: {req} was recorded under a different configuration; rerun it")
            inputs.update(self._digest_files(stages[req]["outputs"]))
        for p in extra_inputs:
            inputs[str(p)] = file_digest(p)
        cfg_digest = self._stage_config(key)
        in_digest = _digest_obj(inputs)
        entry = stages.get(key)
        if entry and entry["config"] == cfg_digest and entry["inputs"] == in_digest:
            try:
                if self._digest_files(entry["outputs"]) == entry["outputs"]:
                    log.info("%s: up to date", key)
                    return StageResult(key, False, sorted(entry["outputs"]))
            except StaleStageError:
                pass
        outputs = action()
        rels = [self._rel(p) for p in outputs]
        ledger = self.ledger()
        ledger["stages"][key] = {"config": cfg_digest, "inputs": in_digest, "outputs": self._digest_files(rels)}
        self._save_ledger(ledger)
        log.info("%s: done (%d files)", key, len(rels))
        return StageResult(key, True, sorted(rels))

    # -- helpers ---------------------------------------------------------------

    def _lighting(self, lighting: Sequence[LightingConfig] | None) -> list[LightingConfig]:
        return list(lighting) if lighting else self.cfg.lighting_configs()

    def _lighting_arg(self, lighting) -> str:
        return "+".join(c.value for c in self._lighting(lighting))

    def tile_ids(self) -> list[str]:
        return self.cfg.suite.tile_ids()

    def load_regime(self, resolution: str) -> dict[str, TileStack]:
        root = self.out / "images" / resolution
        return {tid: load_stack(root / tid) for tid in self.tile_ids()}

    def load_tables(self, resolution: str) -> dict[str, TilePatches]:
        g = self.cfg.geometry(resolution)
        rows: dict[str, list] = {tid: [] for tid in self.tile_ids()}
        with open(self.out / "patches" / resolution / "patches.csv", newline="") as fh:
            for r in csv.DictReader(fh):
                rows[r["tile_id"]].append(r)
        tables = {}
        for tid, rs in rows.items():
            origins = np.array([[int(r["row"]), int(r["col"])] for r in rs], dtype=np.int64).reshape(-1, 2)
            shape = load_mask(self.out / "images" / resolution / tid / "truth.pgm").shape
            if not np.array_equal(origins, g.origins(shape)):
                raise DataError(f"patch table for {tid} does not match the {resolution} window grid")
            tables[tid] = TilePatches(
                tid, origins,
                np.array([float(r["p"]) for r in rs]),
                np.array([Label[r["label"].upper()] for r in rs], dtype=np.int8),
                np.array([r["train_pick"] == "1" for r in rs]),
                np.array([r["val_pick"] == "1" for r in rs]),
            )
        return tables

    def plan(self) -> FoldPlan:
        return FoldPlan.load(self.out / "folds.json")

    # -- stages ------------------------------------------------------------------

    def synth(self) -> StageResult:
        if self.cfg.suite.n_tiles == 0:
            raise ConfigError("empty experiment: suite.n_tiles is 0")

        def action():
            root = self.out / "tiles"
            outs = []
            manifest = {"config": json.loads(self.cfg.to_json()), "tiles": []}
            for i, tid in enumerate(self.tile_ids()):
                st = synth_stack(self.cfg, i)
                d = save_stack(st, root)
                outs += sorted(d.iterdir())
                manifest["tiles"].append({"tile_id": tid, "crack_count": len(st.truth_components),
                                          "shape": list(st.shape)})
            (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
            return outs + [root / "manifest.json"]

        return self._run("synth", [], action)

    def extract(self, resolution: str = "low") -> StageResult:
        g = self.cfg.geometry(resolution)
        factor = self.cfg.resolution_factor(resolution)

        def action():
            outs = []
            pdir = self.out / "patches" / resolution
            pdir.mkdir(parents=True, exist_ok=True)
            counts = {}
            with open(pdir / "patches.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["tile_id", "row", "col", "p", "label", "train_pick", "val_pick"])
                for tid in self.tile_ids():
                    st = regime_stack(load_stack(self.out / "tiles" / tid), factor)
                    d = save_stack(st, self.out / "images" / resolution)
                    outs += sorted(d.iterdir())
                    tab = tile_patches(st.truth_mask, tid, g, self.cfg.thresholds, self.cfg.seed)
                    counts[tid] = tab.counts()
                    for (r, c), p, lab, tp, vp in zip(tab.origins.tolist(), tab.p.tolist(), tab.labels.tolist(),
                                                      tab.train_pick.tolist(), tab.val_pick.tolist()):
                        w.writerow([tid, r, c, repr(p), Label(lab).name.lower(), int(tp), int(vp)])
            manifest = {
                "resolution": resolution,
                "factor": factor,
                "geometry": {"patch_size": g.patch_size, "stride": g.stride},
                "thresholds": {"low": self.cfg.thresholds.low, "high": self.cfg.thresholds.high},
                "seed": self.cfg.seed,
                "archive": "references",
                "counts": counts,
            }
            (pdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
            return outs + [pdir / "patches.csv", pdir / "manifest.json"]

        return self._run(f"extract[{resolution}]", ["synth"], action)

    def split(self) -> StageResult:
        def action():
            plan = make_folds(self.tile_ids(), self.cfg.k, self.cfg.seed)
            plan.save(self.out / "folds.json")
            return [self.out / "folds.json"]

        return self._run("split", ["synth"], action)

    def train(self, resolution: str = "low", loss: LossKind | str = "ce",
              lighting: Sequence[LightingConfig] | None = None) -> StageResult:
        loss = LossKind(loss)
        tc = self.cfg.train_config(loss)
        g = self.cfg.geometry(resolution)
        name = model_name(loss)
        configs = self._lighting(lighting)

        def action():
            stacks = self.load_regime(resolution)
            tables = self.load_tables(resolution)
            plan = self.plan()
            outs = []
            for light in configs:
                mdir = self.out / "models" / resolution / name / light.value
                mdir.mkdir(parents=True, exist_ok=True)
                for fold in range(plan.k):
                    model, tlog = train_fold(stacks, tables, plan, fold, light, g, tc)
                    model.save(mdir / f"fold{fold}.json")
                    (mdir / f"fold{fold}.log.json").write_text(json.dumps(tlog.to_dict(), indent=1))
                    outs += [mdir / f"fold{fold}.json", mdir / f"fold{fold}.log.json"]
            return outs

        key = f"train[{resolution},{loss.value},{self._lighting_arg(lighting)}]"
        return self._run(key, [f"extract[{resolution}]", "split"], action)

    def infer(self, resolution: str = "low", loss: LossKind | str | None = "ce",
              lighting: Sequence[LightingConfig] | None = None, predictions: str | Path | None = None,
              model: str | None = None) -> StageResult:
        """Run sliding inference with a trained baseline, or with external
        predictions read from ``predictions/<config>.csv``."""
        g = self.cfg.geometry(resolution)
        configs = self._lighting(lighting)
        larg = self._lighting_arg(lighting)
        extra: list[Path] = []
        if predictions is not None:
            pred_dir = Path(predictions)
            if not model:
                raise ConfigError("--model-name is required with --predictions")
            name = model
            for light in configs:
                p = pred_dir / f"{light.value}.csv"
                if not p.is_file():
                    raise DataError(f"missing prediction file {p}")
                extra.append(p)
            requires = [f"extract[{resolution}]", "split"]
        else:
            loss = LossKind(loss or "ce")
            name = model_name(loss)
            requires = [f"extract[{resolution}]", "split", f"train[{resolution},{loss.value},{larg}]"]

        def action():
            stacks = self.load_regime(resolution)
            plan = self.plan()
            outs = []
            for light in configs:
                if predictions is not None:
                    clf_for = lambda fold, _c=ingest_predictions(Path(predictions) / f"{light.value}.csv", g): _c
                else:
                    mdir = self.out / "models" / resolution / name / light.value
                    clf_for = lambda fold, _d=mdir: BaselineModel.load(_d / f"fold{fold}.json")
                pdir = self.out / "predictions" / resolution / name / light.value
                ddir = self.out / "detections" / resolution / name / light.value
                ddir.mkdir(parents=True, exist_ok=True)
                for fold in range(plan.k):
                    clf = clf_for(fold)
                    rows = []
                    for tid in plan.test(fold):
                        inf = infer_tile(stacks[tid], clf, light, g, self.cfg.detection_threshold)
                        origins = g.origins(stacks[tid].shape)
                        rows += [(tid, r, c, s) for (r, c), s in zip(origins.tolist(), inf.scores.tolist())]
                        save_mask(inf.detection, ddir / f"{tid}.pgm")
                        outs.append(ddir / f"{tid}.pgm")
                    write_predictions(pdir / f"fold{fold}.csv", rows)
                    outs.append(pdir / f"fold{fold}.csv")
            return outs

        return self._run(f"infer[{resolution},{name},{larg}]", requires, action, extra)

    def _inferred(self, resolution: str, larg: str) -> list[str]:
        keys = [k for k in self.ledger()["stages"] if k.startswith(f"infer[{resolution},")
                and k.endswith(f",{larg}]")]
        return sorted(keys)

    def evaluate(self, resolution: str = "low", lighting: Sequence[LightingConfig] | None = None) -> StageResult:
        configs = self._lighting(lighting)
        larg = self._lighting_arg(lighting)
        infers = self._inferred(resolution, larg)
        if not infers:
            raise MissingStageError(f"missing stage: infer (no inference recorded for {resolution} / {larg})")
        models = [k.split(",")[1] for k in infers]

        def action():
            stacks = self.load_regime(resolution)
            tables = self.load_tables(resolution)
            plan = self.plan()
            truth = {tid: st.truth_mask for tid, st in stacks.items()}
            report = SuiteReport()
            for name in models:
                for light in configs:
                    dets, preds = {}, {}
                    for fold in range(plan.k):
                        lookup = ingest_predictions(
                            self.out / "predictions" / resolution / name / light.value / f"fold{fold}.csv")
                        ddir = self.out / "detections" / resolution / name / light.value
                        infs = []
                        for tid in plan.test(fold):
                            origins = tables[tid].origins
                            scores = lookup.score_patches(None, tid, origins)
                            infs.append(TileInference(tid, scores, load_mask(ddir / f"{tid}.pgm")))
                        dets[fold] = {inf.tile_id: inf.detection for inf in infs}
                        preds[fold] = fold_patch_labels(tables, infs)
                    report.rows += evaluate_run(truth, dets, preds, name, light.value, resolution).rows
            rdir = self.out / "reports" / resolution
            rdir.mkdir(parents=True, exist_ok=True)
            (rdir / "report.csv").write_text(report.to_csv())
            (rdir / "report.json").write_text(report.to_json())
            (rdir / "plot_data.csv").write_text(report.plot_series())
            return [rdir / "report.csv", rdir / "report.json", rdir / "plot_data.csv"]

        return self._run(f"eval[{resolution},{larg}]", ["split", f"extract[{resolution}]"] + infers, action)

    def report(self) -> tuple[StageResult, SuiteReport]:
        evals = sorted(k for k in self.ledger()["stages"] if k.startswith("eval["))
        if not evals:
            raise MissingStageError("missing stage: eval")

        def load_all() -> SuiteReport:
            combined = SuiteReport()
            seen = set()
            for key in evals:
                res = key[len("eval["):].split(",")[0]
                if res in seen:
                    continue
                seen.add(res)
                combined.rows += SuiteReport.from_json((self.out / "reports" / res / "report.json").read_text()).rows
            return combined

        def action():
            combined = load_all()
            rdir = self.out / "reports"
            (rdir / "summary.csv").write_text(_mean_only_csv(combined))
            (rdir / "plot_data.csv").write_text(combined.plot_series())
            return [rdir / "summary.csv", rdir / "plot_data.csv"]

        result = self._run("report", evals, action)
        return result, load_all()


def _mean_only_csv(report: SuiteReport) -> str:
    lines = report.to_csv().splitlines()
    return "\n".join([lines[0]] + [ln for ln in lines[1:] if ",mean," in ln]) + "\n"
