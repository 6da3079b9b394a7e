"""In-memory building blocks shared by the CLI stages and experiment scripts."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .classify import (
    BaselineModel,
    ClassifierInterface,
    LossKind,
    TrainConfig,
    TrainingLog,
    detection_mask,
    sliding_scores,
    stitch,
    train,
    window_view,
)
from .config import RunConfig
from .evalmetrics import SuiteReport, evaluate_run
from .illumsim import LightingConfig, TileStack, render_stack
from .imaging import connected_components, downsample, quantize, rasterize_annotation
from .patchset import FoldPlan, Label, LabelThresholds, PatchGeometry, balance_indices, label_array, make_folds, \
    window_proportions
from .seeding import derive_rng

log = logging.getLogger(__name__)


def synth_stack(cfg: RunConfig, index: int) -> TileStack:
    """Render tile ``index`` of the suite at acquisition resolution, 8-bit quantised."""
    tile_id = cfg.suite.tile_ids()[index]
    stack = render_stack(cfg.suite.tile_spec(index, cfg.seed), cfg.rig, tile_id)
    stack.images = {c: quantize(img) for c, img in stack.images.items()}
    return stack


def regime_stack(stack: TileStack, factor: float) -> TileStack:
    """Resample a stack to a resolution regime; the mask is re-rasterised from the annotation."""
    if factor == 1.0:
        return stack
    images = {c: quantize(downsample(img, factor)) for c, img in stack.images.items()}
    ann = stack.annotation.scaled(factor)
    ann.height, ann.width = next(iter(images.values())).shape
    mask = rasterize_annotation(ann)
    return TileStack(stack.tile_id, images, mask, connected_components(mask), ann, stack.spec, stack.geometry)


@dataclass
class TilePatches:
    """Reference table of one tile's windows: no pixels, only grid bookkeeping."""

    tile_id: str
    origins: np.ndarray
    p: np.ndarray
    labels: np.ndarray
    train_pick: np.ndarray
    val_pick: np.ndarray

    def counts(self) -> dict[str, int]:
        return {lab.name.lower(): int(np.count_nonzero(self.labels == lab)) for lab in Label}


def tile_patches(mask: np.ndarray, tile_id: str, g: PatchGeometry, t: LabelThresholds, seed: int) -> TilePatches:
    p = window_proportions(mask, g).ravel()
    labels = label_array(p, t)
    n = len(p)
    picks = []
    for phase in ("train", "validation"):
        sel = np.zeros(n, dtype=bool)
        sel[balance_indices(labels, derive_rng(seed, "balance", phase, tile_id))] = True
        picks.append(sel)
    return TilePatches(tile_id, g.origins(mask.shape), p, labels, *picks)


def _gather(stacks, tables, tiles, cfg: LightingConfig, g: PatchGeometry, select: str):
    xs, ys = [], []
    for tid in tiles:
        tab = tables[tid]
        if select == "train":
            idx = np.flatnonzero(tab.train_pick)
        elif select == "validation":
            idx = np.flatnonzero(tab.val_pick)
        else:
            idx = np.flatnonzero(tab.labels != Label.AMBIGUOUS)
        if len(idx) == 0:
            continue
        w = window_view(stacks[tid].images[cfg], g)
        xs.append(w[idx])
        ys.append((tab.labels[idx] == Label.POSITIVE).astype(np.int64))
    s = g.patch_size
    if not xs:
        return np.zeros((0, s, s)), np.zeros(0, dtype=np.int64)
    return np.concatenate(xs).astype(np.float64), np.concatenate(ys)


def fold_training_data(stacks: Mapping[str, TileStack], tables: Mapping[str, TilePatches], plan: FoldPlan,
                       fold: int, cfg: LightingConfig, g: PatchGeometry, balanced: bool = True):
    """(train, validation) arrays for one fold; imbalanced training uses every non-ambiguous patch."""
    train_set = _gather(stacks, tables, plan.train(fold), cfg, g, "train" if balanced else "all")
    val_set = _gather(stacks, tables, plan.test(fold), cfg, g, "validation")
    return train_set, val_set


def train_fold(stacks, tables, plan, fold, cfg: LightingConfig, g: PatchGeometry,
               tc: TrainConfig) -> tuple[BaselineModel, TrainingLog]:
    train_set, val_set = fold_training_data(stacks, tables, plan, fold, cfg, g, tc.balanced_input)
    if len(train_set[1]) == 0:
        raise ValueError(f"fold {fold}: empty training set")
    return train(train_set, tc, val_set if len(val_set[1]) else None)


@dataclass
class TileInference:
    tile_id: str
    scores: np.ndarray  # one per grid window, row-major
    detection: np.ndarray


def infer_tile(stack: TileStack, clf: ClassifierInterface, cfg: LightingConfig, g: PatchGeometry,
               threshold: float = 0.5) -> TileInference:
    img = stack.images[cfg]
    scores = sliding_scores(img, clf, g, stack.tile_id)
    return TileInference(stack.tile_id, scores, detection_mask(stitch(scores, img.shape, g), threshold))


def fold_patch_labels(tables: Mapping[str, TilePatches], inferences: Sequence[TileInference],
                      threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """(truth, predicted) over the non-ambiguous windows of the given tiles."""
    ys, ps = [], []
    for inf in inferences:
        tab = tables[inf.tile_id]
        keep = tab.labels != Label.AMBIGUOUS
        ys.append((tab.labels[keep] == Label.POSITIVE).astype(np.int64))
        ps.append((inf.scores[keep] >= threshold).astype(np.int64))
    return np.concatenate(ys), np.concatenate(ps)


def model_name(loss: LossKind | str) -> str:
    loss = LossKind(loss)
    return f"baseline-{loss.value}-{'balanced' if loss is LossKind.CROSS_ENTROPY else 'imbalanced'}"


def run_in_memory(cfg: RunConfig, resolution: str = "low", losses: Sequence[str] = ("ce",),
                  lighting: Sequence[LightingConfig] | None = None) -> SuiteReport:
    """The whole chain without touching disk; same arithmetic as the CLI stages."""
    lighting = list(lighting) if lighting is not None else cfg.lighting_configs()
    g = cfg.geometry(resolution)
    factor = cfg.resolution_factor(resolution)
    stacks = {}
    for i, tid in enumerate(cfg.suite.tile_ids()):
        stacks[tid] = regime_stack(synth_stack(cfg, i), factor)
    tables = {tid: tile_patches(st.truth_mask, tid, g, cfg.thresholds, cfg.seed) for tid, st in stacks.items()}
    plan = make_folds(list(stacks), cfg.k, cfg.seed)
    truth = {tid: st.truth_mask for tid, st in stacks.items()}
    report = SuiteReport()
    for loss in losses:
        tc = cfg.train_config(loss)
        for light in lighting:
            dets, preds = {}, {}
            for fold in range(plan.k):
                model, _ = train_fold(stacks, tables, plan, fold, light, g, tc)
                infs = [infer_tile(stacks[t], model, light, g, cfg.detection_threshold) for t in plan.test(fold)]
                dets[fold] = {inf.tile_id: inf.detection for inf in infs}
                preds[fold] = fold_patch_labels(tables, infs)
            part = evaluate_run(truth, dets, preds, model_name(loss), light.value, resolution)
            report.rows += part.rows
    return report
