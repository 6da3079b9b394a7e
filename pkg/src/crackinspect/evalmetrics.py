"""Patch-level and tile-level detection metrics.

Patch level: accuracy and Matthews correlation. Tile level: crack presence
accuracy (CPA) and the crack count F1 (CCF1), which rests on a greedy
largest-first association of ground-truth cracks to detected cracks.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .imaging import CrackComponent, component_order, connected_components


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(predicted, truth) -> ConfusionCounts:
    p = np.asarray(predicted).astype(bool).ravel()
    t = np.asarray(truth).astype(bool).ravel()
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    if p.size == 0:
        raise ValueError("empty label vectors")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return (c.tp + c.tn) / c.total


def mcc(c: ConfusionCounts) -> float:
    """Matthews correlation; 0 when any marginal is empty."""
    if c.total == 0:
        raise ValueError("mcc of an empty confusion matrix")
    factors = (c.tp + c.fp, c.tp + c.fn, c.tn + c.fp, c.tn + c.fn)
    if 0 in factors:
        return 0.0
    # Python ints never overflow and int / int is correctly rounded, so the
    # only float error left is the final square root (perfect scores stay 1.0).
    num = c.tp * c.tn - c.fp * c.fn
    den2 = (factors[0] * factors[1]) * (factors[2] * factors[3])
    return math.copysign(math.sqrt(num * num / den2), num) if num else 0.0


def crack_presence(n_g: int, n_d: int) -> int:
    if n_g < 0 or n_d < 0:
        raise ValueError("crack counts must be nonnegative")
    return int((n_g > 0) == (n_d > 0))


# ---------------------------------------------------------------------------
# Association


@dataclass(frozen=True)
class Association:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_g: tuple[int, ...]
    unmatched_d: tuple[int, ...]

    @property
    def n_matched(self) -> int:
        return len(self.pairs)


def _overlap(a: CrackComponent, b: CrackComponent, measure: str) -> float:
    if a.bounding_box[0] > b.bounding_box[2] or b.bounding_box[0] > a.bounding_box[2] \
            or a.bounding_box[1] > b.bounding_box[3] or b.bounding_box[1] > a.bounding_box[3]:
        return 0
    inter = len(a.pixels & b.pixels)
    if measure == "iou":
        return inter / (a.area + b.area - inter) if inter else 0.0
    return inter


def associate(g: Sequence[CrackComponent], d: Sequence[CrackComponent], measure: str = "intersection") -> Association:
    """Greedy association: ground-truth cracks are taken largest first and
    each claims the still-free detection it overlaps most.

    Overlap ties go to the larger detection, then the earlier one in
    component order. Pair overlaps are pixel counts (or IoU with
    ``measure="iou"``).
    """
    if measure not in ("intersection", "iou"):
        raise ValueError(f"unknown overlap measure {measure!r}")
    gs = component_order(g)
    ds = component_order(d)
    free = [True] * len(ds)
    pairs = []
    unmatched_g = []
    for gi in gs:
        best_j, best = -1, 0
        for j, dj in enumerate(ds):
            if not free[j]:
                continue
            ov = _overlap(gi, dj, measure)
            if ov > best:
                best_j, best = j, ov
        if best_j < 0:
            unmatched_g.append(gi.id)
        else:
            free[best_j] = False
            pairs.append((gi.id, ds[best_j].id, best))
    unmatched_d = tuple(ds[j].id for j in range(len(ds)) if free[j])
    return Association(tuple(pairs), tuple(unmatched_g), unmatched_d)


def tile_prf(n_g: int, n_d: int, n_matched: int) -> tuple[float, float, float]:
    if n_matched > min(n_g, n_d) or n_matched < 0:
        raise ValueError(f"matched count {n_matched} exceeds min({n_g}, {n_d})")
    r = n_matched / n_g if n_g > 0 else 1.0
    p = n_matched / n_d if n_d > 0 else 1.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return r, p, f1


@dataclass
class TileEvaluation:
    tile_id: str
    n_g: int
    n_d: int
    association: Association | None
    pm: int
    recall: float
    precision: float
    f1: float

    @property
    def weight(self) -> int:
        return self.n_g + 1

    @classmethod
    def from_components(cls, tile_id: str, g: Sequence[CrackComponent], d: Sequence[CrackComponent],
                        measure: str = "intersection") -> "TileEvaluation":
        assoc = associate(g, d, measure)
        r, p, f1 = tile_prf(len(g), len(d), assoc.n_matched)
        return cls(tile_id, len(g), len(d), assoc, crack_presence(len(g), len(d)), r, p, f1)

    @classmethod
    def from_counts(cls, tile_id: str, n_g: int, n_d: int, n_matched: int) -> "TileEvaluation":
        r, p, f1 = tile_prf(n_g, n_d, n_matched)
        return cls(tile_id, n_g, n_d, None, crack_presence(n_g, n_d), r, p, f1)


def evaluate_tile(tile_id: str, truth_mask: np.ndarray, detected: np.ndarray,
                  measure: str = "intersection") -> TileEvaluation:
    if np.shape(truth_mask) != np.shape(detected):
        raise ValueError(f"tile {tile_id}: truth {np.shape(truth_mask)} and detection {np.shape(detected)} differ")
    return TileEvaluation.from_components(tile_id, connected_components(truth_mask),
                                          connected_components(detected), measure)


def cpa(evals: Sequence[TileEvaluation]) -> float:
    if not evals:
        raise ValueError("cpa of an empty tile list")
    return math.fsum(e.pm for e in evals) / len(evals)


def ccf1(evals: Sequence[TileEvaluation]) -> float:
    if not evals:
        raise ValueError("ccf1 of an empty tile list")
    # Exact rational accumulation: independent of tile order, and a single
    # tile reproduces its own F1 whatever its weight.
    num = sum(Fraction(e.f1) * e.weight for e in evals)
    return float(num / sum(e.weight for e in evals))


# ---------------------------------------------------------------------------
# Reports

REPORT_COLUMNS = ["model", "config", "resolution", "fold", "accuracy", "mcc", "cpa", "ccf1"]
METRICS = ("accuracy", "mcc", "cpa", "ccf1")


@dataclass
class FoldMetrics:
    accuracy: float
    mcc: float
    cpa: float
    ccf1: float
    confusion: ConfusionCounts | None = None
    tiles: list[TileEvaluation] = field(default_factory=list)


def evaluate_fold(truth_masks: Mapping[str, np.ndarray], detection_masks: Mapping[str, np.ndarray],
                  patch_truth, patch_pred, measure: str = "intersection") -> FoldMetrics:
    if set(truth_masks) != set(detection_masks):
        missing = sorted(set(truth_masks) ^ set(detection_masks))
        raise ValueError(f"misaligned tiles between truth and detections: {missing}")
    c = confusion(patch_pred, patch_truth)
    tiles = [evaluate_tile(t, truth_masks[t], detection_masks[t], measure) for t in sorted(truth_masks)]
    return FoldMetrics(accuracy(c), mcc(c), cpa(tiles), ccf1(tiles), c, tiles)


@dataclass(frozen=True)
class ReportRow:
    model: str
    config: str
    resolution: str
    fold: str
    accuracy: float
    mcc: float
    cpa: float
    ccf1: float


@dataclass
class SuiteReport:
    rows: list[ReportRow] = field(default_factory=list)

    def add(self, model: str, config: str, resolution: str, fold: int, m: FoldMetrics) -> None:
        self.rows.append(ReportRow(model, config, resolution, str(fold), m.accuracy, m.mcc, m.cpa, m.ccf1))

    def fold_rows(self) -> list[ReportRow]:
        return [r for r in self.rows if r.fold != "mean"]

    def mean_rows(self) -> list[ReportRow]:
        """Unweighted mean over folds for each (model, config, resolution)."""
        groups: dict[tuple, list[ReportRow]] = {}
        for r in self.fold_rows():
            groups.setdefault((r.model, r.config, r.resolution), []).append(r)
        out = []
        for key in sorted(groups):
            rs = groups[key]
            vals = {m: math.fsum(getattr(r, m) for r in rs) / len(rs) for m in METRICS}
            out.append(ReportRow(*key, "mean", **vals))
        return out

    def mean(self, model: str, config: str, resolution: str | None = None) -> ReportRow:
        for r in self.mean_rows():
            if r.model == model and r.config == config and (resolution is None or r.resolution == resolution):
                return r
        raise KeyError((model, config, resolution))

    def models(self) -> list[str]:
        return sorted({r.model for r in self.rows})

    def all_rows(self) -> list[ReportRow]:
        key = lambda r: (r.resolution, r.model, r.config, r.fold == "mean", int(r.fold) if r.fold != "mean" else 0)
        return sorted(self.fold_rows(), key=key) + self.mean_rows()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.all_rows():
            w.writerow([r.model, r.config, r.resolution, r.fold] + [repr(float(getattr(r, m))) for m in METRICS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"columns": REPORT_COLUMNS, "rows": [asdict(r) for r in self.all_rows()]},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SuiteReport":
        d = json.loads(text)
        return cls([ReportRow(**r) for r in d["rows"] if r["fold"] != "mean"])

    def plot_series(self) -> str:
        """Long-form CSV of fold means: metric, model, resolution, config, value."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "model", "resolution", "config", "value"])
        for m in METRICS:
            for r in self.mean_rows():
                w.writerow([m, r.model, r.resolution, r.config, repr(float(getattr(r, m)))])
        return buf.getvalue()


def evaluate_run(truth_masks: Mapping[str, np.ndarray], detection_masks: Mapping[int, Mapping[str, np.ndarray]],
                 patch_predictions: Mapping[int, tuple], model: str = "model", config: str = "",
                 resolution: str = "", measure: str = "intersection") -> SuiteReport:
    """Per-fold metrics for one model and lighting configuration.

    ``detection_masks`` maps fold -> {tile_id: mask} over that fold's test
    tiles; ``patch_predictions`` maps fold -> (truth labels, predicted labels).
    """
    if set(detection_masks) != set(patch_predictions):
        raise ValueError("detections and patch predictions cover different folds")
    report = SuiteReport()
    for fold in sorted(detection_masks):
        dets = detection_masks[fold]
        unknown = set(dets) - set(truth_masks)
        if unknown:
            raise ValueError(f"misaligned tiles: no ground truth for {sorted(unknown)}")
        truth = {t: truth_masks[t] for t in dets}
        y, pred = patch_predictions[fold]
        report.add(model, config, resolution, fold, evaluate_fold(truth, dets, y, pred, measure))
    return report
