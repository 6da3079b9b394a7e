"""Patch classifiers: a logistic baseline with three losses, sliding-window
inference with score stitching, and lookup classifiers backed by external
prediction files.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .patchset import Label, LabeledPatch, PatchGeometry
from .seeding import derive_rng

EPS = 1e-12


class LossKind(str, enum.Enum):
    CROSS_ENTROPY = "ce"
    MEAN_FALSE_ERROR = "mfe"
    FOCAL = "focal"


class ClassAbsentError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss: LossKind = LossKind.CROSS_ENTROPY
    gamma: float = 2.0
    mfe_variant: str = "squared"
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    balanced_input: bool = True

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mfe_variant not in ("squared", "entropic"):
            raise ValueError(f"unknown mean-false-error variant {self.mfe_variant!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Model


class ClassifierInterface(Protocol):
    def score_patches(self, patches: np.ndarray, tile_id: str | None = None,
                      origins: np.ndarray | None = None) -> np.ndarray:
        """Crack probabilities in [0, 1] for a stack of (N, s, s) patches."""


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class BaselineModel:
    weights: np.ndarray
    bias: float
    patch_size: int
    mean: float = 0.0
    std: float = 1.0
    config: TrainConfig | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if self.weights.size != self.patch_size * self.patch_size:
            raise ValueError(f"weight length {self.weights.size} != patch_size^2 = {self.patch_size ** 2}")
        if not self.std > 0:
            raise ValueError("normalisation std must be > 0")

    @classmethod
    def zeros(cls, patch_size: int, mean: float = 0.0, std: float = 1.0) -> "BaselineModel":
        return cls(np.zeros(patch_size * patch_size), 0.0, patch_size, mean, std)

    def features(self, patches: np.ndarray) -> np.ndarray:
        x = np.asarray(patches, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.patch_size, self.patch_size):
            raise ValueError(f"patch dims {x.shape[1:]} do not match model patch size {self.patch_size}")
        return (x.reshape(len(x), -1) - self.mean) / self.std

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights + self.bias

    def score_patches(self, patches, tile_id=None, origins=None) -> np.ndarray:
        return sigmoid(self.logits(self.features(patches)))

    def to_dict(self) -> dict:
        return {
            "kind": "logistic",
            "patch_size": self.patch_size,
            "mean": self.mean,
            "std": self.std,
            "bias": float(self.bias),
            "weights": [float(w) for w in self.weights],
            "config": self.config.to_dict() if self.config else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineModel":
        cfg = TrainConfig.from_dict(d["config"]) if d.get("config") else None
        return cls(np.array(d["weights"], dtype=np.float64), float(d["bias"]), int(d["patch_size"]),
                   float(d["mean"]), float(d["std"]), cfg)

    def save(self, path: str | Path) -> None:
        # json writes floats with repr(), which round-trips exactly.
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "BaselineModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def score(model: BaselineModel, patch: np.ndarray) -> float:
    return float(model.score_patches(np.asarray(patch)[None])[0])


# ---------------------------------------------------------------------------
# Losses


def _check_batch(scores, labels, loss: LossKind):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.size != y.size or s.size == 0:
        raise ValueError(f"scores and labels must have equal nonzero length, got {s.size}/{y.size}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if LossKind(loss) is LossKind.MEAN_FALSE_ERROR and (y.all() or not y.any()):
        raise ClassAbsentError("class absent: mean false error needs both classes in the batch")
    return s, y


def _loss_and_dscore(s, y, loss: LossKind, gamma: float, variant: str):
    """Loss value and dL/ds per sample (zero where clamping is active)."""
    loss = LossKind(loss)
    sc = np.clip(s, EPS, 1.0 - EPS)
    live = (s > EPS) & (s < 1.0 - EPS)
    n = s.size
    if loss is LossKind.CROSS_ENTROPY:
        value = -np.mean(y * np.log(sc) + (1 - y) * np.log(1 - sc))
        d = -(y / sc - (1 - y) / (1 - sc)) / n
    elif loss is LossKind.FOCAL:
        st = np.where(y == 1, sc, 1 - sc)
        sign = np.where(y == 1, 1.0, -1.0)
        value = np.mean(-((1 - st) ** gamma) * np.log(st))
        if gamma == 0:
            dst = -1.0 / st
        else:
            dst = gamma * (1 - st) ** (gamma - 1) * np.log(st) - (1 - st) ** gamma / st
        d = sign * dst / n
    else:
        pos, neg = y == 1, y == 0
        n_pos, n_neg = pos.sum(), neg.sum()
        if variant == "squared":
            fne = np.sum((1 - sc[pos]) ** 2) / n_pos
            fpe = np.sum(sc[neg] ** 2) / n_neg
            d = np.where(pos, -2 * (1 - sc) / n_pos, 2 * sc / n_neg)
        else:
            fne = -np.sum(np.log(sc[pos])) / n_pos
            fpe = -np.sum(np.log(1 - sc[neg])) / n_neg
            d = np.where(pos, -1 / (sc * n_pos), 1 / ((1 - sc) * n_neg))
        value = fpe + fne
    return float(value), np.where(live, d, 0.0)


def loss_value(scores, labels, loss: LossKind | str = LossKind.CROSS_ENTROPY, gamma: float = 2.0,
               variant: str = "squared") -> float:
    s, y = _check_batch(scores, labels, loss)
    return _loss_and_dscore(s, y, loss, gamma, variant)[0]


def loss_gradient(model: BaselineModel, patches: np.ndarray, labels, loss: LossKind | str = LossKind.CROSS_ENTROPY,
                  gamma: float = 2.0, variant: str = "squared") -> tuple[np.ndarray, float]:
    """Analytic (dL/dw, dL/db) of the loss of ``model`` on a batch."""
    x = model.features(patches)
    return _gradient_from_features(model, x, labels, loss, gamma, variant)[1:]


def batch_loss(model: BaselineModel, patches, labels, loss=LossKind.CROSS_ENTROPY, gamma=2.0,
               variant="squared") -> float:
    return loss_value(model.score_patches(patches), labels, loss, gamma, variant)


def _gradient_from_features(model, x, labels, loss, gamma, variant):
    s = sigmoid(model.logits(x))
    s, y = _check_batch(s, labels, loss)
    value, d = _loss_and_dscore(s, y, loss, gamma, variant)
    dz = d * s * (1 - s)
    return value, x.T @ dz, float(dz.sum())


# ---------------------------------------------------------------------------
# Metrics used during training (kept local to avoid a circular import)


def _mcc(pred: np.ndarray, y: np.ndarray) -> float:
    from .evalmetrics import confusion, mcc
    return mcc(confusion(pred, y))


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainingLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_validation_mcc: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def stack_patches(patches: Sequence[LabeledPatch]) -> tuple[np.ndarray, np.ndarray]:
    if not patches:
        raise ValueError("no patches")
    x = np.stack([p.pixels for p in patches]).astype(np.float64)
    y = np.array([1 if p.label == Label.POSITIVE else 0 for p in patches], dtype=np.int64)
    if any(p.label == Label.AMBIGUOUS for p in patches):
        raise ValueError("ambiguous patches cannot be used for training or evaluation")
    return x, y


def _stratified_batches(y: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    # Each class is shuffled on its own and spread evenly over the batches so
    # every batch carries both classes whenever the data does.
    pos = rng.permutation(np.flatnonzero(y == 1))
    neg = rng.permutation(np.flatnonzero(y == 0))
    n_batches = max(1, math.ceil(len(y) / batch_size))
    n_batches = min(n_batches, max(1, min(len(pos), len(neg))) if len(pos) and len(neg) else n_batches)
    parts = [np.concatenate([a, b]) for a, b in zip(np.array_split(pos, n_batches), np.array_split(neg, n_batches))]
    return [rng.permutation(p) for p in parts if len(p)]


def train(train_set: Sequence[LabeledPatch] | tuple[np.ndarray, np.ndarray], cfg: TrainConfig = TrainConfig(),
          validation: Sequence[LabeledPatch] | tuple[np.ndarray, np.ndarray] | None = None
          ) -> tuple[BaselineModel, TrainingLog]:
    """Mini-batch SGD with momentum; returns the parameters of the epoch with best validation MCC.

    Without a validation set the final epoch is returned.
    """
    x_raw, y = train_set if isinstance(train_set, tuple) else stack_patches(train_set)
    if len(y) == 0:
        raise ValueError("empty training set")
    if cfg.loss is LossKind.MEAN_FALSE_ERROR and (y.all() or not y.any()):
        raise ClassAbsentError("class absent: mean false error training needs both classes")
    s = x_raw.shape[-1]
    mean = float(x_raw.mean())
    std = float(x_raw.std()) or 1.0
    model = BaselineModel.zeros(s, mean, std)
    model.config = cfg
    x = model.features(x_raw)
    if validation is not None:
        xv_raw, yv = validation if isinstance(validation, tuple) else stack_patches(validation)
        xv = model.features(xv_raw) if len(yv) else None
    else:
        xv = yv = None

    rng = derive_rng(cfg.seed, "train")
    vw = np.zeros_like(model.weights)
    vb = 0.0
    log = TrainingLog()
    best = None
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _stratified_batches(y, cfg.batch_size, rng):
            value, gw, gb = _gradient_from_features(model, x[idx], y[idx], cfg.loss, cfg.gamma, cfg.mfe_variant)
            vw = cfg.momentum * vw - cfg.learning_rate * gw
            vb = cfg.momentum * vb - cfg.learning_rate * gb
            model.weights = model.weights + vw
            model.bias = model.bias + vb
            total += value * len(idx)
            count += len(idx)
        entry = {"epoch": epoch + 1, "train_loss": total / count}
        if xv is not None:
            pred = (sigmoid(model.logits(xv)) >= 0.5).astype(np.int64)
            entry["validation_mcc"] = _mcc(pred, yv)
            if best is None or entry["validation_mcc"] > log.best_validation_mcc:
                log.best_validation_mcc = entry["validation_mcc"]
                log.best_epoch = epoch + 1
                best = (model.weights.copy(), model.bias)
        log.epochs.append(entry)
    if best is not None:
        model.weights, model.bias = best
    else:
        log.best_epoch = cfg.epochs
    return model, log


# ---------------------------------------------------------------------------
# Sliding-window inference


@dataclass
class ScoreMap:
    total: np.ndarray
    count: np.ndarray

    @property
    def covered(self) -> np.ndarray:
        return self.count > 0

    @property
    def mean(self) -> np.ndarray:
        """Mean covering score; NaN where no window reached the pixel."""
        out = np.full(self.total.shape, np.nan)
        np.divide(self.total, self.count, out=out, where=self.count > 0)
        return out


def _spread(grid: np.ndarray, n: int, size: int, stride: int, axis: int) -> np.ndarray:
    """Sum grid cells over every window covering each pixel along ``axis``."""
    starts = np.arange(grid.shape[axis]) * stride
    out_shape = list(grid.shape)
    out_shape[axis] = n
    out = np.zeros(out_shape, dtype=grid.dtype)
    for y in range(n):
        lo = int(np.searchsorted(starts, y - size + 1))
        hi = int(np.searchsorted(starts, y, side="right"))
        if hi > lo:
            sl = [slice(None)] * grid.ndim
            sl[axis] = slice(lo, hi)
            o = [slice(None)] * grid.ndim
            o[axis] = y
            out[tuple(o)] = grid[tuple(sl)].sum(axis=axis)
    return out


def stitch(scores: np.ndarray, shape: tuple[int, int], g: PatchGeometry) -> ScoreMap:
    """Per-pixel sum and count of covering window scores.

    ``scores`` is indexed by grid position, so the result does not depend on
    the order in which windows were evaluated.
    """
    nr, nc = g.grid_shape(shape)
    grid = np.asarray(scores, dtype=np.float64).reshape(nr, nc)
    h, w = shape
    total = _spread(_spread(grid, h, g.patch_size, g.stride, 0), w, g.patch_size, g.stride, 1)
    ones = np.ones((nr, nc), dtype=np.int64)
    count = _spread(_spread(ones, h, g.patch_size, g.stride, 0), w, g.patch_size, g.stride, 1)
    return ScoreMap(total, count)


def window_view(img: np.ndarray, g: PatchGeometry) -> np.ndarray:
    """(N, s, s) view of all grid windows in row-major order."""
    s, st = g.patch_size, g.stride
    g.grid_shape(img.shape)
    v = np.lib.stride_tricks.sliding_window_view(img, (s, s))[::st, ::st]
    return v.reshape(-1, s, s)


def sliding_scores(img: np.ndarray, clf: ClassifierInterface, g: PatchGeometry,
                   tile_id: str | None = None, chunk: int = 4096) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    windows = window_view(img, g)
    origins = g.origins(img.shape)
    out = np.empty(len(windows))
    for a in range(0, len(windows), chunk):
        out[a:a + chunk] = clf.score_patches(windows[a:a + chunk], tile_id, origins[a:a + chunk])
    if not np.all(np.isfinite(out)) or out.min(initial=0.0) < 0 or out.max(initial=0.0) > 1:
        raise ValueError("classifier returned scores outside [0, 1]")
    return out


def detection_mask(smap: ScoreMap, threshold: float = 0.5) -> np.ndarray:
    covered = smap.count > 0
    mask = np.zeros(smap.total.shape, dtype=bool)
    mask[covered] = smap.total[covered] / smap.count[covered] >= threshold
    return mask


def sliding_inference(img: np.ndarray, clf: ClassifierInterface, g: PatchGeometry, threshold: float = 0.5,
                      tile_id: str | None = None) -> tuple[ScoreMap, np.ndarray]:
    scores = sliding_scores(img, clf, g, tile_id)
    smap = stitch(scores, np.shape(img), g)
    return smap, detection_mask(smap, threshold)


# ---------------------------------------------------------------------------
# External predictions

PREDICTION_HEADER = ["tile_id", "row", "col", "score"]


class PredictionFormatError(ValueError):
    pass


class PredictionLookupError(KeyError):
    def __str__(self):
        return str(self.args[0])


class LookupClassifier:
    """Scores windows by (tile_id, origin) from a table of external predictions."""

    def __init__(self, table: dict[tuple[str, int, int], float], source: str = ""):
        self.table = table
        self.source = source

    def score_patches(self, patches, tile_id=None, origins=None) -> np.ndarray:
        if tile_id is None or origins is None:
            raise ValueError("lookup classifier needs tile_id and origins")
        out = np.empty(len(origins))
        for i, (r, c) in enumerate(np.asarray(origins).tolist()):
            try:
                out[i] = self.table[(tile_id, r, c)]
            except KeyError:
                raise PredictionLookupError(
                    f"no prediction for tile {tile_id!r} at origin ({r}, {c}) in {self.source or 'table'}") from None
        return out


def ingest_predictions(path: str | Path, g: PatchGeometry | None = None) -> LookupClassifier:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    table: dict[tuple[str, int, int], float] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PREDICTION_HEADER:
            raise PredictionFormatError(f"{path}:1: expected header {','.join(PREDICTION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise PredictionFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            tid = row[0].strip()
            try:
                r, c = int(row[1]), int(row[2])
                s = float(row[3])
            except ValueError:
                raise PredictionFormatError(f"{path}:{lineno}: malformed row {row}") from None
            if not (0.0 <= s <= 1.0):
                raise PredictionFormatError(f"{path}:{lineno}: score {s} outside [0, 1]")
            if g is not None and (r % g.stride or c % g.stride or r < 0 or c < 0):
                raise PredictionFormatError(f"{path}:{lineno}: origin ({r}, {c}) is not on the stride-{g.stride} grid")
            key = (tid, r, c)
            if key in table:
                raise PredictionFormatError(f"{path}:{lineno}: duplicate origin {key}")
            table[key] = s
    return LookupClassifier(table, str(path))


def write_predictions(path: str | Path, rows) -> None:
    """Write (tile_id, row, col, score) rows in the prediction file format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for tid, r, c, s in rows:
            w.writerow([tid, int(r), int(c), repr(float(s))])
