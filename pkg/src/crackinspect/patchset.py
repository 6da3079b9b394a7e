"""Sliding-window patch extraction, crack-proportion labelling, balancing and folds."""

from __future__ import annotations

import enum
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .illumsim import LightingConfig, TileStack
from .seeding import derive_rng

log = logging.getLogger(__name__)


class ImbalanceWarning(UserWarning):
    pass


class Label(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    AMBIGUOUS = 2


@dataclass(frozen=True)
class PatchGeometry:
    patch_size: int
    stride: int

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError(f"patch_size and stride must be >= 1, got {self.patch_size}/{self.stride}")
        if self.stride > self.patch_size:
            log.warning("stride %d exceeds patch size %d; windows leave gaps", self.stride, self.patch_size)

    @classmethod
    def for_regime(cls, resolution: str) -> "PatchGeometry":
        """Window geometry used for VGA-scale ('low') and full-resolution ('high') inputs."""
        try:
            return {"low": cls(50, 10), "high": cls(299, 60)}[resolution]
        except KeyError:
            raise ValueError(f"unknown resolution regime {resolution!r}") from None

    def grid_shape(self, shape: tuple[int, int]) -> tuple[int, int]:
        h, w = shape
        s = self.patch_size
        if h < s or w < s:
            raise ValueError(f"image {w}x{h} is smaller than the {s}x{s} patch")
        return (h - s) // self.stride + 1, (w - s) // self.stride + 1

    def origins(self, shape: tuple[int, int]) -> np.ndarray:
        """Top-left corners of all full windows, row-major, as an (N, 2) int array."""
        nr, nc = self.grid_shape(shape)
        rr, cc = np.meshgrid(np.arange(nr) * self.stride, np.arange(nc) * self.stride, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)


@dataclass(frozen=True)
class LabelThresholds:
    low: float = 0.1
    high: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.low <= self.high <= 1.0:
            raise ValueError(f"need 0 <= low <= high <= 1, got {self.low}/{self.high}")


@dataclass(frozen=True)
class LabeledPatch:
    tile_id: str
    config: LightingConfig | None
    origin: tuple[int, int]
    p: float
    label: Label
    pixels: np.ndarray | None = None


def crack_proportion(mask_patch: np.ndarray, m: int, n: int) -> float:
    if m * n == 0:
        raise ValueError("empty patch")
    mask_patch = np.asarray(mask_patch)
    if mask_patch.shape != (m, n):
        raise ValueError(f"patch shape {mask_patch.shape} != ({m}, {n})")
    return int(np.count_nonzero(mask_patch > 0)) / (m * n)


def label_patch(p: float, t: LabelThresholds = LabelThresholds()) -> Label:
    if p < t.low:
        return Label.NEGATIVE
    if p < t.high:
        return Label.AMBIGUOUS
    return Label.POSITIVE


def label_array(p: np.ndarray, t: LabelThresholds = LabelThresholds()) -> np.ndarray:
    return np.where(p < t.low, Label.NEGATIVE, np.where(p < t.high, Label.AMBIGUOUS, Label.POSITIVE)).astype(np.int8)


def window_counts(mask: np.ndarray, g: PatchGeometry) -> np.ndarray:
    """Crack pixel count for every window on the grid, shape grid_shape."""
    mask = np.asarray(mask, dtype=bool)
    nr, nc = g.grid_shape(mask.shape)
    s, st = g.patch_size, g.stride
    ii = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1)
    r = np.arange(nr) * st
    c = np.arange(nc) * st
    return ii[np.ix_(r + s, c + s)] - ii[np.ix_(r, c + s)] - ii[np.ix_(r + s, c)] + ii[np.ix_(r, c)]


def window_proportions(mask: np.ndarray, g: PatchGeometry) -> np.ndarray:
    return window_counts(mask, g) / (g.patch_size * g.patch_size)


def extract_patches(img: np.ndarray | None, mask: np.ndarray, g: PatchGeometry,
                    t: LabelThresholds = LabelThresholds(), tile_id: str = "",
                    config: LightingConfig | None = None) -> list[LabeledPatch]:
    """All full windows in row-major order, each labelled from its mask proportion.

    ``img`` may be None to build pixel-less references.
    """
    mask = np.asarray(mask, dtype=bool)
    if img is not None and np.shape(img) != mask.shape:
        raise ValueError(f"image shape {np.shape(img)} != mask shape {mask.shape}")
    p = window_proportions(mask, g).ravel()
    origins = g.origins(mask.shape)
    s = g.patch_size
    out = []
    for (r, c), pk in zip(origins.tolist(), p.tolist()):
        pix = img[r:r + s, c:c + s] if img is not None else None
        out.append(LabeledPatch(tile_id, config, (r, c), pk, label_patch(pk, t), pix))
    return out


def balance(patches: Sequence[LabeledPatch], seed) -> list[LabeledPatch]:
    """All positives plus an equal-size seeded sample of negatives; ambiguous patches are dropped.

    ``seed`` may be an int or a numpy Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pos = [p for p in patches if p.label == Label.POSITIVE]
    neg = [p for p in patches if p.label == Label.NEGATIVE]
    if not pos:
        warnings.warn("no positive patches; balanced set is empty", ImbalanceWarning, stacklevel=2)
        return []
    if len(neg) < len(pos):
        warnings.warn(f"only {len(neg)} negatives for {len(pos)} positives; keeping all negatives",
                      ImbalanceWarning, stacklevel=2)
        return pos + neg
    pick = np.sort(rng.choice(len(neg), size=len(pos), replace=False))
    return pos + [neg[i] for i in pick]


def balance_indices(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Index form of :func:`balance` over a label vector, ascending."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == Label.POSITIVE)
    neg = np.flatnonzero(labels == Label.NEGATIVE)
    if len(pos) == 0:
        return np.zeros(0, dtype=np.intp)
    if len(neg) < len(pos):
        return np.sort(np.concatenate([pos, neg]))
    pick = np.sort(rng.choice(len(neg), size=len(pos), replace=False))
    return np.sort(np.concatenate([pos, neg[pick]]))


# ---------------------------------------------------------------------------
# Folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    tests: tuple[tuple[str, ...], ...]
    tiles: tuple[str, ...]

    def train(self, fold: int) -> tuple[str, ...]:
        test = set(self.test(fold))
        return tuple(t for t in self.tiles if t not in test)

    def test(self, fold: int) -> tuple[str, ...]:
        if not 0 <= fold < self.k:
            raise IndexError(f"unknown fold {fold} (k={self.k})")
        return self.tests[fold]

    def fold_of(self, tile_id: str) -> int:
        for k, test in enumerate(self.tests):
            if tile_id in test:
                return k
        raise KeyError(tile_id)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "folds": [{"train": list(self.train(i)), "test": list(self.test(i))} for i in range(self.k)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        tests = tuple(tuple(f["test"]) for f in d["folds"])
        tiles = tuple(sorted(t for test in tests for t in test))
        plan = cls(int(d["k"]), int(d["seed"]), tests, tiles)
        if len(tests) != plan.k:
            raise ValueError("fold count does not match k")
        for i, f in enumerate(d["folds"]):
            if set(f["train"]) != set(plan.train(i)):
                raise ValueError(f"fold {i}: train set is not the complement of its test set")
        return plan

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "FoldPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_folds(tile_ids: Iterable[str], k: int = 10, seed: int = 0) -> FoldPlan:
    tiles = sorted(set(tile_ids))
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(tiles) < k:
        raise ValueError(f"too few tiles: {len(tiles)} for {k} folds")
    order = derive_rng(seed, "folds").permutation(len(tiles))
    chunks = np.array_split(order, k)
    tests = tuple(tuple(sorted(tiles[i] for i in chunk)) for chunk in chunks)
    return FoldPlan(k, seed, tests, tuple(tiles))


# ---------------------------------------------------------------------------
# Phase sets


@dataclass
class PhaseSets:
    train: list[LabeledPatch]
    validation: list[LabeledPatch]
    test: list[LabeledPatch]


def tile_balance(patches: Sequence[LabeledPatch], seed: int, tile_id: str, phase: str) -> list[LabeledPatch]:
    """Per-image balancing on its own (seed, tile, phase) stream."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = balance(patches, derive_rng(seed, "balance", phase, tile_id))
    for w in caught:
        log.debug("tile %s (%s): %s", tile_id, phase, w.message)
    return out


def build_phase_sets(stacks: Mapping[str, TileStack] | Sequence[TileStack], plan: FoldPlan, fold_idx: int,
                     cfg: LightingConfig, g: PatchGeometry, t: LabelThresholds = LabelThresholds(),
                     seed: int = 0) -> PhaseSets:
    if not 0 <= fold_idx < plan.k:
        raise IndexError(f"unknown fold {fold_idx} (k={plan.k})")
    if not isinstance(stacks, Mapping):
        stacks = {s.tile_id: s for s in stacks}
    cfg = LightingConfig(cfg)
    train, val, test = [], [], []
    for tid in plan.train(fold_idx):
        st = stacks[tid]
        train += tile_balance(extract_patches(st.images[cfg], st.truth_mask, g, t, tid, cfg), seed, tid, "train")
    for tid in plan.test(fold_idx):
        st = stacks[tid]
        patches = extract_patches(st.images[cfg], st.truth_mask, g, t, tid, cfg)
        val += tile_balance(patches, seed, tid, "validation")
        test += [p for p in patches if p.label != Label.AMBIGUOUS]
    if not any(p.label == Label.POSITIVE for p in train):
        warnings.warn(f"fold {fold_idx}: training tiles have no positive patches; train set is empty",
                      ImbalanceWarning, stacklevel=2)
    return PhaseSets(train, val, test)
