"""Synthetic tile acquisition under the five lighting configurations.

Every tile is rendered from a seed: crack polylines and the low-frequency
surface texture are drawn in base pixel units and rasterised at
``spec.scale``, so the same seed at 2x scale gives the same tile at twice the
resolution. Crack contrast grows linearly with the height of the active LED
level, which is the only radiometric assumption of the model.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import (
    Annotation,
    CrackComponent,
    Polyline,
    connected_components,
    load_image,
    load_mask,
    rasterize_annotation,
    save_image,
    save_mask,
)
from .seeding import derive_rng


class LightingConfig(str, enum.Enum):
    ALL_LIGHTS = "AllLights"
    ONLY_LEVEL1 = "OnlyLevel1"
    ONLY_LEVEL2 = "OnlyLevel2"
    ONLY_LEVEL3 = "OnlyLevel3"
    ONLY_LEVEL4 = "OnlyLevel4"

    @property
    def level(self) -> int | None:
        """1-based LED level, or None for all levels."""
        return None if self is LightingConfig.ALL_LIGHTS else int(self.value[-1])

    @property
    def pattern_id(self) -> int:
        return list(LightingConfig).index(self) + 1

    @classmethod
    def parse(cls, text: str) -> "LightingConfig":
        for cfg in cls:
            if text.lower() in (cfg.value.lower(), cfg.name.lower()):
                return cfg
        raise ValueError(f"unknown lighting configuration {text!r}; expected one of {[c.value for c in cls]}")


@dataclass(frozen=True)
class RigGeometry:
    tile_side: float = 200.0
    level_heights: tuple[float, ...] = (12.0, 24.0, 36.0, 48.0)
    leds_per_level: tuple[int, ...] = (47, 47, 48, 47)
    camera_height: float = 60.0
    # Farther levels deliver slightly less irradiance.
    level_gains: tuple[float, ...] = (1.0, 0.97, 0.94, 0.91)
    contrast_min: float = 0.05
    contrast_max: float = 0.45

    def __post_init__(self):
        object.__setattr__(self, "level_heights", tuple(float(h) for h in self.level_heights))
        object.__setattr__(self, "leds_per_level", tuple(int(n) for n in self.leds_per_level))
        object.__setattr__(self, "level_gains", tuple(float(g) for g in self.level_gains))
        if len(self.level_heights) != 4 or len(self.leds_per_level) != 4 or len(self.level_gains) != 4:
            raise ValueError("rig geometry needs exactly 4 LED levels")
        if any(b <= a for a, b in zip(self.level_heights, self.level_heights[1:])):
            raise ValueError(f"degenerate geometry: level heights must be strictly increasing, got {self.level_heights}")
        if sum(self.leds_per_level) != 189 or min(self.leds_per_level) < 1:
            raise ValueError(f"LED counts must be positive and total 189, got {self.leds_per_level}")
        if not 0.0 <= self.contrast_min <= self.contrast_max <= 1.0:
            raise ValueError("need 0 <= contrast_min <= contrast_max <= 1")
        if min(self.level_gains) <= 0:
            raise ValueError("level gains must be positive")

    @property
    def total_leds(self) -> int:
        return sum(self.leds_per_level)

    def contrast(self, level: int) -> float:
        """Fractional darkening of crack pixels when only ``level`` (1-4) is lit."""
        h = self.level_heights[level - 1]
        h1, h4 = self.level_heights[0], self.level_heights[-1]
        return self.contrast_min + (self.contrast_max - self.contrast_min) * (h - h1) / (h4 - h1)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigGeometry":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class TileSpec:
    """Seeded recipe for one synthetic tile. Pixel quantities are in base units."""

    seed: int
    width: int = 160
    height: int = 120
    crack_count: int = 1
    crack_length: tuple[float, float] = (40.0, 110.0)
    crack_width: tuple[float, float] = (3.0, 5.0)
    waviness: float = 0.3
    step: float = 4.0
    albedo: float = 0.65
    texture_amplitude: float = 0.015
    texture_cell: float = 12.0
    pixel_noise: float = 0.08
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "crack_length", tuple(float(x) for x in self.crack_length))
        object.__setattr__(self, "crack_width", tuple(float(x) for x in self.crack_width))
        if self.width < 1 or self.height < 1:
            raise ValueError("tile dimensions must be positive")
        if self.crack_count < 0:
            raise ValueError("crack_count must be >= 0")
        lo, hi = self.crack_width
        if lo < 1.0 or hi < lo:
            raise ValueError(f"crack widths must satisfy 1 <= lo <= hi, got {self.crack_width}")
        lo, hi = self.crack_length
        if lo <= 0 or hi < lo:
            raise ValueError(f"crack length range must be nonempty and positive, got {self.crack_length}")
        if self.scale <= 0 or self.step <= 0 or self.texture_cell <= 0:
            raise ValueError("scale, step and texture_cell must be positive")
        if self.pixel_noise < 0 or self.texture_amplitude < 0 or not 0 < self.albedo <= 1:
            raise ValueError("invalid texture parameters")

    @property
    def shape(self) -> tuple[int, int]:
        return int(round(self.height * self.scale)), int(round(self.width * self.scale))

    @property
    def min_separation(self) -> float:
        return 2.0 * self.crack_width[1]

    def scaled(self, scale: float) -> "TileSpec":
        return replace(self, scale=scale)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TileSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class TileStack:
    tile_id: str
    images: dict[LightingConfig, np.ndarray]
    truth_mask: np.ndarray
    truth_components: list[CrackComponent]
    annotation: Annotation
    spec: TileSpec | None = None
    geometry: RigGeometry | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.images) != set(LightingConfig):
            raise ValueError("a tile stack needs exactly one image per lighting configuration")
        shapes = {img.shape for img in self.images.values()}
        if len(shapes) != 1 or self.truth_mask.shape not in shapes:
            raise ValueError(f"stack images and mask must share dimensions, got {shapes} / {self.truth_mask.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.truth_mask.shape


# ---------------------------------------------------------------------------
# Crack geometry


def _walk(rng: np.random.Generator, spec: TileSpec, margin: float) -> Polyline:
    h, w = spec.height, spec.width
    length = rng.uniform(*spec.crack_length)
    n_seg = max(1, int(math.ceil(length / spec.step)))
    r = rng.uniform(margin, h - 1 - margin)
    c = rng.uniform(margin, w - 1 - margin)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    turns = rng.normal(0.0, spec.waviness, size=n_seg)
    widths = rng.uniform(*spec.crack_width, size=n_seg)
    seg = length / n_seg
    verts = [(r, c)]
    for k in range(n_seg):
        heading += turns[k]
        nr, nc = r + seg * math.sin(heading), c + seg * math.cos(heading)
        if not (margin <= nr <= h - 1 - margin and margin <= nc <= w - 1 - margin):
            # Bend back toward the tile centre instead of leaving the tile.
            heading = math.atan2((h - 1) / 2 - r, (w - 1) / 2 - c) + turns[k]
            nr, nc = r + seg * math.sin(heading), c + seg * math.cos(heading)
            nr = min(max(nr, margin), h - 1 - margin)
            nc = min(max(nc, margin), w - 1 - margin)
        r, c = nr, nc
        verts.append((r, c))
    return Polyline(verts, [float(x) for x in widths])


def crack_geometry(spec: TileSpec, tile_id: str = "", max_attempts: int = 200) -> Annotation:
    """Crack polylines in base units, separated by at least ``spec.min_separation``."""
    rng = derive_rng(spec.seed, "cracks")
    margin = spec.crack_width[1]
    if spec.height - 1 - 2 * margin < 0 or spec.width - 1 - 2 * margin < 0:
        if spec.crack_count:
            raise ValueError("tile too small for the requested crack widths")
    occupied = np.zeros((spec.height, spec.width), dtype=bool)
    cracks: list[Polyline] = []
    for k in range(spec.crack_count):
        for _ in range(max_attempts):
            line = _walk(rng, spec, margin)
            probe = rasterize_annotation(Annotation(tile_id, spec.height, spec.width, [line]))
            if len(connected_components(probe)) != 1:
                continue
            if occupied.any():
                dist = ndimage.distance_transform_edt(~occupied)
                if dist[probe].min() < spec.min_separation:
                    continue
            cracks.append(line)
            occupied |= probe
            break
        else:
            raise ValueError(f"could not place crack {k + 1} of {spec.crack_count} with separation "
                             f"{spec.min_separation}px after {max_attempts} attempts")
    h, w = spec.height, spec.width
    corners = [(0.0, 0.0), (0.0, w - 1.0), (h - 1.0, w - 1.0), (h - 1.0, 0.0)]
    return Annotation(tile_id, h, w, cracks, corners)


def _texture(spec: TileSpec) -> np.ndarray:
    rng = derive_rng(spec.seed, "texture")
    gh = int(math.ceil(spec.height / spec.texture_cell)) + 2
    gw = int(math.ceil(spec.width / spec.texture_cell)) + 2
    grid = rng.normal(0.0, 1.0, size=(gh, gw))
    H, W = spec.shape
    # Sample the coarse grid at base-unit pixel centres so texture is scale-consistent.
    rb = ((np.arange(H) + 0.5) / spec.scale - 0.5) / spec.texture_cell + 0.5
    cb = ((np.arange(W) + 0.5) / spec.scale - 0.5) / spec.texture_cell + 0.5
    rr, cc = np.meshgrid(rb, cb, indexing="ij")
    field_ = ndimage.map_coordinates(grid, [rr, cc], order=1, mode="nearest")
    return np.clip(spec.albedo * (1.0 + spec.texture_amplitude * field_), 0.0, 1.0)


def _render_level(spec: TileSpec, geom: RigGeometry, level: int, texture: np.ndarray, mask: np.ndarray) -> np.ndarray:
    img = texture * geom.level_gains[level - 1]
    img = img * (1.0 - geom.contrast(level) * mask)
    if spec.pixel_noise > 0:
        img = img + derive_rng(spec.seed, "noise", level).normal(0.0, spec.pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _render_all(spec: TileSpec, geom: RigGeometry, tile_id: str = ""):
    base = crack_geometry(spec, tile_id)
    ann = base.scaled(spec.scale) if spec.scale != 1.0 else base
    ann.height, ann.width = spec.shape
    mask = rasterize_annotation(ann)
    texture = _texture(spec)
    levels = {lvl: _render_level(spec, geom, lvl, texture, mask) for lvl in (1, 2, 3, 4)}
    return ann, mask, levels


def _mean_of_levels(levels: dict[int, np.ndarray]) -> np.ndarray:
    return (levels[1] + levels[2] + levels[3] + levels[4]) / 4.0


def render_tile(spec: TileSpec, geom: RigGeometry, cfg: LightingConfig) -> tuple[np.ndarray, np.ndarray]:
    """Render one acquisition. Returns (gray image, truth mask)."""
    _, mask, levels = _render_all(spec, geom)
    cfg = LightingConfig(cfg)
    img = _mean_of_levels(levels) if cfg.level is None else levels[cfg.level]
    return img, mask


def render_stack(spec: TileSpec, geom: RigGeometry, tile_id: str | None = None) -> TileStack:
    tile_id = tile_id if tile_id is not None else f"tile{spec.seed}"
    ann, mask, levels = _render_all(spec, geom, tile_id)
    images = {cfg: (_mean_of_levels(levels) if cfg.level is None else levels[cfg.level]) for cfg in LightingConfig}
    comps = connected_components(mask)
    if len(comps) != spec.crack_count:
        raise ValueError(f"tile {tile_id}: rendered {len(comps)} components for {spec.crack_count} cracks")
    return TileStack(tile_id, images, mask, comps, ann, spec, geom)


# ---------------------------------------------------------------------------
# Persistence


def save_stack(stack: TileStack, root: str | Path) -> Path:
    d = Path(root) / stack.tile_id
    d.mkdir(parents=True, exist_ok=True)
    for cfg, img in stack.images.items():
        save_image(img, d / f"{cfg.value}.pgm")
    save_mask(stack.truth_mask, d / "truth.pgm")
    meta = {
        "tile_id": stack.tile_id,
        "seed": stack.spec.seed if stack.spec else None,
        "spec": stack.spec.to_dict() if stack.spec else None,
        "geometry": stack.geometry.to_dict() if stack.geometry else None,
        "annotation": stack.annotation.to_dict(),
        **stack.extra,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_stack(tile_dir: str | Path) -> TileStack:
    d = Path(tile_dir)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"file not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    images = {cfg: load_image(d / f"{cfg.value}.pgm") for cfg in LightingConfig}
    mask = load_mask(d / "truth.pgm")
    spec = TileSpec.from_dict(meta["spec"]) if meta.get("spec") else None
    geom = RigGeometry.from_dict(meta["geometry"]) if meta.get("geometry") else None
    return TileStack(meta["tile_id"], images, mask, connected_components(mask),
                     Annotation.from_dict(meta["annotation"]), spec, geom)
