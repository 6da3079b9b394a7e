"""Raster types, PGM/PNG I/O, box downsampling and 8-connected crack components.

Gray images are float64 arrays of shape (height, width) with values in [0, 1].
Binary masks are bool arrays of the same shape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

MAX_PIXELS = 1 << 28

_EIGHT = np.ones((3, 3), dtype=bool)


class ImageFormatError(ValueError):
    pass


def check_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"gray image must be a non-empty 2-D array, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("gray image values must be finite and within [0, 1]")
    return img


def check_mask(mask: np.ndarray, like: np.ndarray | None = None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if like is not None and mask.shape != np.shape(like):
        raise ValueError(f"mask shape {mask.shape} does not match image shape {np.shape(like)}")
    return mask.astype(bool, copy=False)


# ---------------------------------------------------------------------------
# I/O


def _read_u8(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    try:
        im = Image.open(path)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    with im:
        w, h = im.size
        if w * h > MAX_PIXELS:
            raise ImageFormatError(f"dimension overflow: {w}x{h}")
        if im.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
            raise ImageFormatError(f"unsupported bit depth in {path} (mode {im.mode})")
        if im.mode == "1":
            im = im.convert("L")
        if im.mode != "L":
            raise ImageFormatError(f"unsupported image mode {im.mode} in {path}; 8-bit grayscale required")
        return np.array(im, dtype=np.uint8)


def _write_u8(arr: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".pnm") else None
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8), mode="L").save(path, format=fmt)


def load_image(path: str | Path) -> np.ndarray:
    return _read_u8(path).astype(np.float64) / 255.0


def save_image(img: np.ndarray, path: str | Path) -> None:
    img = check_gray(img)
    _write_u8(np.rint(img * 255.0), path)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap intensities to the 8-bit grid, i.e. what a save/load round trip yields."""
    return np.rint(check_gray(img) * 255.0) / 255.0


def load_mask(path: str | Path) -> np.ndarray:
    raw = _read_u8(path)
    bad = (raw != 0) & (raw != 255)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ImageFormatError(f"mask pixel not 0 or 255 at ({r}, {c}) in {path}: value {raw[r, c]}")
    return raw == 255


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    mask = check_mask(mask)
    _write_u8(np.where(mask, 255, 0), path)


# ---------------------------------------------------------------------------
# Downsampling


def downsampled_shape(shape: tuple[int, int], factor: float) -> tuple[int, int]:
    return tuple(max(1, int(round(n * factor))) for n in shape)  # type: ignore[return-value]


def _box_weights(n_in: int, n_out: int) -> np.ndarray:
    # Row i holds the fractional overlap of output cell i with each input cell.
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.arange(n_in)
    left = np.maximum(edges[:-1, None], lo[None, :])
    right = np.minimum(edges[1:, None], lo[None, :] + 1)
    w = np.clip(right - left, 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def _footprints(n_in: int, n_out: int) -> list[slice]:
    scale = n_in / n_out
    return [slice(int(math.floor(i * scale)), max(int(math.ceil((i + 1) * scale)), int(math.floor(i * scale)) + 1))
            for i in range(n_out)]


def downsample(img: np.ndarray, factor: float) -> np.ndarray:
    """Area-averaging (box filter) resize by ``factor`` in (0, 1]."""
    if not (0.0 < factor <= 1.0):
        raise ValueError(f"downsample factor must be in (0, 1], got {factor}")
    img = check_gray(img)
    if factor == 1.0:
        return img.copy()
    h, w = img.shape
    oh, ow = downsampled_shape((h, w), factor)
    out = _box_weights(h, oh) @ img @ _box_weights(w, ow).T
    # A weighted mean lies within its footprint's range; clipping removes
    # rounding drift so constant regions stay exactly constant.
    rows, cols = _footprints(h, oh), _footprints(w, ow)
    lo_r = np.stack([img[s].min(axis=0) for s in rows])
    hi_r = np.stack([img[s].max(axis=0) for s in rows])
    lo = np.stack([lo_r[:, s].min(axis=1) for s in cols], axis=1)
    hi = np.stack([hi_r[:, s].max(axis=1) for s in cols], axis=1)
    return np.clip(out, lo, hi)


# ---------------------------------------------------------------------------
# Components


@dataclass(frozen=True)
class CrackComponent:
    id: int
    pixels: frozenset
    area: int
    bounding_box: tuple[int, int, int, int]

    def sort_key(self) -> tuple:
        first = min(self.pixels)
        return (-self.area, self.bounding_box[0], self.bounding_box[1], first)


def component_order(components: Sequence[CrackComponent]) -> list[CrackComponent]:
    return sorted(components, key=CrackComponent.sort_key)


def components_from_pixel_sets(pixel_sets: Sequence[set | frozenset]) -> list[CrackComponent]:
    """Build ordered, renumbered components from raw (row, col) pixel sets."""
    comps = []
    for pix in pixel_sets:
        pix = frozenset(pix)
        if not pix:
            raise ValueError("component must be nonempty")
        rs = [p[0] for p in pix]
        cs = [p[1] for p in pix]
        comps.append(CrackComponent(-1, pix, len(pix), (min(rs), min(cs), max(rs), max(cs))))
    return [CrackComponent(i, c.pixels, c.area, c.bounding_box) for i, c in enumerate(component_order(comps))]


def connected_components(mask: np.ndarray) -> list[CrackComponent]:
    """8-connected components, largest first; ties go to the smaller (min_row, min_col)."""
    mask = check_mask(mask)
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return []
    rr, cc = np.nonzero(labels)
    lab = labels[rr, cc]
    order = np.argsort(lab, kind="stable")
    rr, cc, lab = rr[order], cc[order], lab[order]
    bounds = np.searchsorted(lab, np.arange(1, n + 2))
    sets = []
    for k in range(n):
        a, b = bounds[k], bounds[k + 1]
        sets.append(set(zip(rr[a:b].tolist(), cc[a:b].tolist())))
    return components_from_pixel_sets(sets)


def components_to_mask(components: Sequence[CrackComponent], shape: tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for comp in components:
        idx = np.array(sorted(comp.pixels), dtype=np.intp).reshape(-1, 2)
        mask[idx[:, 0], idx[:, 1]] = True
    return mask


# ---------------------------------------------------------------------------
# Annotations


@dataclass
class Polyline:
    vertices: list[tuple[float, float]]
    width: float | list[float]

    def segment_widths(self) -> list[float]:
        n = max(len(self.vertices) - 1, 1)
        if isinstance(self.width, (int, float)):
            return [float(self.width)] * n
        if len(self.width) != n:
            raise ValueError(f"expected {n} segment widths, got {len(self.width)}")
        return [float(w) for w in self.width]

    def scaled(self, factor: float) -> "Polyline":
        verts = [(r * factor, c * factor) for r, c in self.vertices]
        width = self.width * factor if isinstance(self.width, (int, float)) else [w * factor for w in self.width]
        return Polyline(verts, width)


@dataclass
class Annotation:
    """Ground truth for one tile as delivered by an annotator."""

    tile_id: str
    height: int
    width: int
    cracks: list[Polyline] = field(default_factory=list)
    corners: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "height": self.height,
            "width": self.width,
            "cracks": [{"vertices": [list(v) for v in p.vertices], "width": p.width} for p in self.cracks],
            "corners": [list(c) for c in self.corners],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Annotation":
        try:
            cracks = [Polyline([tuple(v) for v in p["vertices"]], p["width"]) for p in d.get("cracks", [])]
            ann = cls(str(d["tile_id"]), int(d["height"]), int(d["width"]), cracks,
                      [tuple(c) for c in d.get("corners", [])])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed annotation: {exc}") from exc
        if ann.height < 1 or ann.width < 1:
            raise ValueError("annotation dimensions must be positive")
        for p in ann.cracks:
            if not p.vertices:
                raise ValueError("crack polyline without vertices")
            if min(p.segment_widths()) <= 0:
                raise ValueError("stroke width must be positive")
        return ann

    def scaled(self, factor: float) -> "Annotation":
        h, w = downsampled_shape((self.height, self.width), factor) if factor <= 1 else (
            int(round(self.height * factor)), int(round(self.width * factor)))
        return Annotation(self.tile_id, h, w, [p.scaled(factor) for p in self.cracks],
                          [(r * factor, c * factor) for r, c in self.corners])


def load_annotation(path: str | Path) -> Annotation:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return Annotation.from_dict(json.loads(path.read_text()))


def save_annotation(ann: Annotation, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ann.to_dict(), indent=2))


def _draw_segment(mask: np.ndarray, p0, p1, width: float) -> None:
    h, w = mask.shape
    half = width / 2.0
    (r0, c0), (r1, c1) = p0, p1
    rmin = max(int(math.floor(min(r0, r1) - half)), 0)
    rmax = min(int(math.ceil(max(r0, r1) + half)), h - 1)
    cmin = max(int(math.floor(min(c0, c1) - half)), 0)
    cmax = min(int(math.ceil(max(c0, c1) + half)), w - 1)
    if rmin <= rmax and cmin <= cmax:
        rr, cc = np.mgrid[rmin:rmax + 1, cmin:cmax + 1]
        dr, dc = r1 - r0, c1 - c0
        seg2 = dr * dr + dc * dc
        if seg2 > 0:
            t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / seg2, 0.0, 1.0)
        else:
            t = np.zeros(rr.shape)
        d2 = (rr - (r0 + t * dr)) ** 2 + (cc - (c0 + t * dc)) ** 2
        mask[rmin:rmax + 1, cmin:cmax + 1] |= d2 <= half * half
    # Centre-line samples keep hairline strokes 8-connected.
    n = max(int(math.ceil(2 * math.hypot(r1 - r0, c1 - c0))), 1)
    ts = np.linspace(0.0, 1.0, n + 1)
    rs = np.rint(r0 + ts * (r1 - r0)).astype(int)
    cs = np.rint(c0 + ts * (c1 - c0)).astype(int)
    ok = (rs >= 0) & (rs < h) & (cs >= 0) & (cs < w)
    mask[rs[ok], cs[ok]] = True


def rasterize_polyline(mask: np.ndarray, line: Polyline) -> None:
    verts = line.vertices
    widths = line.segment_widths()
    if len(verts) == 1:
        _draw_segment(mask, verts[0], verts[0], widths[0])
        return
    for k in range(len(verts) - 1):
        _draw_segment(mask, verts[k], verts[k + 1], widths[k])


def rasterize_annotation(ann: Annotation) -> np.ndarray:
    mask = np.zeros((ann.height, ann.width), dtype=bool)
    for line in ann.cracks:
        rasterize_polyline(mask, line)
    return mask
