"""Experiment configuration (JSON round-trippable dataclasses)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .classify import LossKind, TrainConfig
from .illumsim import LightingConfig, RigGeometry, TileSpec
from .patchset import LabelThresholds, PatchGeometry
from .seeding import derive_rng


class ConfigError(ValueError):
    pass


RESOLUTIONS = ("low", "high")


@dataclass(frozen=True)
class SuiteConfig:
    """Ranges from which per-tile specs are drawn. Pixel units refer to the low-res raster."""

    n_tiles: int = 8
    width: int = 160
    height: int = 120
    crack_count: tuple[int, int] = (0, 3)
    crack_length: tuple[float, float] = (40.0, 110.0)
    crack_width: tuple[float, float] = (3.0, 5.0)
    waviness: float = 0.3
    albedo: tuple[float, float] = (0.64, 0.66)
    texture_amplitude: float = 0.015
    texture_cell: float = 12.0
    pixel_noise: float = 0.08
    hr_scale: float = 2.0

    def __post_init__(self):
        for name in ("crack_count", "crack_length", "crack_width", "albedo"):
            v = tuple(getattr(self, name))
            if len(v) != 2 or v[1] < v[0]:
                raise ConfigError(f"suite.{name} must be a nonempty [lo, hi] range, got {v}")
            object.__setattr__(self, name, v)
        if self.n_tiles < 0:
            raise ConfigError("suite.n_tiles must be >= 0")
        if self.hr_scale < 1:
            raise ConfigError("suite.hr_scale must be >= 1")

    def tile_ids(self) -> list[str]:
        return [f"tile{i:03d}" for i in range(self.n_tiles)]

    def tile_spec(self, index: int, seed: int) -> TileSpec:
        """Spec of tile ``index`` at acquisition (high) resolution."""
        rng = derive_rng(seed, "suite", index)
        count = int(rng.integers(self.crack_count[0], self.crack_count[1] + 1))
        albedo = float(rng.uniform(*self.albedo))
        tile_seed = int(rng.integers(0, 2 ** 63))
        return TileSpec(seed=tile_seed, width=self.width, height=self.height, crack_count=count,
                        crack_length=self.crack_length, crack_width=self.crack_width, waviness=self.waviness,
                        albedo=albedo, texture_amplitude=self.texture_amplitude, texture_cell=self.texture_cell,
                        pixel_noise=self.pixel_noise, scale=self.hr_scale)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    rig: RigGeometry = field(default_factory=RigGeometry)
    patch_low: PatchGeometry = field(default_factory=lambda: PatchGeometry(12, 4))
    patch_high: PatchGeometry = field(default_factory=lambda: PatchGeometry(24, 8))
    thresholds: LabelThresholds = field(default_factory=LabelThresholds)
    k: int = 4
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.01, epochs=30))
    detection_threshold: float = 0.5
    lighting: tuple[str, ...] = tuple(c.value for c in LightingConfig)

    def __post_init__(self):
        try:
            object.__setattr__(self, "lighting", tuple(LightingConfig.parse(c).value for c in self.lighting))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if not 0 <= self.detection_threshold <= 1:
            raise ConfigError("detection_threshold must be in [0, 1]")

    def geometry(self, resolution: str) -> PatchGeometry:
        if resolution == "low":
            return self.patch_low
        if resolution == "high":
            return self.patch_high
        raise ConfigError(f"unknown resolution {resolution!r}")

    def resolution_factor(self, resolution: str) -> float:
        """Downsampling factor from the acquired raster to the regime raster."""
        return 1.0 / self.suite.hr_scale if resolution == "low" else 1.0

    def train_config(self, loss: LossKind | str) -> TrainConfig:
        loss = LossKind(loss)
        return replace(self.train, loss=loss, balanced_input=loss is LossKind.CROSS_ENTROPY)

    def lighting_configs(self) -> list[LightingConfig]:
        return [LightingConfig(c) for c in self.lighting]

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "suite": _plain(asdict(self.suite)),
            "rig": self.rig.to_dict(),
            "patch_low": asdict(self.patch_low),
            "patch_high": asdict(self.patch_high),
            "thresholds": asdict(self.thresholds),
            "k": self.k,
            "train": self.train.to_dict(),
            "detection_threshold": self.detection_threshold,
            "lighting": list(self.lighting),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        try:
            kw = dict(
                seed=int(d.get("seed", base.seed)),
                suite=_build(SuiteConfig, d.get("suite"), base.suite),
                rig=RigGeometry.from_dict({**base.rig.to_dict(), **d.get("rig", {})}),
                patch_low=_build(PatchGeometry, d.get("patch_low"), base.patch_low),
                patch_high=_build(PatchGeometry, d.get("patch_high"), base.patch_high),
                thresholds=_build(LabelThresholds, d.get("thresholds"), base.thresholds),
                k=int(d.get("k", base.k)),
                train=TrainConfig.from_dict({**base.train.to_dict(), **d.get("train", {})}),
                detection_threshold=float(d.get("detection_threshold", base.detection_threshold)),
                lighting=tuple(d.get("lighting", base.lighting)),
            )
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def digest(self, *sections: str) -> str:
        d = self.to_dict()
        picked = {s: d[s] for s in sections} if sections else d
        return hashlib.sha256(json.dumps(picked, sort_keys=True).encode()).hexdigest()


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build(cls, overrides, default):
    merged = {**asdict(default), **(overrides or {})}
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in merged.items()})
