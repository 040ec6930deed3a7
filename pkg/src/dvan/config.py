"""Flat ``key=value`` run configuration, merged from a file and overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .canvas import CanvasPlan
from .data import SyntheticTaskSpec
from .errors import ConfigError, DvanError
from .training import VARIANTS, ModelConfig, TrainConfig

DESK_SCALES = ((84, 12), (63, 16), (42, 18))


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    # dataset; ``dataset`` names a manifest of real images instead of synthetic data
    dataset: str = ""
    test_dataset: str = ""
    image_size: int = 96
    num_classes: int = 8
    body_size: float = 0.62
    glyph_size: int = 5
    glyphs_per_class: int = 1
    background_clutter: float = 0.5
    body_decoys: int = 2
    decoy_spot: float = 1.0
    placement_jitter: int = 8
    train_per_class: int = 200
    test_per_class: int = 100
    pattern_grid: int = 3
    ink_colors: int = 4
    # canvases
    short_edge: int = 96
    scales: tuple = DESK_SCALES[:2]
    canvas_size: int = 32
    include_center: bool = True
    # model
    variant: str = "dvan"
    channels: tuple = (16, 32)
    hidden: int = 64
    dtype: str = "float32"
    # objective and optimizer
    lam: float = 1.0
    beta: float = 0.5
    mass_threshold: float = 0.5
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: tuple = (3, 6, 1)
    batch_size: int = 16
    overlap_sample: int = 256
    clip_norm: float = 5.0
    # ablations
    variants: tuple = ("single", "multicanvas", "avg", "max", "dvan")
    lambdas: tuple = (0.0, 0.5, 1.0, 2.0, 10.0)
    scale_counts: tuple = (1, 2)
    seeds: tuple = (0,)
    sweep: str = "variants"
    # gradient checking
    gradcheck_eps: float = 1e-5
    gradcheck_tolerance: float = 1e-4

    # -- parsing ----------------------------------------------------------------
    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_pairs(cls, pairs: dict) -> "RunConfig":
        cfg = cls()
        known = {f.name: f for f in fields(cls)}
        for key, raw in pairs.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, _convert(key, raw, getattr(cls(), key)))
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        pairs = {}
        if path:
            pairs.update(read_pairs(path))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            pairs[k.strip()] = v.strip()
        cfg = cls.from_pairs(pairs)
        cfg.validate()
        return cfg

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}={_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- derived configs ------------------------------------------------------------
    def task_spec(self, seed: int | None = None) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            image_size=self.image_size, num_classes=self.num_classes, body_size=self.body_size,
            glyph_size=self.glyph_size, glyphs_per_class=self.glyphs_per_class,
            background_clutter=self.background_clutter, body_decoys=self.body_decoys,
            decoy_spot=self.decoy_spot, placement_jitter=self.placement_jitter,
            train_per_class=self.train_per_class, test_per_class=self.test_per_class,
            pattern_grid=self.pattern_grid, ink_colors=self.ink_colors, seed=self.seed if seed is None else seed)

    def canvas_plan(self) -> CanvasPlan:
        return CanvasPlan(self.short_edge, self.scales, self.canvas_size, self.include_center)

    def backbone(self) -> BackboneConfig:
        return BackboneConfig.from_channels(self.canvas_size, self.channels)

    def model_config(self, variant: str | None = None, num_classes: int | None = None) -> ModelConfig:
        return ModelConfig(variant or self.variant, self.backbone(), self.hidden,
                           num_classes or self.num_classes, self.dtype)

    def train_config(self, seed: int | None = None, lam: float | None = None) -> TrainConfig:
        return TrainConfig(self.lam if lam is None else lam, self.beta, self.mass_threshold,
                           self.learning_rate, self.momentum, tuple(self.epochs), self.batch_size,
                           self.seed if seed is None else seed, self.overlap_sample,
                           self.clip_norm)

    def validate(self) -> "RunConfig":
        """Build every derived config so any inconsistency surfaces up front."""
        try:
            if not self.dataset:
                self.task_spec().validate()
            plan = self.canvas_plan()
            if not plan.scales:
                raise ConfigError("need at least one canvas scale")
            glyph = self.glyph_size * self.short_edge / self.image_size
            if not self.dataset and min(w for w, _ in plan.scales) <= glyph:
                raise ConfigError("glyph_size must be smaller than the finest canvas window")
            self.model_config()
            self.train_config()
            if self.dtype not in ("float32", "float64"):
                raise ConfigError("dtype must be float32 or float64")
            for v in self.variants:
                if v not in VARIANTS:
                    raise ConfigError(f"unknown variant {v!r} in variants")
            if any(n < 1 or n > len(self.scales) for n in self.scale_counts):
                raise ConfigError(f"scale_counts must lie in [1, {len(self.scales)}]")
            if self.sweep not in ("variants", "lambda", "scales"):
                raise ConfigError("sweep must be variants, lambda or scales")
            if not self.seeds:
                raise ConfigError("seeds must not be empty")
            if self.gradcheck_eps <= 0 or self.gradcheck_tolerance <= 0:
                raise ConfigError("gradcheck_eps and gradcheck_tolerance must be positive")
        except ConfigError:
            raise
        except DvanError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def read_pairs(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def _convert(key, raw, default):
    if not isinstance(raw, str):
        return raw
    try:
        if key == "scales":
            return tuple(tuple(int(x) for x in part.split(":")) for part in raw.split(",") if part)
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [p.strip() for p in raw.split(",") if p.strip()]
            if not default:
                return tuple(items)
            kind = type(default[0])
            return tuple(kind(p) for p in items)
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(":".join(str(v) for v in pair) for pair in value)
        return ",".join(str(v) for v in value)
    return str(value)
