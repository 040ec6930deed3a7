"""Training runs and ablation sweeps built on :mod:`dvan.training`.

Variants that share a seed and a canvas plan also share stage 1: the
backbone and its temporary classifier do not depend on the head, so they
are trained once and copied into every variant before stage 2.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .canvas import CanvasPlan, normalize_image
from .config import RunConfig
from .data import Dataset, generate_synthetic, load_manifest_split
from .training import Model, PreparedData, Trainer, prepare

logger = logging.getLogger(__name__)


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset:
        train = load_manifest_split(cfg.dataset, cfg.short_edge)
        test = load_manifest_split(cfg.test_dataset, cfg.short_edge) if cfg.test_dataset else train.subset([])
        num_classes = int(max(train.labels.max(), test.labels.max() if len(test) else 0)) + 1
        return Dataset(train, test, max(num_classes, cfg.num_classes))
    dataset = generate_synthetic(cfg.task_spec())
    if cfg.short_edge != cfg.image_size:
        for split in (dataset.train, dataset.test):
            scale = cfg.short_edge / cfg.image_size
            split.images = np.stack([normalize_image(img, cfg.short_edge) for img in split.images])
            split.glyph_boxes = [[tuple(int(round(v * scale)) for v in box) for box in boxes]
                                 for boxes in split.glyph_boxes]
    return dataset


@dataclass
class Stage1Snapshot:
    arrays: dict  # backbone and temporary classifier parameters
    records: list
    features: np.ndarray | None  # training-split features under the trained backbone


def pretrain(cfg: RunConfig, data: PreparedData, seed: int, num_classes: int) -> Stage1Snapshot:
    """Stage 1 for one seed and canvas plan."""
    model = Model(cfg.model_config("avg", num_classes), seed)
    trainer = Trainer(model, data, cfg.train_config(seed=seed))
    records = trainer.run_stage(1)
    arrays = {k: v.data.copy() for k, v in {**model.backbone, **model.stage1}.items()}
    features = trainer.train_features() if cfg.epochs[1] else None
    return Stage1Snapshot(arrays, records, features)


def train_model(cfg: RunConfig, data: PreparedData, variant: str, seed: int, num_classes: int,
                lam: float | None = None, stage1: Stage1Snapshot | None = None,
                log_path=None, checkpoint_path=None) -> Trainer:
    """Run the schedule for one variant, starting after ``stage1`` if given."""
    model = Model(cfg.model_config(variant, num_classes), seed)
    trainer = Trainer(model, data, cfg.train_config(seed=seed, lam=lam), log_path)
    if stage1 is not None:
        for name, value in stage1.arrays.items():
            model.params[name].data = value.copy()
        for rec in stage1.records:
            trainer._log(rec)
        trainer.progress = (1, cfg.epochs[0])
        trainer._cache = stage1.features
    trainer.run_schedule(checkpoint_path)
    return trainer


@dataclass
class AblationRow:
    sweep: str
    setting: str
    seed: int
    accuracy: float
    mean_ldiv: float
    mean_overlap: float
    violation_rate: float
    seconds: float


ROW_FIELDS = ("sweep", "setting", "seed", "accuracy", "mean_Ldiv", "mean_overlap",
              "violation_rate", "seconds")


def ablation_jobs(cfg: RunConfig) -> list:
    """``(setting, variant, lam, plan_key)`` for the configured sweep.

    ``plan_key`` is a scale count, or 0 for the single whole-image canvas of
    the attention-off baseline.
    """
    n_all = len(cfg.scales)
    if cfg.sweep == "variants":
        return [(v, v, cfg.lam, 0 if v == "single" else n_all) for v in cfg.variants]
    if cfg.sweep == "lambda":
        return [(f"lambda={lam:g}", "dvan", lam, n_all) for lam in cfg.lambdas]
    return [(f"scales={n}", "dvan", cfg.lam, n) for n in cfg.scale_counts]


def plan_for(cfg: RunConfig, key: int) -> CanvasPlan:
    if key == 0:
        edge = cfg.short_edge
        return CanvasPlan(edge, ((edge, edge),), cfg.canvas_size, cfg.include_center)
    return cfg.canvas_plan().with_scales(key)


def run_ablation(cfg: RunConfig, dataset: Dataset | None = None, out_dir=None) -> list:
    """Train every job of the sweep for every seed; one row per (job, seed)."""
    dataset = dataset if dataset is not None else load_dataset(cfg)
    plans = {}
    rows = []
    jobs = ablation_jobs(cfg)
    for key in sorted({j[3] for j in jobs}):
        plans[key] = prepare(dataset, plan_for(cfg, key), cfg.dtype)
    for seed in cfg.seeds:
        snapshots = {}
        for setting, variant, lam, n_scales in jobs:
            start = time.perf_counter()
            data = plans[n_scales]
            if n_scales not in snapshots:
                snapshots[n_scales] = pretrain(cfg, data, seed, dataset.num_classes)
            log_path = None
            if out_dir is not None:
                log_path = Path(out_dir) / f"log_{_slug(setting)}_seed{seed}.csv"
            trainer = train_model(cfg, data, variant, seed, dataset.num_classes, lam,
                                  snapshots[n_scales], log_path)
            ev = trainer.evaluate("test")
            row = AblationRow(cfg.sweep, setting, seed, ev.accuracy, ev.mean_ldiv, ev.mean_overlap,
                              ev.violation_rate, time.perf_counter() - start)
            logger.info("%s seed %d: accuracy %.4f", setting, seed, ev.accuracy)
            rows.append(row)
    return rows


def summarize(rows) -> dict:
    """Seed-mean accuracy and statistics per setting, in first-seen order."""
    out = {}
    for r in rows:
        out.setdefault(r.setting, []).append(r)
    return {k: {"accuracy": _nanmean([r.accuracy for r in v]),
                "mean_Ldiv": _nanmean([r.mean_ldiv for r in v]),
                "mean_overlap": _nanmean([r.mean_overlap for r in v]),
                "seeds": len(v)} for k, v in out.items()}


def write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROW_FIELDS)
        for r in rows:
            w.writerow([r.sweep, r.setting, r.seed, repr(r.accuracy), repr(r.mean_ldiv),
                        repr(r.mean_overlap), repr(r.violation_rate), f"{r.seconds:.1f}"])


def format_table(rows) -> str:
    summary = summarize(rows)
    lines = [f"{'setting':<16}{'accuracy':>10}{'mean_Ldiv':>11}{'overlap':>9}{'seeds':>7}"]
    for k, s in summary.items():
        lines.append(f"{k:<16}{s['accuracy']:>10.4f}{s['mean_Ldiv']:>11.4f}"
                     f"{s['mean_overlap']:>9.3f}{s['seeds']:>7d}")
    return "\n".join(lines)


def _nanmean(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0 or np.all(np.isnan(arr)):
        return float("nan")
    return float(np.nanmean(arr))


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in text)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seed=seed)
