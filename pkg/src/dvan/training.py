"""Model assembly, the three-stage schedule and evaluation.

Stage 1 trains the backbone with a temporary average-pool classifier on
every canvas. Stage 2 freezes the backbone (its features are computed once
and cached) and trains the head. Stage 3 updates everything except the
temporary classifier.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attention as att
from . import checkpoint
from .backbone import BackboneConfig, extract, init_backbone, to_locations
from .canvas import CanvasLayout, plan_layout, render, sequence_overlaps, CanvasPlan
from .data import Dataset, Split, iterate_minibatches
from .errors import ConfigError, InputError
from .losses import SGD, LossConfig, clip_gradients, classification_loss, diversity_loss, total_loss
from .tensor import Tensor, no_grad, parameters_checksum

logger = logging.getLogger(__name__)

VARIANTS = ("dvan", "avg", "max", "multicanvas", "single")
POOLING = {"dvan": "attention", "avg": "avg", "max": "max"}
EVAL_CHUNK = 64


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "dvan"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    hidden: int = 64
    num_classes: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.hidden < 1:
            raise ConfigError("hidden size must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    beta: float = 0.5
    mass_threshold: float = 0.5
    learning_rate: float = 0.001
    momentum: float = 0.9
    epochs: tuple = (50, 50, 50)
    batch_size: int = 16
    seed: int = 0
    overlap_sample: int = 256
    clip_norm: float = 0.0  # joint gradient norm cap, 0 disables

    def __post_init__(self):
        if len(self.epochs) != 3 or any(e < 0 for e in self.epochs):
            raise ConfigError("epochs must list three non-negative stage lengths")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if not 0 < self.beta <= 1 or not 0 < self.mass_threshold <= 1:
            raise ConfigError("beta and mass_threshold must lie in (0, 1]")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be non-negative")


class Model:
    """Backbone, temporary stage-1 classifier and the variant's head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        k = cfg.backbone.feature_side
        self.k2 = k * k
        self.feat_dim = cfg.backbone.feature_dim
        # separate streams so the backbone init does not depend on the variant
        self.backbone = init_backbone(cfg.backbone, np.random.default_rng([seed, 1]), dtype)
        self.stage1 = att.init_stage1_head(self.feat_dim, cfg.num_classes,
                                           np.random.default_rng([seed, 2]), dtype)
        head_rng = np.random.default_rng([seed, 3])
        if cfg.variant in POOLING:
            self.head = att.init_head_params(self.k2, self.feat_dim, cfg.hidden,
                                             cfg.num_classes, head_rng, dtype)
        else:
            self.head = att.init_canvas_head(self.feat_dim, cfg.num_classes, head_rng, dtype)
        # fixed per-channel standardization in front of the head, fitted once
        # on training features when head training starts
        self.norm = {"features/shift": Tensor(np.zeros(self.feat_dim, dtype=dtype)),
                     "features/scale": Tensor(np.ones(self.feat_dim, dtype=dtype))}

    @property
    def params(self) -> dict:
        return {**self.backbone, **self.stage1, **self.head}

    @property
    def pooling(self):
        return POOLING.get(self.cfg.variant)

    def features(self, pixels) -> Tensor:
        """``(B, T, C, S, S)`` canvases to ``(B, T, K*K, D)`` location features."""
        pixels = np.asarray(pixels, dtype=self.cfg.dtype)
        b, t = pixels.shape[:2]
        maps = extract(pixels.reshape(b * t, *pixels.shape[2:]), self.backbone, self.cfg.backbone)
        locs = to_locations(maps)
        return locs.reshape(b, t, self.k2, self.feat_dim)

    def fit_norm(self, feats: np.ndarray) -> None:
        flat = np.asarray(feats, dtype=np.float64).reshape(-1, self.feat_dim)
        mean, std = flat.mean(axis=0), flat.std(axis=0)
        # near-dead channels would otherwise get huge gains once the backbone moves
        floor = max(0.5 * float(std.mean()), 1e-6)
        self.norm["features/shift"].data = mean.astype(self.cfg.dtype)
        self.norm["features/scale"].data = (1.0 / np.maximum(std, floor)).astype(self.cfg.dtype)

    def normalized(self, feats) -> Tensor:
        feats = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats))
        return (feats - self.norm["features/shift"]) * self.norm["features/scale"]

    def head_outputs(self, feats) -> list:
        feats = self.normalized(feats)
        if self.pooling is not None:
            return att.forward_sequence(feats, self.head, self.pooling)
        return att.canvas_head_forward(feats, self.head)

    def stage1_outputs(self, feats) -> list:
        return att.stage1_forward(feats, self.stage1)

    def state_arrays(self) -> dict:
        return {name: p.data for name, p in {**self.params, **self.norm}.items()}

    def load_arrays(self, arrays: dict, strict: bool = True) -> None:
        for name, p in {**self.params, **self.norm}.items():
            if name not in arrays:
                if strict:
                    raise InputError(f"checkpoint lacks parameter {name!r}")
                continue
            value = np.asarray(arrays[name])
            if value.shape != p.shape:
                raise InputError(f"{name}: checkpoint shape {value.shape} != model {p.shape}")
            p.data = value.astype(p.dtype)


@dataclass
class PreparedData:
    layout: CanvasLayout
    train_canvases: np.ndarray  # (N, T, C, S, S)
    train_labels: np.ndarray
    test_canvases: np.ndarray
    test_labels: np.ndarray
    train_boxes: list = field(default_factory=list)
    test_boxes: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.layout)


def prepare(dataset: Dataset, plan: CanvasPlan, dtype="float32") -> PreparedData:
    """Render every canvas of both splits once."""
    train, test = dataset.train, dataset.test
    if len(train) == 0:
        raise InputError("training split is empty")
    layout = plan_layout(train.images.shape[2:], plan)
    return PreparedData(
        layout,
        render(train.images.astype(dtype), layout),
        train.labels,
        render(test.images.astype(dtype), layout) if len(test) else np.zeros((0,)),
        test.labels,
        train.glyph_boxes,
        test.glyph_boxes,
    )


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    loss: float
    accuracy: float
    mean_ldiv: float
    mean_overlap: float
    wall_seconds: float

    def csv(self) -> str:
        return ",".join([str(self.stage), str(self.epoch), repr(self.loss), repr(self.accuracy),
                         repr(self.mean_ldiv), repr(self.mean_overlap), f"{self.wall_seconds:.3f}"])

    @classmethod
    def parse(cls, line: str) -> "EpochRecord":
        f = line.strip().split(",")
        return cls(int(f[0]), int(f[1]), *(float(v) for v in f[2:7]))


LOG_HEADER = "stage,epoch,loss,accuracy,mean_Ldiv,mean_overlap,wall_seconds"


@dataclass
class EvalResult:
    accuracy: float
    probs: np.ndarray  # (N, C) step-averaged
    predictions: np.ndarray
    mean_ldiv: float
    mean_overlap: float
    violation_rate: float
    attention: np.ndarray | None = None  # (N, T, K*K)
    step_probs: np.ndarray | None = None  # (N, T, C)


class Trainer:
    def __init__(self, model: Model, data: PreparedData, cfg: TrainConfig, log_path=None):
        self.model = model
        self.data = data
        self.cfg = cfg
        self.log_path = Path(log_path) if log_path else None
        self.records: list[EpochRecord] = []
        self.progress = (0, 0)  # last completed (stage, epoch)
        self.optimizer: SGD | None = None
        self._optim_stage = None
        self._cache = None  # train features under the current backbone

    # -- bookkeeping ----------------------------------------------------------
    def loss_config(self) -> LossConfig:
        return LossConfig(self.cfg.lam, self.model.cfg.num_classes, self.data.steps, self.cfg.beta)

    def stage_params(self, stage: int) -> dict:
        m = self.model
        if stage == 1:
            return {**m.backbone, **m.stage1}
        if stage == 2:
            return dict(m.head)
        return {**m.backbone, **m.head}

    def _optimizer_for(self, stage: int) -> SGD:
        if self._optim_stage != stage:
            self.optimizer = SGD(self.stage_params(stage), self.cfg.learning_rate, self.cfg.momentum)
            self._optim_stage = stage
        return self.optimizer

    def _log(self, rec: EpochRecord):
        self.records.append(rec)
        logger.info("stage %d epoch %d loss %.4f acc %.4f", rec.stage, rec.epoch, rec.loss, rec.accuracy)
        if self.log_path:
            new = not self.log_path.exists()
            with self.log_path.open("a") as fh:
                if new:
                    fh.write(LOG_HEADER + "\n")
                fh.write(rec.csv() + "\n")

    # -- feature cache ---------------------------------------------------------
    def train_features(self) -> np.ndarray:
        if self._cache is None:
            self._cache = self.compute_features(self.data.train_canvases)
        return self._cache

    def compute_features(self, canvases) -> np.ndarray:
        out = []
        with no_grad():
            for s in range(0, len(canvases), EVAL_CHUNK):
                out.append(self.model.features(canvases[s:s + EVAL_CHUNK]).data)
        return np.concatenate(out) if out else np.zeros((0,))

    # -- training ---------------------------------------------------------------
    def batch_loss(self, stage: int, idx, orders, lcfg: LossConfig) -> Tensor:
        labels = self.data.train_labels[idx]
        rows = idx[:, None]
        if stage == 2:
            feats = Tensor(self.train_features()[rows, orders])
        else:
            feats = self.model.features(self.data.train_canvases[rows, orders])
        if stage == 1:
            return classification_loss(self.model.stage1_outputs(feats), labels)
        outs = self.model.head_outputs(feats)
        maps = [o.attention for o in outs if o.attention is not None]
        return total_loss(outs, maps, labels, lcfg)

    def train_epoch(self, stage: int, epoch: int) -> EpochRecord:
        start = time.perf_counter()
        opt = self._optimizer_for(stage)
        lcfg = self.loss_config()
        if stage != 2:
            self._cache = None
        losses = []
        batches = iterate_minibatches(len(self.data.train_labels), self.cfg.batch_size,
                                      seed=self.cfg.seed, shuffle=True,
                                      blocks=self.data.layout.blocks(), epoch=stage * 10000 + epoch)
        for batch in batches:
            opt.zero_grad()
            loss = self.batch_loss(stage, batch.indices, batch.orders, lcfg)
            loss.backward()
            for p in opt.params.values():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            clip_gradients(opt.params, self.cfg.clip_norm)
            opt.step()
            losses.append(loss.item())
        if stage != 2:
            self._cache = None
        ev = self.evaluate("train", stage=stage, overlap_limit=self.cfg.overlap_sample)
        rec = EpochRecord(stage, epoch, float(np.mean(losses)), ev.accuracy, ev.mean_ldiv,
                          ev.mean_overlap, time.perf_counter() - start)
        self.progress = (stage, epoch)
        return rec

    def run_stage(self, stage: int, epochs: int | None = None, start_epoch: int = 1,
                  checkpoint_path=None) -> list:
        if len(self.data.train_labels) == 0:
            raise InputError("training split is empty")
        epochs = self.cfg.epochs[stage - 1] if epochs is None else epochs
        out = []
        if stage >= 2 and self.progress[0] < 2 and start_epoch <= epochs:
            self.model.fit_norm(self.train_features())
        for epoch in range(start_epoch, epochs + 1):
            rec = self.train_epoch(stage, epoch)
            self._log(rec)
            out.append(rec)
            if checkpoint_path:
                self.save(checkpoint_path)
        return out

    def run_schedule(self, checkpoint_path=None, stages=(1, 2, 3)) -> list:
        """Run remaining epochs of the schedule, resuming after ``progress``."""
        done_stage, done_epoch = self.progress
        out = []
        for stage in stages:
            if stage < done_stage:
                continue
            start = done_epoch + 1 if stage == done_stage else 1
            out += self.run_stage(stage, start_epoch=start, checkpoint_path=checkpoint_path)
        return out

    # -- evaluation -------------------------------------------------------------
    def evaluate(self, split: str = "test", stage: int = 3, overlap_limit: int | None = None) -> EvalResult:
        """Fixed-order evaluation; ``stage=1`` scores the temporary classifier."""
        if split == "train":
            canvases, labels = self.data.train_canvases, self.data.train_labels
        else:
            canvases, labels = self.data.test_canvases, self.data.test_labels
        if len(labels) == 0:
            raise InputError(f"{split} split is empty")
        use_cache = split == "train"
        if use_cache and stage != 1 and self._cache is None and stage == 2:
            self.train_features()
        feats_all = []
        step_probs, maps = [], []
        with no_grad():
            for s in range(0, len(labels), EVAL_CHUNK):
                if use_cache and self._cache is not None:
                    feats = Tensor(self._cache[s:s + EVAL_CHUNK])
                else:
                    feats = self.model.features(canvases[s:s + EVAL_CHUNK])
                    if use_cache:
                        feats_all.append(feats.data)
                outs = self.model.stage1_outputs(feats) if stage == 1 else self.model.head_outputs(feats)
                step_probs.append(np.stack([o.probs.data for o in outs], axis=1))
                if outs[0].attention is not None:
                    maps.append(np.stack([o.attention.data for o in outs], axis=1))
        if feats_all:
            # backbone is unchanged until the next update, so keep its features
            self._cache = np.concatenate(feats_all)
        step_probs = np.concatenate(step_probs)
        probs = step_probs.mean(axis=1)
        preds = np.argmax(probs, axis=-1)
        acc = float(np.mean(preds == labels))
        attention = np.concatenate(maps) if maps else None
        ldiv, overlap, viol = self._attention_stats(attention, stage, overlap_limit)
        return EvalResult(acc, probs, preds, ldiv, overlap, viol, attention, step_probs)

    def _attention_stats(self, attention, stage, limit):
        nan = float("nan")
        if stage == 1 or self.model.pooling not in ("attention", "avg"):
            return nan, nan, nan
        layout = self.data.layout
        steps = len(layout)
        if self.model.pooling == "avg":
            uniform = np.full((steps, self.model.k2), 1.0 / self.model.k2)
            ratios = sequence_overlaps(uniform, layout, self.cfg.mass_threshold)
            ldiv = 1.0 / self.model.k2 if steps > 1 else 0.0
            return ldiv, _mean(ratios), _mean(ratios >= self.cfg.beta)
        a = attention.astype(np.float64)
        if steps > 1:
            ldiv = float(np.mean(np.sum(a[:, 1:] * a[:, :-1], axis=-1).mean(axis=1)))
        else:
            ldiv = 0.0
        sample = a if limit is None else a[:limit]
        ratios = np.concatenate([sequence_overlaps(m, layout, self.cfg.mass_threshold) for m in sample])
        return ldiv, _mean(ratios), _mean(ratios >= self.cfg.beta)

    # -- persistence -------------------------------------------------------------
    def state_arrays(self) -> dict:
        arrays = dict(self.model.state_arrays())
        arrays["meta/stage"] = np.array(float(self.progress[0]))
        arrays["meta/epoch"] = np.array(float(self.progress[1]))
        if self.optimizer is not None:
            arrays["meta/optim_stage"] = np.array(float(self._optim_stage))
            for name, v in self.optimizer.velocity.items():
                arrays[f"optim/{name}"] = v
        return arrays

    def save(self, path) -> None:
        checkpoint.save(path, self.state_arrays())

    def load(self, path) -> None:
        arrays = checkpoint.load(path)
        self.load_arrays(arrays)

    def load_arrays(self, arrays: dict) -> None:
        self.model.load_arrays(arrays)
        self._cache = None
        self.progress = (int(arrays.get("meta/stage", 0)), int(arrays.get("meta/epoch", 0)))
        if "meta/optim_stage" in arrays:
            stage = int(arrays["meta/optim_stage"])
            opt = self._optimizer_for(stage)
            for name in opt.velocity:
                key = f"optim/{name}"
                if key in arrays:
                    opt.velocity[name] = arrays[key].astype(opt.velocity[name].dtype)

    def backbone_checksum(self) -> str:
        return parameters_checksum(self.model.backbone.values())


def _mean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x.mean()) if x.size else float("nan")
