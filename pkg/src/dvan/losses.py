"""Classification and diversity losses, and the SGD optimizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError
from .tensor import Tensor

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    num_classes: int = 2
    steps: int = 1
    beta: float = 0.5

    def __post_init__(self):
        if self.lam < 0:
            raise InputError("lambda must be non-negative")
        if self.num_classes < 2:
            raise InputError("need at least two classes")
        if self.steps < 1:
            raise InputError("need at least one time step")


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    epochs_per_stage: tuple = (50, 50, 50)
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InputError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")


def _probs(step):
    return step.probs if hasattr(step, "probs") else step


def _one_hot(labels, num_classes, dtype):
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise InputError(f"label outside [0, {num_classes})")
    return Tensor(np.eye(num_classes, dtype=dtype)[labels])


def classification_loss(outputs, label) -> Tensor:
    """``-sum_t log p_t[label]``, averaged over the batch when batched.

    The same label is used at every time step; probabilities are floored at
    1e-12 before the log.
    """
    if not outputs:
        raise InputError("no step outputs")
    probs = [_probs(o) for o in outputs]
    c = probs[0].shape[-1]
    target = _one_hot(label, c, probs[0].dtype)
    total = None
    for p in probs:
        term = (p.log(LOG_FLOOR) * target).sum(axis=-1)
        total = term if total is None else total + term
    return -total.mean() if total.ndim else -total


def _check_maps(maps):
    for m in maps:
        sums = m.data.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-4) or np.any(m.data < 0):
            raise ContractError("diversity loss needs normalized attention maps")


def diversity_loss(att_maps) -> Tensor:
    """Mean inner product of temporally adjacent maps; 0 for a single map."""
    maps = [m if isinstance(m, Tensor) else Tensor(m) for m in att_maps]
    if not maps:
        raise InputError("no attention maps")
    _check_maps(maps)
    if len(maps) == 1:
        return Tensor(np.zeros((), dtype=maps[0].dtype))
    total = None
    for prev, cur in zip(maps[:-1], maps[1:]):
        term = (prev * cur).sum(axis=-1)
        total = term if total is None else total + term
    total = total * (1.0 / (len(maps) - 1))
    return total.mean() if total.ndim else total


def total_loss(outputs, att_maps, label, cfg: LossConfig) -> Tensor:
    """Classification loss plus ``lam`` times the diversity loss.

    The support-overlap bound is not part of the objective; it is measured
    separately by :func:`dvan.canvas.validate_sequence`.
    """
    loss = classification_loss(outputs, label)
    if cfg.lam == 0 or not att_maps:
        return loss
    return loss + diversity_loss(att_maps) * cfg.lam


class SGD:
    """Plain/momentum SGD: ``v = mu*v + g``, ``p -= lr*v``."""

    def __init__(self, params: dict, learning_rate: float, momentum: float = 0.0):
        if learning_rate <= 0:
            raise InputError("learning rate must be positive")
        self.params = params
        self.lr = learning_rate
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            v = self.velocity[name]
            if self.momentum:
                v *= self.momentum
                v += p.grad
            else:
                v[...] = p.grad
            p.data -= (self.lr * v).astype(p.dtype, copy=False)


def clip_gradients(params: dict, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. ``max_norm <= 0`` leaves gradients alone.
    """
    norm = float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                             for p in params.values() if p.grad is not None)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def sgd_step(params: dict, grads: dict, cfg: SgdConfig, velocity: dict | None = None) -> dict:
    """Functional form: returns updated arrays and keeps ``velocity`` current."""
    velocity = {} if velocity is None else velocity
    out = {}
    for name, value in params.items():
        if name not in grads or grads[name] is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        v = velocity.get(name)
        v = np.zeros_like(np.asarray(value, dtype=np.float64)) if v is None else v
        v = cfg.momentum * v + np.asarray(grads[name])
        velocity[name] = v
        out[name] = np.asarray(value) - cfg.learning_rate * v
    return out
