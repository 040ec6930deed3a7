"""Finite-difference checks for every differentiable op and the full model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from .backbone import BackboneConfig
from .losses import LossConfig, classification_loss, diversity_loss, total_loss
from .tensor import (Tensor, concat, conv2d, grad_check, grad_check_params, matmul,
                     max_pool2d, stack)

# (K, D, d, C, T) of the smallest configuration that exercises every part
TINY = dict(k=2, feat_dim=3, hidden=4, num_classes=2, steps=3)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<24} max_rel_err={self.error:.3e} tol={self.tolerance:.0e}"


def _distinct(rng, shape):
    """Values with well separated entries so max/ReLU kinks stay out of reach."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + 0.5) / n * 2.0 - 1.0
    return vals.reshape(shape) + 0.01 * np.sign(vals.reshape(shape))


def op_checks(rng: np.random.Generator, eps: float) -> list:
    """``(name, error, tolerance)`` for each op, each against a random weighting."""
    def weighted(shape_fn):
        w = {}

        def f(x):
            out = shape_fn(x)
            if out.shape not in w:
                w[out.shape] = Tensor(rng.normal(size=out.shape))
            return (out * w[out.shape]).sum()
        return f

    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4,)))
    m = Tensor(rng.normal(size=(4, 5)))
    mb = Tensor(rng.normal(size=(2, 4, 3)))
    cases = [
        ("add", lambda x: x + b, (3, 4), 1e-6),
        ("sub", lambda x: a - x, (3, 4), 1e-6),
        ("mul_broadcast", lambda x: x * b, (3, 4), 1e-6),
        ("neg_scale", lambda x: (-x) * 2.5, (3, 4), 1e-6),
        ("sigmoid", lambda x: x.sigmoid(), (3, 4), 1e-6),
        ("tanh", lambda x: x.tanh(), (3, 4), 1e-6),
        ("relu", lambda x: x.relu(), "distinct", 1e-6),
        ("log_clamped", lambda x: (x * x + 0.5).log(1e-12), (3, 4), 1e-6),
        ("softmax", lambda x: x.softmax(axis=-1), (3, 4), 1e-6),
        ("matmul", lambda x: x @ m, (3, 4), 1e-6),
        ("matmul_batched", lambda x: matmul(x, mb), (2, 3, 4), 1e-6),
        ("sum_axis", lambda x: x.sum(axis=0), (3, 4), 1e-6),
        ("mean", lambda x: x.mean(axis=(0, 1)), (3, 4), 1e-6),
        ("max_axis", lambda x: x.max(axis=-1), "distinct", 1e-6),
        ("reshape_transpose", lambda x: x.reshape(4, 3).transpose(), (3, 4), 1e-6),
        ("getitem", lambda x: x[1:, ::2], (3, 4), 1e-6),
        ("concat", lambda x: concat([x, a], axis=-1), (3, 4), 1e-6),
        ("stack", lambda x: stack([x, a * x], axis=0), (3, 4), 1e-6),
    ]
    out = []
    for name, fn, shape, tol in cases:
        point = _distinct(rng, (3, 4)) if shape == "distinct" else rng.normal(size=shape)
        out.append(CheckResult(name, grad_check(weighted(fn), point, eps), tol))

    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    out.append(CheckResult("conv2d_input", grad_check(
        weighted(lambda x: conv2d(x, w, stride=1, pad=1)), rng.normal(size=(2, 2, 5, 5)), eps), 1e-6))
    x_img = Tensor(rng.normal(size=(2, 2, 5, 5)))
    out.append(CheckResult("conv2d_kernel", grad_check(
        weighted(lambda k: conv2d(x_img, k, stride=2, pad=1)), rng.normal(size=(3, 2, 3, 3)), eps), 1e-6))
    out.append(CheckResult("max_pool2d", grad_check(
        weighted(lambda x: max_pool2d(x, 2)), _distinct(rng, (2, 2, 4, 4)), eps), 1e-6))

    k2, d_feat, hid = 4, 3, 4
    x_map = Tensor(rng.normal(size=(k2, d_feat)))
    l_fixed = Tensor(rng.dirichlet(np.ones(k2)))
    out.append(CheckResult("attentive_pool_map", grad_check(
        weighted(lambda x: att.attentive_pool(l_fixed, x)), x_map.data, eps), 1e-6))
    out.append(CheckResult("attentive_pool_weights", grad_check(
        weighted(lambda z: att.attentive_pool(z.softmax(axis=-1), x_map)), rng.normal(size=k2), eps), 1e-6))

    params = att.init_head_params(k2, d_feat, hid, 2, rng)
    c0, h0 = Tensor(rng.normal(size=hid)), Tensor(rng.normal(size=hid))
    out.append(CheckResult("predict_attention", grad_check(
        weighted(lambda h: att.predict_attention(h, x_map, params)), h0.data, eps), 1e-6))
    out.append(CheckResult("lstm_step", grad_check(
        weighted(lambda x: concat(list(att.lstm_step(x, c0, h0, params)), axis=-1)),
        rng.normal(size=d_feat), eps), 1e-5))
    lstm_params = {k: v for k, v in params.items() if k.startswith("lstm/")}
    lstm_out = weighted(lambda _: concat(list(att.lstm_step(x_map[0], c0, h0, params)), axis=-1))
    errs = grad_check_params(lambda: lstm_out(None), lstm_params, eps)
    out.append(CheckResult("lstm_step_params", max(errs.values()), 1e-5))
    out.append(CheckResult("classify_step", grad_check(
        weighted(lambda h: att.classify_step(h, params)[1]), h0.data, eps), 1e-6))

    probs = [Tensor(rng.dirichlet(np.ones(3))) for _ in range(3)]
    out.append(CheckResult("classification_loss", grad_check(
        lambda z: classification_loss([z.softmax(axis=-1)] + probs[1:], 1), rng.normal(size=3), eps), 1e-6))
    maps = [Tensor(rng.dirichlet(np.ones(k2))) for _ in range(3)]
    out.append(CheckResult("diversity_loss", grad_check(
        lambda z: diversity_loss([maps[0], z.softmax(axis=-1), maps[2]]), rng.normal(size=k2), eps), 1e-6))
    return out


def tiny_model_check(rng: np.random.Generator, eps: float, tolerance: float, lam: float = 1.0):
    """Whole-model check: backbone, attention, LSTM, classifier and both losses."""
    from .training import Model, ModelConfig

    k, d_feat, hid, c, t = (TINY[n] for n in ("k", "feat_dim", "hidden", "num_classes", "steps"))
    canvas = 4 * k  # two conv+pool blocks halve the side twice
    cfg = ModelConfig("dvan", BackboneConfig.from_channels(canvas, (2, d_feat)), hid, c, "float64")
    model = Model(cfg, seed=int(rng.integers(1 << 31)))
    pixels = rng.uniform(0, 1, size=(1, t, 3, canvas, canvas))
    label = np.array([1])
    lcfg = LossConfig(lam, c, t)

    def loss_fn():
        outs = model.head_outputs(model.features(pixels))
        return total_loss(outs, [o.attention for o in outs], label, lcfg)

    params = {**model.backbone, **model.head}
    errs = grad_check_params(loss_fn, params, eps)
    worst = max(errs, key=errs.get)
    return CheckResult(f"tiny_model[{worst}]", errs[worst], tolerance), errs


def run_gradcheck(eps: float = 1e-5, tolerance: float = 1e-4, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    results = op_checks(rng, eps)
    tiny, _ = tiny_model_check(rng, eps, tolerance)
    results.append(tiny)
    return results
