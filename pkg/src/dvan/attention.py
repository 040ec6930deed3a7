"""LSTM-driven soft attention over convolutional feature maps.

Feature maps enter location-major: ``X_t`` has shape ``(..., K*K, D)``, so
the same functions run on a single sequence or on a batch with leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, InputError
from .tensor import Tensor, concat, matmul, uniform_init, zeros

POOLINGS = ("attention", "avg", "max")
NORMALIZATION_TOLERANCE = 1e-4


@dataclass
class StepOutput:
    attention: Tensor | None  # l_t, (..., K*K); None for max pooling
    feature: Tensor  # x_t, (..., D)
    logits: Tensor
    probs: Tensor


def init_head_params(k2: int, feat_dim: int, hidden: int, num_classes: int,
                     rng: np.random.Generator, dtype=np.float64) -> dict:
    """All parameters after the backbone: init MLPs, attention, LSTM, classifier."""
    d, big_d = hidden, feat_dim
    p = {}
    for which in ("c", "h"):
        p[f"init/{which}/w1"] = uniform_init((big_d, d), big_d, rng, dtype)
        p[f"init/{which}/b1"] = uniform_init((d,), big_d, rng, dtype)
        p[f"init/{which}/w2"] = uniform_init((d, d), d, rng, dtype)
        p[f"init/{which}/b2"] = uniform_init((d,), d, rng, dtype)
    p["attention/W_h"] = uniform_init((d, k2), d, rng, dtype)
    p["attention/W_x"] = uniform_init((big_d, k2), big_d, rng, dtype)
    p["attention/bias"] = zeros((k2,), dtype, requires_grad=True)
    p["lstm/M"] = uniform_init((d + big_d, 4 * d), d + big_d, rng, dtype)
    bias = np.zeros(4 * d, dtype=dtype)
    bias[d:2 * d] = 1.0  # forget gate
    p["lstm/bias"] = Tensor(bias, requires_grad=True)
    p["classifier/W"] = uniform_init((d, num_classes), d, rng, dtype)
    p["classifier/b"] = uniform_init((num_classes,), d, rng, dtype)
    return p


def _mlp(m: Tensor, params: dict, which: str) -> Tensor:
    hidden = (m @ params[f"init/{which}/w1"] + params[f"init/{which}/b1"]).tanh()
    return hidden @ params[f"init/{which}/w2"] + params[f"init/{which}/b2"]


def _as_sequence(feature_maps) -> Tensor:
    """Accept a list of ``(K*K, D)`` maps or a ``(..., T, K*K, D)`` tensor."""
    if isinstance(feature_maps, Tensor):
        return feature_maps
    if isinstance(feature_maps, np.ndarray):
        return Tensor(feature_maps)
    if len(feature_maps) == 0:
        raise InputError("feature map sequence is empty")
    from .tensor import stack
    return stack(list(feature_maps), axis=-3)


def init_states(feature_maps, params: dict):
    """``(c_0, h_0)`` from MLPs applied to the mean feature over time and space."""
    x = _as_sequence(feature_maps)
    if x.ndim < 3 or x.shape[-3] == 0:
        raise InputError("init_states needs at least one time step")
    m = x.mean(axis=(-3, -2))
    return _mlp(m, params, "c"), _mlp(m, params, "h")


def attention_scores(h_prev: Tensor, x_t: Tensor, params: dict) -> Tensor:
    w_h, w_x = params["attention/W_h"], params["attention/W_x"]
    if h_prev.shape[-1] != w_h.shape[0] or x_t.shape[-1] != w_x.shape[0] or x_t.shape[-2] != w_x.shape[1]:
        raise DimensionError(
            f"attention: h {h_prev.shape}, X {x_t.shape} vs W_h {w_h.shape}, W_x {w_x.shape}")
    # location i is scored from its own slice X_{t,i} only
    per_location = (x_t * w_x.transpose()).sum(axis=-1)
    return h_prev @ w_h + per_location + params["attention/bias"]


def predict_attention(h_prev: Tensor, x_t: Tensor, params: dict) -> Tensor:
    """Attention distribution ``l_t`` over the ``K*K`` locations."""
    return attention_scores(h_prev, x_t, params).softmax(axis=-1)


def _check_distribution(l_t: Tensor):
    sums = l_t.data.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > NORMALIZATION_TOLERANCE) or np.any(l_t.data < 0):
        raise ContractError("attention map is not normalized")


def attentive_pool(l_t: Tensor, x_t: Tensor) -> Tensor:
    """Attention-weighted sum of location vectors, ``(..., D)``."""
    _check_distribution(l_t)
    lead = l_t.shape[:-1]
    weights = l_t.reshape(*lead, 1, l_t.shape[-1])
    return matmul(weights, x_t).reshape(*lead, x_t.shape[-1])


def lstm_step(x_t: Tensor, c_prev: Tensor, h_prev: Tensor, params: dict):
    """One LSTM update; gate blocks in ``M`` are ordered (i, f, o, g)."""
    m, b = params["lstm/M"], params["lstm/bias"]
    d = c_prev.shape[-1]
    if m.shape[0] != d + x_t.shape[-1] or m.shape[1] != 4 * d:
        raise DimensionError(f"lstm: M is {m.shape}, expected ({d + x_t.shape[-1]}, {4 * d})")
    z = concat([h_prev, x_t], axis=-1) @ m + b
    i = z[..., 0:d].sigmoid()
    f = z[..., d:2 * d].sigmoid()
    o = z[..., 2 * d:3 * d].sigmoid()
    g = z[..., 3 * d:4 * d].tanh()
    c = f * c_prev + i * g
    h = o * c.tanh()
    return c, h


def classify_step(h_t: Tensor, params: dict):
    logits = h_t.tanh() @ params["classifier/W"] + params["classifier/b"]
    return logits, logits.softmax(axis=-1)


def pool_features(x_t: Tensor, h_prev: Tensor, params: dict, pooling: str):
    if pooling == "attention":
        l_t = predict_attention(h_prev, x_t, params)
        return l_t, attentive_pool(l_t, x_t)
    if pooling == "avg":
        return None, x_t.mean(axis=-2)
    if pooling == "max":
        return None, x_t.max(axis=-2)
    raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")


def forward_sequence(feature_maps, params: dict, pooling: str = "attention") -> list:
    """Run the recurrent attention over ``T`` feature maps.

    ``pooling="avg"`` and ``"max"`` replace the attention step with spatial
    average or max pooling and leave the rest of the model unchanged.
    """
    x = _as_sequence(feature_maps)
    steps = x.shape[-3]
    if steps < 1:
        raise InputError("forward_sequence needs T >= 1")
    c, h = init_states(x, params)
    outputs = []
    for t in range(steps):
        x_t = x[..., t, :, :]
        l_t, feat = pool_features(x_t, h, params, pooling)
        c, h = lstm_step(feat, c, h, params)
        logits, probs = classify_step(h, params)
        outputs.append(StepOutput(l_t, feat, logits, probs))
    return outputs


def aggregate_prediction(outputs) -> tuple:
    """Mean class distribution over steps and its argmax (lowest index on ties)."""
    if not outputs:
        raise InputError("no step outputs to aggregate")
    probs = np.mean([np.asarray(o.probs.data if isinstance(o, StepOutput) else getattr(o, "data", o))
                     for o in outputs], axis=0)
    return probs, np.argmax(probs, axis=-1)


# ---------------------------------------------------------------------------
# Attention-less heads
# ---------------------------------------------------------------------------
def init_canvas_head(feat_dim: int, num_classes: int, rng: np.random.Generator,
                     dtype=np.float64) -> dict:
    """Per-canvas classifier of the attention-off baselines.

    Same shape as the stage-1 classifier: the fine-tuned CNN applied to each
    canvas on its own, with no recurrence.
    """
    return {
        "canvas_head/W": uniform_init((feat_dim, num_classes), feat_dim, rng, dtype),
        "canvas_head/b": uniform_init((num_classes,), feat_dim, rng, dtype),
    }


def _max_pool_classifier(feature_maps, w: Tensor, b: Tensor) -> list:
    x = _as_sequence(feature_maps)
    pooled = x.max(axis=-2)
    logits = pooled @ w + b
    probs = logits.softmax(axis=-1)
    return [StepOutput(None, pooled[..., t, :], logits[..., t, :], probs[..., t, :])
            for t in range(x.shape[-3])]


def canvas_head_forward(feature_maps, params: dict) -> list:
    """Independent per-canvas predictions, one :class:`StepOutput` per canvas."""
    return _max_pool_classifier(feature_maps, params["canvas_head/W"], params["canvas_head/b"])


def init_stage1_head(feat_dim: int, num_classes: int, rng, dtype=np.float64) -> dict:
    """Temporary classifier used while pre-training the backbone.

    It scores the spatial max of each canvas's feature map; an average-pool
    head barely moves at desk scale because the class evidence covers well
    under 1% of a canvas.
    """
    return {
        "stage1/W": uniform_init((feat_dim, num_classes), feat_dim, rng, dtype),
        "stage1/b": uniform_init((num_classes,), feat_dim, rng, dtype),
    }


def stage1_forward(feature_maps, params: dict) -> list:
    return _max_pool_classifier(feature_maps, params["stage1/W"], params["stage1/b"])
