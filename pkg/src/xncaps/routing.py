"""Capsule fully connected layers with dynamic routing.

Tensor layouts (bs = batch size)::

    primary       [bs, caps_in, dim_in]
    expanded      [bs, caps_in, caps_out, 1, dim_in]
    weights       [caps_in, caps_out, dim_in, dim_out]
    predictions   [bs, caps_in, caps_out, 1, dim_out]
    logits/coupling [bs, caps_in, caps_out, 1, 1]
    activated     [bs, 1, caps_out, 1, dim_out]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binarize import BinarizedTensor, binarize, pack_bits
from .tensor import ShapeError, _out_dtype, as_tensor, matmul_last2, softmax_axis
from .xnor import binary_affine, xnor_dot_words

SQUASH_EPS = 1e-9
# largest squash factor, chosen so the norm stays < 1 after rounding to the output dtype
SQUASH_CAP = {np.dtype(np.float32): 1.0 - 2.0**-20, np.dtype(np.float64): 1.0 - 2.0**-40}


@dataclass(frozen=True)
class ProjectorConfig:
    caps_in: int
    caps_out: int
    dim_in: int
    dim_out: int
    iterations: int = 3

    def __post_init__(self):
        for name in ("caps_in", "caps_out", "dim_in", "dim_out", "iterations"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.caps_in, self.caps_out, self.dim_in, self.dim_out)


@dataclass(frozen=True)
class RoutingState:
    logits: np.ndarray
    coupling: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.coupling is None:
            object.__setattr__(self, "coupling", softmax_axis(self.logits, axis=2))

    @classmethod
    def zeros(cls, bs: int, caps_in: int, caps_out: int, dtype=np.float32) -> "RoutingState":
        return cls(np.zeros((bs, caps_in, caps_out, 1, 1), dtype=dtype))


def expand(p, caps_out: int) -> np.ndarray:
    """Tile primary capsules across a new caps_out axis."""
    p = as_tensor(p)
    if p.ndim != 3:
        raise ShapeError(f"primary capsules must be [bs, caps_in, dim_in], got {p.shape}")
    bs, ci, di = p.shape
    return np.ascontiguousarray(np.broadcast_to(p[:, :, None, None, :], (bs, ci, caps_out, 1, di)))


def affine_predict(I, W) -> np.ndarray:
    I, W = as_tensor(I), as_tensor(W)
    if I.ndim != 5 or W.ndim != 4 or I.shape[1:3] != W.shape[:2] or I.shape[-1] != W.shape[2]:
        raise ShapeError(f"expanded capsules {I.shape} do not match weights {W.shape}")
    return matmul_last2(I, W)


def squash(s) -> np.ndarray:
    """``|s|^2 / (1 + |s|^2) * s / |s|`` along the last axis; zero maps to zero."""
    s = as_tensor(s)
    s64 = s.astype(np.float64)
    sq = np.sum(s64 * s64, axis=-1, keepdims=True)
    factor = np.minimum(sq / (1.0 + sq), SQUASH_CAP[s.dtype])
    return (factor * s64 / np.sqrt(sq + SQUASH_EPS)).astype(s.dtype)


def coupling(state: RoutingState) -> RoutingState:
    return RoutingState(state.logits, softmax_axis(state.logits, axis=2))


def weighted_sum(pred, state: RoutingState) -> np.ndarray:
    pred = as_tensor(pred)
    c = state.coupling
    if c.shape != pred.shape[:4] + (1,):
        raise ShapeError(f"coupling {c.shape} does not match predictions {pred.shape}")
    out = np.sum(c.astype(np.float64) * pred.astype(np.float64), axis=1, keepdims=True)
    return out.astype(_out_dtype(pred, c))


def _xnor_agreement(pred_bin: BinarizedTensor, v) -> np.ndarray:
    v_bin = binarize(v, -1)
    n = pred_bin.shape[-1]
    dots = xnor_dot_words(pack_bits(pred_bin.signs.positive()), pack_bits(v_bin.signs.positive()), n)
    return dots[..., None] * pred_bin.scales.astype(np.float64) * v_bin.scales.astype(np.float64)


def agreement_update(
    state: RoutingState,
    pred,
    v,
    xnorized: bool = False,
    pred_bin: BinarizedTensor | None = None,
) -> RoutingState:
    """``b += <pred, v>`` over dim_out, exactly or via XNOR on binarized operands."""
    pred, v = as_tensor(pred), as_tensor(v)
    if xnorized:
        if pred_bin is None:
            raise ValueError("xnorized agreement needs the binarized predictions")
        delta = _xnor_agreement(pred_bin, v)
    else:
        delta = np.sum(pred.astype(np.float64) * v.astype(np.float64), axis=-1, keepdims=True)
    logits = state.logits
    return RoutingState((logits.astype(np.float64) + delta).astype(logits.dtype))


def dynamic_routing(
    pred,
    cfg: ProjectorConfig,
    xnorized_agreement: bool = False,
    reset_logits_each_iteration: bool = False,
) -> np.ndarray:
    """Route predictions to output capsules.

    ``reset_logits_each_iteration`` reproduces the literal printed XnIDR loop
    (logits zeroed at the top of every iteration); it is off by default
    because it makes every iteration identical.
    """
    pred = as_tensor(pred)
    bs, ci, co = pred.shape[:3]
    state = RoutingState.zeros(bs, ci, co, dtype=pred.dtype)
    pred_bin = binarize(pred, -1) if xnorized_agreement else None
    for it in range(cfg.iterations):
        if reset_logits_each_iteration:
            state = RoutingState.zeros(bs, ci, co, dtype=pred.dtype)
        v = squash(weighted_sum(pred, state))
        # the last update would only feed an iteration that never runs
        if it < cfg.iterations - 1:
            state = agreement_update(state, pred, v, xnorized_agreement, pred_bin)
    return v


def _check_layer_inputs(p, W, cfg: ProjectorConfig):
    p, W = as_tensor(p), as_tensor(W)
    if p.ndim != 3 or p.shape[1:] != (cfg.caps_in, cfg.dim_in):
        raise ShapeError(f"primary capsules {p.shape} do not match config (caps_in={cfg.caps_in}, dim_in={cfg.dim_in})")
    if W.shape != cfg.weight_shape:
        raise ShapeError(f"weights {W.shape} do not match config {cfg.weight_shape}")
    return p, W


def capsfc_forward(p, W, cfg: ProjectorConfig) -> np.ndarray:
    """Full-precision capsule layer: affine prediction then routing."""
    p, W = _check_layer_inputs(p, W, cfg)
    return dynamic_routing(affine_predict(expand(p, cfg.caps_out), W), cfg)


def xnodr_forward(p, W, cfg: ProjectorConfig) -> np.ndarray:
    """Binarized affine prediction, full-precision routing."""
    p, W = _check_layer_inputs(p, W, cfg)
    I_bin = binarize(expand(p, cfg.caps_out), 4)
    W_bin = binarize(W, 2)
    return dynamic_routing(binary_affine(I_bin, W_bin), cfg, xnorized_agreement=False)


def xnidr_forward(p, W, cfg: ProjectorConfig, reset_logits_each_iteration: bool = False) -> np.ndarray:
    """Full-precision affine prediction, XNOR agreement inside routing."""
    p, W = _check_layer_inputs(p, W, cfg)
    pred = affine_predict(expand(p, cfg.caps_out), W)
    return dynamic_routing(pred, cfg, True, reset_logits_each_iteration)


LAYERS = {"capsfc": capsfc_forward, "xnodr": xnodr_forward, "xnidr": xnidr_forward}


def class_scores(v) -> np.ndarray:
    """Capsule lengths, ``[bs, caps_out]``."""
    v = as_tensor(v)
    v64 = v.astype(np.float64)
    return np.sqrt(np.sum(v64 * v64, axis=-1))[:, 0, :, 0].astype(v.dtype)


@dataclass(frozen=True)
class MarginLoss:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5

    def __call__(self, scores, labels) -> float:
        return margin_loss(scores, labels, self.m_plus, self.m_minus, self.lambda_down)

    def grad(self, scores, labels) -> np.ndarray:
        scores = np.asarray(scores, dtype=np.float64)
        t = np.asarray(labels, dtype=np.float64)
        hot = -2.0 * t * np.maximum(0.0, self.m_plus - scores)
        cold = 2.0 * self.lambda_down * (1.0 - t) * np.maximum(0.0, scores - self.m_minus)
        return (hot + cold) / scores.shape[0]


def margin_loss(scores, labels, m_plus: float = 0.9, m_minus: float = 0.1, lambda_down: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    if scores.shape != t.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} and labels {t.shape} must both be [bs, caps_out]")
    per_class = t * np.maximum(0.0, m_plus - scores) ** 2 + lambda_down * (1.0 - t) * np.maximum(
        0.0, scores - m_minus
    ) ** 2
    return float(per_class.sum(axis=1).mean())
