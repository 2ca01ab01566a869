"""Reverse-mode gradients for the capsule layers at toy scale.

`record_forward` runs a layer in float64 and keeps every routing iterate;
`backward` walks the unrolled loop in reverse.  Sign planes use a
straight-through estimator: the gradient passes unchanged where the min-max
normalised input ``u`` satisfies ``|2u - 1| <= 1``, and the scale branch gets
the exact derivative of ``mean|x|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binarize import BinarizedTensor, binarize, dequantize, minmax_normalize, ste_mask
from .routing import (
    SQUASH_CAP,
    SQUASH_EPS,
    MarginLoss,
    ProjectorConfig,
    RoutingState,
    _check_layer_inputs,
    _xnor_agreement,
    affine_predict,
    agreement_update,
    class_scores,
    expand,
    squash,
    weighted_sum,
)
from .xnor import binary_affine

VARIANTS = ("capsfc", "xnodr", "xnidr")


class TapeError(RuntimeError):
    """Backward called without a usable recorded forward."""


@dataclass
class Binarized:
    """A binarized operand plus what its STE backward needs."""

    x: np.ndarray
    axis: int
    packed: BinarizedTensor

    @classmethod
    def of(cls, x: np.ndarray, axis: int) -> "Binarized":
        axis = axis % x.ndim
        return cls(x, axis, binarize(x, axis))

    @property
    def approx(self) -> np.ndarray:
        return dequantize(self.packed)

    def vjp(self, g: np.ndarray) -> np.ndarray:
        return dequantize_vjp(self.x, self.packed, g)


def dequantize_vjp(x: np.ndarray, b: BinarizedTensor, g: np.ndarray) -> np.ndarray:
    """Gradient of ``alpha(x) * B(x)`` w.r.t. ``x`` under the straight-through rule."""
    axis = b.reduce_axis
    signs = b.signs.to_signs(np.float64)
    alpha = b.scales.astype(np.float64)
    through_signs = g * alpha * ste_mask(minmax_normalize(x, axis))
    through_alpha = np.sum(g * signs, axis=axis, keepdims=True) * np.sign(x) / x.shape[axis]
    return through_signs + through_alpha


@dataclass
class Tape:
    variant: str
    cfg: ProjectorConfig
    p: np.ndarray
    W: np.ndarray
    I: np.ndarray
    pred: np.ndarray
    I_bin: Binarized | None = None
    W_bin: Binarized | None = None
    pred_bin: Binarized | None = None
    couplings: list = field(default_factory=list)
    sums: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    v_bins: list = field(default_factory=list)
    scores: np.ndarray | None = None

    @property
    def v(self) -> np.ndarray:
        return self.outputs[-1]


@dataclass
class Grads:
    W: np.ndarray
    p: np.ndarray


def record_forward(p, W, cfg: ProjectorConfig, variant: str = "capsfc") -> Tape:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    p, W = _check_layer_inputs(np.asarray(p, np.float64), np.asarray(W, np.float64), cfg)
    I = expand(p, cfg.caps_out)
    tape = Tape(variant, cfg, p, W, I, pred=None)
    if variant == "xnodr":
        tape.I_bin, tape.W_bin = Binarized.of(I, 4), Binarized.of(W, 2)
        tape.pred = binary_affine(tape.I_bin.packed, tape.W_bin.packed)
    else:
        tape.pred = affine_predict(I, W)
    if variant == "xnidr":
        tape.pred_bin = Binarized.of(tape.pred, -1)

    bs, ci, co = tape.pred.shape[:3]
    state = RoutingState.zeros(bs, ci, co, dtype=np.float64)
    for it in range(cfg.iterations):
        s = weighted_sum(tape.pred, state)
        v = squash(s)
        tape.couplings.append(state.coupling)
        tape.sums.append(s)
        tape.outputs.append(v)
        if it < cfg.iterations - 1:
            if variant == "xnidr":
                tape.v_bins.append(Binarized.of(v, -1))
                state = RoutingState(state.logits + _xnor_agreement(tape.pred_bin.packed, v))
            else:
                state = agreement_update(state, tape.pred, v)
    tape.scores = class_scores(tape.outputs[-1])
    return tape


def squash_vjp(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of `squash` (including its epsilon) along the last axis."""
    cap = SQUASH_CAP[np.dtype(np.float64)]
    sq = np.sum(s * s, axis=-1, keepdims=True)
    root = np.sqrt(sq + SQUASH_EPS)
    capped = sq / (1.0 + sq) > cap
    scale = np.where(capped, cap / root, sq / ((1.0 + sq) * root))
    dscale = np.where(
        capped,
        -0.5 * cap / root**3,
        (sq + SQUASH_EPS - 0.5 * sq * (1.0 + sq)) / ((1.0 + sq) ** 2 * root**3),
    )
    return scale * g + 2.0 * dscale * np.sum(s * g, axis=-1, keepdims=True) * s


def norm_vjp(v: np.ndarray, g_scores: np.ndarray) -> np.ndarray:
    """Backward of `class_scores`; the gradient at a zero capsule is taken as zero."""
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    unit = np.divide(v, norm, out=np.zeros_like(v), where=norm > 0)
    return g_scores[:, None, :, None, None] * unit


def softmax_vjp(c: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return c * (g - np.sum(c * g, axis=axis, keepdims=True))


def backward(tape: Tape | None, grad_scores) -> Grads:
    """Gradients of a scalar with ``d/d scores = grad_scores`` w.r.t. W and p."""
    if tape is None or tape.scores is None or len(tape.outputs) != tape.cfg.iterations:
        raise TapeError("backward needs a completed forward recorded by record_forward")
    g_scores = np.asarray(grad_scores, dtype=np.float64)
    if g_scores.shape != tape.scores.shape:
        raise TapeError(f"score gradient {g_scores.shape} does not match scores {tape.scores.shape}")

    T = tape.cfg.iterations
    pred = tape.pred
    # agreement in the xnorized variant uses the dequantized copy of pred
    pred_agree = tape.pred_bin.approx if tape.pred_bin else pred
    d_pred = np.zeros_like(pred)
    d_pred_agree = np.zeros_like(pred)
    d_logits = np.zeros_like(tape.couplings[0])
    d_v = [np.zeros_like(v) for v in tape.outputs]
    d_v[-1] += norm_vjp(tape.outputs[-1], g_scores)

    for t in range(T - 1, -1, -1):
        c = tape.couplings[t]
        d_s = squash_vjp(tape.sums[t], d_v[t])
        d_pred += c * d_s
        d_c = np.sum(d_s * pred, axis=-1, keepdims=True)
        d_logits = d_logits + softmax_vjp(c, d_c, axis=2)
        if t == 0:
            break
        # logits_t = logits_{t-1} + <pred_agree, v_{t-1}~>
        if tape.variant == "xnidr":
            vb = tape.v_bins[t - 1]
            d_pred_agree += d_logits * vb.approx
            d_v[t - 1] += vb.vjp(np.sum(d_logits * pred_agree, axis=1, keepdims=True))
        else:
            d_pred += d_logits * tape.outputs[t - 1]
            d_v[t - 1] += np.sum(d_logits * pred, axis=1, keepdims=True)

    if tape.variant == "xnidr":
        d_pred += tape.pred_bin.vjp(d_pred_agree)

    if tape.variant == "xnodr":
        I_used, W_used = tape.I_bin.approx, tape.W_bin.approx
    else:
        I_used, W_used = tape.I, tape.W
    # pred[p,i,j,0,o] = sum_d I[p,i,j,0,d] W[i,j,d,o]
    d_W = np.einsum("pijd,pijo->ijdo", I_used[:, :, :, 0, :], d_pred[:, :, :, 0, :])
    d_I = np.einsum("pijo,ijdo->pijd", d_pred[:, :, :, 0, :], W_used)[:, :, :, None, :]
    if tape.variant == "xnodr":
        d_W = tape.W_bin.vjp(d_W)
        d_I = tape.I_bin.vjp(d_I)
    d_p = d_I.sum(axis=(2, 3))
    return Grads(W=d_W, p=d_p)


def loss_and_grads(p, W, labels, cfg: ProjectorConfig, variant: str = "capsfc", loss: MarginLoss = MarginLoss()):
    tape = record_forward(p, W, cfg, variant)
    value = loss(tape.scores, labels)
    return value, backward(tape, loss.grad(tape.scores, labels)), tape


def layer_loss(p, W, labels, cfg: ProjectorConfig, variant: str = "capsfc", loss: MarginLoss = MarginLoss()) -> float:
    """Scalar loss of a float64 forward; the finite-difference target."""
    return loss(record_forward(p, W, cfg, variant).scores, labels)
