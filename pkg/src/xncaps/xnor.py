"""XNOR/popcount kernels over packed sign planes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .binarize import WORD_BITS, BinarizedTensor, elementwise_sign, pack_bits
from .tensor import ShapeError, as_tensor

_ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class PackedVector:
    words: np.ndarray
    bit_len: int

    def __post_init__(self):
        words = np.asarray(self.words, dtype=np.uint64)
        if words.ndim != 1 or len(words) != -(-self.bit_len // WORD_BITS):
            raise ValueError(f"{len(words)} words cannot hold exactly {self.bit_len} bits")
        object.__setattr__(self, "words", words)

    @classmethod
    def from_signs(cls, signs) -> "PackedVector":
        signs = np.asarray(signs).reshape(-1)
        return cls(pack_bits(signs > 0), len(signs))

    def complement(self) -> "PackedVector":
        return PackedVector(~self.words & word_mask(self.bit_len), self.bit_len)


def word_mask(n: int) -> np.ndarray:
    """Per-word masks selecting the ``n`` logical bits of a packed vector."""
    n_words = -(-n // WORD_BITS)
    mask = np.full(n_words, _ALL_ONES, dtype=np.uint64)
    tail = n % WORD_BITS
    if tail:
        mask[-1] = np.uint64((1 << tail) - 1)
    return mask


def xnor_dot_words(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    """+-1 dot products of packed vectors along the last (word) axis.

    Broadcasts like numpy. Bits past ``n`` are masked off, so padding content
    never matters. Returns int64.
    """
    agree = ~(a ^ b) & word_mask(n)
    matches = np.bitwise_count(agree).sum(axis=-1, dtype=np.int64)
    return 2 * matches - n


def xnor_popcount_dot(a: PackedVector, b: PackedVector) -> int:
    if a.bit_len != b.bit_len:
        raise ShapeError(f"bit lengths differ: {a.bit_len} vs {b.bit_len}")
    return int(xnor_dot_words(a.words, b.words, a.bit_len))


def binary_affine(I_bin: BinarizedTensor, W_bin: BinarizedTensor) -> np.ndarray:
    """Capsule affine transform on binarized operands.

    ``I_bin`` is ``[bs, caps_in, caps_out, 1, dim_in]`` scaled over dim_in and
    ``W_bin`` is ``[caps_in, caps_out, dim_in, dim_out]`` scaled over dim_in.
    Returns ``[bs, caps_in, caps_out, 1, dim_out]``.
    """
    i_shape, w_shape = I_bin.shape, W_bin.shape
    if len(i_shape) != 5 or i_shape[3] != 1 or len(w_shape) != 4:
        raise ShapeError(f"expected I [bs,ci,co,1,di] and W [ci,co,di,do], got {i_shape} and {w_shape}")
    bs, ci, co, _, di = i_shape
    if w_shape[:3] != (ci, co, di):
        raise ShapeError(f"I {i_shape} and W {w_shape} disagree on caps_in/caps_out/dim_in")
    if I_bin.reduce_axis != 4 or W_bin.reduce_axis != 2:
        raise ShapeError(
            f"scale axes must be dim_in (I axis 4, W axis 2), got {I_bin.reduce_axis} and {W_bin.reduce_axis}"
        )
    do = w_shape[3]
    i_words = pack_bits(I_bin.signs.positive()[:, :, :, 0, :])  # [bs,ci,co,nw]
    w_words = pack_bits(W_bin.signs.positive().transpose(0, 1, 3, 2))  # [ci,co,do,nw]
    dots = xnor_dot_words(i_words[:, :, :, None, :], w_words[None], di)  # [bs,ci,co,do]
    alpha_i = I_bin.scales.astype(np.float64)[:, :, :, 0, 0, None]
    alpha_w = W_bin.scales.astype(np.float64)[None, :, :, 0, :]
    out = dots * alpha_i * alpha_w
    return out.reshape(bs, ci, co, 1, do).astype(I_bin.scales.dtype)


def conv_scale_map(I, w: int, h: int) -> np.ndarray:
    """Per-window scale factors for a valid, stride-1 convolution of ``I`` ``[c, w_in, h_in]``."""
    I = as_tensor(I)
    if I.ndim != 3:
        raise ShapeError(f"expected [c, w_in, h_in], got {I.shape}")
    if not (1 <= w <= I.shape[1] and 1 <= h <= I.shape[2]):
        raise ShapeError(f"window {w}x{h} does not fit input {I.shape}")
    m = np.abs(I.astype(np.float64)).mean(axis=0)
    windows = sliding_window_view(m, (w, h))
    return windows.mean(axis=(-2, -1)).astype(I.dtype)


def xnor_conv2d(I, W) -> np.ndarray:
    """Approximate ``I * W`` (valid, stride 1) as ``(B_I xnor-conv B_W) * A_I * alpha_W``."""
    I, W = as_tensor(I), as_tensor(W)
    if I.ndim != 3 or W.ndim != 3 or I.shape[0] != W.shape[0]:
        raise ShapeError(f"expected I [c,w_in,h_in] and W [c,w,h], got {I.shape} and {W.shape}")
    c, w, h = W.shape
    scale_map = conv_scale_map(I, w, h).astype(np.float64)
    alpha_w = np.abs(W.astype(np.float64)).mean()

    pos = elementwise_sign(I).positive()
    windows = sliding_window_view(pos, (w, h), axis=(1, 2))  # [c, ow, oh, w, h]
    ow, oh = windows.shape[1:3]
    windows = windows.transpose(1, 2, 0, 3, 4).reshape(ow, oh, c * w * h)
    w_words = pack_bits(elementwise_sign(W).positive().reshape(-1))
    dots = xnor_dot_words(pack_bits(windows), w_words, c * w * h)
    return (dots * scale_map * alpha_w).astype(I.dtype)
