"""Sign-plane / scale-factor binarization.

A tensor ``x`` is approximated as ``alpha * B`` where ``B`` is a +-1 sign plane
and ``alpha`` the mean magnitude of ``x`` along a reduction axis.  Signs come
from min-max normalising each slice along that axis to [0, 1] and keeping +1
only for values strictly above 0.5; a constant slice normalises to 0 and maps
to all -1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import _check_axis, as_tensor, mean_abs_axis

WORD_BITS = 64


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into little-endian uint64 words.

    Bit ``k`` of word ``k // 64`` holds element ``k``; padding bits are zero.
    """
    bits = np.asarray(bits, dtype=bool)
    n = bits.shape[-1]
    n_words = -(-n // WORD_BITS)
    pad = n_words * WORD_BITS - n
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), bool)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").reshape(bits.shape[:-1] + (n_words,))


def unpack_bits(words: np.ndarray, n: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    as_bytes = words.view(np.uint8).reshape(words.shape[:-1] + (words.shape[-1] * 8,))
    return np.unpackbits(as_bytes, axis=-1, count=n, bitorder="little").astype(bool)


@dataclass(frozen=True)
class SignPlane:
    """+-1 plane stored one bit per element (1 means +1) in row-major order."""

    shape: tuple[int, ...]
    words: np.ndarray

    @classmethod
    def from_signs(cls, signs: np.ndarray) -> "SignPlane":
        signs = np.asarray(signs)
        return cls(tuple(signs.shape), pack_bits((signs > 0).reshape(-1)))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.uint64))

    def positive(self) -> np.ndarray:
        """Boolean mask of +1 entries, shaped like the plane."""
        return unpack_bits(self.words, self.size).reshape(self.shape)

    def to_signs(self, dtype=np.int8) -> np.ndarray:
        return np.where(self.positive(), 1, -1).astype(dtype)


@dataclass(frozen=True)
class BinarizedTensor:
    signs: SignPlane
    scales: np.ndarray
    reduce_axis: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.signs.shape


def minmax_normalize(x, group_axis: int) -> np.ndarray:
    """Min-max normalise each slice along ``group_axis``; constant slices give 0."""
    x = as_tensor(x).astype(np.float64)
    lo = x.min(axis=group_axis, keepdims=True)
    span = x.max(axis=group_axis, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, 0.0)


def minmax_sign(x, group_axis: int) -> SignPlane:
    x = as_tensor(x)
    group_axis = _check_axis(x, group_axis)
    # round(norm) -> hard sigmoid -> clip -> round -> 2y-1 collapses to norm > 0.5
    return SignPlane(tuple(x.shape), pack_bits((minmax_normalize(x, group_axis) > 0.5).reshape(-1)))


def scale_factor(x, reduce_axis: int) -> np.ndarray:
    return mean_abs_axis(x, reduce_axis)


def binarize(x, reduce_axis: int) -> BinarizedTensor:
    x = as_tensor(x)
    reduce_axis = _check_axis(x, reduce_axis)
    return BinarizedTensor(minmax_sign(x, reduce_axis), scale_factor(x, reduce_axis), reduce_axis)


def dequantize(b: BinarizedTensor) -> np.ndarray:
    """Reconstruct ``alpha * B`` with alpha broadcast along the reduction axis."""
    return (b.signs.to_signs(b.scales.dtype) * b.scales).astype(b.scales.dtype)


def elementwise_sign(x) -> SignPlane:
    """Plain sign rule: +1 for strictly positive entries, -1 otherwise."""
    x = as_tensor(x)
    return SignPlane(tuple(x.shape), pack_bits((x > 0).reshape(-1)))


def ste_mask(normalized) -> np.ndarray:
    """Straight-through pass region for the sign: ``|2u - 1| <= 1``."""
    u = np.asarray(normalized, dtype=np.float64)
    return np.abs(2.0 * u - 1.0) <= 1.0
