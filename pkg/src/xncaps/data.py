"""Dataset ingestion, MultiMNIST composition and weight/config serialization."""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .routing import MarginLoss, ProjectorConfig

# ---------------------------------------------------------------------------
# IDX

IDX_DTYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in IDX_DTYPES.items()}


class IdxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxDimensionError(IdxError):
    pass


def decode_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError(f"header needs 4 bytes, file has {len(raw)}", len(raw))
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_DTYPES:
        raise IdxMagicError(f"bad magic {raw[:4].hex()}", 0)
    dtype, ndim = IDX_DTYPES[raw[2]], raw[3]
    if ndim == 0:
        raise IdxMagicError("magic declares zero dimensions", 3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"dimension table needs {header} bytes, file has {len(raw)}", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for k, d in enumerate(dims):
        count *= d
        if d == 0 or count * dtype.itemsize >= 2**63:
            raise IdxDimensionError(f"dimension {k} = {d} gives an unrepresentable element count", 4 + 4 * k)
    need = header + count * dtype.itemsize
    if len(raw) < need:
        raise IdxTruncatedError(f"payload needs {need - header} bytes, found {len(raw) - header}", len(raw))
    if len(raw) > need:
        raise IdxDimensionError(f"{len(raw) - need} trailing bytes after payload", need)
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(IDX_DTYPES[code], copy=False).tobytes()


def read_idx(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_idx(f.read())


def write_idx(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_idx(arr))


@dataclass
class LabeledImages:
    """Images in [0, 1] shaped ``[n, h, w, channels]`` with one or two labels each."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        self.labels = labels[:, None] if labels.ndim == 1 else labels
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self), self.num_classes))
        np.put_along_axis(out, self.labels, 1.0, axis=1)
        return out


def idx_load(images_path, labels_path=None, num_classes: int = 10) -> LabeledImages:
    raw = read_idx(images_path)
    if raw.dtype != np.uint8 or raw.ndim not in (3, 4):
        raise IdxMagicError(f"expected unsigned-byte images of rank 3 or 4, got {raw.dtype} rank {raw.ndim}", 2)
    images = (raw.astype(np.float32) / 255.0).reshape(raw.shape if raw.ndim == 4 else raw.shape + (1,))
    if labels_path is None:
        labels = np.zeros((len(images), 0), dtype=np.int64)
    else:
        labels = read_idx(labels_path).astype(np.int64)
    return LabeledImages(images, labels, num_classes)


def to_idx_bytes_images(data: LabeledImages) -> np.ndarray:
    """Images back to the ``[n, h, w]`` unsigned-byte IDX layout."""
    pixels = np.rint(data.images * 255.0).astype(np.uint8)
    return pixels[..., 0] if pixels.shape[-1] == 1 else pixels


# ---------------------------------------------------------------------------
# MultiMNIST


@dataclass(frozen=True)
class MultiMnistPlan:
    """Which digits are overlaid and where, one row per output image."""

    first: np.ndarray
    second: np.ndarray
    shifts: np.ndarray  # [n, 4]: dy1, dx1, dy2, dx2
    canvas: int
    shift_max: int


def _canvas_size(h: int, w: int, shift_max: int, canvas: int | None) -> int:
    if shift_max < 0:
        raise ValueError("shift_max must be non-negative")
    size = max(h, w) + 2 * shift_max if canvas is None else canvas
    if size < h + 2 * shift_max or size < w + 2 * shift_max:
        raise ValueError(f"a shift of {shift_max} px would push a {h}x{w} digit off a {size}x{size} canvas")
    return size


def plan_multimnist(
    labels, per_digit: int, shift_max: int = 4, seed: int = 0, digit_shape=(28, 28), canvas: int | None = None
) -> MultiMnistPlan:
    """Choose partners and shifts for every base digit.

    Each digit gets its own generator seeded by ``(seed, index)`` so any
    sharding of the index range gives the same plan.
    """
    if per_digit < 1:
        raise ValueError("per_digit must be >= 1")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    size = _canvas_size(*digit_shape, shift_max, canvas)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("overlaying needs digits of at least two distinct labels")
    members = {int(k): np.flatnonzero(labels == k) for k in classes}

    n = len(labels) * per_digit
    first = np.repeat(np.arange(len(labels)), per_digit)
    second = np.empty(n, dtype=np.int64)
    shifts = np.empty((n, 4), dtype=np.int64)
    for i, lab in enumerate(labels):
        rng = np.random.default_rng([seed, i])
        others = classes[classes != lab]
        picked = others[rng.integers(0, len(others), per_digit)]
        u = rng.random(per_digit)
        rows = slice(i * per_digit, (i + 1) * per_digit)
        second[rows] = [members[int(k)][int(x * len(members[int(k)]))] for k, x in zip(picked, u)]
        shifts[rows] = rng.integers(-shift_max, shift_max + 1, (per_digit, 4))
    return MultiMnistPlan(first, second, shifts, size, shift_max)


def overlay(a: np.ndarray, b: np.ndarray, shift_a, shift_b, canvas: int, label_a=None, label_b=None) -> np.ndarray:
    """Place two ``[h, w]`` digits on a square canvas and merge by per-pixel max."""
    if label_a is not None and label_a == label_b:
        raise ValueError(f"overlaid digits must have distinct labels, both are {label_a}")
    out = np.zeros((canvas, canvas), dtype=np.float32)
    for img, (dy, dx) in ((a, shift_a), (b, shift_b)):
        h, w = img.shape
        y0, x0 = (canvas - h) // 2 + dy, (canvas - w) // 2 + dx
        if y0 < 0 or x0 < 0 or y0 + h > canvas or x0 + w > canvas:
            raise ValueError(f"shift ({dy}, {dx}) pushes the digit off the {canvas}x{canvas} canvas")
        np.maximum(out[y0 : y0 + h, x0 : x0 + w], img, out=out[y0 : y0 + h, x0 : x0 + w])
    return out


def multimnist_batches(
    base: LabeledImages,
    per_digit: int,
    shift_max: int = 4,
    seed: int = 0,
    batch_size: int = 10_000,
    canvas: int | None = None,
) -> Iterator[LabeledImages]:
    """Yield the composed dataset in chunks of ``batch_size`` images."""
    if base.images.shape[-1] != 1 or base.labels.shape[1] != 1:
        raise ValueError("base must be single-channel, single-label digits")
    digits = base.images[..., 0]
    labels = base.labels[:, 0]
    plan = plan_multimnist(labels, per_digit, shift_max, seed, digits.shape[1:], canvas)
    for start in range(0, len(plan.first), batch_size):
        stop = min(start + batch_size, len(plan.first))
        out = np.empty((stop - start, plan.canvas, plan.canvas, 1), dtype=np.float32)
        for k in range(start, stop):
            i, j = plan.first[k], plan.second[k]
            dy1, dx1, dy2, dx2 = plan.shifts[k]
            out[k - start, :, :, 0] = overlay(
                digits[i], digits[j], (dy1, dx1), (dy2, dx2), plan.canvas, labels[i], labels[j]
            )
        pair = np.stack([labels[plan.first[start:stop]], labels[plan.second[start:stop]]], axis=1)
        yield LabeledImages(out, pair, base.num_classes)


def multimnist_compose(
    base: LabeledImages, per_digit: int, shift_max: int = 4, seed: int = 0, canvas: int | None = None
) -> LabeledImages:
    chunks = list(multimnist_batches(base, per_digit, shift_max, seed, canvas=canvas))
    return LabeledImages(
        np.concatenate([c.images for c in chunks]), np.concatenate([c.labels for c in chunks]), base.num_classes
    )


# ---------------------------------------------------------------------------
# weight archive
#
# "XNCW" | u32 version | u32 count | per tensor:
#   u32 name_len | name | u32 rank | u64 dims[rank] | f32 payload | u32 crc32
# All integers little-endian; the CRC covers the record from name_len to payload.

ARCHIVE_MAGIC = b"XNCW"
ARCHIVE_VERSION = 1


class ArchiveError(ValueError):
    pass


class ArchiveVersionError(ArchiveError):
    pass


class ArchiveChecksumError(ArchiveError):
    pass


class DuplicateTensorError(ArchiveError):
    pass


class MissingTensorError(ArchiveError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


@dataclass
class WeightArchive:
    tensors: list[tuple[str, np.ndarray]] = field(default_factory=list)
    version: int = ARCHIVE_VERSION

    def __post_init__(self):
        if isinstance(self.tensors, dict):
            self.tensors = list(self.tensors.items())
        seen = set()
        for name, _ in self.tensors:
            if name in seen:
                raise DuplicateTensorError(f"duplicate tensor name {name!r}")
            seen.add(name)
        self.tensors = [(name, np.asarray(arr, dtype=np.float32)) for name, arr in self.tensors]

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.tensors]

    def __getitem__(self, name: str) -> np.ndarray:
        for key, arr in self.tensors:
            if key == name:
                return arr
        raise MissingTensorError(f"archive has no tensor named {name!r} (has {self.names})")

    def __contains__(self, name: str) -> bool:
        return name in self.names


def encode_archive(archive: WeightArchive) -> bytes:
    parts = [ARCHIVE_MAGIC, struct.pack("<II", archive.version, len(archive.tensors))]
    for name, arr in archive.tensors:
        raw_name = name.encode("utf-8")
        record = (
            struct.pack("<I", len(raw_name))
            + raw_name
            + struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape)
            + arr.astype("<f4", copy=False).tobytes()
        )
        parts.append(record + struct.pack("<I", zlib.crc32(record)))
    return b"".join(parts)


def decode_archive(raw: bytes) -> WeightArchive:
    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise ArchiveError(f"truncated archive reading {what} at byte {pos}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != ARCHIVE_MAGIC:
        raise ArchiveError("not a weight archive (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != ARCHIVE_VERSION:
        raise ArchiveVersionError(f"archive version {version} is not supported (expected {ARCHIVE_VERSION})")
    tensors, seen = [], set()
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.uint64)) if rank else 1
        payload = take(4 * n, "payload")
        (crc,) = struct.unpack("<I", take(4, "checksum"))
        if zlib.crc32(raw[start : pos - 4]) != crc:
            raise ArchiveChecksumError(f"checksum mismatch in tensor {name!r}")
        if name in seen:
            raise DuplicateTensorError(f"duplicate tensor name {name!r}")
        seen.add(name)
        tensors.append((name, np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)))
    if pos != len(raw):
        raise ArchiveError(f"{len(raw) - pos} trailing bytes after the last tensor")
    return WeightArchive(tensors, version)


def save_weights(archive: WeightArchive, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(encode_archive(archive))
    os.replace(tmp, path)


def load_weights(path) -> WeightArchive:
    with open(path, "rb") as f:
        return decode_archive(f.read())


# ---------------------------------------------------------------------------
# config document

PROJECTOR_KEYS = ("caps_in", "caps_out", "dim_in", "dim_out", "iterations")
LOSS_KEYS = ("m_plus", "m_minus", "lambda_down")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerConfig:
    projector: ProjectorConfig
    loss: MarginLoss = MarginLoss()

    def as_dict(self) -> dict:
        out = {k: getattr(self.projector, k) for k in PROJECTOR_KEYS}
        out.update({k: getattr(self.loss, k) for k in LOSS_KEYS})
        return out


def parse_config(doc: dict) -> LayerConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = sorted(set(doc) - set(PROJECTOR_KEYS) - set(LOSS_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    missing = [k for k in PROJECTOR_KEYS[:4] if k not in doc]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")
    try:
        projector = ProjectorConfig(**{k: doc[k] for k in PROJECTOR_KEYS if k in doc})
        loss = MarginLoss(**{k: float(doc[k]) for k in LOSS_KEYS if k in doc})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return LayerConfig(projector, loss)


def load_config(path) -> LayerConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc)


def save_config(config: LayerConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config.as_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# synthetic data


def synthetic_blobs(n: int, size: int = 12, num_classes: int = 2, seed: int = 0, noise: float = 0.25) -> LabeledImages:
    """Gaussian blobs rendered to small images; the class picks the blob's anchor.

    Anchors sit on a ring around the image centre; each sample jitters its
    anchor and width and adds pixel noise.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, n)
    angles = 2 * np.pi * (np.arange(num_classes) / num_classes) + np.pi / 4
    radius = size / 4
    centre = (size - 1) / 2
    cy = centre + radius * np.sin(angles[labels]) + rng.normal(0, 1.2, n)
    cx = centre + radius * np.cos(angles[labels]) + rng.normal(0, 1.2, n)
    sigma = rng.uniform(1.0, 1.8, n)
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    img = np.exp(-d2 / (2 * sigma[:, None, None] ** 2)) + rng.normal(0, noise, (n, size, size))
    return LabeledImages(np.clip(img, 0, 1)[..., None], labels, num_classes)
