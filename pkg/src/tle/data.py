"""Feature-map datasets: containers, the TLEF binary format, synthetic generation.

TLEF layout (all little-endian)::

    magic      4 bytes  b"TLEF"
    version    u16      (1)
    C          u32      class count
    n_videos   u32
    per video:
        id_len u32, id bytes (utf-8)
        label  u32
        stream u8       0 = spatial, 1 = temporal
        n_maps u32
        h, w, c u32 each
        n_maps * h * w * c float32 values, map-major then location-major

Values are stored at 32-bit and widened to 64-bit on load.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import FeatureMap, ShapeError

__all__ = [
    "MAGIC",
    "VERSION",
    "STREAMS",
    "VideoRecord",
    "FeatureDataset",
    "DatasetFormatError",
    "MagicMismatchError",
    "VersionMismatchError",
    "TruncatedFileError",
    "ShapeOverflowError",
    "write_dataset",
    "read_dataset",
    "encode_dataset",
    "decode_dataset",
    "synth_dataset",
]

MAGIC = b"TLEF"
VERSION = 1
STREAMS = ("spatial", "temporal")
# guards against absurd declared sizes before allocating
_MAX_DIM = 1 << 20


@dataclass(eq=False)
class VideoRecord:
    id: str
    label: int
    frames: np.ndarray  # n_maps x h x w x c
    stream: str = "spatial"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1 or min(self.frames.shape[1:]) < 1:
            raise ShapeError(f"video {self.id!r}: frames must be n x h x w x c, got {self.frames.shape}")
        if self.stream not in STREAMS:
            raise ValueError(f"video {self.id!r}: unknown stream tag {self.stream!r}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError(f"video {self.id!r}: non-finite feature values")
        self.label = int(self.label)

    @property
    def n_maps(self) -> int:
        return self.frames.shape[0]

    @property
    def map_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])

    def feature_maps(self) -> list[FeatureMap]:
        return [FeatureMap(f) for f in self.frames]

    def __eq__(self, other):
        if not isinstance(other, VideoRecord):
            return NotImplemented
        return (self.id, self.label, self.stream) == (other.id, other.label, other.stream) \
            and self.frames.shape == other.frames.shape and np.array_equal(self.frames, other.frames)


@dataclass(eq=False)
class FeatureDataset:
    n_classes: int
    videos: list[VideoRecord]
    class_names: list[str] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if not self.videos:
            raise ValueError("dataset is empty")
        if not self.class_names:
            self.class_names = [f"class_{i}" for i in range(self.n_classes)]
        if len(self.class_names) != self.n_classes:
            raise ValueError(f"{len(self.class_names)} class names for {self.n_classes} classes")
        for v in self.videos:
            if not 0 <= v.label < self.n_classes:
                raise ValueError(f"video {v.id!r}: label {v.label} not in [0, {self.n_classes})")

    def __len__(self):
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    @property
    def labels(self) -> np.ndarray:
        return np.array([v.label for v in self.videos], dtype=np.int64)

    @property
    def map_shape(self) -> tuple[int, int, int]:
        shapes = {v.map_shape for v in self.videos}
        if len(shapes) != 1:
            raise ShapeError(f"videos have mixed map shapes: {sorted(shapes)}")
        return shapes.pop()

    def __eq__(self, other):
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return self.n_classes == other.n_classes and len(self.videos) == len(other.videos) \
            and all(a == b for a, b in zip(self.videos, other.videos))


class DatasetFormatError(ValueError):
    """Malformed TLEF content; ``offset`` is the byte position of the problem."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class MagicMismatchError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class ShapeOverflowError(DatasetFormatError):
    pass


def encode_dataset(ds: FeatureDataset) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HII", VERSION, ds.n_classes, len(ds.videos)))
    for v in ds.videos:
        vid = v.id.encode("utf-8")
        buf.write(struct.pack("<I", len(vid)))
        buf.write(vid)
        n, h, w, c = v.frames.shape
        buf.write(struct.pack("<IBIIII", v.label, STREAMS.index(v.stream), n, h, w, c))
        buf.write(np.ascontiguousarray(v.frames, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} remain", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_dataset(data: bytes, split: str = "train", class_names: Sequence[str] | None = None) -> FeatureDataset:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise MagicMismatchError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported format version {version}", 4)
    n_classes, n_videos = r.unpack("<II", "header")
    videos = []
    for i in range(n_videos):
        start = r.pos
        (id_len,) = r.unpack("<I", f"video {i} id length")
        if id_len > len(data) - r.pos:
            raise TruncatedFileError(f"video {i}: id length {id_len} runs past end of file", start)
        vid = r.take(id_len, f"video {i} id").decode("utf-8")
        dims_at = r.pos
        label, stream, n, h, w, c = r.unpack("<IBIIII", f"video {i} header")
        if stream >= len(STREAMS):
            raise DatasetFormatError(f"video {i}: unknown stream tag {stream}", dims_at + 4)
        if min(n, h, w, c) < 1 or max(h, w, c) > _MAX_DIM:
            raise ShapeOverflowError(f"video {i}: invalid shape n={n} h={h} w={w} c={c}", dims_at + 5)
        count = n * h * w * c
        nbytes = 4 * count
        if nbytes > len(data) - r.pos:
            raise TruncatedFileError(
                f"video {i}: value section needs {nbytes} bytes, {len(data) - r.pos} remain", r.pos)
        raw = np.frombuffer(r.take(nbytes, f"video {i} values"), dtype="<f4")
        frames = raw.astype(np.float64).reshape(n, h, w, c)
        if label >= n_classes:
            raise DatasetFormatError(f"video {i}: label {label} >= class count {n_classes}", dims_at)
        videos.append(VideoRecord(vid, label, frames, STREAMS[stream]))
    if r.pos != len(data):
        raise DatasetFormatError(f"{len(data) - r.pos} trailing bytes after last video", r.pos)
    return FeatureDataset(n_classes, videos, list(class_names or []), split)


def write_dataset(ds: FeatureDataset, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(encode_dataset(ds))


def read_dataset(path: str | os.PathLike, split: str = "train",
                 class_names: Sequence[str] | None = None) -> FeatureDataset:
    with open(path, "rb") as f:
        return decode_dataset(f.read(), split=split, class_names=class_names)


def synth_dataset(classes: int = 5, videos_per_class: int = 20, frames: int = 12,
                  shape: tuple[int, int, int] = (4, 4, 8), difficulty: float = 0.3,
                  seed: int = 0, split: str = "train", stream: str = "spatial") -> FeatureDataset:
    """Synthetic rectified feature maps with class-specific channel patterns.

    Each class owns a sparse non-negative template: a few active channels
    with random strengths, switched on over a random subset of locations.
    A frame is ``relu(template + difficulty * noise)`` where the noise is
    Gaussian clutter plus, in a random subset of frames, a transient copy of
    another class's template.  Clutter is independent across frames, so
    aggregation over segments can suppress it.

    Class templates depend only on ``seed``; per-video noise also depends on
    ``split``, so train and test splits share classes but not samples.
    """
    h, w, c = shape
    if classes < 2 or videos_per_class < 1 or frames < 1 or min(h, w, c) < 1:
        raise ValueError(f"degenerate synthetic configuration: classes={classes}, "
                         f"videos_per_class={videos_per_class}, frames={frames}, shape={shape}")
    if difficulty < 0:
        raise ValueError("difficulty must be non-negative")
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    templates = _class_templates(classes, (h, w, c), np.random.default_rng([seed, 0]))
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    videos = []
    for label in range(classes):
        for j in range(videos_per_class):
            noise = rng.normal(0.0, _CLUTTER_STD, size=(frames, h, w, c))
            others = [k for k in range(classes) if k != label]
            transient = rng.random(frames) < _TRANSIENT_RATE
            picks = rng.choice(others, size=frames)
            noise += transient[:, None, None, None] * _TRANSIENT_GAIN * templates[picks]
            clip = np.maximum(templates[label] + difficulty * noise, 0.0)
            videos.append(VideoRecord(f"{split}_{label:03d}_{j:04d}", label, clip.astype(np.float32), stream))
    return FeatureDataset(classes, videos, split=split)


_CLUTTER_STD = 1.0
_TRANSIENT_RATE = 0.35
_TRANSIENT_GAIN = 3.0


def _class_templates(classes: int, shape, rng: np.random.Generator) -> np.ndarray:
    h, w, c = shape
    active = max(2, c // 3)
    out = np.zeros((classes, h, w, c))
    for k in range(classes):
        channels = rng.choice(c, size=min(active, c), replace=False)
        strength = np.zeros(c)
        strength[channels] = rng.uniform(0.5, 1.5, size=channels.size)
        where = rng.random((h, w)) < 0.5
        if not where.any():
            where[rng.integers(h), rng.integers(w)] = True
        out[k] = where[:, :, None] * strength
    return out
