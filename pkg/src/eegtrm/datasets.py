"""Labelled EEG segment sets: the ``ETSR`` file format, baseline correction and
a seeded synthetic generator with grid-localised class signals.

``ETSR`` layout (little-endian)::

    b"ETSR"  u32 version=1  u32 n_segments  u32 channels  u32 time_points
    u32 n_classes  f32 sample_rate
    channels * (u16 length, UTF-8 name)
    n_segments * (u32 label, channels*time_points f32, channel-major)

Real recordings are brought in by converting them to this format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .montage import Montage

MAGIC = b"ETSR"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIf")


@dataclass(frozen=True)
class EegSegmentSet:
    """Segments share one ``[C x TP]`` shape; ``data`` is ``[N x C x TP]`` float32."""

    channel_names: tuple[str, ...]
    sample_rate_hz: float
    n_classes: int
    labels: np.ndarray
    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        data = np.asarray(self.data, dtype=np.float32)
        C = len(self.channel_names)
        if data.ndim != 3:
            if data.size == 0:
                data = data.reshape(0, C, 0)
            else:
                raise ValidationError(f"segment data must be N x C x TP, got {data.shape}")
        if data.shape[0] != labels.shape[0]:
            raise ValidationError(f"{data.shape[0]} segments but {labels.shape[0]} labels")
        if data.shape[1] != C:
            raise ValidationError(f"segments have {data.shape[1]} channels, {C} names given")
        if self.n_classes < 1:
            raise ValidationError("n_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")
        if not self.sample_rate_hz > 0:
            raise ValidationError("sample rate must be positive")
        labels.flags.writeable = False
        data.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    @property
    def time_points(self) -> int:
        return self.data.shape[2]

    @property
    def segments(self) -> list[tuple[int, np.ndarray]]:
        return list(zip(self.labels.tolist(), self.data))

    def subset(self, index: np.ndarray) -> "EegSegmentSet":
        return EegSegmentSet(self.channel_names, self.sample_rate_hz, self.n_classes,
                             self.labels[index], self.data[index])


def save_segments(segments: EegSegmentSet, path: str | Path) -> None:
    N, C, TP = len(segments), segments.n_channels, segments.time_points
    parts = [_HEADER.pack(MAGIC, VERSION, N, C, TP, segments.n_classes, segments.sample_rate_hz)]
    for name in segments.channel_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    values = segments.data.astype("<f4", copy=False)
    for label, seg in zip(segments.labels, values):
        parts.append(struct.pack("<I", int(label)))
        parts.append(seg.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_segments(path: str | Path) -> EegSegmentSet:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, N, C, TP, K, rate = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported ETSR version {version}")
    pos = _HEADER.size
    names = []
    try:
        for _ in range(C):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if pos + n > len(buf):
                raise ValidationError(f"{path}: truncated channel-name table")
            names.append(buf[pos : pos + n].decode("utf-8"))
            pos += n
    except struct.error:
        raise ValidationError(f"{path}: truncated channel-name table") from None
    seg_bytes = 4 + 4 * C * TP
    if len(buf) - pos != N * seg_bytes:
        raise ValidationError(f"{path}: payload is {len(buf) - pos} bytes, expected {N * seg_bytes}")
    record = np.dtype([("label", "<u4"), ("values", "<f4", (C, TP))])
    recs = np.frombuffer(buf, dtype=record, count=N, offset=pos)
    labels = recs["label"].astype(np.int64)
    if N and labels.max() >= K:
        raise ValidationError(f"{path}: label {labels.max()} out of range for {K} classes")
    return EegSegmentSet(tuple(names), float(rate), K, labels, recs["values"].astype(np.float32))


def baseline_samples(baseline_ms: float, sample_rate_hz: float) -> int:
    return int(round(baseline_ms * sample_rate_hz / 1000.0))


def baseline_correct(segments: EegSegmentSet, baseline_ms: float) -> EegSegmentSet:
    """Subtract, per segment and channel, the mean of the first ``baseline_ms``."""
    if baseline_ms <= 0:
        raise ValidationError("baseline window must be positive")
    n = baseline_samples(baseline_ms, segments.sample_rate_hz)
    if n < 1 or n > segments.time_points:
        raise ValidationError(
            f"baseline window of {n} samples does not fit segments of {segments.time_points} samples"
        )
    data = segments.data.astype(np.float64)
    data -= data[:, :, :n].mean(axis=2, keepdims=True)
    return EegSegmentSet(segments.channel_names, segments.sample_rate_hz, segments.n_classes,
                         segments.labels, data.astype(np.float32))


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic dataset recipe.

    Each class owns a set of grid cells; a segment carries Gaussian noise on
    every channel plus one sinusoid (frequency drawn from ``band_hz``, random
    phase) of peak amplitude ``amplitude`` on the channels at its class's cells.
    """

    montage: Montage
    active_cells: tuple[tuple[tuple[int, int], ...], ...]
    amplitude: float = 4.0
    sigma: float = 1.0
    band_hz: tuple[float, float] = (8.0, 13.0)
    time_points: int = 128
    sample_rate_hz: float = 128.0
    segments_per_class: int = 100
    seed: int = 0
    n_classes: int = field(init=False)

    def __post_init__(self) -> None:
        cells = tuple(tuple((int(r), int(c)) for r, c in group) for group in self.active_cells)
        object.__setattr__(self, "active_cells", cells)
        object.__setattr__(self, "n_classes", len(cells))
        if self.n_classes < 1:
            raise ValidationError("need at least one class")
        assigned = {(r, c) for _, r, c in self.montage.channels}
        for k, group in enumerate(cells):
            if not group:
                raise ValidationError(f"class {k} has no active cells")
            missing = [rc for rc in group if rc not in assigned]
            if missing:
                raise ValidationError(f"class {k} active cells {missing} carry no electrode")
        if not self.amplitude > 0:
            raise ValidationError("amplitude must be positive")
        # sigma == 0 is the noise-free limit
        if self.sigma < 0:
            raise ValidationError("noise sigma must be non-negative")
        lo, hi = self.band_hz
        if not 0 < lo <= hi:
            raise ValidationError("band must satisfy 0 < low <= high")
        if self.time_points < 1 or self.segments_per_class < 0 or self.sample_rate_hz <= 0:
            raise ValidationError("time_points, segments_per_class and sample_rate must be positive")

    def active_channels(self, label: int) -> np.ndarray:
        index = {(r, c): i for i, (_, r, c) in enumerate(self.montage.channels)}
        return np.array(sorted(index[rc] for rc in self.active_cells[label]), dtype=np.intp)


def default_active_cells(montage: Montage, n_classes: int = 2, cells_per_class: int = 4) -> tuple:
    """Disjoint, spatially compact cell groups: electrodes sorted left-to-right, then cut into blocks.

    The first block is taken from the left edge, the second from the right
    edge, and further classes from the middle.
    """
    cells = sorted(((c, r) for _, r, c in montage.channels))
    if n_classes * cells_per_class > len(cells):
        raise ValidationError("not enough electrodes for disjoint class groups")
    groups = [cells[:cells_per_class]]
    if n_classes > 1:
        groups.append(cells[-cells_per_class:])
    rest = cells[cells_per_class:-cells_per_class]
    for k in range(n_classes - 2):
        groups.append(rest[k * cells_per_class : (k + 1) * cells_per_class])
    return tuple(tuple(sorted((r, c) for c, r in g)) for g in groups)


def generate_synthetic(spec: SynthSpec) -> EegSegmentSet:
    rng = np.random.default_rng(spec.seed)
    C, TP, K = spec.montage.n_channels, spec.time_points, spec.n_classes
    N = K * spec.segments_per_class
    labels = np.repeat(np.arange(K), spec.segments_per_class)
    t = np.arange(TP) / spec.sample_rate_hz
    data = np.zeros((N, C, TP))
    noise = rng.standard_normal((N, C, TP))
    freqs = rng.uniform(*spec.band_hz, size=N)
    phases = rng.uniform(0.0, 2 * np.pi, size=N)
    for i, label in enumerate(labels):
        wave = spec.amplitude * np.sin(2 * np.pi * freqs[i] * t + phases[i])
        data[i, spec.active_channels(label)] += wave
    data += spec.sigma * noise
    return EegSegmentSet(spec.montage.channel_names, spec.sample_rate_hz, K, labels, data.astype(np.float32))


def stack_segments(sets: Sequence[EegSegmentSet]) -> EegSegmentSet:
    first = sets[0]
    return EegSegmentSet(first.channel_names, first.sample_rate_hz, first.n_classes,
                         np.concatenate([s.labels for s in sets]), np.concatenate([s.data for s in sets]))
