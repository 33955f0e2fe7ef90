"""Frame-by-pitch matrices (posteriorgrams, onset labels) and their file format.

Binary layout, little-endian::

    magic   4s   b"TPGM"
    kind    u8   0 = f32 posteriorgram, 1 = u8 label matrix
    reserved u8  0
    version u16  1
    T       u32
    P       u32
    frame_len_s f64
    T*P elements, row-major (one row per frame)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import EventTrack, NoteEvent

DEFAULT_FRAME_LEN_S = 0.032
MAGIC = b"TPGM"
VERSION = 1
KIND_POSTERIOR = 0
KIND_LABEL = 1
_HEADER = struct.Struct("<4sBBHIId")
HEADER_SIZE = _HEADER.size
_MAX_ELEMENTS = 1 << 31
# tolerance for float onsets landing exactly on a frame boundary
_EDGE_EPS = 1e-9


class MatrixFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FrameGrid:
    frame_count: int
    pitch_count: int = 88
    frame_len_s: float = DEFAULT_FRAME_LEN_S

    def __post_init__(self):
        if self.frame_count < 1 or self.pitch_count < 1:
            raise ValueError("grid dimensions must be positive")
        if not self.frame_len_s > 0:
            raise ValueError("frame length must be positive")

    @classmethod
    def for_duration(cls, duration_s: float, pitch_count: int = 88,
                     frame_len_s: float = DEFAULT_FRAME_LEN_S) -> FrameGrid:
        return cls(max(1, math.ceil(duration_s / frame_len_s - _EDGE_EPS)), pitch_count, frame_len_s)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.frame_count, self.pitch_count)

    def frame_of(self, t: float) -> int:
        return int(math.floor(t / self.frame_len_s + _EDGE_EPS))


@dataclass(frozen=True)
class Posteriorgram:
    grid: FrameGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if v.size and (np.isnan(v).any() or v.min() < 0 or v.max() > 1):
            raise ValueError("posteriorgram values must lie in [0, 1]")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class LabelMatrix:
    grid: FrameGrid
    values: np.ndarray
    collapsed: int = field(default=0, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if v.size and not np.isin(v, (0, 1)).all():
            raise ValueError("label values must be 0 or 1")
        object.__setattr__(self, "values", v.astype(np.uint8))

    def column_sums(self) -> np.ndarray:
        return self.values.sum(axis=0, dtype=np.int64)

    def transpose_pitch(self, semitones: int) -> LabelMatrix:
        """Move every onset ``semitones`` pitch indices up (negative: down)."""
        v = self.values
        cols = np.nonzero(v.any(axis=0))[0]
        if cols.size and (cols.min() + semitones < 0 or cols.max() + semitones >= self.grid.pitch_count):
            raise ValueError(f"transposition by {semitones} leaves the pitch range")
        out = np.zeros_like(v)
        if semitones >= 0:
            out[:, semitones:] = v[:, :v.shape[1] - semitones]
        else:
            out[:, :semitones] = v[:, -semitones:]
        return LabelMatrix(self.grid, out)

    def __eq__(self, other):
        if not isinstance(other, LabelMatrix):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    __hash__ = None


def events_to_labels(track: EventTrack, grid: FrameGrid) -> LabelMatrix:
    """Rasterize onsets; several same-pitch onsets in one frame become one entry."""
    if track.pitch_count != grid.pitch_count:
        raise ValueError("pitch count mismatch between track and grid")
    y = np.zeros(grid.shape, dtype=np.uint8)
    collapsed = 0
    for e in track.events:
        t = grid.frame_of(e.onset_s)
        if t >= grid.frame_count:
            raise ValueError(f"onset {e.onset_s}s lies beyond the grid ({grid.frame_count} frames)")
        if y[t, e.pitch]:
            collapsed += 1
        y[t, e.pitch] = 1
    return LabelMatrix(grid, y, collapsed)


def labels_to_events(y: LabelMatrix) -> EventTrack:
    frames, pitches = np.nonzero(y.values)
    fl = y.grid.frame_len_s
    events = tuple(NoteEvent((int(t) + 0.5) * fl, int(p)) for t, p in zip(frames, pitches))
    return EventTrack(events, y.grid.frame_count * fl, y.grid.pitch_count)


# -- file format -------------------------------------------------------------

def encode_matrix(m: Posteriorgram | LabelMatrix) -> bytes:
    if isinstance(m, Posteriorgram):
        kind, payload = KIND_POSTERIOR, m.values.astype("<f4")
    elif isinstance(m, LabelMatrix):
        kind, payload = KIND_LABEL, m.values.astype(np.uint8)
    else:
        raise TypeError(f"cannot encode {type(m).__name__}")
    g = m.grid
    header = _HEADER.pack(MAGIC, kind, 0, VERSION, g.frame_count, g.pitch_count, g.frame_len_s)
    return header + np.ascontiguousarray(payload).tobytes()


def decode_matrix(data: bytes) -> Posteriorgram | LabelMatrix:
    if len(data) < _HEADER.size:
        raise MatrixFormatError(f"file shorter than the {_HEADER.size}-byte header")
    magic, kind, reserved, version, t, p, frame_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MatrixFormatError(f"bad magic {magic!r}")
    if kind not in (KIND_POSTERIOR, KIND_LABEL):
        raise MatrixFormatError(f"unknown element type {kind}")
    if reserved != 0 or version != VERSION:
        raise MatrixFormatError(f"unsupported version {version} (reserved={reserved})")
    if t == 0 or p == 0 or t * p > _MAX_ELEMENTS:
        raise MatrixFormatError(f"dimension overflow: {t} x {p}")
    if not frame_len > 0:
        raise MatrixFormatError(f"invalid frame length {frame_len}")
    itemsize = 4 if kind == KIND_POSTERIOR else 1
    expected = t * p * itemsize
    payload = memoryview(data)[_HEADER.size:]
    if len(payload) < expected:
        raise MatrixFormatError(f"truncated payload: {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise MatrixFormatError(f"{len(payload) - expected} trailing bytes after payload")
    grid = FrameGrid(t, p, frame_len)
    if kind == KIND_POSTERIOR:
        values = np.frombuffer(payload, dtype="<f4").reshape(t, p).astype(np.float32)
        try:
            return Posteriorgram(grid, values)
        except ValueError as exc:
            raise MatrixFormatError(str(exc)) from None
    values = np.frombuffer(payload, dtype=np.uint8).reshape(t, p).copy()
    try:
        return LabelMatrix(grid, values)
    except ValueError as exc:
        raise MatrixFormatError(str(exc)) from None


def write_matrix(path, m: Posteriorgram | LabelMatrix):
    from ._io import atomic_write_bytes

    atomic_write_bytes(Path(path), encode_matrix(m))


def read_matrix(path) -> Posteriorgram | LabelMatrix:
    return decode_matrix(Path(path).read_bytes())
