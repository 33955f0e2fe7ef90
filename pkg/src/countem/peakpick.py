"""Count-constrained onset selection from posteriorgrams.

For every pitch column the picker keeps the K strongest local peaks, K being
that pitch's count in the target histogram. A frame is a local peak when its
value is greater than or equal to every in-range neighbour within ``radius``
frames. Candidates are ranked by value, ties going to the earlier frame.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .events import Histogram
from .grid import LabelMatrix, Posteriorgram


class Fallback(enum.Enum):
    ERROR = "error"
    TOP_VALUES = "top_values"


class PeakPickError(ValueError):
    pass


@dataclass(frozen=True)
class PeakPickConfig:
    radius_frames: int = 1
    fallback: Fallback = Fallback.TOP_VALUES

    def __post_init__(self):
        if self.radius_frames < 1:
            raise ValueError("radius_frames must be >= 1")
        object.__setattr__(self, "fallback", Fallback(self.fallback))


def local_peak_mask(values: np.ndarray, radius: int) -> np.ndarray:
    """Boolean mask of local peaks along axis 0 (works on vectors and T x P matrices)."""
    v = np.asarray(values, dtype=np.float64)
    t = v.shape[0]
    pad = [(radius, radius)] + [(0, 0)] * (v.ndim - 1)
    padded = np.pad(v, pad, constant_values=-np.inf)
    mask = np.ones(v.shape, dtype=bool)
    for d in range(1, radius + 1):
        mask &= v >= padded[radius - d:radius - d + t]
        mask &= v >= padded[radius + d:radius + d + t]
    return mask


def local_peaks(column, radius: int = 1) -> list[int]:
    column = np.asarray(column)
    if column.ndim != 1 or column.size == 0:
        raise ValueError("expected a non-empty vector")
    return np.nonzero(local_peak_mask(column, radius))[0].tolist()


def _ranked(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # descending value, then ascending frame
    return idx[np.lexsort((idx, -values[idx]))]


def pick_columns(values: np.ndarray, counts: np.ndarray, radius: int = 1,
                 fallback: Fallback = Fallback.TOP_VALUES) -> tuple[np.ndarray, int]:
    """Array-level picker. Returns the uint8 label array and the number of
    columns where the fallback had to fill missing peaks."""
    values = np.asarray(values, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    if values.ndim != 2 or counts.shape != (values.shape[1],):
        raise PeakPickError(f"shape mismatch: values {values.shape}, counts {counts.shape}")
    t_len = values.shape[0]
    if counts.size and counts.max(initial=0) > t_len:
        p = int(np.argmax(counts))
        raise PeakPickError(f"pitch {p} asks for {counts[p]} onsets in a {t_len}-frame window")
    if counts.size and counts.min() < 0:
        raise PeakPickError("negative histogram count")
    out = np.zeros(values.shape, dtype=np.uint8)
    peaks = local_peak_mask(values, radius)
    fallbacks = 0
    for p in np.nonzero(counts)[0]:
        k = counts[p]
        col = values[:, p]
        cand = _ranked(col, np.nonzero(peaks[:, p])[0])
        chosen = cand[:k]
        if chosen.size < k:
            if Fallback(fallback) is Fallback.ERROR:
                raise PeakPickError(f"pitch {p}: {cand.size} local peaks for {k} requested onsets")
            fallbacks += 1
            rest = _ranked(col, np.nonzero(~peaks[:, p])[0])
            chosen = np.concatenate([chosen, rest[:k - chosen.size]])
        out[chosen, p] = 1
    return out, fallbacks


def peak_pick(z: Posteriorgram, h: Histogram, cfg: PeakPickConfig = PeakPickConfig()) -> LabelMatrix:
    if h.pitch_count != z.grid.pitch_count:
        raise PeakPickError(f"histogram has {h.pitch_count} pitches, posteriorgram {z.grid.pitch_count}")
    y, _ = pick_columns(z.values, h.counts, cfg.radius_frames, cfg.fallback)
    return LabelMatrix(z.grid, y)


def predicted_histogram(z: Posteriorgram | np.ndarray) -> np.ndarray:
    values = z.values if isinstance(z, Posteriorgram) else np.asarray(z)
    return values.sum(axis=0, dtype=np.float64)


def histogram_distance(h_pred, h) -> float:
    """Euclidean distance between a predicted and a target count vector."""
    a = np.asarray(h_pred, dtype=np.float64)
    b = np.asarray(h.counts if isinstance(h, Histogram) else h, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def threshold_peaks(z: Posteriorgram, threshold: float = 0.5, radius: int = 1) -> LabelMatrix:
    """Histogram-free decoding: local peaks at or above ``threshold``."""
    mask = local_peak_mask(z.values, radius) & (z.values >= threshold)
    return LabelMatrix(z.grid, mask.astype(np.uint8))
