"""Symbolic note onsets, counting windows and onset histograms.

Pitch indices are zero-based; index 0 is MIDI note 21 (A0) so the default
88-pitch range covers the piano keyboard.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_PITCH_COUNT = 88
MIDI_OFFSET = 21
FULL_TRACK = "full"


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset_s: float
    pitch: int
    velocity: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.onset_s >= 0:
            raise ValueError(f"onset must be non-negative, got {self.onset_s}")
        if self.velocity is not None and not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity out of range: {self.velocity}")


@dataclass(frozen=True)
class EventTrack:
    """Onset events of one recording, sorted by (onset, pitch)."""

    events: tuple[NoteEvent, ...]
    duration_s: float
    pitch_count: int = DEFAULT_PITCH_COUNT

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError(f"duration must be positive, got {self.duration_s}")
        if self.pitch_count < 1:
            raise ValueError("pitch_count must be positive")
        events = tuple(sorted(self.events, key=lambda e: (e.onset_s, e.pitch)))
        for prev, cur in zip(events, events[1:]):
            if (prev.onset_s, prev.pitch) == (cur.onset_s, cur.pitch):
                raise ValueError(f"duplicate event at {cur.onset_s}s pitch {cur.pitch}")
        for e in events:
            if not 0 <= e.pitch < self.pitch_count:
                raise ValueError(f"pitch {e.pitch} outside [0, {self.pitch_count})")
            if e.onset_s >= self.duration_s:
                raise ValueError(f"onset {e.onset_s} not before duration {self.duration_s}")
        object.__setattr__(self, "events", events)

    def __len__(self):
        return len(self.events)

    @property
    def onsets(self) -> np.ndarray:
        return np.array([e.onset_s for e in self.events], dtype=np.float64)

    @property
    def pitches(self) -> np.ndarray:
        return np.array([e.pitch for e in self.events], dtype=np.int64)

    def pitch_counts(self) -> np.ndarray:
        return np.bincount(self.pitches, minlength=self.pitch_count).astype(np.int64)

    def transpose(self, semitones: int) -> EventTrack:
        """Shift every pitch by an integer number of semitones."""
        events = [NoteEvent(e.onset_s, e.pitch + semitones, e.velocity) for e in self.events]
        return EventTrack(tuple(events), self.duration_s, self.pitch_count)

    def to_dict(self) -> dict:
        return {
            "pitch_count": self.pitch_count,
            "duration_s": self.duration_s,
            "events": [_event_dict(e) for e in self.events],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> EventTrack:
        events = tuple(
            NoteEvent(float(e["onset_s"]), int(e["pitch"]), e.get("velocity"))
            for e in doc["events"]
        )
        return cls(events, float(doc["duration_s"]), int(doc["pitch_count"]))


def _event_dict(e: NoteEvent) -> dict:
    d = {"onset_s": e.onset_s, "pitch": e.pitch}
    if e.velocity is not None:
        d["velocity"] = e.velocity
    return d


@dataclass(frozen=True)
class WindowSpec:
    """Non-overlapping counting windows; ``window_len_s`` may be FULL_TRACK."""

    window_len_s: float | str = FULL_TRACK

    def __post_init__(self):
        if self.window_len_s == FULL_TRACK:
            return
        if isinstance(self.window_len_s, str) or not self.window_len_s > 0:
            raise ValueError(f"invalid window length: {self.window_len_s!r}")

    @property
    def full_track(self) -> bool:
        return self.window_len_s == FULL_TRACK

    @classmethod
    def parse(cls, value) -> WindowSpec:
        if isinstance(value, str) and value.lower() in (FULL_TRACK, "full_track", "f/t"):
            return cls(FULL_TRACK)
        return cls(float(value))


@dataclass(frozen=True)
class Histogram:
    counts: np.ndarray
    window_start_s: float
    window_end_s: float

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1:
            raise ValueError("counts must be a vector")
        if counts.size and (np.any(counts < 0) or not np.all(counts == np.round(counts))):
            raise ValueError("counts must be non-negative integers")
        if not self.window_start_s < self.window_end_s:
            raise ValueError("window start must precede window end")
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def pitch_count(self) -> int:
        return self.counts.size

    def __eq__(self, other):
        if not isinstance(other, Histogram):
            return NotImplemented
        return (
            self.window_start_s == other.window_start_s
            and self.window_end_s == other.window_end_s
            and np.array_equal(self.counts, other.counts)
        )

    __hash__ = None


def window_bounds(duration_s: float, spec: WindowSpec) -> list[tuple[float, float]]:
    if spec.full_track:
        return [(0.0, duration_s)]
    step = float(spec.window_len_s)
    n = max(1, math.ceil(duration_s / step - 1e-12))
    return [(i * step, min((i + 1) * step, duration_s)) for i in range(n)]


def segment(track: EventTrack, spec: WindowSpec) -> list[tuple[tuple[float, float], tuple[NoteEvent, ...]]]:
    """Split a track into half-open windows ``[start, end)`` tiling ``[0, duration)``."""
    bounds = window_bounds(track.duration_s, spec)
    starts = np.array([b[0] for b in bounds])
    buckets: list[list[NoteEvent]] = [[] for _ in bounds]
    for e in track.events:
        i = int(np.searchsorted(starts, e.onset_s, side="right")) - 1
        buckets[i].append(e)
    return [(b, tuple(evs)) for b, evs in zip(bounds, buckets)]


def compute_histograms(track: EventTrack, spec: WindowSpec) -> list[Histogram]:
    out = []
    for (start, end), evs in segment(track, spec):
        counts = np.zeros(track.pitch_count, dtype=np.int64)
        for e in evs:
            counts[e.pitch] += 1
        out.append(Histogram(counts, start, end))
    return out


def corrupt_histogram(h: Histogram, alpha: float, seed, window_index: int = 0) -> Histogram:
    """Multiply each count by an independent factor drawn from U[1-alpha, 1+alpha].

    Noisy counts are rounded half away from zero and clamped at zero. The
    draw depends only on ``seed`` (an int or a tuple of ints, e.g. run seed
    and track number), ``window_index`` and the pitch position.
    """
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    if alpha == 0:
        return h
    key = [int(s) for s in seed] if isinstance(seed, (tuple, list)) else [int(seed)]
    rng = np.random.default_rng(key + [int(window_index)])
    u = rng.uniform(1.0 - alpha, 1.0 + alpha, size=h.pitch_count)
    noisy = np.floor(h.counts * u + 0.5)
    return Histogram(np.maximum(noisy, 0).astype(np.int64), h.window_start_s, h.window_end_s)


def corrupt_histograms(hists: Sequence[Histogram], alpha: float, seed) -> list[Histogram]:
    return [corrupt_histogram(h, alpha, seed, i) for i, h in enumerate(hists)]


# -- documents ---------------------------------------------------------------

def histograms_to_dict(hists: Sequence[Histogram], spec: WindowSpec) -> dict:
    if not hists:
        raise ValueError("no histograms")
    return {
        "pitch_count": hists[0].pitch_count,
        "window_len_s": FULL_TRACK if spec.full_track else float(spec.window_len_s),
        "windows": [
            {"start_s": h.window_start_s, "end_s": h.window_end_s, "counts": h.counts.tolist()}
            for h in hists
        ],
    }


def histograms_from_dict(doc: dict) -> tuple[list[Histogram], WindowSpec]:
    p = int(doc["pitch_count"])
    hists = []
    for w in doc["windows"]:
        if len(w["counts"]) != p:
            raise ValueError(f"window has {len(w['counts'])} counts, expected {p}")
        hists.append(Histogram(np.array(w["counts"], dtype=np.int64), float(w["start_s"]), float(w["end_s"])))
    return hists, WindowSpec.parse(doc["window_len_s"])


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def total_counts(hists: Iterable[Histogram]) -> np.ndarray:
    return np.sum([h.counts for h in hists], axis=0)
