"""Expectation-maximization training from onset-count supervision.

Each iteration relabels every track by count-constrained peak picking on the
current model output (E-step), keeping a new label only if the model's
predicted histogram moved closer to the target, then fine-tunes the model on
the accepted labels (M-step).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .events import EventTrack, Histogram
from .grid import FrameGrid, LabelMatrix, labels_to_events
from .metrics import EvalResult, evaluate_corpus
from .model import FrameDataset, LossConfig, TranscriberState, predict, train
from .peakpick import PeakPickConfig, pick_columns, threshold_peaks

logger = logging.getLogger(__name__)


class WindowAlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class EMConfig:
    max_iterations: int = 5
    steps_per_m_step: int = 1000
    batch_frames: int = 512
    tol: float = 1e-3
    peakpick: PeakPickConfig = PeakPickConfig()
    loss: LossConfig = LossConfig()
    # accept a new label only if the histogram distance improved
    gate_on_distance: bool = True
    # False: labels are estimated once, later iterations only train
    relabel_each_iteration: bool = True
    decode_threshold: float = 0.5
    # linear step-size decay inside every M-step
    lr_decay: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.steps_per_m_step < 0 or self.batch_frames < 1:
            raise ValueError("invalid step or batch settings")


@dataclass
class AugmentedCopy:
    shift: float  # semitones applied to the audio
    features: np.ndarray

    @property
    def transposition(self) -> int:
        return int(round(self.shift))


@dataclass
class EMTrack:
    """Everything the EM loop knows about one training recording."""

    track_id: str
    features: np.ndarray
    histograms: list[Histogram]
    reference: EventTrack | None = None  # reporting only, never used for supervision
    augmented: list[AugmentedCopy] = field(default_factory=list)
    frame_len_s: float = 0.032

    @property
    def grid(self) -> FrameGrid:
        return FrameGrid(self.features.shape[0], self.histograms[0].pitch_count, self.frame_len_s)


@dataclass
class EMTrackState:
    track_id: str
    labels: LabelMatrix | None = None
    distance: float = math.inf

    def __post_init__(self):
        if (self.labels is None) != math.isinf(self.distance):
            raise ValueError("distance must be infinite exactly when no label is held")


def training_pairs(track: EMTrack, labels: LabelMatrix) -> list[tuple[np.ndarray, LabelMatrix]]:
    """The track plus its pitch-shifted copies, each with transposed labels."""
    pairs = [(track.features, labels)]
    for copy in track.augmented:
        pairs.append((copy.features, labels.transpose_pitch(copy.transposition)))
    return pairs


def window_slices(histograms: Sequence[Histogram], grid: FrameGrid) -> list[slice]:
    """Frame ranges of the counting windows: starts rounded down to a frame,
    the last window running to the end of the grid."""
    if not histograms:
        raise WindowAlignmentError("track has no histograms")
    starts = [grid.frame_of(h.window_start_s) for h in histograms]
    if starts[0] != 0:
        raise WindowAlignmentError("first window does not start at frame 0")
    for a, b in zip(histograms, histograms[1:]):
        if abs(a.window_end_s - b.window_start_s) > 1e-9:
            raise WindowAlignmentError(f"windows not contiguous at {a.window_end_s}s")
    ends = starts[1:] + [grid.frame_count]
    if any(e <= s for s, e in zip(starts, ends)):
        raise WindowAlignmentError("window shorter than one frame or beyond the grid")
    last_end = grid.frame_of(histograms[-1].window_end_s - 1e-9) + 1
    if last_end > grid.frame_count:
        raise WindowAlignmentError(f"windows extend to frame {last_end}, grid has {grid.frame_count}")
    return [slice(s, e) for s, e in zip(starts, ends)]


def estimate_labels(z: np.ndarray, histograms: Sequence[Histogram], grid: FrameGrid,
                    cfg: PeakPickConfig) -> tuple[np.ndarray, float]:
    """Per-window peak picking; returns the track label array and the distance
    over the concatenated per-window (predicted - target) count vectors."""
    y = np.zeros(z.shape, dtype=np.uint8)
    sq = 0.0
    for sl, h in zip(window_slices(histograms, grid), histograms):
        window = z[sl]
        y[sl], _ = pick_columns(window, h.counts, cfg.radius_frames, cfg.fallback)
        diff = window.sum(axis=0, dtype=np.float64) - h.counts
        sq += float(diff @ diff)
    return y, math.sqrt(sq)


def e_step(model: TranscriberState, track: EMTrack, state: EMTrackState,
           cfg: EMConfig = EMConfig()) -> tuple[EMTrackState, bool]:
    """Relabel one track. Returns the new state and whether the label changed hands."""
    z = predict(model, track.features, track.frame_len_s).values
    grid = track.grid
    y, d = estimate_labels(z, track.histograms, grid, cfg.peakpick)
    if d < state.distance or not cfg.gate_on_distance:
        return EMTrackState(track.track_id, LabelMatrix(grid, y), d), True
    return state, False


def m_step(model: TranscriberState, tracks: Sequence[EMTrack], labels: Sequence[LabelMatrix],
           cfg: EMConfig = EMConfig(), steps: int | None = None,
           seed: int | None = None) -> tuple[TranscriberState, list[float]]:
    steps = cfg.steps_per_m_step if steps is None else steps
    if steps == 0:
        return model, []
    pairs = []
    for tr, y in zip(tracks, labels):
        if y is None:
            raise ValueError(f"track {tr.track_id} has no accepted label")
        pairs.extend(training_pairs(tr, y))
    data = FrameDataset(pairs, model.context)
    return train(model, data, steps, cfg.batch_frames, cfg.loss, cfg.seed if seed is None else seed,
                 lr_decay=cfg.lr_decay)


# -- evaluation helpers -------------------------------------------------------

def transcribe(model: TranscriberState, features: np.ndarray, threshold: float = 0.5,
               radius: int = 1, frame_len_s: float = 0.032) -> EventTrack:
    z = predict(model, features, frame_len_s)
    return labels_to_events(threshold_peaks(z, threshold, radius))


def evaluate_model(model: TranscriberState, items: Sequence[tuple[EventTrack, np.ndarray]],
                   threshold: float = 0.5, radius: int = 1, tol_s: float | None = 0.05) -> EvalResult:
    pairs = [(ref, transcribe(model, f, threshold, radius)) for ref, f in items]
    return evaluate_corpus(pairs, tol_s)


# -- orchestration -------------------------------------------------------------

@dataclass
class IterationReport:
    iteration: int
    sum_dist: float
    relabeled_fraction: float
    train_f: float | None
    test_f: float | None
    label_f: float | None
    wall_time_s: float

    def as_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "sum_dist": self.sum_dist,
            "relabeled_fraction": self.relabeled_fraction,
            "train_f": self.train_f,
            "test_f": self.test_f,
            "label_f": self.label_f,
            "wall_time_s": self.wall_time_s,
        }


@dataclass
class EMResult:
    model: TranscriberState
    states: list[EMTrackState]
    report: list[IterationReport]
    loss_trace: list[float]
    converged: bool

    @property
    def labels(self) -> dict[str, LabelMatrix]:
        return {s.track_id: s.labels for s in self.states}


def run_countem(model: TranscriberState, tracks: Sequence[EMTrack], cfg: EMConfig = EMConfig(),
                test: Sequence[tuple[EventTrack, np.ndarray]] = (),
                clock=time.perf_counter) -> EMResult:
    """Alternate E- and M-steps until the summed best distance settles.

    Stops when the relative change of the summed distance between two
    iterations drops below ``cfg.tol`` or after ``cfg.max_iterations``.
    ``test`` pairs and any track references are used for reporting only.
    """
    if not tracks:
        raise ValueError("empty corpus")
    states = [EMTrackState(t.track_id) for t in tracks]
    report: list[IterationReport] = []
    trace: list[float] = []
    prev_sum = None
    converged = False
    start = clock()
    train_refs = [(t.reference, t.features) for t in tracks if t.reference is not None]
    for it in range(1, cfg.max_iterations + 1):
        relabeled = 0
        if it == 1 or cfg.relabel_each_iteration:
            for i, tr in enumerate(tracks):
                states[i], changed = e_step(model, tr, states[i], cfg)
                relabeled += changed
        sum_dist = float(sum(s.distance for s in states))
        label_f = None
        if len(train_refs) == len(tracks):
            label_f = evaluate_corpus(
                [(t.reference, labels_to_events(s.labels)) for t, s in zip(tracks, states)]).f_score
        model, losses = m_step(model, tracks, [s.labels for s in states], cfg,
                               seed=cfg.seed * 1000 + it)
        trace.extend(losses)
        train_f = evaluate_model(model, train_refs, cfg.decode_threshold,
                                 cfg.peakpick.radius_frames).f_score if train_refs else None
        test_f = evaluate_model(model, test, cfg.decode_threshold,
                                cfg.peakpick.radius_frames).f_score if test else None
        report.append(IterationReport(it, sum_dist, relabeled / len(tracks), train_f, test_f,
                                      label_f, clock() - start))
        logger.info("iteration %d: sum_dist=%.3f relabeled=%.2f train_f=%s test_f=%s",
                    it, sum_dist, relabeled / len(tracks), train_f, test_f)
        if prev_sum is not None and prev_sum > 0 and abs(prev_sum - sum_dist) / prev_sum < cfg.tol:
            converged = True
            break
        prev_sum = sum_dist
    return EMResult(model, states, report, trace, converged)


def supervised_baseline(model: TranscriberState, tracks: Sequence[EMTrack], labels: Sequence[LabelMatrix],
                        cfg: EMConfig = EMConfig(), steps: int | None = None) -> tuple[TranscriberState, list[float]]:
    """M-step on ground-truth labels; by default with the same total step
    budget as a full EM run."""
    if steps is None:
        steps = cfg.steps_per_m_step * cfg.max_iterations
    return m_step(model, tracks, labels, cfg, steps=steps, seed=cfg.seed * 1000 + 1)


def single_labeling(cfg: EMConfig) -> EMConfig:
    """The one-iteration arm with the same total number of training steps."""
    return replace(cfg, max_iterations=1, steps_per_m_step=cfg.steps_per_m_step * cfg.max_iterations)
