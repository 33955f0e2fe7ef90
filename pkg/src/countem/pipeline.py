"""Corpus construction and training drivers shared by the CLI and experiments.

Splits use disjoint seed ranges: pretrain tracks are rendered with timbre A,
train and test tracks with timbre B. Audio is quantized to 16-bit PCM before
feature extraction so in-memory runs see exactly what the WAV files hold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .config import RunConfig
from .em import AugmentedCopy, EMTrack
from .events import EventTrack, WindowSpec, compute_histograms, corrupt_histograms
from .grid import LabelMatrix, events_to_labels
from .model import TranscriberState, init_state, train
from .synth import (FeatureConfig, TimbreConfig, extract_features, gen_score, grid_for,
                    pitch_shift_render, quantize_pcm16, render_audio)

logger = logging.getLogger(__name__)

SPLITS = ("pretrain", "train", "test")
_SPLIT_SEED_OFFSET = {"pretrain": 0, "train": 100_000, "test": 200_000}


@dataclass
class TrackData:
    track_id: str
    split: str
    events: EventTrack
    features: np.ndarray | None = None
    augmented: list[AugmentedCopy] = field(default_factory=list)
    seed: int = 0

    @property
    def labels(self) -> LabelMatrix:
        return events_to_labels(self.events, grid_for(self.events))


def track_seed(run_seed: int, split: str, index: int) -> int:
    return run_seed * 1_000_000 + _SPLIT_SEED_OFFSET[split] + index


def timbre_for(cfg: RunConfig, split: str) -> TimbreConfig:
    return cfg.timbre_a if split == "pretrain" else cfg.timbre_b


def split_size(cfg: RunConfig, split: str) -> int:
    return getattr(cfg.corpus, f"{split}_tracks")


def generate_scores(cfg: RunConfig, split: str) -> list[tuple[str, int, EventTrack]]:
    out = []
    for i in range(split_size(cfg, split)):
        seed = track_seed(cfg.seed, split, i)
        out.append((f"{split}-{i:04d}", seed, gen_score(replace(cfg.score, seed=seed))))
    return out


def audio_features(waveform: np.ndarray, events: EventTrack, fcfg: FeatureConfig) -> np.ndarray:
    pcm = quantize_pcm16(waveform).astype(np.float64) / 32767.0
    return extract_features(pcm, fcfg, grid_for(events, fcfg.frame_len_s).frame_count)


def shift_schedule(events: EventTrack, copies: int, max_shift: int, fractional: float,
                   seed: int) -> list[float]:
    """Audio shifts for the augmented copies of one track.

    Integer parts are drawn without replacement from the non-zero shifts that
    keep every note inside the pitch range, each plus a uniform fractional
    detuning.
    """
    if copies <= 0 or not len(events):
        return []
    lo, hi = int(events.pitches.min()), int(events.pitches.max())
    choices = [s for s in range(-max_shift, max_shift + 1)
               if s != 0 and lo + s >= 0 and hi + s < events.pitch_count]
    rng = np.random.default_rng([seed, 7])
    ints = rng.permutation(choices)[:copies]
    fracs = rng.uniform(-fractional, fractional, size=len(ints)) if fractional > 0 else np.zeros(len(ints))
    return [float(s + f) for s, f in zip(ints, fracs)]


def augment(events: EventTrack, timbre: TimbreConfig, fcfg: FeatureConfig, shifts: Sequence[float],
            seed: int) -> list[AugmentedCopy]:
    copies = []
    for s in shifts:
        wave, _ = pitch_shift_render(events, timbre, s, seed=seed)
        copies.append(AugmentedCopy(s, audio_features(wave, events, fcfg)))
    return copies


def build_split(cfg: RunConfig, split: str, with_augmentation: bool | None = None) -> list[TrackData]:
    """Render one split in memory (the same audio ``gen`` writes to disk)."""
    if with_augmentation is None:
        with_augmentation = split == "train"
    timbre = timbre_for(cfg, split)
    out = []
    for track_id, seed, events in generate_scores(cfg, split):
        feats = audio_features(render_audio(events, timbre, seed=seed), events, cfg.features)
        aug = []
        if with_augmentation:
            a = cfg.augment
            aug = augment(events, timbre, cfg.features,
                          shift_schedule(events, a.copies, a.max_shift, a.fractional, seed), seed)
        out.append(TrackData(track_id, split, events, feats, aug, seed))
    return out


def pretrain_model(cfg: RunConfig, tracks: Sequence[TrackData]) -> tuple[TranscriberState, list[float]]:
    """Supervised initialisation on ground-truth onsets."""
    state = init_state(cfg.features.n_bands, cfg.score.pitch_count, cfg.model.hidden,
                       cfg.model.context, seed=cfg.seed, lr=cfg.model.lr)
    pairs = [(t.features, t.labels) for t in tracks]
    p = cfg.pretrain
    return train(state, pairs, p.steps, p.batch_frames, cfg.loss, seed=cfg.seed + 1, lr_decay=p.lr_decay)


def histograms_for(events: EventTrack, window: WindowSpec, alpha: float = 0.0, noise_seed: int = 0,
                   track_index: int = 0):
    hists = compute_histograms(events, window)
    if alpha > 0:
        hists = corrupt_histograms(hists, alpha, (noise_seed, track_index))
    return hists


def em_tracks(tracks: Sequence[TrackData], window: WindowSpec, alpha: float = 0.0,
              noise_seed: int = 0, with_reference: bool = True) -> list[EMTrack]:
    out = []
    for i, t in enumerate(tracks):
        hists = histograms_for(t.events, window, alpha, noise_seed, i)
        out.append(EMTrack(t.track_id, t.features, hists, t.events if with_reference else None,
                           list(t.augmented)))
    return out


def test_pairs(tracks: Sequence[TrackData]) -> list[tuple[EventTrack, np.ndarray]]:
    return [(t.events, t.features) for t in tracks]
