"""Synthetic scores, additive-harmonic audio and log-band spectral features.

The renderer stands in for real recordings: every note is a sum of harmonic
sinusoids under an attack/exponential-decay envelope. Two stock timbres
(``TIMBRE_A`` bright and percussive, ``TIMBRE_B`` mellow with a slow attack)
give a source and a target domain.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .events import DEFAULT_PITCH_COUNT, MIDI_OFFSET, EventTrack, NoteEvent
from .grid import DEFAULT_FRAME_LEN_S, FrameGrid, LabelMatrix, Posteriorgram

MIN_SAME_PITCH_GAP_S = 0.1
ARPEGGIO_GAP_S = (0.04, 0.12)
PEAK_LEVEL = 0.9


class InfeasibleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreGenConfig:
    track_len_s: float = 20.0
    notes_per_s: float = 4.0
    polyphony: int = 3
    pitch_lo: int = 34  # MIDI 55
    pitch_hi: int = 58  # MIDI 79, inclusive
    chord_prob: float = 0.25
    arpeggio_prob: float = 0.0
    # arpeggio order: "random", or "ascending" for the chord-ordered twin
    arpeggio_order: str = "random"
    # chords and arpeggios never straddle a bar line
    bar_s: float = 2.0
    velocity_range: tuple[int, int] = (50, 110)
    pitch_count: int = DEFAULT_PITCH_COUNT
    seed: int = 0

    def validate(self):
        if not self.track_len_s > 1.0:
            raise InfeasibleConfigError("track_len_s must exceed 1 s")
        if not 0 <= self.pitch_lo <= self.pitch_hi < self.pitch_count:
            raise InfeasibleConfigError(f"bad pitch range [{self.pitch_lo}, {self.pitch_hi}]")
        if not (0 <= self.chord_prob and 0 <= self.arpeggio_prob and self.chord_prob + self.arpeggio_prob <= 1):
            raise InfeasibleConfigError("chord_prob + arpeggio_prob must lie in [0, 1]")
        if self.polyphony < 1 or self.notes_per_s <= 0:
            raise InfeasibleConfigError("polyphony and notes_per_s must be positive")
        if self.arpeggio_order not in ("random", "ascending"):
            raise InfeasibleConfigError(f"unknown arpeggio_order {self.arpeggio_order!r}")
        n_pitches = self.pitch_hi - self.pitch_lo + 1
        if self.polyphony > n_pitches:
            raise InfeasibleConfigError("polyphony exceeds the pitch range")
        # a quarter of the separation-limited capacity keeps sampling far from saturation
        if self.notes_per_s > 0.25 * n_pitches / MIN_SAME_PITCH_GAP_S:
            raise InfeasibleConfigError(
                f"{self.notes_per_s} notes/s is infeasible over {n_pitches} pitches "
                f"with {MIN_SAME_PITCH_GAP_S}s same-pitch separation")
        if self.bar_s <= ARPEGGIO_GAP_S[1] * self.polyphony:
            raise InfeasibleConfigError("bar_s too short to hold an arpeggio")


def gen_score(cfg: ScoreGenConfig) -> EventTrack:
    """Sample a random onset track.

    Onset groups arrive as a Poisson process. A group is a single note, a
    block chord, or an arpeggio (the chord's notes spread 40-120 ms apart).
    Random draws are identical for both ``arpeggio_order`` settings, so the
    two variants differ only in the order of arpeggiated notes.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    multi = cfg.chord_prob + cfg.arpeggio_prob
    mean_size = (1 - multi) + multi * (2 + cfg.polyphony) / 2 if cfg.polyphony > 1 else 1.0
    gap = mean_size / cfg.notes_per_s
    end = cfg.track_len_s - 0.5
    last_onset = np.full(cfg.pitch_count, -np.inf)
    events: list[NoteEvent] = []
    t = float(rng.uniform(0.05, 0.5))
    while t < end:
        style = rng.random()
        size = int(rng.integers(2, cfg.polyphony + 1)) if cfg.polyphony > 1 else 1
        spacings = rng.uniform(*ARPEGGIO_GAP_S, size=max(size - 1, 0))
        order = rng.permutation(size)
        jitter = rng.random(cfg.pitch_hi - cfg.pitch_lo + 1)
        velocities = rng.integers(cfg.velocity_range[0], cfg.velocity_range[1] + 1, size=size)
        if style < cfg.chord_prob:
            offsets = np.zeros(size)
        elif style < multi:
            offsets = np.concatenate([[0.0], np.cumsum(spacings)])
        else:
            size, offsets = 1, np.zeros(1)
        start = t
        bar_end = (math.floor(start / cfg.bar_s) + 1) * cfg.bar_s
        if start + offsets[-1] >= bar_end:
            start = bar_end
        if start + offsets[-1] >= end:
            break
        lo, hi = cfg.pitch_lo, cfg.pitch_hi
        allowed = np.nonzero(last_onset[lo:hi + 1] <= start - MIN_SAME_PITCH_GAP_S)[0]
        if allowed.size:
            # random subset via ranked jitter keeps the draw count fixed
            pick = allowed[np.argsort(jitter[allowed], kind="stable")[:size]] + lo
            pick = np.sort(pick)
            if offsets[-1] > 0 and cfg.arpeggio_order == "random":
                pick = pick[order[order < pick.size]]
            for j, p in enumerate(pick):
                events.append(NoteEvent(round(start + offsets[j], 6), int(p), int(velocities[j])))
            # book the whole group at its last onset so the availability of a
            # pitch never depends on the order within an arpeggio
            last_onset[pick] = round(start + offsets[-1], 6)
        t = start + offsets[-1] + float(rng.exponential(gap))
    return EventTrack(tuple(events), cfg.track_len_s, cfg.pitch_count)


# -- audio -------------------------------------------------------------------

@dataclass(frozen=True)
class TimbreConfig:
    harmonic_count: int = 8
    harmonic_decay: float = 1.0  # amplitude of harmonic k is k ** -harmonic_decay
    attack_ms: float = 3.0
    decay_rate: float = 3.0  # 1/s, exponential
    noise_floor: float = 1e-4
    sample_rate: int = 16000

    def __post_init__(self):
        if self.harmonic_count < 1:
            raise ValueError("harmonic_count must be >= 1")
        if self.sample_rate <= 0 or self.attack_ms < 0 or self.decay_rate <= 0:
            raise ValueError("invalid timbre parameters")


TIMBRE_A = TimbreConfig(harmonic_count=10, harmonic_decay=0.8, attack_ms=2.0, decay_rate=4.0)
TIMBRE_B = TimbreConfig(harmonic_count=8, harmonic_decay=1.0, attack_ms=10.0, decay_rate=3.0)


def midi_frequency(pitch: int | float) -> float:
    return 440.0 * 2.0 ** ((pitch + MIDI_OFFSET - 69) / 12.0)


@dataclass
class RenderStats:
    truncated_harmonics: int = 0


def _envelope(n: int, timbre: TimbreConfig) -> np.ndarray:
    sr = timbre.sample_rate
    t = np.arange(n) / sr
    attack = timbre.attack_ms / 1000.0
    env = np.exp(-timbre.decay_rate * np.maximum(t - attack, 0.0))
    if attack > 0:
        env *= np.minimum(t / attack, 1.0)
    return env


def _harmonic_sum(phase: np.ndarray, amps: np.ndarray) -> np.ndarray:
    """sum_k amps[k-1] * sin(k * phase) via the Chebyshev recurrence."""
    out = np.zeros_like(phase)
    if amps.size == 0:
        return out
    s_prev = np.zeros_like(phase)
    s_cur = np.sin(phase)
    two_cos = 2.0 * np.cos(phase)
    for a in amps:
        out += a * s_cur
        s_prev, s_cur = s_cur, two_cos * s_cur - s_prev
    return out


def render_audio(track: EventTrack, timbre: TimbreConfig, seed: int = 0, pitch_shift: float = 0.0,
                 normalize: bool = True, stats: RenderStats | None = None) -> np.ndarray:
    """Additive synthesis of ``track``; returns float64 mono samples.

    Harmonics at or above Nyquist are skipped and counted in ``stats``.
    With ``normalize`` the mix is scaled to a 0.9 peak before the noise floor
    is added.
    """
    sr = timbre.sample_rate
    n_total = int(round(track.duration_s * sr))
    out = np.zeros(n_total)
    # render until the envelope has decayed by 60 dB
    note_len = int(math.ceil(sr * (timbre.attack_ms / 1000.0 + math.log(1000.0) / timbre.decay_rate)))
    env_full = _envelope(note_len, timbre)
    ks = np.arange(1, timbre.harmonic_count + 1)
    amps = ks ** -timbre.harmonic_decay
    ratio = 2.0 ** (pitch_shift / 12.0)
    truncated = 0
    for e in track.events:
        start = int(round(e.onset_s * sr))
        n = min(note_len, n_total - start)
        if n <= 0:
            continue
        f0 = midi_frequency(e.pitch) * ratio
        keep = ks * f0 < sr / 2
        truncated += int((~keep).sum())
        partials = _harmonic_sum(2 * np.pi * f0 * np.arange(n) / sr, amps[keep])
        gain = e.velocity / 127.0 if e.velocity else 1.0
        out[start:start + n] += gain * partials * env_full[:n]
    if stats is not None:
        stats.truncated_harmonics += truncated
    if normalize:
        peak = np.abs(out).max(initial=0.0)
        if peak > 0:
            out *= PEAK_LEVEL / peak
    if timbre.noise_floor > 0:
        out += timbre.noise_floor * np.random.default_rng(seed).standard_normal(n_total)
    return out


def pitch_shift_render(track: EventTrack, timbre: TimbreConfig, shift_semitones: float,
                       seed: int = 0) -> tuple[np.ndarray, EventTrack]:
    """Render with every fundamental scaled by 2**(shift/12).

    Labels move by the nearest whole semitone; onset times are unchanged.
    """
    if abs(shift_semitones) > 5.1:
        raise ValueError(f"shift {shift_semitones} outside +-5.1 semitones")
    try:
        shifted = track.transpose(int(round(shift_semitones)))
    except ValueError as exc:
        raise ValueError(f"transposition by {shift_semitones} leaves the pitch range: {exc}") from None
    return render_audio(track, timbre, seed=seed, pitch_shift=shift_semitones), shifted


def quantize_pcm16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)


def write_wav(path, samples: np.ndarray, sample_rate: int = 16000):
    """Write mono 16-bit PCM. Float input is quantized first."""
    from ._io import atomic_write_bytes
    import io

    pcm = samples if samples.dtype == np.int16 else quantize_pcm16(samples)
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.astype("<i2").tobytes())
    atomic_write_bytes(Path(path), buf.getvalue())


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return float samples in [-1, 1) and the sample rate."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        sr = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, sr


# -- features ----------------------------------------------------------------

@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    window_samples: int = 1024
    n_bands: int = 96
    fmin: float = 30.0
    fmax: float = 8000.0
    log_offset: float = 1e-3
    frame_len_s: float = DEFAULT_FRAME_LEN_S

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_len_s))

    def __post_init__(self):
        hop = self.sample_rate * self.frame_len_s
        if abs(hop - round(hop)) > 1e-9:
            raise ValueError("hop must be a whole number of samples")
        if self.window_samples < round(hop):
            raise ValueError("window shorter than hop")


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def band_centers(cfg: FeatureConfig) -> np.ndarray:
    mels = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_bands + 2)
    return _mel_to_hz(mels)[1:-1]


def filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular mel-spaced bands over rfft bins, shape (bins, bands)."""
    freqs = np.fft.rfftfreq(cfg.window_samples, 1.0 / cfg.sample_rate)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_bands + 2))
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    f = freqs[:, None]
    up = (f - lo) / (mid - lo)
    down = (hi - f) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def frame_count_for(n_samples: int, cfg: FeatureConfig) -> int:
    return max(1, math.ceil(n_samples / cfg.hop_samples))


def extract_features(waveform: np.ndarray, cfg: FeatureConfig = FeatureConfig(),
                     frame_count: int | None = None) -> np.ndarray:
    """Log-compressed band energies, one row per frame.

    The analysis window of frame t ends where the frame ends, so frame t
    only hears audio up to ``(t+1) * hop``.
    """
    x = np.asarray(waveform, dtype=np.float64)
    win, hop = cfg.window_samples, cfg.hop_samples
    if x.size < win:
        raise ValueError(f"waveform of {x.size} samples shorter than the {win}-sample window")
    t_len = frame_count if frame_count is not None else frame_count_for(x.size, cfg)
    needed = (t_len - 1) * hop + win
    padded = np.zeros(max(needed, x.size + win - hop))
    padded[win - hop:win - hop + x.size] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop][:t_len]
    window = np.hanning(win + 1)[:-1]
    mag = np.abs(np.fft.rfft(frames * window, axis=1)) * (2.0 / window.sum())
    bands = mag @ filterbank(cfg)
    return np.log1p(bands / cfg.log_offset).astype(np.float32)


# -- oracle posteriorgrams ---------------------------------------------------

def oracle_posteriorgram(y: LabelMatrix, blur_frames: int = 0, noise_eps: float = 0.0,
                         seed: int = 0) -> Posteriorgram:
    """Fake model output: a triangular bump (peak 1) around every true onset,
    overlapping bumps combined by maximum, plus uniform noise, clipped."""
    if not 0 <= noise_eps < 1:
        raise ValueError("noise_eps must lie in [0, 1)")
    z = y.values.astype(np.float64)
    t_len = z.shape[0]
    base = z.copy()
    for d in range(1, blur_frames + 1):
        w = 1.0 - d / (blur_frames + 1)
        z[d:] = np.maximum(z[d:], w * base[:t_len - d])
        z[:t_len - d] = np.maximum(z[:t_len - d], w * base[d:])
    if noise_eps > 0:
        z = z + np.random.default_rng(seed).uniform(0.0, noise_eps, size=z.shape)
    return Posteriorgram(y.grid, np.clip(z, 0.0, 1.0))


def grid_for(track: EventTrack, frame_len_s: float = DEFAULT_FRAME_LEN_S) -> FrameGrid:
    return FrameGrid.for_duration(track.duration_s, track.pitch_count, frame_len_s)


def with_seed(cfg: ScoreGenConfig, seed: int) -> ScoreGenConfig:
    return replace(cfg, seed=seed)
