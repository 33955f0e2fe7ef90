"""Run configuration: nested dataclass sections loaded from JSON.

Every section has defaults except ``seed``, which must come from the file
or the command line. ``apply_overrides`` accepts dotted ``key=value`` pairs
whose values are parsed as JSON when possible (``em.max_iterations=1``,
``histogram.window=10``, ``score.arpeggio_order=ascending``).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .em import EMConfig
from .events import FULL_TRACK, WindowSpec
from .model import LossConfig
from .peakpick import PeakPickConfig
from .synth import TIMBRE_A, TIMBRE_B, FeatureConfig, ScoreGenConfig, TimbreConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSection:
    pretrain_tracks: int = 100
    train_tracks: int = 100
    test_tracks: int = 20


@dataclass(frozen=True)
class AugmentSection:
    # pitch-shifted copies per training track; integer part in [-max_shift, max_shift] \ {0}
    copies: int = 2
    max_shift: int = 5
    fractional: float = 0.1


@dataclass(frozen=True)
class ModelSection:
    hidden: int = 256
    context: int = 2
    lr: float = 5e-4


@dataclass(frozen=True)
class PretrainSection:
    steps: int = 3000
    batch_frames: int = 512
    lr_decay: bool = False


@dataclass(frozen=True)
class EMSection:
    max_iterations: int = 5
    steps_per_m_step: int = 600
    batch_frames: int = 512
    tol: float = 1e-3
    gate_on_distance: bool = True
    relabel_each_iteration: bool = True
    lr_decay: bool = True


@dataclass(frozen=True)
class HistogramSection:
    window: float | str = FULL_TRACK
    noise_alpha: float = 0.0
    # None: use the run seed
    noise_seed: int | None = None

    @property
    def window_spec(self) -> WindowSpec:
        return WindowSpec.parse(self.window)


@dataclass(frozen=True)
class DecodeSection:
    # "threshold": local peaks above a fixed level; "histogram": count-constrained picking
    mode: str = "threshold"
    threshold: float = 0.5
    radius: int = 1
    tolerance_s: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    seed: int
    corpus: CorpusSection = CorpusSection()
    score: ScoreGenConfig = ScoreGenConfig()
    timbre_a: TimbreConfig = TIMBRE_A
    timbre_b: TimbreConfig = TIMBRE_B
    features: FeatureConfig = FeatureConfig()
    augment: AugmentSection = AugmentSection()
    model: ModelSection = ModelSection()
    pretrain: PretrainSection = PretrainSection()
    loss: LossConfig = LossConfig()
    peakpick: PeakPickConfig = PeakPickConfig()
    em: EMSection = EMSection()
    histogram: HistogramSection = HistogramSection()
    decode: DecodeSection = DecodeSection()
    threads: int | None = field(default=None)

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        c = self.corpus
        if min(c.pretrain_tracks, c.train_tracks) < 1 or c.test_tracks < 0:
            raise ValueError("corpus needs at least one pretrain and one train track")
        a = self.augment
        if a.copies < 0 or not 1 <= a.max_shift <= 5 or not 0 <= a.fractional < 0.5:
            raise ValueError("augment: copies >= 0, max_shift in [1, 5], fractional in [0, 0.5)")
        if self.model.hidden < 1 or self.model.context < 0 or not self.model.lr > 0:
            raise ValueError("model: hidden >= 1, context >= 0, lr > 0")
        if self.pretrain.steps < 0 or self.pretrain.batch_frames < 1:
            raise ValueError("pretrain: steps >= 0, batch_frames >= 1")
        h = self.histogram
        self.histogram.window_spec  # raises on a bad window
        if not 0 <= h.noise_alpha < 1:
            raise ValueError("histogram.noise_alpha must lie in [0, 1)")
        d = self.decode
        if d.mode not in ("threshold", "histogram"):
            raise ValueError(f"decode.mode must be 'threshold' or 'histogram', got {d.mode!r}")
        if not 0 <= d.threshold <= 1 or d.radius < 1 or not d.tolerance_s > 0:
            raise ValueError("decode: threshold in [0, 1], radius >= 1, tolerance_s > 0")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be >= 1")
        self.score.validate()
        self.em_config()

    def em_config(self, seed: int | None = None) -> EMConfig:
        e = self.em
        return EMConfig(
            max_iterations=e.max_iterations, steps_per_m_step=e.steps_per_m_step,
            batch_frames=e.batch_frames, tol=e.tol, peakpick=self.peakpick, loss=self.loss,
            gate_on_distance=e.gate_on_distance, relabel_each_iteration=e.relabel_each_iteration,
            decode_threshold=self.decode.threshold, lr_decay=e.lr_decay,
            seed=self.seed if seed is None else seed,
        )


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{key}")
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        path = f"{where}.{key}" if where else key
        if dataclasses.is_dataclass(default):
            value = _build(type(default), {**_plain(default), **value} if isinstance(value, dict) else value, path)
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        elif hasattr(default, "value") and isinstance(value, str):  # enums
            value = type(default)(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _plain(obj):
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = _plain(v)
        elif hasattr(v, "value") and not isinstance(v, (int, float, str)):
            v = v.value
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def from_dict(data: dict) -> RunConfig:
    if "seed" not in data or data["seed"] is None:
        raise ConfigError("a seed is required (config key 'seed' or --seed)")
    return _build(RunConfig, data, "")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(text)
    return data


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if seed is not None:
        data["seed"] = seed  # set first so overrides below cannot treat it as a section
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    return from_dict(data)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"
