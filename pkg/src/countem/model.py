"""Frame-level onset transcriber.

A one-hidden-layer network maps the features of frame t and its +-C
neighbours (zero padded at the track edges) to one logistic output per
pitch. Training minimises a positive-weighted binary cross-entropy with Adam.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import DEFAULT_FRAME_LEN_S, FrameGrid, LabelMatrix, Posteriorgram

PARAM_NAMES = ("w1", "b1", "w2", "b2")
CLAMP = 1e-7
CKPT_MAGIC = b"CTEM"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHIIIIddddQ")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    positive_weight: float = 2.0

    def __post_init__(self):
        if not self.positive_weight >= 1:
            raise ValueError("positive_weight must be >= 1")


@dataclass
class TranscriberState:
    params: dict[str, np.ndarray]
    context: int = 2
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name in PARAM_NAMES:
            if name not in self.params:
                raise ValueError(f"missing parameter {name}")
            self.m.setdefault(name, np.zeros_like(self.params[name]))
            self.v.setdefault(name, np.zeros_like(self.params[name]))
            if self.m[name].shape != self.params[name].shape or self.v[name].shape != self.params[name].shape:
                raise ValueError(f"moment shape mismatch for {name}")
        d, h = self.params["w1"].shape
        if self.params["b1"].shape != (h,) or self.params["w2"].shape[0] != h:
            raise ValueError("inconsistent hidden layer shapes")
        if self.params["b2"].shape != (self.params["w2"].shape[1],):
            raise ValueError("inconsistent output layer shapes")
        if d % (2 * self.context + 1):
            raise ValueError("input width is not a multiple of the context span")

    @property
    def n_features(self) -> int:
        return self.params["w1"].shape[0] // (2 * self.context + 1)

    @property
    def hidden(self) -> int:
        return self.params["w1"].shape[1]

    @property
    def pitch_count(self) -> int:
        return self.params["w2"].shape[1]

    def copy(self) -> TranscriberState:
        return replace(
            self,
            params={k: a.copy() for k, a in self.params.items()},
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
        )

    def astype(self, dtype) -> TranscriberState:
        cast = lambda d: {k: a.astype(dtype) for k, a in d.items()}  # noqa: E731
        return replace(self, params=cast(self.params), m=cast(self.m), v=cast(self.v))


def init_state(n_features: int, pitch_count: int = 88, hidden: int = 256, context: int = 2,
               seed: int = 0, lr: float = 5e-4, output_bias: float = -4.0) -> TranscriberState:
    """He-initialised weights; output biases start low because onsets are rare."""
    rng = np.random.default_rng(seed)
    d = (2 * context + 1) * n_features
    params = {
        "w1": (rng.standard_normal((d, hidden)) * np.sqrt(2.0 / d)).astype(np.float32),
        "b1": np.zeros(hidden, dtype=np.float32),
        "w2": (rng.standard_normal((hidden, pitch_count)) * np.sqrt(1.0 / hidden)).astype(np.float32),
        "b2": np.full(pitch_count, output_bias, dtype=np.float32),
    }
    return TranscriberState(params, context=context, lr=lr)


def zero_state(n_features: int, pitch_count: int = 88, hidden: int = 256, context: int = 2) -> TranscriberState:
    state = init_state(n_features, pitch_count, hidden, context)
    for a in state.params.values():
        a[...] = 0
    return state


def context_stack(features: np.ndarray, context: int) -> np.ndarray:
    """Rows of ``features`` with +-context neighbours concatenated; shape (T, (2C+1)F)."""
    f = np.asarray(features)
    t_len = f.shape[0]
    padded = np.pad(f, ((context, context), (0, 0)))
    idx = np.arange(t_len)[:, None] + np.arange(2 * context + 1)[None, :]
    return padded[idx].reshape(t_len, -1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def forward(state: TranscriberState, x: np.ndarray):
    p = state.params
    pre = x @ p["w1"] + p["b1"]
    hid = np.maximum(pre, 0)
    logits = hid @ p["w2"] + p["b2"]
    return logits, (x, pre, hid)


def backward(state: TranscriberState, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    x, pre, hid = cache
    p = state.params
    grads = {"w2": hid.T @ dlogits, "b2": dlogits.sum(axis=0)}
    dhid = (dlogits @ p["w2"].T) * (pre > 0)
    grads["w1"] = x.T @ dhid
    grads["b1"] = dhid.sum(axis=0)
    return grads


def predict(state: TranscriberState, features: np.ndarray,
            frame_len_s: float = DEFAULT_FRAME_LEN_S) -> Posteriorgram:
    f = np.asarray(features, dtype=state.params["w1"].dtype)
    if f.ndim != 2 or f.shape[1] != state.n_features:
        raise ValueError(f"features of shape {f.shape} do not match model width {state.n_features}")
    logits, _ = forward(state, context_stack(f, state.context))
    grid = FrameGrid(f.shape[0], state.pitch_count, frame_len_s)
    return Posteriorgram(grid, _sigmoid(logits.astype(np.float64)))


def weighted_bce(z, y, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Mean over all entries of ``M * BCE(z, y)`` with ``M = w*y + (1-y)``.

    Returns the loss and its gradient with respect to ``z``. Predictions are
    clamped to ``[1e-7, 1 - 1e-7]``; the gradient is zero where the clamp is
    active.
    """
    zv = np.asarray(z.values if isinstance(z, Posteriorgram) else z, dtype=np.float64)
    yv = np.asarray(y.values if isinstance(y, LabelMatrix) else y, dtype=np.float64)
    if zv.shape != yv.shape:
        raise ValueError(f"shape mismatch: {zv.shape} vs {yv.shape}")
    n = zv.size
    mask = cfg.positive_weight * yv + (1.0 - yv)
    zc = np.clip(zv, CLAMP, 1.0 - CLAMP)
    terms = -(yv * np.log(zc) + (1.0 - yv) * np.log1p(-zc))
    loss = float((mask * terms).sum() / n)
    inside = (zv > CLAMP) & (zv < 1.0 - CLAMP)
    grad = mask * (-yv / zc + (1.0 - yv) / (1.0 - zc)) / n * inside
    return loss, grad


def _loss_and_logit_grad(logits: np.ndarray, y: np.ndarray, cfg: LossConfig):
    """Weighted BCE evaluated from logits, gradient taken w.r.t. the logits.

    Equivalent to chaining ``weighted_bce`` through the logistic function,
    written in the cancelled form ``M * (z - y) / N``.
    """
    logits = logits.astype(np.float64)
    z = _sigmoid(logits)
    mask = cfg.positive_weight * y + (1.0 - y)
    zc = np.clip(z, CLAMP, 1.0 - CLAMP)
    n = z.size
    loss = float((mask * -(y * np.log(zc) + (1.0 - y) * np.log1p(-zc))).sum() / n)
    return loss, mask * (z - y) / n


# -- optimisation ------------------------------------------------------------

def _adam_update(state: TranscriberState, grads: dict[str, np.ndarray]):
    for name in PARAM_NAMES:
        g = grads[name]
        if g.shape != state.params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in PARAM_NAMES:
        g = grads[name].astype(state.params[name].dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        state.params[name] -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(m.dtype)


def adam_step(state: TranscriberState, grads: dict[str, np.ndarray]) -> TranscriberState:
    new = state.copy()
    _adam_update(new, grads)
    return new


class FrameDataset:
    """Frames of many tracks packed for fast mini-batch gathering."""

    def __init__(self, items: Sequence[tuple[np.ndarray, LabelMatrix | np.ndarray]], context: int):
        if not items:
            raise ValueError("empty dataset")
        self.context = context
        span = 2 * context + 1
        feats, labels, bases = [], [], []
        offset = 0
        for f, y in items:
            f = np.asarray(f, dtype=np.float32)
            yv = y.values if isinstance(y, LabelMatrix) else np.asarray(y)
            if yv.shape[0] != f.shape[0]:
                raise ValueError(f"{f.shape[0]} feature frames but {yv.shape[0]} label frames")
            feats.append(np.pad(f, ((context, context), (0, 0))))
            labels.append(yv.astype(np.float32))
            bases.append(offset + np.arange(f.shape[0]))
            offset += f.shape[0] + span - 1
        self.features = np.concatenate(feats)
        self.labels = np.concatenate(labels)
        self.bases = np.concatenate(bases)
        self.window = np.arange(span)

    def __len__(self):
        return self.labels.shape[0]

    def batch(self, idx: np.ndarray):
        rows = self.bases[idx][:, None] + self.window[None, :]
        return self.features[rows].reshape(idx.size, -1), self.labels[idx]


def train(state: TranscriberState, dataset, steps: int, batch_frames: int = 512,
          cfg: LossConfig = LossConfig(), seed: int = 0,
          lr_decay: bool = False) -> tuple[TranscriberState, list[float]]:
    """Run ``steps`` Adam updates on uniformly sampled frame mini-batches.

    ``dataset`` is a FrameDataset or a sequence of ``(features, labels)``
    pairs. With ``lr_decay`` the step size falls linearly to zero over the
    call. The input state is left untouched.
    """
    state = state.copy()
    if steps <= 0:
        return state, []
    data = dataset if isinstance(dataset, FrameDataset) else FrameDataset(dataset, state.context)
    if data.features.shape[1] != state.n_features:
        raise ValueError(f"dataset has {data.features.shape[1]} features, model expects {state.n_features}")
    if data.labels.shape[1] != state.pitch_count:
        raise ValueError("label pitch count does not match the model")
    rng = np.random.default_rng(seed)
    trace = []
    base_lr = state.lr
    for i in range(steps):
        if lr_decay:
            state.lr = base_lr * (1.0 - i / steps)
        idx = rng.integers(0, len(data), size=batch_frames)
        x, y = data.batch(idx)
        logits, cache = forward(state, x)
        loss, dlogits = _loss_and_logit_grad(logits, y, cfg)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {state.step}")
        trace.append(loss)
        _adam_update(state, backward(state, cache, dlogits.astype(np.float32)))
    state.lr = base_lr
    return state, trace


def loss_on(state: TranscriberState, features: np.ndarray, y, cfg: LossConfig = LossConfig()) -> float:
    z = predict(state, features)
    return weighted_bce(z, y, cfg)[0]


def grad_check(state: TranscriberState, features: np.ndarray, y, cfg: LossConfig = LossConfig(),
               n_probe: int = 64, step: float = 1e-5, seed: int = 0, abs_floor: float = 1e-6) -> float:
    """Largest relative error between backprop gradients and central
    differences over ``n_probe`` randomly chosen parameters (float64).

    Probes whose perturbation flips the sign of any hidden pre-activation
    straddle a ReLU kink, where the loss is not differentiable; they are
    skipped. ``abs_floor`` bounds the denominator of the relative error from
    below so components far smaller than the differencing round-off do not
    dominate.
    """
    s = state.astype(np.float64)
    yv = np.asarray(y.values if isinstance(y, LabelMatrix) else y, dtype=np.float64)
    x = context_stack(np.asarray(features, dtype=np.float64), s.context)

    def evaluate():
        logits, cache = forward(s, x)
        z = _sigmoid(logits)
        return weighted_bce(z, yv, cfg), z, cache

    (_, dz), z, cache = evaluate()
    grads = backward(s, cache, dz * z * (1.0 - z))
    active = cache[1] > 0

    rng = np.random.default_rng(seed)
    sizes = np.array([s.params[n].size for n in PARAM_NAMES])
    flat = rng.choice(sizes.sum(), size=min(n_probe, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for k in flat:
        i = int(np.searchsorted(bounds, k, side="right"))
        name = PARAM_NAMES[i]
        j = np.unravel_index(int(k - (bounds[i - 1] if i else 0)), s.params[name].shape)
        orig = s.params[name][j]
        s.params[name][j] = orig + step
        (up, _), _, cache_up = evaluate()
        s.params[name][j] = orig - step
        (down, _), _, cache_down = evaluate()
        s.params[name][j] = orig
        if not (np.array_equal(cache_up[1] > 0, active) and np.array_equal(cache_down[1] > 0, active)):
            continue
        numeric = (up - down) / (2 * step)
        analytic = grads[name][j]
        denom = max(abs(numeric), abs(analytic), abs_floor)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


# -- checkpoints -------------------------------------------------------------

def encode_checkpoint(state: TranscriberState) -> bytes:
    header = _CKPT_HEADER.pack(
        CKPT_MAGIC, CKPT_VERSION, state.n_features, state.context, state.hidden, state.pitch_count,
        state.lr, state.beta1, state.beta2, state.eps, state.step,
    )
    blocks = [np.ascontiguousarray(d[n], dtype="<f4").tobytes()
              for d in (state.params, state.m, state.v) for n in PARAM_NAMES]
    return header + b"".join(blocks)


def decode_checkpoint(data: bytes) -> TranscriberState:
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointError("checkpoint shorter than its header")
    magic, version, n_feat, context, hidden, pitches, lr, b1, b2, eps, step = _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    d = (2 * context + 1) * n_feat
    shapes = {"w1": (d, hidden), "b1": (hidden,), "w2": (hidden, pitches), "b2": (pitches,)}
    total = 3 * sum(int(np.prod(s)) for s in shapes.values()) * 4
    body = memoryview(data)[_CKPT_HEADER.size:]
    if len(body) != total:
        raise CheckpointError(f"payload has {len(body)} bytes, expected {total}")
    pos = 0
    groups = []
    for _ in range(3):
        group = {}
        for name in PARAM_NAMES:
            n = int(np.prod(shapes[name]))
            group[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shapes[name]).astype(np.float32)
            pos += 4 * n
        groups.append(group)
    return TranscriberState(groups[0], context=context, lr=lr, beta1=b1, beta2=b2, eps=eps,
                            m=groups[1], v=groups[2], step=step)


def save_checkpoint(path, state: TranscriberState):
    from ._io import atomic_write_bytes

    atomic_write_bytes(Path(path), encode_checkpoint(state))


def load_checkpoint(path) -> TranscriberState:
    return decode_checkpoint(Path(path).read_bytes())
