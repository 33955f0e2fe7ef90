"""Note-level onset evaluation.

``match_notes`` scores an estimate against a reference with a maximum
cardinality matching between same-pitch notes whose onsets differ by at most
the tolerance. ``f_histogram`` drops the timing constraint and only compares
per-pitch counts.
"""

from __future__ import annotations

import csv
import io
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .events import EventTrack

DEFAULT_TOLERANCE_S = 0.05
# absorbs float representation error on the closed tolerance boundary
_TOL_EPS = 1e-9


@dataclass(frozen=True)
class EvalResult:
    precision: float
    recall: float
    f_score: float
    matched: int
    ref_count: int
    est_count: int
    per_track: tuple = field(default=(), compare=False, repr=False)

    @classmethod
    def from_counts(cls, matched: int, ref_count: int, est_count: int, per_track=()) -> EvalResult:
        precision = matched / est_count if est_count else 1.0
        recall = matched / ref_count if ref_count else 1.0
        f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(precision, recall, f, matched, ref_count, est_count, tuple(per_track))


def hopcroft_karp(adjacency: Sequence[Sequence[int]], n_right: int) -> list[int]:
    """Maximum bipartite matching.

    Args:
        adjacency: for each left vertex, the right vertices it may pair with.
        n_right: number of right vertices.

    Returns:
        ``match_left`` where ``match_left[u]`` is the right partner of ``u`` or -1.
    """
    n_left = len(adjacency)
    match_l = [-1] * n_left
    match_r = [-1] * n_right
    inf = n_left + n_right + 1
    dist = [0] * n_left

    def bfs() -> bool:
        q = deque()
        for u in range(n_left):
            if match_l[u] < 0:
                dist[u] = 0
                q.append(u)
            else:
                dist[u] = inf
        found = False
        while q:
            u = q.popleft()
            for v in adjacency[u]:
                w = match_r[v]
                if w < 0:
                    found = True
                elif dist[w] == inf:
                    dist[w] = dist[u] + 1
                    q.append(w)
        return found

    def dfs(u: int) -> bool:
        # iterative augmenting-path search along the BFS layering
        stack = [(u, iter(adjacency[u]))]
        path = []
        while stack:
            x, it = stack[-1]
            advanced = False
            for v in it:
                w = match_r[v]
                if w < 0:
                    path.append((x, v))
                    for a, b in path:
                        match_l[a] = b
                        match_r[b] = a
                    return True
                if dist[w] == dist[x] + 1:
                    path.append((x, v))
                    stack.append((w, iter(adjacency[w])))
                    advanced = True
                    break
            if not advanced:
                dist[x] = inf
                stack.pop()
                if path:
                    path.pop()
        return False

    while bfs():
        for u in range(n_left):
            if match_l[u] < 0:
                dfs(u)
    return match_l


def _pitch_groups(track: EventTrack) -> dict[int, np.ndarray]:
    groups: dict[int, list[float]] = {}
    for e in track.events:
        groups.setdefault(e.pitch, []).append(e.onset_s)
    return {p: np.array(v) for p, v in groups.items()}


def count_matches(reference: EventTrack, estimate: EventTrack, tol_s: float) -> int:
    ref = _pitch_groups(reference)
    est = _pitch_groups(estimate)
    total = 0
    for p, r_on in ref.items():
        e_on = est.get(p)
        if e_on is None:
            continue
        close = np.abs(r_on[:, None] - e_on[None, :]) <= tol_s + _TOL_EPS
        adjacency = [np.nonzero(row)[0].tolist() for row in close]
        total += sum(m >= 0 for m in hopcroft_karp(adjacency, e_on.size))
    return total


def match_notes(reference: EventTrack, estimate: EventTrack,
                tol_s: float = DEFAULT_TOLERANCE_S) -> EvalResult:
    if not tol_s > 0:
        raise ValueError(f"tolerance must be positive, got {tol_s}")
    matched = count_matches(reference, estimate, tol_s)
    return EvalResult.from_counts(matched, len(reference), len(estimate))


def f_histogram(reference: EventTrack, estimate: EventTrack) -> EvalResult:
    p = max(reference.pitch_count, estimate.pitch_count)
    ref = np.bincount(reference.pitches, minlength=p)
    est = np.bincount(estimate.pitches, minlength=p)
    matched = int(np.minimum(ref, est).sum())
    return EvalResult.from_counts(matched, len(reference), len(estimate))


def evaluate_corpus(pairs, tol_s: float | None = DEFAULT_TOLERANCE_S,
                    track_ids: Sequence[str] | None = None) -> EvalResult:
    """Micro-averaged scores over ``(reference, estimate)`` pairs.

    ``tol_s=None`` scores with the timing-free histogram metric instead.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no tracks to evaluate")
    if track_ids is None:
        track_ids = [str(i) for i in range(len(pairs))]
    per_track = []
    for tid, (ref, est) in zip(track_ids, pairs):
        r = f_histogram(ref, est) if tol_s is None else match_notes(ref, est, tol_s)
        per_track.append((tid, r))
    matched = sum(r.matched for _, r in per_track)
    n_ref = sum(r.ref_count for _, r in per_track)
    n_est = sum(r.est_count for _, r in per_track)
    return EvalResult.from_counts(matched, n_ref, n_est, per_track)


# -- reports -----------------------------------------------------------------

REPORT_FIELDS = ["track_id", "precision", "recall", "f_score", "matched", "ref_count", "est_count"]


def _row(track_id: str, r: EvalResult, prefix: str = "") -> dict:
    d = asdict(r)
    d.pop("per_track")
    return {"track_id": track_id, **{prefix + k: d[k] for k in REPORT_FIELDS[1:]}}


def report_rows(onset: EvalResult, histogram: EvalResult | None = None) -> list[dict]:
    """One row per track plus a final ``__corpus__`` row; histogram columns
    are prefixed ``hist_``."""
    items = list(onset.per_track) + [("__corpus__", onset)]
    hist_items = None
    if histogram is not None:
        hist_items = list(histogram.per_track) + [("__corpus__", histogram)]
    rows = []
    for i, (tid, r) in enumerate(items):
        row = _row(tid, r)
        if hist_items is not None:
            row.update({k: v for k, v in _row(tid, hist_items[i][1], "hist_").items() if k != "track_id"})
        rows.append(row)
    return rows


def report_json(rows: list[dict]) -> str:
    per_track = [r for r in rows if r["track_id"] != "__corpus__"]
    corpus = next(r for r in rows if r["track_id"] == "__corpus__")
    return json.dumps({"tracks": per_track, "corpus": corpus}, indent=1, sort_keys=True) + "\n"


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
