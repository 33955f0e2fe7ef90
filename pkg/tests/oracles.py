"""Slow, obviously-correct reference implementations used by the tests."""

import functools

import numpy as np


def brute_local_peaks(column, radius):
    t_len = len(column)
    out = []
    for t in range(t_len):
        neighbours = [column[s] for s in range(t - radius, t + radius + 1) if s != t and 0 <= s < t_len]
        if all(column[t] >= v for v in neighbours):
            out.append(t)
    return out


def brute_peak_pick(values, counts, radius=1):
    """Returns (labels, used_fallback)."""
    t_len, p_len = values.shape
    out = np.zeros((t_len, p_len), dtype=np.uint8)
    used_fallback = False
    for p in range(p_len):
        k = int(counts[p])
        if k == 0:
            continue
        col = [float(v) for v in values[:, p]]
        peaks = brute_local_peaks(col, radius)
        ranked = sorted(peaks, key=lambda t: (-col[t], t))
        chosen = ranked[:k]
        if len(chosen) < k:
            used_fallback = True
            rest = sorted((t for t in range(t_len) if t not in peaks), key=lambda t: (-col[t], t))
            chosen += rest[:k - len(chosen)]
        for t in chosen:
            out[t, p] = 1
    return out, used_fallback


def brute_max_matching(ref, est, tol):
    """Maximum pitch-respecting matching size by exhaustive search over
    assignments (memoised on the set of used estimates).

    ``ref``/``est``: lists of (onset, pitch).
    """
    total = 0
    for pitch in {p for _, p in ref} | {p for _, p in est}:
        r = [t for t, p in ref if p == pitch]
        e = [t for t, p in est if p == pitch]

        @functools.lru_cache(maxsize=None)
        def best(i, used):
            if i == len(r):
                return 0
            value = best(i + 1, used)  # leave r[i] unmatched
            for j in range(len(e)):
                if not used >> j & 1 and abs(r[i] - e[j]) <= tol + 1e-9:
                    value = max(value, 1 + best(i + 1, used | 1 << j))
            return value

        total += best(0, 0)
    return total


def f_from_counts(matched, n_ref, n_est):
    p = matched / n_est if n_est else 1.0
    r = matched / n_ref if n_ref else 1.0
    return 2 * p * r / (p + r) if p + r else 0.0
