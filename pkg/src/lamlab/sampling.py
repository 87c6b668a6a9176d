"""Scene-wise pair and triple samplers with horizon bounds.

A "scene" is one trajectory, so every sampled pair or triple stays inside a
single trajectory. All samplers take a caller-owned numpy Generator; callers
parallelize by splitting streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SampleSpec:
    horizon: int = 10  # max index span k - i
    n_buckets: int = 8  # magnitude stratification bins
    # kept so configs mirror rotational worlds; vacuous under pure translation
    rotation_threshold: float | None = None

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be >= 2")
        if self.n_buckets < 2:
            raise ValueError("n_buckets must be >= 2")


def _traj_len(traj) -> int:
    if isinstance(traj, int):
        return traj
    return len(traj)


def sample_pair(traj, spec: SampleSpec, rng: np.random.Generator) -> tuple[int, int]:
    """i uniform over valid starts, then j uniform over (i, i + horizon]."""
    T = _traj_len(traj)
    if T < 2:
        raise ValueError(f"trajectory too short for pairs (T={T})")
    i = int(rng.integers(0, T - 1))
    j_hi = min(T - 1, i + spec.horizon)
    j = int(rng.integers(i + 1, j_hi + 1))
    return i, j


def _triple_counts(T: int, horizon: int) -> np.ndarray:
    """Number of valid (i, j, k) triples starting at each i."""
    counts = np.zeros(T, dtype=np.int64)
    for i in range(T):
        smax = min(T - 1, i + horizon) - i
        if smax >= 2:
            counts[i] = smax * (smax - 1) // 2  # sum over spans s=2..smax of (s-1)
    return counts


def sample_triple(traj, spec: SampleSpec, rng: np.random.Generator) -> tuple[int, int, int]:
    """Uniform over {(i, j, k): i < j < k, k - i <= horizon}."""
    T = _traj_len(traj)
    if T < 3:
        raise ValueError(f"trajectory too short for triples (T={T})")
    counts = _triple_counts(T, spec.horizon)
    total = int(counts.sum())
    if total == 0:
        raise ValueError(f"no valid triples for T={T}, horizon={spec.horizon}")

    r = int(rng.integers(0, total))
    i = int(np.searchsorted(np.cumsum(counts), r, side="right"))
    r -= int(counts[:i].sum())
    # within start i, span s has (s - 1) choices of j
    smax = min(T - 1, i + spec.horizon) - i
    span_weights = np.arange(1, smax)  # spans 2..smax mapped to weights 1..smax-1
    s = int(np.searchsorted(np.cumsum(span_weights), r, side="right")) + 2
    r -= int(span_weights[: s - 2].sum())
    j = i + 1 + r
    k = i + s
    return i, j, k


def rotation_filter(traj, triple: tuple[int, int, int], threshold: float | None) -> bool:
    """Keep a triple unless its cumulative heading change exceeds threshold.

    Trajectories without heading data (the translation-only world) always
    pass; the hook exists so configs carry over to rotational worlds.
    """
    headings = getattr(traj, "headings", None)
    if headings is None or threshold is None:
        return True
    i, _, k = triple
    h = np.asarray(headings, dtype=np.float64)
    d = np.abs(np.diff(h[i : k + 1]))
    d = np.minimum(d, 2.0 * np.pi - d)  # wrap
    return float(d.sum()) <= threshold


@dataclass
class StratifiedPairs:
    pairs: list[tuple[int, int, int]]  # (traj_id, i, j)
    degenerate: bool  # all candidate magnitudes fell in one bin


def enumerate_pairs(dataset, spec: SampleSpec) -> tuple[np.ndarray, np.ndarray]:
    """All in-horizon (traj_id, i, j) candidates and their |s_j - s_i|."""
    rows = []
    mags = []
    for tid, traj in enumerate(dataset.trajectories):
        s = traj.states.astype(np.float64)
        T = s.shape[0]
        for i in range(T - 1):
            for j in range(i + 1, min(T - 1, i + spec.horizon) + 1):
                rows.append((tid, i, j))
                mags.append(float(np.hypot(*(s[j] - s[i]))))
    return np.asarray(rows, dtype=np.int64), np.asarray(mags, dtype=np.float64)


def stratified_pairs_by_magnitude(
    dataset, n: int, spec: SampleSpec, rng: np.random.Generator, band: tuple[float, float] | None = None
) -> StratifiedPairs:
    """Draw pairs balanced across equal-width |displacement| bins.

    Each of the spec.n_buckets bins contributes ceil(n / n_buckets) pairs,
    or fewer when a bin has fewer candidates. An optional magnitude band
    restricts the candidate pool (used to keep outliers out of correlation
    estimates). If every candidate falls in a single bin the result is an
    unstratified draw flagged degenerate.
    """
    if len(dataset.trajectories) == 0:
        raise ValueError("empty dataset")
    if n < spec.n_buckets:
        raise ValueError(f"n={n} smaller than n_buckets={spec.n_buckets}")
    rows, mags = enumerate_pairs(dataset, spec)
    if band is not None:
        keep = (mags >= band[0]) & (mags <= band[1])
        if not keep.any():
            raise ValueError("magnitude band excludes every candidate pair")
        rows, mags = rows[keep], mags[keep]
    lo, hi = float(mags.min()), float(mags.max())
    if hi - lo < 1e-12:
        take = min(n, len(rows))
        pick = rng.choice(len(rows), size=take, replace=False)
        return StratifiedPairs([tuple(rows[p]) for p in sorted(pick)], degenerate=True)

    nb = spec.n_buckets
    bins = np.minimum(((mags - lo) / (hi - lo) * nb).astype(np.int64), nb - 1)
    need = -(-n // nb)  # ceil
    pairs: list[tuple[int, int, int]] = []
    for b in range(nb):
        members = np.flatnonzero(bins == b)
        if members.size == 0:
            continue
        take = min(need, members.size)
        pick = rng.choice(members.size, size=take, replace=False)
        for p in np.sort(pick):
            pairs.append(tuple(rows[members[p]]))
    return StratifiedPairs(pairs, degenerate=False)


def bucket_edges(mags: np.ndarray, n_buckets: int) -> np.ndarray:
    """Equal-width bin edges over observed magnitudes."""
    return np.linspace(float(mags.min()), float(mags.max()), n_buckets + 1)
