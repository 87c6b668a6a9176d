"""Structured-latent evaluation: composition / identity / inverse / cycle
residuals, the displacement correlation, norm-trajectory traces, the
motion-transfer check, and the JSON metrics report.

Every dataset-level metric is split into a pure array-level core (so tests can
compare it against independent brute-force references) and a sampling driver
that pulls pairs or triples from held-out trajectories through a latent_fn of
signature (trajectory, idx_a, idx_b) -> (N, D) float64.

Degenerate denominators never produce NaN: metrics return the string
sentinels DEGENERATE or UNDEFINED, which serialize as such in the report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import sampling

DEGENERATE = "degenerate"
UNDEFINED = "undefined"

MetricValue = float | str

REPORT_KEYS = (
    "norm_ac",
    "pearson_r",
    "norm_identity",
    "delta_inv",
    "cycle_residual",
    "env_probe_acc",
    "goal_probe_r2",
    "n_instances",
    "seed",
    "placement",
)


@dataclass
class MetricsReport:
    norm_ac: MetricValue
    pearson_r: MetricValue
    norm_identity: MetricValue
    delta_inv: MetricValue
    cycle_residual: MetricValue
    env_probe_acc: MetricValue
    goal_probe_r2: MetricValue
    n_instances: int
    seed: int
    placement: str

    def validate(self) -> None:
        for key in ("norm_ac", "norm_identity", "delta_inv", "cycle_residual"):
            v = getattr(self, key)
            if isinstance(v, float) and v < 0:
                raise ValueError(f"{key} must be non-negative, got {v}")
        if isinstance(self.pearson_r, float) and not (-1.0 - 1e-9 <= self.pearson_r <= 1.0 + 1e-9):
            raise ValueError(f"pearson_r out of [-1, 1]: {self.pearson_r}")
        if isinstance(self.env_probe_acc, float) and not (0.0 <= self.env_probe_acc <= 1.0):
            raise ValueError(f"env_probe_acc out of [0, 1]: {self.env_probe_acc}")

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in REPORT_KEYS}
        return json.dumps(d, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        if set(d) != set(REPORT_KEYS):
            raise ValueError(f"report keys {sorted(d)} do not match the schema")
        return cls(**d)


def build_report(report: MetricsReport, path: str) -> str:
    report.validate()
    with open(path, "w") as f:
        f.write(report.to_json())
    return path


# ---------------------------------------------------------------------------
# array-level cores


def _row_norms(z: np.ndarray) -> np.ndarray:
    return np.sqrt((np.asarray(z, dtype=np.float64) ** 2).sum(axis=-1))


def composition_residual(z_ik: np.ndarray, z_ij: np.ndarray, z_jk: np.ndarray) -> MetricValue:
    """E|z_ik - z_ij - z_jk|^2 over triples, over E|z|^2 pooled across the
    three pairs of each triple."""
    z_ik, z_ij, z_jk = (np.asarray(a, dtype=np.float64) for a in (z_ik, z_ij, z_jk))
    num = float(((z_ik - z_ij - z_jk) ** 2).sum(axis=-1).mean())
    pool = np.concatenate([z_ij, z_jk, z_ik], axis=0)
    den = float((pool**2).sum(axis=-1).mean())
    if den == 0.0:
        return DEGENERATE
    return num / den


def identity_residual(z_ii: np.ndarray, z_pairs: np.ndarray) -> MetricValue:
    """E|z_ii| over frames, over E|z_ij| over non-degenerate pairs."""
    num = float(_row_norms(z_ii).mean())
    den = float(_row_norms(z_pairs).mean())
    if den == 0.0:
        return DEGENERATE
    return num / den


def inverse_residual(z_fwd: np.ndarray, z_bwd: np.ndarray) -> MetricValue:
    """E|z_ij + z_ji| / E|z_ij|."""
    num = float(_row_norms(np.asarray(z_fwd, np.float64) + np.asarray(z_bwd, np.float64)).mean())
    den = float(_row_norms(z_fwd).mean())
    if den == 0.0:
        return DEGENERATE
    return num / den


def cycle_residual_core(edge_latents: np.ndarray) -> MetricValue:
    """edge_latents: (n_cycles, m, D) latents around closed frame cycles.
    Returns E|sum over the cycle| / E|edge|."""
    z = np.asarray(edge_latents, dtype=np.float64)
    num = float(_row_norms(z.sum(axis=1)).mean())
    den = float(_row_norms(z.reshape(-1, z.shape[-1])).mean())
    if den == 0.0:
        return DEGENERATE
    return num / den


def pearson(x: np.ndarray, y: np.ndarray) -> MetricValue:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("pearson needs two equal-length series with n >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc**2).sum()))
    sy = float(np.sqrt((yc**2).sum()))
    if sx == 0.0 or sy == 0.0:
        return UNDEFINED
    return float((xc * yc).sum() / (sx * sy))


def rescale_by_percentiles(values: np.ndarray, reference: np.ndarray, lo_pct: float = 1.0, hi_pct: float = 99.0):
    """Affine-rescale values by the reference 1st/99th percentiles, clipping
    outside; returns UNDEFINED when the reference has no spread."""
    ref = np.asarray(reference, dtype=np.float64)
    q_lo, q_hi = np.percentile(ref, [lo_pct, hi_pct])
    if q_hi - q_lo <= 0:
        return UNDEFINED
    return np.clip((np.asarray(values, np.float64) - q_lo) / (q_hi - q_lo), 0.0, 1.0)


# ---------------------------------------------------------------------------
# dataset-level drivers


def _eligible(dataset, min_len: int) -> list[int]:
    ids = [i for i, tr in enumerate(dataset.trajectories) if len(tr) >= min_len]
    if not ids:
        raise ValueError(f"no trajectory with at least {min_len} frames")
    return ids


def _batched_latents(latent_fn, dataset, refs: list[tuple[int, int, int]]) -> np.ndarray:
    """Latents for (traj_id, a, b) references, computed per-trajectory in a
    fixed order and scattered back to the request order."""
    refs_arr = np.asarray(refs, dtype=np.int64)
    out: np.ndarray | None = None
    for tid in np.unique(refs_arr[:, 0]):
        sel = np.flatnonzero(refs_arr[:, 0] == tid)
        z = latent_fn(dataset.trajectories[int(tid)], refs_arr[sel, 1], refs_arr[sel, 2])
        if out is None:
            out = np.empty((len(refs), z.shape[-1]), dtype=np.float64)
        out[sel] = z
    assert out is not None
    return out


def norm_ac(latent_fn, dataset, spec: sampling.SampleSpec, n: int, rng: np.random.Generator) -> MetricValue:
    if n < 1:
        raise ValueError("need n >= 1 triples")
    ids = _eligible(dataset, 3)
    triples = []
    for _ in range(n):
        tid = ids[int(rng.integers(0, len(ids)))]
        i, j, k = sampling.sample_triple(dataset.trajectories[tid], spec, rng)
        triples.append((tid, i, j, k))
    z_ij = _batched_latents(latent_fn, dataset, [(t, i, j) for t, i, j, _ in triples])
    z_jk = _batched_latents(latent_fn, dataset, [(t, j, k) for t, _, j, k in triples])
    z_ik = _batched_latents(latent_fn, dataset, [(t, i, k) for t, i, _, k in triples])
    return composition_residual(z_ik, z_ij, z_jk)


def displacement_corr(
    latent_fn, dataset, spec: sampling.SampleSpec, n: int, rng: np.random.Generator
) -> MetricValue:
    """Pearson r between |z| and the percentile-rescaled |s_j - s_i| over
    magnitude-stratified pairs.

    Pairs are drawn inside the dataset's 1st..99th percentile magnitude band,
    so the outlier clipping of the rescale never distorts sampled pairs."""
    if n < 3:
        raise ValueError("need n >= 3 pairs")
    _, all_mags = sampling.enumerate_pairs(dataset, spec)
    q_lo, q_hi = np.percentile(all_mags, [1.0, 99.0])
    if q_hi <= q_lo:
        return UNDEFINED
    strat = sampling.stratified_pairs_by_magnitude(dataset, n, spec, rng, band=(float(q_lo), float(q_hi)))
    pairs = strat.pairs
    mags = np.array(
        [
            float(np.hypot(*(dataset.trajectories[t].states[j].astype(np.float64) - dataset.trajectories[t].states[i].astype(np.float64))))
            for t, i, j in pairs
        ]
    )
    rescaled = rescale_by_percentiles(mags, all_mags)
    if isinstance(rescaled, str):
        return UNDEFINED
    z = _batched_latents(latent_fn, dataset, pairs)
    return pearson(_row_norms(z), rescaled)


def norm_identity(latent_fn, dataset, n: int, rng: np.random.Generator, spec: sampling.SampleSpec | None = None) -> MetricValue:
    if n < 1:
        raise ValueError("need n >= 1")
    spec = spec or sampling.SampleSpec()
    ids = _eligible(dataset, 2)
    frames = []
    pairs = []
    for _ in range(n):
        tid = ids[int(rng.integers(0, len(ids)))]
        traj = dataset.trajectories[tid]
        frames.append((tid, int(rng.integers(0, len(traj)))))
        i, j = sampling.sample_pair(traj, spec, rng)
        pairs.append((tid, i, j))
    z_ii = _batched_latents(latent_fn, dataset, [(t, a, a) for t, a in frames])
    z_ij = _batched_latents(latent_fn, dataset, pairs)
    return identity_residual(z_ii, z_ij)


def delta_inv(latent_fn, dataset, spec: sampling.SampleSpec, n: int, rng: np.random.Generator) -> MetricValue:
    if n < 1:
        raise ValueError("need n >= 1")
    ids = _eligible(dataset, 2)
    pairs = []
    for _ in range(n):
        tid = ids[int(rng.integers(0, len(ids)))]
        i, j = sampling.sample_pair(dataset.trajectories[tid], spec, rng)
        pairs.append((tid, i, j))
    z_fwd = _batched_latents(latent_fn, dataset, pairs)
    z_bwd = _batched_latents(latent_fn, dataset, [(t, j, i) for t, i, j in pairs])
    return inverse_residual(z_fwd, z_bwd)


def cycle_residual(
    latent_fn, dataset, m: int, n: int, rng: np.random.Generator, spec: sampling.SampleSpec | None = None
) -> MetricValue:
    """Cycles visit m distinct frames inside one horizon window and return to
    the start, so each cycle contributes m edges."""
    if m < 3:
        raise ValueError("cycles need m >= 3")
    spec = spec or sampling.SampleSpec()
    ids = _eligible(dataset, m)
    edges = []
    for _ in range(n):
        tid = ids[int(rng.integers(0, len(ids)))]
        traj = dataset.trajectories[tid]
        T = len(traj)
        span = min(spec.horizon, T - 1)
        if span + 1 < m:
            raise ValueError(f"horizon window too small for {m}-cycles")
        w0 = int(rng.integers(0, T - span))
        offsets = rng.choice(span + 1, size=m, replace=False)
        nodes = [w0 + int(o) for o in offsets]
        cyc = nodes + [nodes[0]]
        for a, b in zip(cyc[:-1], cyc[1:]):
            edges.append((tid, a, b))
    z = _batched_latents(latent_fn, dataset, edges)
    return cycle_residual_core(z.reshape(n, m, -1))


# ---------------------------------------------------------------------------
# norm trajectories


NORM_TRAJ_FIELDS = ("t", "z_norm", "z_norm_normalized", "ds_norm", "ds_norm_normalized")


@dataclass
class NormTrajectory:
    t: np.ndarray
    z_norm: np.ndarray
    z_norm_normalized: np.ndarray
    ds_norm: np.ndarray
    ds_norm_normalized: np.ndarray
    degenerate: bool


def norm_trajectory(latent_fn, traj) -> NormTrajectory:
    """|latent(o_0, o_t)| for t = 1..T-1, normalized by the series maximum,
    alongside the ground-truth displacement series."""
    T = len(traj)
    if T < 2:
        raise ValueError("need T >= 2")
    ts = np.arange(1, T)
    z = latent_fn(traj, np.zeros(T - 1, dtype=np.int64), ts)
    zn = _row_norms(z)
    s = traj.states.astype(np.float64)
    dn = np.sqrt(((s[1:] - s[0]) ** 2).sum(axis=-1))
    degenerate = bool(zn.max() == 0.0)
    z_normed = zn / zn.max() if not degenerate else np.zeros_like(zn)
    d_normed = dn / dn.max() if dn.max() > 0 else np.zeros_like(dn)
    return NormTrajectory(ts, zn, z_normed, dn, d_normed, degenerate)


def write_norm_trajectory_csv(nt: NormTrajectory, path: str) -> str:
    lines = [",".join(NORM_TRAJ_FIELDS)]
    for r in range(nt.t.size):
        lines.append(
            ",".join(
                [str(int(nt.t[r]))]
                + [repr(float(v[r])) for v in (nt.z_norm, nt.z_norm_normalized, nt.ds_norm, nt.ds_norm_normalized)]
            )
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# motion transfer


@dataclass
class TransferResult:
    img_direct: np.ndarray  # (H, W, 3) float32
    img_composed: np.ndarray
    mse_between: float


def motion_transfer(latent_fn, decoder_fn, src_traj, triple: tuple[int, int, int], tgt_frame: np.ndarray) -> TransferResult:
    """Decode a direct latent and a composed latent from the same unrelated
    frame and measure their pixel disagreement."""
    i, j, k = triple
    z_ij = latent_fn(src_traj, np.array([i]), np.array([j]))[0]
    z_jk = latent_fn(src_traj, np.array([j]), np.array([k]))[0]
    z_ik = latent_fn(src_traj, np.array([i]), np.array([k]))[0]
    direct = decoder_fn(tgt_frame, z_ik)
    composed = decoder_fn(tgt_frame, z_ij + z_jk)
    diff = direct.astype(np.float64) - composed.astype(np.float64)
    return TransferResult(direct, composed, float((diff**2).mean()))


def write_ppm(img: np.ndarray, path: str) -> str:
    """8-bit binary PPM (P6) rendering of a float image in [0, 1]."""
    h, w, _ = img.shape
    data = np.clip(np.rint(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
    return path


def write_raw_f32(img: np.ndarray, path: str) -> str:
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(img, dtype="<f4").tobytes())
    return path
