"""Representation probes: environment-identity leakage and goal leakage.

The environment probe is a deterministic multinomial logistic regression
(single linear layer, full-batch gradient descent, fixed iteration count) on a
class-balanced latent set; held-out accuracy measures how much environment
identity the latents carry.

The goal probe measures goal-position information beyond motion content: the
best linear motion predictor is projected out of the latents, and what
remains is regressed onto the goal position. Held-out R^2 (centered on the
train mean) near 0 means nothing about the goal survives once motion is
accounted for; motion-only latents give exactly 0 because the residualized
features are constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sampling


class InsufficientClassData(ValueError):
    """An environment class has too few samples for probing."""


MIN_PER_CLASS = 40


@dataclass
class ProbeDataset:
    latents: np.ndarray  # (N, d) float64
    env_labels: np.ndarray  # (N,) int64
    goal_states: np.ndarray  # (N, 2) float64, s_j
    start_states: np.ndarray  # (N, 2) float64, s_i

    def class_counts(self) -> dict[int, int]:
        vals, counts = np.unique(self.env_labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}


def build_probe_dataset(
    latent_fn, dataset, n_per_env: int, spec: sampling.SampleSpec, rng: np.random.Generator
) -> ProbeDataset:
    """Balanced same-trajectory pair latents per environment."""
    if n_per_env < MIN_PER_CLASS:
        raise ValueError(f"need at least {MIN_PER_CLASS} samples per class, got {n_per_env}")
    envs = sorted(dataset.by_env)
    if len(envs) < 2:
        raise InsufficientClassData("probing needs at least 2 environment classes")
    lat_blocks, labels, goals, starts = [], [], [], []
    for env in envs:
        ids = [i for i in dataset.by_env[env] if len(dataset.trajectories[i]) >= 2]
        if not ids:
            raise InsufficientClassData(f"environment {env} has no usable trajectories")
        refs = []
        for _ in range(n_per_env):
            tid = ids[int(rng.integers(0, len(ids)))]
            i, j = sampling.sample_pair(dataset.trajectories[tid], spec, rng)
            refs.append((tid, i, j))
        for tid, i, j in refs:
            traj = dataset.trajectories[tid]
            goals.append(traj.states[j].astype(np.float64))
            starts.append(traj.states[i].astype(np.float64))
        # latents per trajectory, preserving request order
        refs_arr = np.asarray(refs, dtype=np.int64)
        out = None
        for tid in np.unique(refs_arr[:, 0]):
            sel = np.flatnonzero(refs_arr[:, 0] == tid)
            z = latent_fn(dataset.trajectories[int(tid)], refs_arr[sel, 1], refs_arr[sel, 2])
            if out is None:
                out = np.empty((n_per_env, z.shape[-1]), dtype=np.float64)
            out[sel] = z
        lat_blocks.append(out)
        labels.extend([env] * n_per_env)
    return ProbeDataset(
        latents=np.concatenate(lat_blocks, axis=0),
        env_labels=np.asarray(labels, dtype=np.int64),
        goal_states=np.asarray(goals, dtype=np.float64),
        start_states=np.asarray(starts, dtype=np.float64),
    )


def _stratified_split(labels: np.ndarray, test_frac: float, rng: np.random.Generator):
    train_idx, test_idx = [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        perm = rng.permutation(members.size)
        n_test = max(1, int(round(members.size * test_frac)))
        test_idx.extend(members[perm[:n_test]])
        train_idx.extend(members[perm[n_test:]])
    return np.sort(np.asarray(train_idx)), np.sort(np.asarray(test_idx))


def env_probe(
    latents: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    iters: int = 500,
    lr: float = 0.5,
    test_frac: float = 0.2,
) -> float:
    """Held-out accuracy of the deterministic linear softmax probe."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    classes, remapped = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise InsufficientClassData("need at least 2 classes")
    for cls in classes:
        if int((labels == cls).sum()) < 5:
            raise InsufficientClassData(f"class {cls} has fewer than 5 samples")

    train_idx, test_idx = _stratified_split(remapped, test_frac, rng)
    mu = latents[train_idx].mean(axis=0)
    sd = latents[train_idx].std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)

    def design(idx):
        x = (latents[idx] - mu) / sd
        return np.concatenate([x, np.ones((idx.size, 1))], axis=1)

    x_tr = design(train_idx)
    y_tr = np.eye(classes.size)[remapped[train_idx]]
    w = np.zeros((x_tr.shape[1], classes.size))
    for _ in range(iters):
        logits = x_tr @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * (x_tr.T @ (p - y_tr)) / x_tr.shape[0]

    pred = (design(test_idx) @ w).argmax(axis=1)
    return float((pred == remapped[test_idx]).mean())


def _lstsq_with_intercept(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6):
    """Least squares with intercept; falls back to a ridge solve when the
    design is rank-deficient. Returns (weights, used_ridge)."""
    xb = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    gram = xb.T @ xb
    rank = np.linalg.matrix_rank(gram, tol=1e-10 * max(1.0, float(np.trace(gram))))
    if rank < xb.shape[1]:
        w = np.linalg.solve(gram + ridge * np.eye(xb.shape[1]), xb.T @ y)
        return w, True
    w, *_ = np.linalg.lstsq(xb, y, rcond=None)
    return w, False


def _predict(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    xb = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    return xb @ w


def goal_probe(
    probe: ProbeDataset, rng: np.random.Generator, test_frac: float = 0.2
) -> tuple[float, bool]:
    """Held-out R^2 of predicting the goal position from motion-residualized
    latents. Returns (r2, ridge_fallback_used)."""
    z = probe.latents
    motion = probe.goal_states - probe.start_states
    goal = probe.goal_states

    n = z.shape[0]
    perm = rng.permutation(n)
    n_test = max(1, int(round(n * test_frac)))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])

    # project the linearly-explained motion content out of the latents
    w_m, ridge_a = _lstsq_with_intercept(motion[train_idx], z[train_idx])
    resid_tr = z[train_idx] - _predict(w_m, motion[train_idx])
    resid_te = z[test_idx] - _predict(w_m, motion[test_idx])

    w_g, ridge_b = _lstsq_with_intercept(resid_tr, goal[train_idx])
    pred = _predict(w_g, resid_te)

    center = goal[train_idx].mean(axis=0)
    ss_res = float(((goal[test_idx] - pred) ** 2).sum())
    ss_tot = float(((goal[test_idx] - center) ** 2).sum())
    if ss_tot == 0.0:
        return 0.0, ridge_a or ridge_b
    return 1.0 - ss_res / ss_tot, ridge_a or ridge_b
