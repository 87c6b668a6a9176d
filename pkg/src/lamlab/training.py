"""Training loop: Adam with linear warmup, global-norm gradient clipping,
pair + triple batch assembly, CSV step logging, checkpointing, and the
stable / collapse / explode classification of a finished run.

Runs are bitwise deterministic per (dataset, config, seed): batch sampling
uses derived Philox streams and every reduction has a fixed order.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data_io, model, sampling
from .autodiff import backward
from .model import LossWeights, ModelConfig, ModelParams, PairBatch, TripleBatch


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradients; the run is classified explode."""


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 5000
    batch_pairs: int = 64
    batch_triples: int = 64
    base_lr: float = 3e-4
    warmup_steps: int = 200
    clip_norm: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    ac_form: str = "fdm"  # fdm | idm_no_sg | idm_sg_zik | idm_sg_sum
    vq_placement: str = "post_vq"  # post_vq | pre_vq
    eval_every: int = 500
    horizon: int = 10
    holdout_frac: float = 0.2
    dead_code_steps: int = 500  # 0 disables dead-code reseeding
    explode_norm_factor: float = 10.0
    collapse_norm_frac: float = 0.05
    stability_window_frac: float = 0.1

    def validate(self) -> None:
        if not (self.steps > self.warmup_steps >= 0):
            raise ValueError("need steps > warmup_steps >= 0")
        if self.batch_pairs < 1 or self.batch_triples < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.ac_form not in model.AC_FORMS:
            raise ValueError(f"unknown ac_form {self.ac_form!r}")
        if self.vq_placement not in model.PLACEMENTS:
            raise ValueError(f"unknown vq_placement {self.vq_placement!r}")
        if not (0.0 <= self.holdout_frac < 1.0):
            raise ValueError("holdout_frac must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, constant thereafter."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps == 0:
        return cfg.base_lr
    return cfg.base_lr * min(1.0, step / cfg.warmup_steps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all grads in place so the global L2 norm is at most max_norm;
    returns the factor applied."""
    total = 0.0
    for g in grads.values():
        if not np.isfinite(g).all():
            raise TrainingDiverged("non-finite gradient")
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for g in grads.values():
        g *= g.dtype.type(factor)
    return factor


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.tensors.items()},
            v={k: np.zeros_like(p.data) for k, p in params.tensors.items()},
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        mhat = m / m.dtype.type(bc1)
        vhat = v / v.dtype.type(bc2)
        p.data -= p.data.dtype.type(lr) * mhat / (np.sqrt(vhat) + p.data.dtype.type(eps))


# ---------------------------------------------------------------------------
# step log


STEP_LOG_FIELDS = ("step", "loss_total", "loss_rec", "loss_vq", "loss_ac", "loss_proprio", "mean_z_norm", "lr")


@dataclass
class StepRow:
    step: int
    loss_total: float
    loss_rec: float
    loss_vq: float
    loss_ac: float
    loss_proprio: float
    mean_z_norm: float
    lr: float


def write_step_log(rows: list[StepRow], status: str, path: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEP_LOG_FIELDS)
    for r in rows:
        w.writerow(
            [r.step]
            + [repr(v) for v in (r.loss_total, r.loss_rec, r.loss_vq, r.loss_ac, r.loss_proprio, r.mean_z_norm, r.lr)]
        )
    w.writerow(["status", status])
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())
    return path


def parse_step_log(path: str) -> tuple[list[StepRow], str]:
    rows: list[StepRow] = []
    status = ""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != STEP_LOG_FIELDS:
            raise ValueError(f"{path}: unexpected step-log header {header}")
        for rec in reader:
            if rec and rec[0] == "status":
                status = rec[1]
                continue
            rows.append(StepRow(int(rec[0]), *[float(v) for v in rec[1:]]))
    return rows, status


def classify_stability(rows: list[StepRow], cfg: TrainConfig) -> str:
    """explode on any non-finite loss or a latent-norm blow-up relative to
    step 0; collapse when the final-window mean norm falls below a small
    fraction of step 0; stable otherwise."""
    if not rows:
        raise ValueError("empty step log")
    z0 = rows[0].mean_z_norm
    losses = np.array([r.loss_total for r in rows])
    norms = np.array([r.mean_z_norm for r in rows])
    if not np.isfinite(losses).all() or not np.isfinite(norms).all():
        return "explode"
    if z0 > 0 and norms.max() > cfg.explode_norm_factor * z0:
        return "explode"
    window = max(1, int(round(len(rows) * cfg.stability_window_frac)))
    if z0 > 0 and float(norms[-window:].mean()) < cfg.collapse_norm_frac * z0:
        return "collapse"
    return "stable"


# ---------------------------------------------------------------------------
# batch assembly


def _assemble_pairs(dataset, ids, n, spec, rng) -> PairBatch:
    o_i, o_j, s_i, s_j = [], [], [], []
    for _ in range(n):
        traj = dataset.trajectories[ids[int(rng.integers(0, len(ids)))]]
        i, j = sampling.sample_pair(traj, spec, rng)
        o_i.append(traj.frames[i])
        o_j.append(traj.frames[j])
        s_i.append(traj.states[i])
        s_j.append(traj.states[j])
    return PairBatch(
        o_i=model.flatten_frames(np.stack(o_i)),
        o_j=model.flatten_frames(np.stack(o_j)),
        s_i=np.stack(s_i).astype(np.float32),
        s_j=np.stack(s_j).astype(np.float32),
    )


def _assemble_triples(dataset, ids, n, spec, rng) -> TripleBatch:
    o_i, o_j, o_k, s_i, s_k = [], [], [], [], []
    for _ in range(n):
        traj = dataset.trajectories[ids[int(rng.integers(0, len(ids)))]]
        while True:
            triple = sampling.sample_triple(traj, spec, rng)
            if sampling.rotation_filter(traj, triple, spec.rotation_threshold):
                break
        i, j, k = triple
        o_i.append(traj.frames[i])
        o_j.append(traj.frames[j])
        o_k.append(traj.frames[k])
        s_i.append(traj.states[i])
        s_k.append(traj.states[k])
    return TripleBatch(
        o_i=model.flatten_frames(np.stack(o_i)),
        o_j=model.flatten_frames(np.stack(o_j)),
        o_k=model.flatten_frames(np.stack(o_k)),
        s_i=np.stack(s_i).astype(np.float32),
        s_k=np.stack(s_k).astype(np.float32),
    )


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    params: ModelParams
    status: str
    rows: list[StepRow]
    checkpoint_path: str
    step_log_path: str


def config_snapshot(cfg: TrainConfig, mcfg: ModelConfig) -> dict:
    return {"train": cfg.to_dict(), "model": mcfg.to_dict()}


def save_model(params: ModelParams, cfg: TrainConfig, path: str) -> str:
    return data_io.save_checkpoint(params.arrays(), config_snapshot(cfg, params.cfg), path)


def load_model(path: str, expect: ModelConfig | None = None) -> tuple[ModelParams, TrainConfig]:
    arrays, snapshot = data_io.load_checkpoint(path)
    if "model" not in snapshot or "train" not in snapshot:
        raise data_io.CheckpointFormatError(f"{path}: missing config snapshot")
    mcfg = ModelConfig.from_dict(snapshot["model"])
    if expect is not None and expect != mcfg:
        raise data_io.CheckpointMismatchError(f"{path}: checkpoint model config {mcfg} != expected {expect}")
    try:
        params = ModelParams.from_arrays(mcfg, arrays)
    except (KeyError, ValueError) as e:
        raise data_io.CheckpointMismatchError(f"{path}: {e}") from e
    return params, TrainConfig.from_dict(snapshot["train"])


def train(dataset, cfg: TrainConfig, out_dir: str, mcfg: ModelConfig | None = None) -> TrainResult:
    """Optimize the full objective over pair + triple batches.

    Writes <out_dir>/checkpoint.aclamck, periodic checkpoint_step*.aclamck
    snapshots, and <out_dir>/step_log.csv whose footer carries the stability
    status. A non-finite loss or gradient aborts with status "explode" but
    still writes the last finite parameters.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    h, w = dataset.image_hw
    if mcfg is None:
        mcfg = ModelConfig(height=h, width=w)
    elif (mcfg.height, mcfg.width) != (h, w):
        raise ValueError(f"model configured for {mcfg.height}x{mcfg.width}, dataset is {h}x{w}")

    train_ids, _ = dataset.split_ids(cfg.holdout_frac)
    spec = sampling.SampleSpec(horizon=cfg.horizon)
    params = ModelParams.init(mcfg, cfg.seed)
    opt = AdamState.init(params)
    batch_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 1])))
    dead_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 2])))
    unused_steps = np.zeros(mcfg.codebook_size, dtype=np.int64)

    rows: list[StepRow] = []
    status: str | None = None
    ckpt_path = os.path.join(out_dir, "checkpoint.aclamck")
    log_path = os.path.join(out_dir, "step_log.csv")
    use_triples = cfg.weights.lambda_ac > 0

    for step_i in range(cfg.steps):
        pair_batch = _assemble_pairs(dataset, train_ids, cfg.batch_pairs, spec, batch_rng)
        triple_batch = (
            _assemble_triples(dataset, train_ids, cfg.batch_triples, spec, batch_rng) if use_triples else None
        )
        lr = lr_at(step_i, cfg)

        params.zero_grads()
        bd = model.total_loss(params, pair_batch, triple_batch, cfg.weights, cfg.ac_form, cfg.vq_placement)
        znorm = model.mean_latent_norm(bd.pair_latent, cfg.vq_placement)
        rows.append(StepRow(step=step_i, mean_z_norm=znorm, lr=lr, **bd.parts))

        if not np.isfinite(bd.parts["loss_total"]):
            status = "explode"
            break
        backward(bd.total)
        grads = {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.tensors.items()
        }
        try:
            clip_grad_norm(grads, cfg.clip_norm)
        except TrainingDiverged:
            status = "explode"
            break
        adam_step(params, grads, opt, lr)

        if cfg.dead_code_steps > 0:
            unused_steps += 1
            unused_steps[bd.used_indices] = 0
            dead = np.flatnonzero(unused_steps >= cfg.dead_code_steps)
            if dead.size:
                zp = bd.pair_latent.z_pre.data.reshape(-1, mcfg.code_dim)
                for row in dead:
                    pick = int(dead_rng.integers(0, zp.shape[0]))
                    params.codebook.data[row] = zp[pick]
                    opt.m["codebook"][row] = 0.0
                    opt.v["codebook"][row] = 0.0
                    unused_steps[row] = 0

        if cfg.eval_every > 0 and (step_i + 1) % cfg.eval_every == 0 and (step_i + 1) < cfg.steps:
            save_model(params, cfg, os.path.join(out_dir, f"checkpoint_step{step_i + 1}.aclamck"))

    if status is None:
        status = classify_stability(rows, cfg)
    save_model(params, cfg, ckpt_path)
    write_step_log(rows, status, log_path)
    return TrainResult(params=params, status=status, rows=rows, checkpoint_path=ckpt_path, step_log_path=log_path)
