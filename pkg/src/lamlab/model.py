"""Latent action model: IDM encoder, vector-quantized bottleneck, image FDM,
proprioceptive FDM, and every loss term of the training objective.

The encoder maps a flattened frame pair to a continuous vector z_pre, the
quantizer snaps each code_dim slice to its nearest codebook row (ties break to
the lowest index) and exposes the straight-through latent

    z = z_pre + stop_gradient(codes - z_pre)

whose value is the selected codes and whose gradient w.r.t. z_pre is the
identity. The codebook only receives gradient through the codebook loss.

The additive-composition term decodes the sum of two latents; the unstable
encoder-side variants (with their stop-gradient placements) are kept for the
ablation harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

AC_FORMS = ("fdm", "idm_no_sg", "idm_sg_zik", "idm_sg_sum")
PLACEMENTS = ("post_vq", "pre_vq")


@dataclass(frozen=True)
class ModelConfig:
    height: int = 32
    width: int = 32
    idm_hidden: tuple[int, ...] = (256, 256)
    fdm_hidden: tuple[int, ...] = (256, 256)
    proprio_hidden: tuple[int, ...] = (64,)
    codebook_size: int = 32
    n_tokens: int = 2
    code_dim: int = 8
    ac_proprio: bool = True  # mirror the AC term in the proprio head

    @property
    def obs_dim(self) -> int:
        return self.height * self.width * 3

    @property
    def latent_dim(self) -> int:
        return self.n_tokens * self.code_dim

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "idm_hidden": list(self.idm_hidden),
            "fdm_hidden": list(self.fdm_hidden),
            "proprio_hidden": list(self.proprio_hidden),
            "codebook_size": self.codebook_size,
            "n_tokens": self.n_tokens,
            "code_dim": self.code_dim,
            "ac_proprio": self.ac_proprio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            height=int(d["height"]),
            width=int(d["width"]),
            idm_hidden=tuple(d["idm_hidden"]),
            fdm_hidden=tuple(d["fdm_hidden"]),
            proprio_hidden=tuple(d["proprio_hidden"]),
            codebook_size=int(d["codebook_size"]),
            n_tokens=int(d["n_tokens"]),
            code_dim=int(d["code_dim"]),
            ac_proprio=bool(d["ac_proprio"]),
        )


@dataclass(frozen=True)
class LossWeights:
    lambda_ac: float = 1.0
    beta_commit: float = 0.25
    w_codebook: float = 1.0
    w_proprio: float = 1.0

    def __post_init__(self):
        for name in ("lambda_ac", "beta_commit", "w_codebook", "w_proprio"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative")


def _layer_dims(cfg: ModelConfig) -> dict[str, list[tuple[int, int]]]:
    def chain(din, hidden, dout):
        dims = [din, *hidden, dout]
        return list(zip(dims[:-1], dims[1:]))

    return {
        "idm": chain(2 * cfg.obs_dim, cfg.idm_hidden, cfg.latent_dim),
        "fdm_img": chain(cfg.obs_dim + cfg.latent_dim, cfg.fdm_hidden, cfg.obs_dim),
        "fdm_proprio": chain(2 + cfg.latent_dim, cfg.proprio_hidden, 2),
    }


class ModelParams:
    """Named parameter tensors in a fixed creation order."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "ModelParams":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
        tensors: dict[str, Tensor] = {}
        for prefix, dims in _layer_dims(cfg).items():
            for l, (din, dout) in enumerate(dims):
                lim = np.sqrt(6.0 / (din + dout))
                tensors[f"{prefix}.w{l}"] = Tensor(
                    rng.uniform(-lim, lim, (din, dout)).astype(dtype), requires_grad=True
                )
                tensors[f"{prefix}.b{l}"] = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True)
        tensors["codebook"] = Tensor(
            rng.uniform(-0.5, 0.5, (cfg.codebook_size, cfg.code_dim)).astype(dtype), requires_grad=True
        )
        return cls(cfg, tensors)

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        expected = cls.init(cfg, seed=0)
        tensors: dict[str, Tensor] = {}
        for name, ref in expected.tensors.items():
            if name not in arrays:
                raise KeyError(f"missing parameter array {name!r}")
            arr = arrays[name]
            if tuple(arr.shape) != ref.shape:
                raise ValueError(f"parameter {name!r} has shape {tuple(arr.shape)}, expected {ref.shape}")
            tensors[name] = Tensor(np.ascontiguousarray(arr, dtype=np.float32), requires_grad=True)
        return cls(cfg, tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    @property
    def codebook(self) -> Tensor:
        return self.tensors["codebook"]

    def with_replaced(self, name: str, t: Tensor) -> "ModelParams":
        d = dict(self.tensors)
        d[name] = t
        return ModelParams(self.cfg, d)

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


@dataclass
class LatentAction:
    z_pre: Tensor  # (B, D) continuous encoder output
    indices: np.ndarray  # (B, n_tokens) selected codebook rows
    codes: Tensor  # (B, D) concatenated selected rows
    z: Tensor  # (B, D) straight-through latent


def flatten_frames(frames: np.ndarray) -> np.ndarray:
    """(B, H, W, 3) -> (B, H*W*3) float32, row-major."""
    return np.ascontiguousarray(frames, dtype=np.float32).reshape(frames.shape[0], -1)


def _mlp(params: ModelParams, prefix: str, x: Tensor, n_layers: int, final: str | None) -> Tensor:
    for l in range(n_layers):
        x = ad.add(ad.matmul(x, params.tensors[f"{prefix}.w{l}"]), params.tensors[f"{prefix}.b{l}"])
        if l < n_layers - 1:
            x = ad.tanh(x)
    if final is not None:
        x = ad.activation(final, x)
    return x


def idm_forward(params: ModelParams, o_i: Tensor, o_j: Tensor) -> Tensor:
    """Encode a flattened frame pair into the continuous latent z_pre."""
    cfg = params.cfg
    if o_i.shape != o_j.shape or o_i.shape[-1] != cfg.obs_dim:
        raise ad.ShapeError(f"idm_forward expects (B, {cfg.obs_dim}) frame pairs")
    x = ad.concat([o_i, o_j])
    return _mlp(params, "idm", x, len(cfg.idm_hidden) + 1, final=None)


def vq_quantize(params: ModelParams, z_pre: Tensor) -> LatentAction:
    """Per-slice nearest-neighbor lookup with a straight-through gradient.

    The index selection is routed through the autodiff freeze cache so frozen
    gradient checks replay the same assignment.
    """
    cfg = params.cfg
    cb = params.codebook
    if cb.shape[0] == 0:
        raise ValueError("empty codebook")
    if z_pre.shape[-1] != cfg.latent_dim:
        raise ad.ShapeError(f"z_pre has dim {z_pre.shape[-1]}, expected {cfg.latent_dim}")

    def nearest() -> np.ndarray:
        zp = z_pre.data.reshape(-1, cfg.n_tokens, cfg.code_dim)
        d2 = ((zp[:, :, None, :] - cb.data[None, None, :, :]) ** 2).sum(axis=-1)
        return d2.argmin(axis=-1).astype(np.int64)  # argmin takes the lowest index on ties

    indices = ad.frozen_value(nearest)
    codes = ad.concat([ad.gather_rows(cb, indices[:, t]) for t in range(cfg.n_tokens)])
    z = ad.straight_through(codes, z_pre)
    return LatentAction(z_pre=z_pre, indices=indices, codes=codes, z=z)


def latent_pair(params: ModelParams, o_i: Tensor, o_j: Tensor, placement: str = "post_vq") -> tuple[Tensor, LatentAction]:
    if placement not in PLACEMENTS:
        raise ValueError(f"unknown placement {placement!r}")
    z_pre = idm_forward(params, o_i, o_j)
    lat = vq_quantize(params, z_pre)
    return (lat.z if placement == "post_vq" else lat.z_pre), lat


def latent(params: ModelParams, o_i: Tensor, o_j: Tensor, placement: str = "post_vq") -> Tensor:
    """The exported latent action consumed by metrics and probes."""
    z, _ = latent_pair(params, o_i, o_j, placement)
    return z


def fdm_img(params: ModelParams, o_i: Tensor, z: Tensor) -> Tensor:
    """Predict the target frame from (source frame, latent); output in [0, 1]."""
    cfg = params.cfg
    x = ad.concat([o_i, z])
    return _mlp(params, "fdm_img", x, len(cfg.fdm_hidden) + 1, final="sigmoid")


def fdm_proprio(params: ModelParams, s_i: Tensor, z: Tensor) -> Tensor:
    cfg = params.cfg
    x = ad.concat([s_i, z])
    return _mlp(params, "fdm_proprio", x, len(cfg.proprio_hidden) + 1, final=None)


# ---------------------------------------------------------------------------
# batches and losses


@dataclass
class PairBatch:
    o_i: np.ndarray  # (B, obs) f32
    o_j: np.ndarray
    s_i: np.ndarray  # (B, 2) f32
    s_j: np.ndarray


@dataclass
class TripleBatch:
    o_i: np.ndarray
    o_j: np.ndarray
    o_k: np.ndarray
    s_i: np.ndarray
    s_k: np.ndarray


def loss_rec(params: ModelParams, batch: PairBatch) -> tuple[Tensor, Tensor, LatentAction]:
    """Image and proprio reconstruction terms (unweighted) plus the latent."""
    o_i, o_j = Tensor(batch.o_i), Tensor(batch.o_j)
    z_pre = idm_forward(params, o_i, o_j)
    lat = vq_quantize(params, z_pre)
    img = ad.mse(Tensor(batch.o_j), fdm_img(params, o_i, lat.z))
    prop = ad.mse(Tensor(batch.s_j), fdm_proprio(params, Tensor(batch.s_i), lat.z))
    return img, prop, lat


def loss_vq(lat: LatentAction, weights: LossWeights, cfg: ModelConfig) -> Tensor:
    """Codebook + commitment losses, per-slice squared L2 averaged over tokens
    and batch (mse over all elements times code_dim)."""
    cb_term = ad.mse(ad.stop_gradient(lat.z_pre), lat.codes)
    commit = ad.mse(lat.z_pre, ad.stop_gradient(lat.codes))
    return ad.add(
        ad.scale(cb_term, weights.w_codebook * cfg.code_dim),
        ad.scale(commit, weights.beta_commit * cfg.code_dim),
    )


def ac_idm_residual(z_ik: Tensor, z_ij: Tensor, z_jk: Tensor, variant: str) -> Tensor:
    """Mean over the batch of |z_ik - z_ij - z_jk|^2 with the requested
    stop-gradient placement."""
    zsum = ad.add(z_ij, z_jk)
    if variant == "idm_no_sg":
        a, b = z_ik, zsum
    elif variant == "idm_sg_zik":
        a, b = ad.stop_gradient(z_ik), zsum
    elif variant == "idm_sg_sum":
        a, b = z_ik, ad.stop_gradient(zsum)
    else:
        raise ValueError(f"unknown AC-IDM variant {variant!r}")
    return ad.scale(ad.mse(a, b), z_ik.shape[-1])


def loss_ac_fdm(
    params: ModelParams, batch: TripleBatch, weights: LossWeights, placement: str = "post_vq"
) -> tuple[Tensor, list[LatentAction]]:
    """Decode the summed latents of (i,j) and (j,k) and penalize error to o_k;
    when configured, the proprio head mirrors the same composition."""
    o_i, o_j, o_k = Tensor(batch.o_i), Tensor(batch.o_j), Tensor(batch.o_k)
    z_ij, lat_ij = latent_pair(params, o_i, o_j, placement)
    z_jk, lat_jk = latent_pair(params, o_j, o_k, placement)
    z_sum = ad.add(z_ij, z_jk)
    loss = ad.mse(Tensor(batch.o_k), fdm_img(params, o_i, z_sum))
    if params.cfg.ac_proprio:
        prop = ad.mse(Tensor(batch.s_k), fdm_proprio(params, Tensor(batch.s_i), z_sum))
        loss = ad.add(loss, ad.scale(prop, weights.w_proprio))
    return loss, [lat_ij, lat_jk]


def loss_ac_idm(
    params: ModelParams, batch: TripleBatch, variant: str, placement: str = "post_vq"
) -> tuple[Tensor, list[LatentAction]]:
    o_i, o_j, o_k = Tensor(batch.o_i), Tensor(batch.o_j), Tensor(batch.o_k)
    z_ij, lat_ij = latent_pair(params, o_i, o_j, placement)
    z_jk, lat_jk = latent_pair(params, o_j, o_k, placement)
    z_ik, lat_ik = latent_pair(params, o_i, o_k, placement)
    return ac_idm_residual(z_ik, z_ij, z_jk, variant), [lat_ij, lat_jk, lat_ik]


@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict[str, float]  # loss_total, loss_rec, loss_vq, loss_ac, loss_proprio
    pair_latent: LatentAction
    triple_latents: list[LatentAction] = field(default_factory=list)

    @property
    def used_indices(self) -> np.ndarray:
        idx = [self.pair_latent.indices] + [l.indices for l in self.triple_latents]
        return np.unique(np.concatenate([a.reshape(-1) for a in idx]))


def total_loss(
    params: ModelParams,
    pair_batch: PairBatch,
    triple_batch: TripleBatch | None,
    weights: LossWeights,
    ac_form: str = "fdm",
    placement: str = "post_vq",
) -> LossBreakdown:
    """rec + reg + lambda_ac * AC, with each component reported for logging.

    With lambda_ac = 0 the AC path is skipped entirely and the total is
    bitwise equal to the plain reconstruction + bottleneck objective.
    """
    if ac_form not in AC_FORMS:
        raise ValueError(f"unknown ac_form {ac_form!r}")
    img, prop, lat = loss_rec(params, pair_batch)
    vq = loss_vq(lat, weights, params.cfg)
    total = ad.add(ad.add(img, ad.scale(prop, weights.w_proprio)), vq)

    ac_value = 0.0
    triple_lats: list[LatentAction] = []
    if weights.lambda_ac > 0 and triple_batch is not None:
        if ac_form == "fdm":
            ac, triple_lats = loss_ac_fdm(params, triple_batch, weights, placement)
        else:
            ac, triple_lats = loss_ac_idm(params, triple_batch, ac_form, placement)
        total = ad.add(total, ad.scale(ac, weights.lambda_ac))
        ac_value = ac.item()

    parts = {
        "loss_total": total.item(),
        "loss_rec": img.item(),
        "loss_vq": vq.item(),
        "loss_ac": ac_value,
        "loss_proprio": prop.item(),
    }
    return LossBreakdown(total=total, parts=parts, pair_latent=lat, triple_latents=triple_lats)


def mean_latent_norm(lat: LatentAction, placement: str = "post_vq") -> float:
    z = lat.z.data if placement == "post_vq" else lat.z_pre.data
    return float(np.linalg.norm(z.astype(np.float64), axis=-1).mean())


# ---------------------------------------------------------------------------
# evaluation adapters


def make_latent_fn(params: ModelParams, placement: str = "post_vq", chunk: int = 512):
    """(trajectory, idx_a, idx_b) -> (N, D) float64 latents, batched."""
    cfg = params.cfg

    def latent_fn(traj, ii, jj) -> np.ndarray:
        ii = np.asarray(ii, dtype=np.int64)
        jj = np.asarray(jj, dtype=np.int64)
        out = np.empty((ii.size, cfg.latent_dim), dtype=np.float64)
        for lo in range(0, ii.size, chunk):
            hi = min(lo + chunk, ii.size)
            o_a = Tensor(flatten_frames(traj.frames[ii[lo:hi]]))
            o_b = Tensor(flatten_frames(traj.frames[jj[lo:hi]]))
            out[lo:hi] = latent(params, o_a, o_b, placement).data.astype(np.float64)
        return out

    return latent_fn


def make_decoder_fn(params: ModelParams):
    """(frame (H, W, 3), z (D,)) -> predicted frame (H, W, 3) float32."""
    cfg = params.cfg

    def decoder_fn(frame: np.ndarray, z: np.ndarray) -> np.ndarray:
        o = Tensor(flatten_frames(frame[None]))
        zt = Tensor(np.asarray(z, dtype=np.float32)[None])
        pred = fdm_img(params, o, zt)
        return pred.data.reshape(cfg.height, cfg.width, 3)

    return decoder_fn


def oracle_latent_fn(traj, ii, jj) -> np.ndarray:
    """Ground-truth displacement latents z := s_j - s_i (float64, exact)."""
    s = traj.states.astype(np.float64)
    ii = np.asarray(ii, dtype=np.int64)
    jj = np.asarray(jj, dtype=np.int64)
    return s[jj] - s[ii]
