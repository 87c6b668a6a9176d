"""Binary file formats: ACLAMDS1 trajectory datasets and ACLAMCK1 checkpoints.

Both formats are magic bytes, a u32 little-endian header length, a UTF-8 JSON
header, then raw little-endian float32 payload. Writers are deterministic so
identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import world

DATASET_MAGIC = b"ACLAMDS1"
CHECKPOINT_MAGIC = b"ACLAMCK1"


class DatasetFormatError(ValueError):
    """Malformed ACLAMDS1 file (bad magic, truncation, header mismatch)."""


class CheckpointFormatError(ValueError):
    """Malformed ACLAMCK1 file."""


class CheckpointMismatchError(ValueError):
    """Checkpoint arrays do not match the expected model geometry."""


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    env_count: int = 4
    traj_per_env: int = 25
    steps: int = 50  # frames per trajectory
    height: int = 32
    width: int = 32
    step_max: float = 0.12
    min_step: float = 0.01
    interior_retries: int = 8

    def world_config(self) -> world.WorldConfig:
        return world.WorldConfig(
            env_count=self.env_count,
            height=self.height,
            width=self.width,
            step_max=self.step_max,
            min_step=self.min_step,
            interior_retries=self.interior_retries,
        )


@dataclass
class TrajectoryRecord:
    env_id: int
    frames: np.ndarray  # (T, H, W, 3) f32
    states: np.ndarray  # (T, 2) f32
    actions: np.ndarray  # (T-1, 2) f32

    def __len__(self) -> int:
        return self.states.shape[0]


class Dataset:
    """In-memory trajectory collection, indexable flat or by (env_id, index)."""

    def __init__(self, header: dict, trajectories: list[TrajectoryRecord]):
        self.header = header
        self.trajectories = trajectories
        self.by_env: dict[int, list[int]] = {}
        for i, tr in enumerate(trajectories):
            self.by_env.setdefault(tr.env_id, []).append(i)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def image_hw(self) -> tuple[int, int]:
        h, w = self.header["image_hw"]
        return int(h), int(w)

    def get(self, env_id: int, index: int) -> TrajectoryRecord:
        return self.trajectories[self.by_env[env_id][index]]

    def subset(self, ids: list[int]) -> "Dataset":
        return Dataset(self.header, [self.trajectories[i] for i in ids])

    def split_ids(self, holdout_frac: float) -> tuple[list[int], list[int]]:
        """Per-env split by trajectory index; the last fraction is held out."""
        train: list[int] = []
        held: list[int] = []
        for env in sorted(self.by_env):
            ids = self.by_env[env]
            n_hold = int(round(len(ids) * holdout_frac))
            n_hold = min(max(n_hold, 1 if holdout_frac > 0 else 0), len(ids) - 1)
            cut = len(ids) - n_hold
            train.extend(ids[:cut])
            held.extend(ids[cut:])
        return train, held


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, separators=(",", ":")).encode("utf-8")


def gen_dataset(cfg: DatasetConfig, path: str) -> str:
    """Generate and write a balanced dataset; returns the path written."""
    wc = cfg.world_config()
    blobs: list[bytes] = []
    for env_id in range(cfg.env_count):
        for k in range(cfg.traj_per_env):
            entropy = np.random.SeedSequence([cfg.seed, env_id, k]).generate_state(2, np.uint64)
            scene = world.make_scene(int(entropy[0]), env_id, wc)
            traj = world.gen_trajectory(scene, int(entropy[1]), cfg.steps, wc)
            blobs.append(struct.pack("<II", env_id, cfg.steps))
            blobs.append(traj.frames.astype("<f4").tobytes())
            blobs.append(traj.states.astype("<f4").tobytes())
            blobs.append(traj.actions.astype("<f4").tobytes())

    header = {
        "format_version": 1,
        "image_hw": [cfg.height, cfg.width],
        "channels": 3,
        "env_count": cfg.env_count,
        "traj_count": cfg.env_count * cfg.traj_per_env,
        "steps_per_traj": cfg.steps,
        "seed": cfg.seed,
        "dtype": "f32",
    }
    hbytes = _dump_header(header)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)
    return path


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(DATASET_MAGIC) + 4 or raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not an ACLAMDS1 file (bad magic)")
    off = len(DATASET_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + hlen > len(raw):
        raise DatasetFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"{path}: unreadable header ({e})") from e
    off += hlen

    for key in ("format_version", "image_hw", "channels", "env_count", "traj_count", "steps_per_traj", "dtype"):
        if key not in header:
            raise DatasetFormatError(f"{path}: header missing {key!r}")
    if header["dtype"] != "f32":
        raise DatasetFormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    h, w = (int(v) for v in header["image_hw"])
    channels = int(header["channels"])

    trajectories: list[TrajectoryRecord] = []
    for n in range(int(header["traj_count"])):
        if off + 8 > len(raw):
            raise DatasetFormatError(f"{path}: truncated at trajectory {n} header")
        env_id, T = struct.unpack_from("<II", raw, off)
        off += 8
        if T != int(header["steps_per_traj"]):
            raise DatasetFormatError(
                f"{path}: trajectory {n} has T={T}, header says {header['steps_per_traj']}"
            )
        nbytes = (T * h * w * channels + T * 2 + (T - 1) * 2) * 4
        if off + nbytes > len(raw):
            raise DatasetFormatError(f"{path}: truncated payload in trajectory {n}")
        frames = np.frombuffer(raw, dtype="<f4", count=T * h * w * channels, offset=off).reshape(T, h, w, channels)
        off += frames.nbytes
        states = np.frombuffer(raw, dtype="<f4", count=T * 2, offset=off).reshape(T, 2)
        off += states.nbytes
        actions = np.frombuffer(raw, dtype="<f4", count=(T - 1) * 2, offset=off).reshape(T - 1, 2)
        off += actions.nbytes
        trajectories.append(
            TrajectoryRecord(env_id=int(env_id), frames=frames.copy(), states=states.copy(), actions=actions.copy())
        )
    if off != len(raw):
        raise DatasetFormatError(f"{path}: {len(raw) - off} trailing bytes beyond declared payload")
    if len({tr.env_id for tr in trajectories} - set(range(int(header["env_count"])))) > 0:
        raise DatasetFormatError(f"{path}: trajectory env_id outside header env_count")
    return Dataset(header, trajectories)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(arrays: dict[str, np.ndarray], config_snapshot: dict, path: str) -> str:
    """Write named float32 arrays plus a config snapshot; deterministic bytes."""
    names = sorted(arrays)
    entries = []
    payload = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header = {"format_version": 1, "arrays": entries, "config_snapshot": config_snapshot}
    hbytes = _dump_header(header)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for b in payload:
            f.write(b)
    return path


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not an ACLAMCK1 file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + hlen > len(raw):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable header ({e})") from e
    base = off + hlen

    arrays: dict[str, np.ndarray] = {}
    expected_end = base
    for entry in header.get("arrays", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + int(entry["offset"])
        if start + count * 4 > len(raw):
            raise CheckpointFormatError(f"{path}: truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape).copy()
        expected_end = max(expected_end, start + count * 4)
    if expected_end != len(raw):
        raise CheckpointFormatError(f"{path}: payload length does not match header")
    return arrays, header.get("config_snapshot", {})
