"""Deterministic synthetic 2-D tabletop world.

An agent disk moves by bounded translations over a colored background with a
few distractor disks. Positions live in [0, 1]^2 and are clamped to keep the
agent fully in frame; because motion is pure translation, displacement
composition is exact, which gives the latent-action experiments an unambiguous
ground truth.

All randomness flows through numpy's counter-based Philox generator with
derived streams, so scene and trajectory generation is reproducible and
parallel-safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AGENT_RADIUS = 0.06
AGENT_COLOR = (1.0, 0.85, 0.15)

# One background family and one distractor family per environment; families
# are far apart in RGB so a nearest-base classifier on the background color
# separates environments perfectly.
BACKGROUND_BASES = (
    (0.10, 0.15, 0.45),
    (0.08, 0.38, 0.12),
    (0.45, 0.12, 0.10),
    (0.36, 0.10, 0.44),
    (0.05, 0.35, 0.40),
    (0.40, 0.35, 0.08),
    (0.30, 0.20, 0.12),
    (0.22, 0.24, 0.28),
)
DISTRACTOR_BASES = (
    (0.35, 0.45, 0.80),
    (0.40, 0.70, 0.40),
    (0.80, 0.45, 0.40),
    (0.70, 0.40, 0.78),
    (0.35, 0.68, 0.72),
    (0.75, 0.68, 0.35),
    (0.65, 0.50, 0.38),
    (0.55, 0.58, 0.62),
)

_BG_JITTER = 0.04
_DISTRACTOR_JITTER = 0.08
_MAX_PLACEMENT_ATTEMPTS = 10_000


class SceneGenerationError(RuntimeError):
    """Rejection sampling could not place the requested distractors."""


@dataclass(frozen=True)
class WorldConfig:
    env_count: int = 4
    height: int = 32
    width: int = 32
    step_max: float = 0.12
    min_step: float = 0.01
    # candidate redraws per step before accepting a clamped move
    interior_retries: int = 8

    def __post_init__(self):
        if not (1 <= self.env_count <= len(BACKGROUND_BASES)):
            raise ValueError(f"env_count must be in [1, {len(BACKGROUND_BASES)}]")
        if self.height < 16 or self.width < 16:
            raise ValueError("frames must be at least 16x16")


@dataclass(frozen=True)
class Distractor:
    center: tuple[float, float]
    radius: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    env_id: int
    background_color: tuple[float, float, float]
    distractors: tuple[Distractor, ...]
    agent_radius: float = AGENT_RADIUS
    agent_color: tuple[float, float, float] = AGENT_COLOR


@dataclass(frozen=True)
class WorldState:
    """Agent position; this is the proprioceptive state."""

    p: tuple[float, float]


@dataclass
class Trajectory:
    scene: SceneSpec | None
    states: np.ndarray  # (T, 2) float32 positions
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    actions: np.ndarray  # (T-1, 2) float32 commanded displacements
    # optional per-frame headings, consumed only by the rotation filter hook
    headings: np.ndarray | None = None

    def __len__(self) -> int:
        return self.states.shape[0]


def _stream(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(entropy))))


def make_scene(seed: int, env_id: int, cfg: WorldConfig = WorldConfig()) -> SceneSpec:
    """Sample a scene deterministically from (seed, env_id)."""
    if not (0 <= env_id < cfg.env_count):
        raise ValueError(f"env_id {env_id} out of range [0, {cfg.env_count})")
    rng = _stream(seed, env_id)

    bg = np.clip(np.asarray(BACKGROUND_BASES[env_id]) + rng.uniform(-_BG_JITTER, _BG_JITTER, 3), 0.0, 1.0)
    count = int(rng.integers(2, 6))
    base = np.asarray(DISTRACTOR_BASES[env_id])

    placed: list[Distractor] = []
    attempts = 0
    while len(placed) < count:
        attempts += 1
        if attempts > _MAX_PLACEMENT_ATTEMPTS:
            raise SceneGenerationError(f"could not place {count} distractors after {attempts - 1} attempts")
        center = rng.uniform(0.12, 0.88, 2)
        radius = float(rng.uniform(0.04, 0.10))
        ok = all(
            np.hypot(center[0] - d.center[0], center[1] - d.center[1]) >= radius + d.radius
            for d in placed
        )
        if not ok:
            continue
        color = np.clip(base + rng.uniform(-_DISTRACTOR_JITTER, _DISTRACTOR_JITTER, 3), 0.0, 1.0)
        placed.append(Distractor(center=(float(center[0]), float(center[1])), radius=radius, color=tuple(color)))

    return SceneSpec(env_id=env_id, background_color=tuple(bg), distractors=tuple(placed))


def classify_background(color) -> int:
    """Nearest background family; the trivial environment classifier."""
    c = np.asarray(color, dtype=np.float64)
    d = ((np.asarray(BACKGROUND_BASES) - c) ** 2).sum(axis=1)
    return int(d.argmin())


def render(scene: SceneSpec, state: WorldState, height: int = 32, width: int = 32) -> np.ndarray:
    """Paint background, distractors in listed order, agent last.

    Pixel membership uses the pixel-center test with no anti-aliasing, so
    output is bit-exact per input. Returns (H, W, 3) float32 in [0, 1].
    """
    if height < 16 or width < 16:
        raise ValueError("render needs height and width >= 16")
    xs = (np.arange(width, dtype=np.float64) + 0.5) / width
    ys = (np.arange(height, dtype=np.float64) + 0.5) / height
    gx, gy = np.meshgrid(xs, ys)

    img = np.empty((height, width, 3), dtype=np.float32)
    img[:] = np.asarray(scene.background_color, dtype=np.float32)

    def paint(cx, cy, r, color):
        mask = (gx - cx) ** 2 + (gy - cy) ** 2 <= r * r
        img[mask] = np.asarray(color, dtype=np.float32)

    for d in scene.distractors:
        paint(d.center[0], d.center[1], d.radius, d.color)
    paint(state.p[0], state.p[1], scene.agent_radius, scene.agent_color)
    return img


def clamp_position(p: np.ndarray, margin: float = AGENT_RADIUS) -> np.ndarray:
    return np.clip(p, margin, 1.0 - margin)


def step(state: WorldState, action, cfg: WorldConfig = WorldConfig()) -> WorldState:
    """Apply a bounded translation; the new position is clamped in frame."""
    a = np.asarray(action, dtype=np.float64)
    if float(np.hypot(a[0], a[1])) > cfg.step_max + 1e-12:
        raise ValueError(f"action norm {np.hypot(a[0], a[1]):.4f} exceeds step_max {cfg.step_max}")
    p = clamp_position(np.asarray(state.p, dtype=np.float64) + a)
    return WorldState(p=(float(p[0]), float(p[1])))


def gen_trajectory(scene: SceneSpec, seed: int, T: int, cfg: WorldConfig = WorldConfig()) -> Trajectory:
    """Roll out T states with uniform-direction, broad-magnitude displacements.

    Candidate steps that would clamp are redrawn up to cfg.interior_retries
    times, which keeps the overwhelming majority of steps clamp-free so
    displacement additivity holds exactly on most index triples.

    The rollout runs in float32 so the stored arrays satisfy
    states[t+1] == clamp(states[t] + actions[t]) bitwise.
    """
    if T < 3:
        raise ValueError("trajectories need at least 3 frames")
    rng = _stream(seed)
    margin = np.float32(scene.agent_radius)
    lo, hi = margin, np.float32(1.0) - margin

    states = np.empty((T, 2), dtype=np.float32)
    actions = np.empty((T - 1, 2), dtype=np.float32)
    p = rng.uniform(float(margin), float(1.0 - margin), 2).astype(np.float32)
    states[0] = p
    for t in range(T - 1):
        a = np.zeros(2, dtype=np.float32)
        for _ in range(cfg.interior_retries + 1):
            theta = rng.uniform(0.0, 2.0 * np.pi)
            mag = rng.uniform(cfg.min_step, cfg.step_max)
            a = np.array([mag * np.cos(theta), mag * np.sin(theta)], dtype=np.float32)
            nxt = p + a
            if lo <= nxt[0] <= hi and lo <= nxt[1] <= hi:
                break
        p = np.clip(p + a, lo, hi)
        actions[t] = a
        states[t + 1] = p

    frames = np.stack(
        [render(scene, WorldState(p=(float(s[0]), float(s[1]))), cfg.height, cfg.width) for s in states]
    )
    return Trajectory(scene=scene, states=states, frames=frames, actions=actions)
