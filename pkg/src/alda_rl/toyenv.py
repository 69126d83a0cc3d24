"""PointReach: a point-mass reaching task rendered from known sources.

Every image is a deterministic function of nine scalar sources (positions,
velocities, three hues) plus, for the ``distracting`` variant, the distractor
and camera state.  Velocities are invisible in a single frame, so the agent
needs the frame stack.
"""

from __future__ import annotations

import colorsys
import csv
import dataclasses
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

TWO_PI = 2.0 * math.pi
SOURCE_NAMES = (
    "agent_x",
    "agent_y",
    "agent_vx",
    "agent_vy",
    "target_x",
    "target_y",
    "agent_hue",
    "target_hue",
    "background_hue",
)
TASK_RELEVANT = tuple(range(6))
TASK_IRRELEVANT = (6, 7, 8)
SHIFT_KINDS = ("none", "color_hard", "distracting")

# training hues live on [0, TRAIN_ARC); color_hard draws from the rest of the circle
TRAIN_ARC = TWO_PI / 3.0
AGENT_RADIUS = 0.2
TARGET_HALF = 0.18
REACH_RADIUS = 0.1
N_DISTRACTORS = 5
DISTRACTOR_HALF = 0.14
CAMERA_MAX_FRAC = 0.08


@dataclass(frozen=True)
class EnvConfig:
    image_size: int = 64
    framestack: int = 3
    action_repeat: int = 4
    episode_length: int = 100
    shift_kind: str = "none"
    dt: float = 0.1
    damping: float = 0.9
    force_scale: float = 2.0
    v_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size not in (32, 48, 64):
            raise ValueError(f"image_size must be 32, 48 or 64, got {self.image_size}")
        if self.framestack < 1:
            raise ValueError("framestack must be >= 1")
        if self.action_repeat < 1:
            raise ValueError("action_repeat must be >= 1")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if self.shift_kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift_kind {self.shift_kind!r}")
        if self.dt <= 0 or self.v_max <= 0 or not 0.0 <= self.damping <= 1.0:
            raise ValueError("invalid physics constants")


@dataclass
class SourceVector:
    agent_x: float
    agent_y: float
    agent_vx: float
    agent_vy: float
    target_x: float
    target_y: float
    agent_hue: float
    target_hue: float
    background_hue: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in SOURCE_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "SourceVector":
        return cls(*(float(v) for v in arr))

    def in_range(self, v_max: float) -> bool:
        pos = (self.agent_x, self.agent_y, self.target_x, self.target_y)
        vel = (self.agent_vx, self.agent_vy)
        hues = (self.agent_hue, self.target_hue, self.background_hue)
        return (
            all(-1.0 <= p <= 1.0 for p in pos)
            and all(-v_max <= v <= v_max for v in vel)
            and all(0.0 <= h < TWO_PI for h in hues)
        )


@dataclass
class EnvState:
    sources: SourceVector
    t: int = 0
    # rows: x, y, vx, vy, hue
    distractors: Optional[np.ndarray] = None
    camera: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def copy(self) -> "EnvState":
        return EnvState(
            sources=dataclasses.replace(self.sources),
            t=self.t,
            distractors=None if self.distractors is None else self.distractors.copy(),
            camera=self.camera.copy(),
        )


def make_shift(cfg: EnvConfig, shift_kind: str, seed: Optional[int] = None) -> EnvConfig:
    if shift_kind not in SHIFT_KINDS:
        raise ValueError(f"unknown shift_kind {shift_kind!r}; expected one of {SHIFT_KINDS}")
    if shift_kind == "none" and seed is None:
        return cfg
    changes = {"shift_kind": shift_kind}
    if seed is not None:
        changes["seed"] = seed
    return dataclasses.replace(cfg, **changes)


def sample_hue(rng: np.random.Generator, shift_kind: str) -> float:
    if shift_kind == "color_hard":
        return float(TRAIN_ARC + rng.uniform(0.0, TWO_PI - TRAIN_ARC))
    return float(rng.uniform(0.0, TRAIN_ARC))


def in_training_arc(hue: float) -> bool:
    return 0.0 <= hue % TWO_PI < TRAIN_ARC


def _rgb(hue: float, sat: float, val: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((hue % TWO_PI) / TWO_PI, sat, val), dtype=np.float32)


def _pixel_grid(size: int):
    c = (np.arange(size, dtype=np.float64) + 0.5) / size * 2.0 - 1.0
    xs = c[None, :]
    ys = -c[:, None]  # row 0 is the top of the world (y = +1)
    return xs, ys


def render(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    """Rasterize a single RGB frame [3, H, W] with values in [0, 1].

    No anti-aliasing: a pixel belongs to a shape iff its centre does.
    Colours are rounded to multiples of 1/255 so frames are exact in uint8.
    """
    s = state.sources
    size = cfg.image_size
    xs, ys = _pixel_grid(size)
    # camera translation moves the scene, so shapes are tested at shifted coordinates
    cx, cy = (state.camera if cfg.shift_kind == "distracting" else (0.0, 0.0))
    xs = xs - cx
    ys = ys - cy
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = _rgb(s.background_hue, 0.5, 0.3)
    if cfg.shift_kind == "distracting" and state.distractors is not None:
        for dx, dy, _, _, hue in state.distractors:
            mask = (np.abs(xs - dx) <= DISTRACTOR_HALF) & (np.abs(ys - dy) <= DISTRACTOR_HALF)
            img[mask] = _rgb(hue, 0.5, 0.7)
    mask = (np.abs(xs - s.target_x) <= TARGET_HALF) & (np.abs(ys - s.target_y) <= TARGET_HALF)
    img[mask] = _rgb(s.target_hue, 0.9, 0.8)
    mask = (xs - s.agent_x) ** 2 + (ys - s.agent_y) ** 2 <= AGENT_RADIUS**2
    img[mask] = _rgb(s.agent_hue, 0.9, 1.0)
    img = np.round(img * 255.0) / 255.0
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def agent_pixel_box(s: SourceVector, size: int, margin: int = 1) -> Tuple[slice, slice]:
    """Row/column slices covering the agent disc (undistracted camera)."""

    def to_col(x):
        return (x + 1.0) / 2.0 * size

    def to_row(y):
        return (1.0 - y) / 2.0 * size

    c0 = int(math.floor(to_col(s.agent_x - AGENT_RADIUS))) - margin
    c1 = int(math.ceil(to_col(s.agent_x + AGENT_RADIUS))) + margin
    r0 = int(math.floor(to_row(s.agent_y + AGENT_RADIUS))) - margin
    r1 = int(math.ceil(to_row(s.agent_y - AGENT_RADIUS))) + margin
    return slice(max(r0, 0), min(r1, size)), slice(max(c0, 0), min(c1, size))


def step_reward(s: SourceVector) -> float:
    dist = math.hypot(s.agent_x - s.target_x, s.agent_y - s.target_y)
    return 1.0 if dist < REACH_RADIUS else -0.1 * dist


class PointReach:
    """Stateful wrapper: reset/step returning frame stacks ``[3k, H, W]``.

    Randomness is split into independent streams (task layout, hues,
    distractors) so that a shift never perturbs the task-relevant sources
    for a given seed and action sequence.
    """

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.state: Optional[EnvState] = None
        self.done = True
        self._frames: deque = deque(maxlen=cfg.framestack)
        self._episode = 0
        self._seed = cfg.seed
        self._make_rngs(cfg.seed)

    def _make_rngs(self, seed: int) -> None:
        ss = np.random.SeedSequence(seed)
        task, hue, distract = ss.spawn(3)
        self._task_rng = np.random.Generator(np.random.Philox(task))
        self._hue_rng = np.random.Generator(np.random.Philox(hue))
        self._distract_rng = np.random.Generator(np.random.Philox(distract))

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        if seed is not None:
            self._make_rngs(seed)
        cfg = self.cfg
        ax, ay, tx, ty = self._task_rng.uniform(-1.0, 1.0, size=4)
        hues = [sample_hue(self._hue_rng, cfg.shift_kind) for _ in range(3)]
        sources = SourceVector(float(ax), float(ay), 0.0, 0.0, float(tx), float(ty), *hues)
        distractors = None
        if cfg.shift_kind == "distracting":
            d = self._distract_rng
            distractors = np.column_stack(
                [
                    d.uniform(-1, 1, N_DISTRACTORS),
                    d.uniform(-1, 1, N_DISTRACTORS),
                    d.uniform(-0.05, 0.05, N_DISTRACTORS),
                    d.uniform(-0.05, 0.05, N_DISTRACTORS),
                    d.uniform(0, TWO_PI, N_DISTRACTORS),
                ]
            )
        self.state = EnvState(sources=sources, t=0, distractors=distractors, camera=np.zeros(2))
        self.done = False
        self._episode += 1
        frame = render(self.state, cfg)
        self._frames.clear()
        for _ in range(cfg.framestack):
            self._frames.append(frame)
        return self.observation()

    def set_state(self, state: EnvState) -> np.ndarray:
        """Replace the current state (tests, frozen-state rollouts) and re-render."""
        self.state = state.copy()
        self.done = self.state.t >= self.cfg.episode_length
        frame = render(self.state, self.cfg)
        self._frames.clear()
        for _ in range(self.cfg.framestack):
            self._frames.append(frame)
        return self.observation()

    def observation(self) -> np.ndarray:
        return np.concatenate(list(self._frames), axis=0)

    def last_frame(self) -> np.ndarray:
        return self._frames[-1]

    def _advance_distractors(self) -> None:
        st, d = self.state, self._distract_rng
        dist = st.distractors
        dist[:, 0:2] += dist[:, 2:4]
        for axis in (0, 1):
            hit = np.abs(dist[:, axis]) > 1.0
            dist[hit, axis + 2] *= -1.0
            dist[:, axis] = np.clip(dist[:, axis], -1.0, 1.0)
        limit = 2.0 * CAMERA_MAX_FRAC  # 8% of the image width, in world units (width = 2)
        st.camera = np.clip(st.camera + d.normal(0.0, 0.03, size=2), -limit, limit)

    def step(self, action) -> Tuple[np.ndarray, float, bool, dict]:
        if self.state is None or self.done:
            raise RuntimeError("step() called on a finished episode; call reset() first")
        cfg = self.cfg
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
        s = self.state.sources
        reward = 0.0
        for _ in range(cfg.action_repeat):
            vx = float(np.clip(cfg.damping * s.agent_vx + cfg.force_scale * a[0] * cfg.dt, -cfg.v_max, cfg.v_max))
            vy = float(np.clip(cfg.damping * s.agent_vy + cfg.force_scale * a[1] * cfg.dt, -cfg.v_max, cfg.v_max))
            s.agent_vx, s.agent_vy = vx, vy
            s.agent_x = float(np.clip(s.agent_x + vx * cfg.dt, -1.0, 1.0))
            s.agent_y = float(np.clip(s.agent_y + vy * cfg.dt, -1.0, 1.0))
            reward += step_reward(s)
        if cfg.shift_kind == "distracting":
            self._advance_distractors()
        self.state.t += 1
        truncated = self.state.t >= cfg.episode_length
        self.done = truncated
        self._frames.append(render(self.state, cfg))
        return self.observation(), reward, truncated, {"truncated": truncated, "terminated": False}


def uniform_policy(seed: int = 0) -> Callable[[np.ndarray], np.ndarray]:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))

    def act(obs):
        return rng.uniform(-1.0, 1.0, size=2)

    return act


def labeled_dataset(
    cfg: EnvConfig,
    n: int,
    policy: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    seed: int = 0,
) -> List[Tuple[SourceVector, np.ndarray]]:
    """Collect ``n`` (sources, frame) pairs by rolling ``policy`` (uniform random by default)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    policy = policy or uniform_policy(seed)
    env = PointReach(dataclasses.replace(cfg, seed=seed))
    obs = env.reset()
    out = [(dataclasses.replace(env.state.sources), env.last_frame().copy())]
    while len(out) < n:
        if env.done:
            obs = env.reset()
        else:
            obs, _, _, _ = env.step(policy(obs))
        out.append((dataclasses.replace(env.state.sources), env.last_frame().copy()))
    return out


def export_dataset(pairs: Sequence[Tuple[SourceVector, np.ndarray]], out_dir: Path, name: str = "dataset") -> Path:
    """Write ``<name>.json`` manifest, ``<name>.f32`` frames and ``<name>.csv`` sources."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = np.stack([f for _, f in pairs]).astype("<f4")
    (out_dir / f"{name}.f32").write_bytes(frames.tobytes())
    with open(out_dir / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SOURCE_NAMES)
        for s, _ in pairs:
            w.writerow([repr(float(v)) for v in s.as_array()])
    manifest = {
        "format_version": 1,
        "count": len(pairs),
        "frame_shape": list(frames.shape[1:]),
        "dtype": "float32",
        "byte_order": "little",
        "frames_file": f"{name}.f32",
        "sources_file": f"{name}.csv",
        "source_names": list(SOURCE_NAMES),
    }
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def load_dataset(manifest_path: Path) -> Tuple[np.ndarray, np.ndarray]:
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text(encoding="utf-8"))
    raw = (manifest_path.parent / m["frames_file"]).read_bytes()
    frames = np.frombuffer(raw, dtype="<f4").reshape([m["count"], *m["frame_shape"]]).astype(np.float32)
    sources = np.loadtxt(manifest_path.parent / m["sources_file"], delimiter=",", skiprows=1, ndmin=2)
    return frames, sources
