"""Soft Actor-Critic over the temporal latent produced by :mod:`alda_rl.alda`."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import diffkit as dk
from .alda import AldaModel

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
ALPHA_MIN = 1e-4
ALPHA_MAX = 10.0


@dataclass(frozen=True)
class SacConfig:
    hidden: int = 1024
    batch_size: int = 128
    discount: float = 0.99
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    alpha_lr: float = 1e-4
    init_alpha: float = 0.1
    target_entropy: float = -2.0
    tau: float = 0.01
    update_every: int = 2
    warmup_steps: int = 1000
    buffer_capacity: int = 100_000
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.hidden < 1 or self.batch_size < 1:
            raise ValueError("hidden and batch_size must be positive")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if min(self.actor_lr, self.critic_lr, self.alpha_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if not ALPHA_MIN <= self.init_alpha <= ALPHA_MAX:
            raise ValueError(f"init_alpha must lie in [{ALPHA_MIN}, {ALPHA_MAX}]")
        if self.update_every < 1 or self.warmup_steps < 0 or self.buffer_capacity < 1:
            raise ValueError("invalid schedule or buffer size")


# ---------------------------------------------------------------------------
# replay


class ReplayBuffer:
    """FIFO ring of transitions that stores each rendered frame once.

    A transition keeps the frame indices of ``o_t`` and ``o_{t+1}``; stacks
    are assembled at sampling time.  Frames are kept as uint8, which is
    lossless because the renderer quantizes colours to 1/255 steps.
    """

    def __init__(self, capacity: int, frame_shape, k: int, action_dim: int = 2):
        self.capacity = int(capacity)
        self.k = k
        self.frame_capacity = 2 * self.capacity + 2 * k
        self.frames = np.zeros((self.frame_capacity, *frame_shape), dtype=np.uint8)
        self.obs_idx = np.zeros((self.capacity, k), dtype=np.int64)
        self.next_idx = np.zeros((self.capacity, k), dtype=np.int64)
        self.actions = np.zeros((self.capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros(self.capacity, dtype=np.float32)
        self.truncated = np.zeros(self.capacity, dtype=bool)
        self.size = 0
        self.pos = 0
        self._frame_pos = 0
        self._current: Optional[np.ndarray] = None  # frame ids of the live stack

    def __len__(self):
        return self.size

    def _put_frame(self, frame: np.ndarray) -> int:
        i = self._frame_pos
        self.frames[i] = np.round(frame * 255.0).astype(np.uint8)
        self._frame_pos = (i + 1) % self.frame_capacity
        return i

    def start_episode(self, first_frame: np.ndarray) -> None:
        i = self._put_frame(first_frame)
        self._current = np.full(self.k, i, dtype=np.int64)

    def add(self, action, reward: float, next_frame: np.ndarray, truncated: bool) -> None:
        if self._current is None:
            raise RuntimeError("start_episode() must be called before add()")
        a = np.asarray(action, dtype=np.float32)
        if np.any(np.abs(a) > 1.0) or not math.isfinite(reward):
            raise ValueError("action must lie in [-1, 1]^2 and reward must be finite")
        j = self._put_frame(next_frame)
        nxt = np.concatenate([self._current[1:], [j]])
        self.obs_idx[self.pos] = self._current
        self.next_idx[self.pos] = nxt
        self.actions[self.pos] = a
        self.rewards[self.pos] = reward
        self.truncated[self.pos] = truncated
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self._current = nxt

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=n)

    def stacks(self, frame_ids: np.ndarray) -> torch.Tensor:
        """[B, k] frame ids -> float tensor [B, 3k, H, W]."""
        f = self.frames[frame_ids]  # [B, k, 3, H, W]
        b, k, c, h, w = f.shape
        return torch.from_numpy(f.reshape(b, k * c, h, w).astype(np.float32) / 255.0)

    def sample(self, rng: np.random.Generator, n: int) -> Dict[str, object]:
        idx = self.sample_indices(rng, n)
        return {
            "idx": idx,
            "obs_ids": self.obs_idx[idx],
            "next_ids": self.next_idx[idx],
            "action": torch.from_numpy(self.actions[idx]),
            "reward": torch.from_numpy(self.rewards[idx]),
            "truncated": torch.from_numpy(self.truncated[idx]),
        }

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "frames": self.frames,
            "obs_idx": self.obs_idx,
            "next_idx": self.next_idx,
            "actions": self.actions,
            "rewards": self.rewards,
            "truncated": self.truncated,
            "meta": np.array([self.size, self.pos, self._frame_pos], dtype=np.int64),
            "current": self._current if self._current is not None else np.full(self.k, -1, dtype=np.int64),
        }

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name in ("frames", "obs_idx", "next_idx", "actions", "rewards", "truncated"):
            getattr(self, name)[...] = arrays[name]
        self.size, self.pos, self._frame_pos = (int(v) for v in arrays["meta"])
        cur = np.asarray(arrays["current"], dtype=np.int64)
        self._current = None if cur[0] < 0 else cur.copy()


# ---------------------------------------------------------------------------
# networks


def init_mlp(rng: np.random.Generator, sizes, prefix: str = "") -> Dict[str, torch.Tensor]:
    p = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        p[f"{prefix}l{i}.w"] = torch.from_numpy(rng.uniform(-bound, bound, (fan_out, fan_in)).astype(np.float32))
        p[f"{prefix}l{i}.b"] = torch.from_numpy(rng.uniform(-bound, bound, (fan_out,)).astype(np.float32))
    return p


def mlp_forward(p: Mapping[str, torch.Tensor], x: torch.Tensor, prefix: str = "") -> torch.Tensor:
    """Dense layers with GeLU after every layer except the last."""
    n = sum(1 for k in p if k.startswith(prefix) and k.endswith(".w"))
    for i in range(n):
        x = dk.dense(x, p[f"{prefix}l{i}.w"], p[f"{prefix}l{i}.b"])
        if i < n - 1:
            x = dk.gelu(x)
    return x


def init_actor(rng, state_dim: int, action_dim: int, hidden: int):
    return init_mlp(rng, (state_dim, hidden, hidden, 2 * action_dim))


def init_critic(rng, state_dim: int, action_dim: int, hidden: int):
    p = init_mlp(rng, (state_dim + action_dim, hidden, hidden, 1), prefix="q1.")
    p.update(init_mlp(rng, (state_dim + action_dim, hidden, hidden, 1), prefix="q2."))
    return p


def actor_dist(p_actor, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean and log-std of the pre-tanh Gaussian.

    The log-std is squashed smoothly into [LOG_STD_MIN, LOG_STD_MAX] with a
    tanh so the bound never kills its gradient.
    """
    out = mlp_forward(p_actor, z)
    mu, raw = out.chunk(2, dim=-1)
    log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (torch.tanh(raw) + 1.0)
    return mu, log_std


def tanh_log_prob(u: torch.Tensor, mu: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """log density of a = tanh(u), u ~ N(mu, exp(log_std)^2), summed over action dims."""
    gauss = -0.5 * ((u - mu) / log_std.exp()) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    correction = 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))
    return (gauss - correction).sum(dim=-1)


def sample_action(
    p_actor,
    z: torch.Tensor,
    deterministic: bool = False,
    noise: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Reparameterized tanh-Gaussian action and its log-probability."""
    mu, log_std = actor_dist(p_actor, z)
    if deterministic:
        u = mu
    else:
        if noise is None:
            noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        u = mu + log_std.exp() * noise
    return torch.tanh(u), tanh_log_prob(u, mu, log_std)


def q_values(p_critic, z: torch.Tensor, action: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    x = torch.cat([z, action], dim=-1)
    return mlp_forward(p_critic, x, "q1.").squeeze(-1), mlp_forward(p_critic, x, "q2.").squeeze(-1)


# ---------------------------------------------------------------------------
# losses


def critic_target(
    reward: torch.Tensor,
    next_z: torch.Tensor,
    p_actor,
    p_target,
    alpha: float,
    discount: float,
    noise: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """y = r + discount * (min_i Q'_i(s', a') - alpha log pi(a'|s')), no done mask.

    Episodes end only by time limit, so bootstrapping is never cut.
    """
    with torch.no_grad():
        a_next, logp_next = sample_action(p_actor, next_z, noise=noise, generator=generator)
        q1, q2 = q_values(p_target, next_z, a_next)
        return reward + discount * (torch.minimum(q1, q2) - alpha * logp_next)


def critic_loss(p_critic, z: torch.Tensor, action: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    q1, q2 = q_values(p_critic, z, action)
    y = y.detach()
    return ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()


def actor_loss(p_actor, p_critic, z: torch.Tensor, alpha: float, noise=None, generator=None):
    """mean(alpha log pi - min(Q1, Q2)); critic weights and ``z`` are detached.

    Returns ``(loss, log_probs)``; the log-probs feed the temperature update.
    """
    z = z.detach()
    frozen = {k: v.detach() for k, v in p_critic.items()}
    action, logp = sample_action(p_actor, z, noise=noise, generator=generator)
    q1, q2 = q_values(frozen, z, action)
    return (alpha * logp - torch.minimum(q1, q2)).mean(), logp


def temperature_loss(log_alpha: torch.Tensor, log_probs: torch.Tensor, target_entropy: float) -> torch.Tensor:
    return -(log_alpha * (log_probs.detach() + target_entropy)).mean()


def soft_update(target: dk.ParamStore, online: dk.ParamStore, tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    with torch.no_grad():
        for name, p in target.params.items():
            # lerp is exact for equal nets and for tau = 1
            p.lerp_(online.params[name], tau)


# ---------------------------------------------------------------------------
# agent


class Agent:
    """ALDA representation plus SAC heads, with per-group Adam stores."""

    def __init__(self, model: AldaModel, cfg: SacConfig, rng: np.random.Generator, action_dim: int = 2):
        self.model = model
        self.cfg = cfg
        self.action_dim = action_dim
        sd = model.state_dim
        self.actor = dk.ParamStore(init_actor(rng, sd, action_dim, cfg.hidden))
        self.critic = dk.ParamStore(init_critic(rng, sd, action_dim, cfg.hidden))
        self.critic_target = dk.ParamStore(self.critic.snapshot())
        self.log_alpha = dk.ParamStore({"log_alpha": torch.tensor([math.log(cfg.init_alpha)])})
        self.num_updates = 0

    @property
    def alpha(self) -> float:
        return float(self.log_alpha["log_alpha"].detach().exp())

    def stores(self) -> Dict[str, dk.ParamStore]:
        s = dict(self.model.stores())
        s.update(actor=self.actor, critic=self.critic, critic_target=self.critic_target, log_alpha=self.log_alpha)
        return s

    def act(self, obs: np.ndarray, deterministic: bool, generator: Optional[torch.Generator] = None) -> np.ndarray:
        with torch.no_grad():
            z = self.model.state(torch.from_numpy(np.asarray(obs, dtype=np.float32)[None]), grad_to_encoder=False)
            a, _ = sample_action(self.actor.params, z, deterministic=deterministic, generator=generator)
        return a[0].numpy().astype(np.float64)

    def _encode_pair(self, buffer: ReplayBuffer, batch) -> Tuple[torch.Tensor, torch.Tensor]:
        """States for o_t and o_{t+1}; shared frames are encoded once."""
        model = self.model
        ids = np.concatenate([batch["obs_ids"], batch["next_ids"]], axis=0)
        grad = model.cfg.critic_grads_to_encoder
        if model.cfg.framestack_joint:
            obs = buffer.stacks(ids)
            with torch.set_grad_enabled(grad):
                z_d = model.disentangled(obs)
        else:
            uniq, inverse = np.unique(ids.reshape(-1), return_inverse=True)
            frames = torch.from_numpy(buffer.frames[uniq].astype(np.float32) / 255.0)
            with torch.set_grad_enabled(grad):
                z_u = model.latents(frames)
            z_d = z_u[torch.from_numpy(inverse.reshape(ids.shape))]
        with torch.no_grad():
            next_state = model.state_from_latents(z_d[len(batch["obs_ids"]):].detach())
        state = model.state_from_latents(z_d[: len(batch["obs_ids"])])
        return state, next_state

    def update(self, buffer: ReplayBuffer, rng: np.random.Generator, generator: torch.Generator) -> Dict[str, float]:
        """Critic, actor+temperature and representation updates, then target tracking.

        With fewer than ``batch_size`` transitions stored nothing changes and
        ``{"skipped": 1.0}`` is returned.
        """
        cfg = self.cfg
        if len(buffer) < cfg.batch_size:
            return {"skipped": 1.0}
        batch = buffer.sample(rng, cfg.batch_size)
        state, next_state = self._encode_pair(buffer, batch)
        alpha = self.alpha

        y = critic_target(batch["reward"], next_state, self.actor.params, self.critic_target.params,
                          alpha, cfg.discount, generator=generator)
        c_loss = critic_loss(self.critic.params, state, batch["action"], y)
        critic_groups = {"critic": self.critic.params, "temporal": self.model.temporal.params}
        if self.model.cfg.critic_grads_to_encoder:
            critic_groups.update(encoder=self.model.encoder.params, codebook=self.model.codebook.params)
        g = dk.backward_groups(c_loss, critic_groups)
        dk.adam_step(self.critic, g["critic"], cfg.critic_lr, cfg.betas, cfg.adam_eps)
        if len(self.model.temporal):
            dk.adam_step(self.model.temporal, g["temporal"], cfg.critic_lr, cfg.betas, cfg.adam_eps)
        if self.model.cfg.critic_grads_to_encoder:
            dk.adam_step(self.model.encoder, g["encoder"], self.model.cfg.lr, cfg.betas, cfg.adam_eps)
            dk.adam_step(self.model.codebook, g["codebook"], self.model.cfg.codebook_lr, cfg.betas, cfg.adam_eps)

        a_loss, logp = actor_loss(self.actor.params, self.critic.params, state, alpha, generator=generator)
        dk.adam_step(self.actor, dk.backward(a_loss, self.actor.params), cfg.actor_lr, cfg.betas, cfg.adam_eps)
        t_loss = temperature_loss(self.log_alpha["log_alpha"], logp, cfg.target_entropy)
        dk.adam_step(self.log_alpha, dk.backward(t_loss, self.log_alpha.params), cfg.alpha_lr, cfg.betas, cfg.adam_eps)
        with torch.no_grad():
            self.log_alpha["log_alpha"].clamp_(math.log(ALPHA_MIN), math.log(ALPHA_MAX))

        # the representation trains on its own batch
        alda_batch = buffer.sample(rng, cfg.batch_size)
        parts = self.model.update(buffer.stacks(alda_batch["obs_ids"]))

        soft_update(self.critic_target, self.critic, cfg.tau)
        self.num_updates += 1
        with torch.no_grad():
            q1, q2 = q_values(self.critic.params, state.detach(), batch["action"])
        return {
            "critic_loss": float(c_loss.detach()),
            "actor_loss": float(a_loss.detach()),
            "alpha_loss": float(t_loss.detach()),
            "alpha": self.alpha,
            "q_mean": float(torch.minimum(q1, q2).mean()),
            "entropy": float(-logp.detach().mean()),
            "alda_loss": parts["alda_loss"],
            "recon_mse": parts["recon_mse"],
            "commit": parts["commit"],
        }
