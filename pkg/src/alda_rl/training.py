"""Training loop: data collection, scheduled updates, evaluation, checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import diffkit as dk
from .alda import AldaModel, expected_shapes
from .config import ExperimentConfig, int_seed, rng_stream, save_config, torch_generator
from .evalkit import AgentPolicy, EvalReport, evaluate_policy
from .sac import Agent, ReplayBuffer
from .toyenv import PointReach

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "episode_return", "critic_loss", "actor_loss", "alpha", "alda_loss", "recon_mse")
EVAL_HEADER = ("step", "shift_kind", "episodes", "mean_return", "std_return")
PARAMS_FILE = "params"


def build_agent(cfg: ExperimentConfig) -> Agent:
    rng = rng_stream(cfg.seed, "init")
    model = AldaModel(cfg.alda, cfg.env.image_size, cfg.env.framestack, rng)
    return Agent(model, cfg.sac, rng)


def agent_tensors(agent: Agent, with_optimizer: bool = True) -> Dict[str, torch.Tensor]:
    out = {}
    for group, store in agent.stores().items():
        if with_optimizer:
            out.update(store.state_tensors(group))
        else:
            out.update({f"{group}/{n}": p.detach() for n, p in store.items()})
    return out


def save_checkpoint(agent: Agent, cfg: ExperimentConfig, ckpt_dir: Path, step: int) -> Path:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, ckpt_dir / "config.json")
    return dk.save_tensors(ckpt_dir / PARAMS_FILE, agent_tensors(agent), meta={"step": step})


def load_checkpoint(ckpt_dir: Path, cfg: Optional[ExperimentConfig] = None):
    """Rebuild an agent from ``ckpt_dir``; returns ``(agent, cfg, step)``."""
    from .config import load_config

    ckpt_dir = Path(ckpt_dir)
    cfg = cfg or load_config(ckpt_dir / "config.json")
    agent = build_agent(cfg)
    stores = agent.stores()
    tensors, meta = dk.load_tensors(ckpt_dir / f"{PARAMS_FILE}.json", expected_shapes(stores))
    for group, store in stores.items():
        has_opt = f"{group}.adam_step" in tensors
        store.load_state_tensors(group, tensors, params_only=not has_opt)
    return agent, cfg, int(meta.get("step", 0))


def latest_checkpoint(out_dir: Path) -> Optional[Path]:
    ckpts = sorted((Path(out_dir) / "checkpoints").glob("step_*"))
    return ckpts[-1] if ckpts else None


class CsvLog:
    def __init__(self, path: Path, header, resume: bool = False):
        self.path = Path(path)
        new = not (resume and self.path.exists())
        self.fh = open(self.path, "w" if new else "a", newline="")
        self.writer = csv.writer(self.fh)
        if new:
            self.writer.writerow(header)
            self.fh.flush()

    def write(self, row):
        self.writer.writerow(row)
        self.fh.flush()

    def close(self):
        self.fh.close()


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


@dataclass
class LoopState:
    step: int = 0
    episode: int = 0
    episode_return: float = 0.0
    window_returns: List[float] = field(default_factory=list)
    last_window_mean: float = float("nan")
    episode_returns: List[float] = field(default_factory=list)
    last_metrics: Dict[str, float] = field(default_factory=dict)


class Trainer:
    """Owns the environment, agent, replay buffer and RNG streams of one run."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path, resume: bool = False):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self._prepare_dir(resume)
        seed = cfg.seed
        self.agent = build_agent(cfg)
        self.env = PointReach(dataclasses.replace(cfg.env, seed=int_seed(seed, "env")))
        frame_shape = (3, cfg.env.image_size, cfg.env.image_size)
        self.buffer = ReplayBuffer(cfg.sac.buffer_capacity, frame_shape, cfg.env.framestack)
        self.replay_rng = rng_stream(seed, "replay")
        self.warmup_rng = rng_stream(seed, "warmup")
        self.act_gen = torch_generator(seed, "act")
        self.update_gen = torch_generator(seed, "update")
        self.eval_seed = int_seed(seed, "eval")
        self.state = LoopState()
        self.obs = None
        if resume and latest_checkpoint(self.out_dir) is not None:
            self._restore()

    def _prepare_dir(self, resume: bool) -> None:
        d = self.out_dir
        if d.exists() and any(d.iterdir()) and not resume:
            raise FileExistsError(f"output directory {d} is not empty; pass --resume to continue it")
        d.mkdir(parents=True, exist_ok=True)
        if not (resume and (d / "config.json").exists()):
            save_config(self.cfg, d / "config.json")

    # -- persistence -------------------------------------------------------

    def _resume_dir(self) -> Path:
        return self.out_dir / "resume"

    def checkpoint(self) -> Path:
        step = self.state.step
        path = save_checkpoint(self.agent, self.cfg, self.out_dir / "checkpoints" / f"step_{step:07d}", step)
        rd = self._resume_dir()
        rd.mkdir(exist_ok=True)
        np.savez_compressed(rd / "replay.npz", **self.buffer.state_arrays())
        extra = {
            "state": self.state,
            "env": self.env,
            "obs": self.obs,
            "replay_rng": self.replay_rng.bit_generator.state,
            "warmup_rng": self.warmup_rng.bit_generator.state,
            "act_gen": self.act_gen.get_state(),
            "update_gen": self.update_gen.get_state(),
            "num_updates": self.agent.num_updates,
            "step": step,
        }
        with open(rd / "trainer.pkl", "wb") as fh:
            pickle.dump(extra, fh)
        return path

    def _restore(self) -> None:
        ckpt = latest_checkpoint(self.out_dir)
        agent, _, step = load_checkpoint(ckpt, self.cfg)
        with open(self._resume_dir() / "trainer.pkl", "rb") as fh:
            extra = pickle.load(fh)
        if extra["step"] != step:
            raise RuntimeError(f"resume state is at step {extra['step']} but latest checkpoint is {step}")
        self.agent = agent
        self.agent.num_updates = extra["num_updates"]
        with np.load(self._resume_dir() / "replay.npz") as z:
            self.buffer.load_state_arrays(z)
        self.state, self.env, self.obs = extra["state"], extra["env"], extra["obs"]
        self.replay_rng.bit_generator.state = extra["replay_rng"]
        self.warmup_rng.bit_generator.state = extra["warmup_rng"]
        self.act_gen.set_state(extra["act_gen"])
        self.update_gen.set_state(extra["update_gen"])
        log.info("resumed %s at step %d", self.out_dir, step)

    # -- loop --------------------------------------------------------------

    def evaluate(self, shifts=None, episodes=None) -> List[EvalReport]:
        run = self.cfg.run
        policy = AgentPolicy(self.agent)
        return [
            evaluate_policy(self.cfg.env, shift, policy, episodes or run.eval_episodes, self.eval_seed,
                            checkpoint=f"step_{self.state.step}")
            for shift in (shifts or run.eval_shifts)
        ]

    def _new_episode(self) -> None:
        self.obs = self.env.reset()
        self.buffer.start_episode(self.env.last_frame())
        self.state.episode_return = 0.0

    def train(self, steps: Optional[int] = None) -> Dict[str, object]:
        cfg, run, st = self.cfg, self.cfg.run, self.state
        total = steps or run.steps
        resume = st.step > 0
        metrics = CsvLog(self.out_dir / "metrics.csv", METRICS_HEADER, resume)
        evals = CsvLog(self.out_dir / "eval.csv", EVAL_HEADER, resume)
        episodes = CsvLog(self.out_dir / "episodes.csv", ("episode", "step", "return"), resume)
        t0 = time.time()
        try:
            if self.obs is None or self.env.done:
                self._new_episode()
            while st.step < total:
                st.step += 1
                if st.step <= cfg.sac.warmup_steps:
                    action = self.warmup_rng.uniform(-1.0, 1.0, size=2)
                else:
                    action = self.agent.act(self.obs, deterministic=False, generator=self.act_gen)
                self.obs, reward, done, info = self.env.step(action)
                self.buffer.add(action, reward, self.env.last_frame(), info["truncated"])
                st.episode_return += reward
                if (
                    st.step >= cfg.sac.warmup_steps
                    and st.step % cfg.sac.update_every == 0
                    and len(self.buffer) >= cfg.sac.batch_size
                ):
                    st.last_metrics = self.agent.update(self.buffer, self.replay_rng, self.update_gen)
                if done:
                    st.episode += 1
                    st.window_returns.append(st.episode_return)
                    st.episode_returns.append(st.episode_return)
                    episodes.write([st.episode, st.step, repr(st.episode_return)])
                    self._new_episode()
                if st.step % run.metrics_every == 0 or st.step == total:
                    if st.window_returns:
                        st.last_window_mean = float(np.mean(st.window_returns))
                        st.window_returns = []
                    m = st.last_metrics
                    metrics.write([st.step, _fmt(st.last_window_mean)] + [_fmt(m.get(k)) for k in METRICS_HEADER[2:]])
                    log.info("step %d return %.2f alpha %s (%.1fs)", st.step, st.last_window_mean,
                             _fmt(m.get("alpha")), time.time() - t0)
                if st.step % run.eval_every == 0 or st.step == total:
                    for rep in self.evaluate():
                        evals.write([st.step, rep.shift_kind, rep.episodes, repr(rep.mean_return), repr(rep.std_return)])
                if st.step % run.checkpoint_every == 0 or st.step == total:
                    self.checkpoint()
        finally:
            metrics.close()
            evals.close()
            episodes.close()
        summary = self.summary(time.time() - t0)
        (self.out_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
        return summary

    def summary(self, elapsed: float) -> Dict[str, object]:
        final = {}
        path = self.out_dir / "eval.csv"
        if path.exists():
            with open(path) as fh:
                for row in csv.DictReader(fh):
                    if int(row["step"]) == self.state.step:
                        final[row["shift_kind"]] = float(row["mean_return"])
        return {
            "steps": self.state.step,
            "episodes": self.state.episode,
            "updates": self.agent.num_updates,
            "final_eval": final,
            "last_train_episode_returns": self.state.episode_returns[-10:],
            "seconds": elapsed,
        }


def run_training(cfg: ExperimentConfig, out_dir: Path, resume: bool = False, steps: Optional[int] = None):
    torch.set_num_threads(1)
    trainer = Trainer(cfg, out_dir, resume=resume)
    return trainer.train(steps)
