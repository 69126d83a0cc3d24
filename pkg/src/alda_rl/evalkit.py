"""Zero-shot evaluation, disentanglement scoring and the conditional-covariance test."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from . import toyenv
from .toyenv import EnvConfig, PointReach, SOURCE_NAMES

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass
class EvalReport:
    env: str
    shift_kind: str
    episodes: int
    mean_return: float
    std_return: float
    returns: List[float]
    checkpoint: str = ""
    seed: int = 0

    HEADER = ("env", "shift_kind", "episodes", "mean_return", "std_return", "checkpoint", "seed", "returns")

    @classmethod
    def from_returns(cls, returns, shift_kind, checkpoint="", seed=0, env="PointReach"):
        r = [float(x) for x in returns]
        if not r:
            raise ValueError("need at least one episode")
        return cls(env, shift_kind, len(r), float(np.mean(r)), float(np.std(r)), r, checkpoint, seed)

    def row(self) -> list:
        return [self.env, self.shift_kind, self.episodes, repr(self.mean_return), repr(self.std_return),
                self.checkpoint, self.seed, ";".join(repr(x) for x in self.returns)]

    def write_csv(self, path: Path, append: bool = False) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not (append and path.exists())
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(self.HEADER)
            w.writerow(self.row())
        return path


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(episode)]).generate_state(1, dtype=np.uint32)[0])


def run_episode(cfg: EnvConfig, policy: Policy, seed: int) -> float:
    env = PointReach(dataclasses.replace(cfg, seed=seed))
    obs = env.reset()
    total, done = 0.0, False
    while not done:
        obs, r, done, _ = env.step(policy(obs))
        total += r
    return total


def evaluate_policy(
    cfg: EnvConfig,
    shift_kind: str,
    policy: Policy,
    episodes: int = 10,
    seed: int = 0,
    checkpoint: str = "",
    workers: int = 1,
) -> EvalReport:
    """Undiscounted returns of ``policy`` on ``make_shift(cfg, shift_kind)``.

    Episode ``i`` uses a seed derived from ``(seed, i)`` so results do not
    depend on how episodes are spread over workers.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    shifted = toyenv.make_shift(cfg, shift_kind)
    seeds = [episode_seed(seed, i) for i in range(episodes)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            returns = list(pool.map(run_episode, [shifted] * episodes, [policy] * episodes, seeds))
    else:
        returns = [run_episode(shifted, policy, s) for s in seeds]
    return EvalReport.from_returns(returns, shift_kind, checkpoint=checkpoint, seed=seed)


class AgentPolicy:
    """Deterministic (mean) actions from a frozen agent; picklable for workers."""

    def __init__(self, agent):
        self.agent = agent

    def __call__(self, obs):
        return self.agent.act(obs, deterministic=True)


def bootstrap_ci(values: Sequence[float], n_boot: int = 10_000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap CI of the mean."""
    v = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = v[rng.integers(0, len(v), size=(n_boot, len(v)))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(v.mean()), float(lo), float(hi)


# ---------------------------------------------------------------------------
# mutual information gap


def discretize_latents(latents: np.ndarray, bins: Union[int, np.ndarray]) -> np.ndarray:
    """Bin each latent column: nearest codebook entry if a codebook [n_z, m] is given,
    otherwise ``bins`` uniform bins over the column's range."""
    latents = np.asarray(latents, dtype=np.float64)
    if isinstance(bins, (int, np.integer)):
        return np.stack([_uniform_bins(col, int(bins)) for col in latents.T], axis=1)
    codebook = np.asarray(bins, dtype=np.float64)
    if codebook.shape[0] != latents.shape[1]:
        raise ValueError("codebook rows must match latent dimensions")
    return np.argmin(np.abs(latents[:, :, None] - codebook[None]), axis=2)


def _uniform_bins(col: np.ndarray, n_bins: int) -> np.ndarray:
    lo, hi = col.min(), col.max()
    if hi <= lo:
        return np.zeros(col.shape, dtype=np.int64)
    edges = np.linspace(lo, hi, n_bins + 1)
    return np.clip(np.digitize(col, edges[1:-1]), 0, n_bins - 1)


def discrete_entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def discrete_mutual_info(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in MI (nats) from the joint histogram of two label arrays."""
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


@dataclass
class MigResult:
    per_source: Dict[str, float]
    mean: float
    skipped: List[str] = field(default_factory=list)
    mi: Optional[np.ndarray] = None  # [n_z, n_s]


def mig(
    latents: np.ndarray,
    sources: np.ndarray,
    latent_bins: Union[int, np.ndarray] = 12,
    source_bins: int = 20,
    source_names: Sequence[str] = SOURCE_NAMES,
) -> MigResult:
    """Mutual Information Gap of each source, normalised by its entropy."""
    latents = np.asarray(latents, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    if latents.ndim != 2 or sources.ndim != 2 or len(latents) != len(sources):
        raise ValueError("latents and sources must be [N, *] arrays with the same N")
    if latents.shape[1] < 2:
        raise ValueError("MIG needs at least two latent dimensions")
    zd = discretize_latents(latents, latent_bins)
    sd = np.stack([_uniform_bins(col, source_bins) for col in sources.T], axis=1)
    names = list(source_names)[: sources.shape[1]]
    if len(names) < sources.shape[1]:
        names += [f"s{i}" for i in range(len(names), sources.shape[1])]
    mi = np.array([[discrete_mutual_info(zd[:, i], sd[:, j]) for j in range(sd.shape[1])] for i in range(zd.shape[1])])
    per, skipped = {}, []
    for j, name in enumerate(names):
        h = discrete_entropy(sd[:, j])
        if h <= 0:
            skipped.append(name)
            continue
        top = np.sort(mi[:, j])[::-1]
        per[name] = float((top[0] - top[1]) / h)
    mean = float(np.mean(list(per.values()))) if per else float("nan")
    return MigResult(per, mean, skipped, mi)


# ---------------------------------------------------------------------------
# conditional covariance between task-relevant and task-irrelevant probes


@dataclass
class CovarianceReport:
    cov: np.ndarray  # [|D|, |E|, n_z]
    D: List[int]
    E: List[int]
    threshold: float
    passed: bool
    max_abs: float
    sparse_bins: List[tuple] = field(default_factory=list)  # (k, bin, count) with count < min_bin

    def rows(self):
        for a, i in enumerate(self.D):
            for b, j in enumerate(self.E):
                for k in range(self.cov.shape[2]):
                    yield i, j, k, float(self.cov[a, b, k])

    def write_csv(self, path: Path, names: Sequence[str] = SOURCE_NAMES) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["relevant_source", "irrelevant_source", "latent_dim", "conditional_cov"])
            for i, j, k, c in self.rows():
                w.writerow([names[i] if i < len(names) else i, names[j] if j < len(names) else j, k, repr(c)])
        return path


def ridge_probe(latents: np.ndarray, targets: np.ndarray, ridge: float = 1e-3) -> np.ndarray:
    """Fitted values of a ridge regression (with intercept) from latents to each target column."""
    X = np.column_stack([np.asarray(latents, np.float64), np.ones(len(latents))])
    reg = ridge * len(X) * np.eye(X.shape[1])
    reg[-1, -1] = 0.0
    W = np.linalg.solve(X.T @ X + reg, X.T @ targets)
    return X @ W


def theorem1_check(
    latents: np.ndarray,
    sources: np.ndarray,
    D: Sequence[int] = toyenv.TASK_RELEVANT,
    E: Sequence[int] = toyenv.TASK_IRRELEVANT,
    bins: Union[int, np.ndarray] = 12,
    ridge: float = 1e-3,
    threshold: float = 0.05,
    min_bin: int = 30,
) -> CovarianceReport:
    """Estimate cov(s_hat_i, s_hat_j | z_k) for i in D, j in E and every latent k.

    Sources are standardised, probed from the full latent vector by ridge
    regression, then for each latent ``k`` the samples are grouped by the
    bin of ``z_k`` and the within-bin covariances are averaged with bin mass
    as weights.  Passes iff every |entry| is below ``threshold``.
    """
    D, E = list(D), list(E)
    latents = np.asarray(latents, dtype=np.float64)
    n_z = latents.shape[1]
    if not D or not E:
        return CovarianceReport(np.zeros((len(D), len(E), n_z)), D, E, threshold, True, 0.0)
    sources = np.asarray(sources, dtype=np.float64)
    std = sources.std(axis=0)
    std[std == 0] = 1.0
    s = (sources - sources.mean(axis=0)) / std
    s_hat = ridge_probe(latents, s[:, D + E], ridge)
    hd, he = s_hat[:, : len(D)], s_hat[:, len(D):]
    groups = discretize_latents(latents, bins)
    cov = np.zeros((len(D), len(E), n_z))
    sparse = []
    n = len(latents)
    for k in range(n_z):
        for b in np.unique(groups[:, k]):
            mask = groups[:, k] == b
            cnt = int(mask.sum())
            if cnt < min_bin:
                sparse.append((k, int(b), cnt))
            if cnt < 2:
                continue
            dd = hd[mask] - hd[mask].mean(axis=0)
            ee = he[mask] - he[mask].mean(axis=0)
            cov[:, :, k] += (dd.T @ ee) / cnt * (cnt / n)
    max_abs = float(np.abs(cov).max())
    return CovarianceReport(cov, D, E, threshold, bool(max_abs < threshold), max_abs, sparse)


# ---------------------------------------------------------------------------
# latent trajectories


def latent_trajectory(
    model,
    cfg: EnvConfig,
    policy: Policy,
    seed: int = 0,
    init_state: Optional[toyenv.EnvState] = None,
) -> Dict[str, np.ndarray]:
    """Roll one episode, recording z_d of the newest frame and the sources after every step."""
    env = PointReach(dataclasses.replace(cfg, seed=seed))
    obs = env.reset()
    if init_state is not None:
        obs = env.set_state(init_state)
    zs, ss = [], []
    done = False
    while not done:
        obs, _, done, _ = env.step(policy(obs))
        with torch.no_grad():
            frame = torch.from_numpy(env.last_frame()[None])
            if model.cfg.framestack_joint:
                frame = torch.from_numpy(obs[None])
            zs.append(model.latents(frame)[0].numpy().astype(np.float64))
        ss.append(env.state.sources.as_array())
    return {"t": np.arange(1, len(zs) + 1), "z_d": np.array(zs), "sources": np.array(ss)}


def write_trajectory_csv(traj: Dict[str, np.ndarray], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_z = traj["z_d"].shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"z_d{i}" for i in range(n_z)] + list(SOURCE_NAMES))
        for t, z, s in zip(traj["t"], traj["z_d"], traj["sources"]):
            w.writerow([int(t)] + [repr(float(v)) for v in z] + [repr(float(v)) for v in s])
    return path


def latent_trajectory_dump(model, cfg: EnvConfig, policy: Policy, path: Path, seed: int = 0,
                           init_state: Optional[toyenv.EnvState] = None) -> Dict[str, np.ndarray]:
    traj = latent_trajectory(model, cfg, policy, seed, init_state)
    write_trajectory_csv(traj, path)
    return traj


def encode_dataset(model, pairs, batch: int = 256) -> tuple:
    """z_d and sources for a list of (SourceVector, frame) pairs.

    Models that encode the whole stack jointly see the frame repeated k times.
    """
    frames = np.stack([f for _, f in pairs]).astype(np.float32)
    if model.cfg.framestack_joint:
        frames = np.tile(frames, (1, model.k, 1, 1))
    sources = np.stack([s.as_array() for s, _ in pairs])
    out = []
    with torch.no_grad():
        for i in range(0, len(frames), batch):
            out.append(model.latents(torch.from_numpy(frames[i: i + batch])).numpy())
    return np.concatenate(out).astype(np.float64), sources
