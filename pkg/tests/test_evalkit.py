import csv
import dataclasses
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from alda_rl import ablation, evalkit, toyenv
from alda_rl.alda import AldaConfig, AldaModel
from alda_rl.config import ExperimentConfig
from alda_rl.toyenv import EnvConfig, EnvState, SourceVector
from alda_rl.training import build_agent

SMALL = EnvConfig(image_size=32, episode_length=15)


def brute_force_mi(a, b):
    """MI (nats) by explicit counting over the joint table."""
    n = len(a)
    ca, cb, cab = Counter(a.tolist()), Counter(b.tolist()), Counter(zip(a.tolist(), b.tolist()))
    return sum(c / n * math.log((c / n) / ((ca[x] / n) * (cb[y] / n))) for (x, y), c in cab.items())


def brute_force_entropy(a):
    n = len(a)
    return -sum(c / n * math.log(c / n) for c in Counter(a.tolist()).values())


# ---------------------------------------------------------------------------
# evaluation


def small_model(seed=0, **kw):
    cfg = AldaConfig(n_z=4, codes_per_latent=5, conv_width=8, temporal_dim=6, temporal_channels=4, **kw)
    return AldaModel(cfg, 32, 3, np.random.default_rng(seed))


def small_agent():
    cfg = ExperimentConfig().replace(
        env={"image_size": 32, "episode_length": 15},
        alda={"n_z": 4, "codes_per_latent": 5, "conv_width": 8, "temporal_dim": 6, "temporal_channels": 4},
        sac={"hidden": 16},
    )
    return build_agent(cfg)


def test_eval_report_consistency():
    rep = evalkit.EvalReport.from_returns([1.0, 2.0, 6.0], "none")
    assert rep.episodes == 3 and rep.mean_return == 3.0 and rep.std_return == pytest.approx(np.std([1, 2, 6]))
    with pytest.raises(ValueError):
        evalkit.EvalReport.from_returns([], "none")


def test_eval_report_csv(tmp_path):
    rep = evalkit.EvalReport.from_returns([1.5, -0.25], "color_hard", checkpoint="step_10", seed=3)
    path = rep.write_csv(tmp_path / "r.csv")
    rep.write_csv(path, append=True)
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2 and tuple(rows[0]) == evalkit.EvalReport.HEADER
    assert [float(x) for x in rows[0]["returns"].split(";")] == [1.5, -0.25]


def test_evaluate_is_deterministic_and_matches_manual_rollouts():
    agent = small_agent()
    policy = evalkit.AgentPolicy(agent)
    a = evalkit.evaluate_policy(SMALL, "none", policy, episodes=3, seed=4)
    b = evalkit.evaluate_policy(SMALL, "none", policy, episodes=3, seed=4)
    assert a.returns == b.returns
    manual = [evalkit.run_episode(SMALL, policy, evalkit.episode_seed(4, i)) for i in range(3)]
    assert a.returns == manual


def test_evaluate_parallel_equals_serial():
    policy = evalkit.AgentPolicy(small_agent())
    serial = evalkit.evaluate_policy(SMALL, "distracting", policy, episodes=4, seed=1)
    parallel = evalkit.evaluate_policy(SMALL, "distracting", policy, episodes=4, seed=1, workers=2)
    assert serial.returns == parallel.returns


def test_random_baseline_report():
    rep = evalkit.evaluate_policy(SMALL, "color_hard", toyenv.uniform_policy(0), episodes=5, seed=0)
    assert rep.episodes == 5 and all(math.isfinite(r) for r in rep.returns)
    with pytest.raises(ValueError):
        evalkit.evaluate_policy(SMALL, "none", toyenv.uniform_policy(0), episodes=0)


def test_bootstrap_ci_matches_scipy():
    v = np.random.default_rng(0).normal(3.0, 2.0, size=40)
    mean, lo, hi = evalkit.bootstrap_ci(v, n_boot=20_000)
    ref = stats.bootstrap((v,), np.mean, n_resamples=20_000, method="percentile", random_state=1).confidence_interval
    assert mean == pytest.approx(v.mean())
    assert lo == pytest.approx(ref.low, abs=0.05) and hi == pytest.approx(ref.high, abs=0.05)
    assert evalkit.bootstrap_ci([2.0] * 5) == (2.0, 2.0, 2.0)


# ---------------------------------------------------------------------------
# mutual information gap


def uniform_sources(n, k=3, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, k))


def test_discrete_mi_and_entropy_match_brute_force():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 5, 3000)
    b = (a + rng.integers(0, 3, 3000)) % 7
    assert evalkit.discrete_mutual_info(a, b) == pytest.approx(brute_force_mi(a, b), abs=1e-12)
    assert evalkit.discrete_entropy(a) == pytest.approx(brute_force_entropy(a), abs=1e-12)


def test_mig_perfect_latents():
    s = uniform_sources(5000)
    z = np.stack([evalkit._uniform_bins(c, 20) for c in s.T], 1).astype(float)
    res = evalkit.mig(z, s, latent_bins=20, source_names=("a", "b", "c"))
    for name, v in res.per_source.items():
        assert v == pytest.approx(1.0, abs=0.02), name
    # the reported gap equals the gap recomputed by brute force
    sd = np.stack([evalkit._uniform_bins(c, 20) for c in s.T], 1)
    for j, name in enumerate("abc"):
        mis = sorted((brute_force_mi(sd[:, i], sd[:, j]) for i in range(3)), reverse=True)
        assert res.per_source[name] == pytest.approx((mis[0] - mis[1]) / brute_force_entropy(sd[:, j]), abs=1e-9)


def test_mig_shuffled_latents_near_zero():
    s = uniform_sources(5000)
    z = np.random.default_rng(1).permutation(s)
    assert evalkit.mig(z, s, latent_bins=12).mean < 0.05


def test_mig_duplicate_best_latent_kills_gap():
    s = uniform_sources(5000)
    z = np.column_stack([s, s[:, 0]])
    res = evalkit.mig(z, s, latent_bins=20, source_names=("a", "b", "c"))
    assert res.per_source["a"] == pytest.approx(0.0, abs=1e-12) and res.per_source["b"] > 0.9


def test_mig_flags_constant_source():
    s = uniform_sources(2000)
    s[:, 1] = 0.5
    res = evalkit.mig(s.copy(), s, latent_bins=20, source_names=("a", "b", "c"))
    assert res.skipped == ["b"] and set(res.per_source) == {"a", "c"}


def test_mig_with_codebook_bins():
    codebook = np.tile(np.linspace(-1, 1, 5), (3, 1))
    s = uniform_sources(3000)
    z = codebook[0][np.random.default_rng(0).integers(0, 5, size=(3000, 3))]
    zd = evalkit.discretize_latents(z, codebook)
    assert np.array_equal(codebook[0][zd], z)
    with pytest.raises(ValueError):
        evalkit.discretize_latents(z, codebook[:2])


def test_mig_input_errors():
    with pytest.raises(ValueError):
        evalkit.mig(np.zeros((10, 1)), np.zeros((10, 2)))
    with pytest.raises(ValueError):
        evalkit.mig(np.zeros((10, 3)), np.zeros((9, 2)))


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_mig_noise_dims_do_not_inflate_score(seed, extra):
    s = uniform_sources(5000, seed=seed)
    rng = np.random.default_rng(seed + 1)
    z = s + 0.1 * rng.normal(size=s.shape)
    base = evalkit.mig(z, s, latent_bins=20, source_names=("a", "b", "c"))
    noisy = evalkit.mig(np.column_stack([z, rng.normal(size=(5000, extra))]), s, latent_bins=20,
                        source_names=("a", "b", "c"))
    for k in base.per_source:
        assert noisy.per_source[k] <= base.per_source[k] + 0.02


# ---------------------------------------------------------------------------
# conditional covariance test


def nine_sources(n=5000, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, 9))


def brute_force_conditional_cov(z, s, D, E, i, j, k, bins=12):
    std = s.std(0)
    ss = (s - s.mean(0)) / std
    X = np.column_stack([z, np.ones(len(z))])
    reg = 1e-3 * len(X) * np.eye(X.shape[1])
    reg[-1, -1] = 0
    hat = X @ np.linalg.solve(X.T @ X + reg, X.T @ ss[:, D + E])
    a, b = hat[:, D.index(i)], hat[:, len(D) + E.index(j)]
    edges = np.linspace(z[:, k].min(), z[:, k].max(), bins + 1)
    g = np.clip(np.digitize(z[:, k], edges[1:-1]), 0, bins - 1)
    total = 0.0
    for v in np.unique(g):
        m = g == v
        if m.sum() < 2:
            continue
        total += m.mean() * np.mean((a[m] - a[m].mean()) * (b[m] - b[m].mean()))
    return total


def test_theorem1_disentangled_vs_entangled():
    # sample covariance of independent sources has std ~ 1/sqrt(N); N = 50k keeps that floor below 0.01
    s = nine_sources(50_000)
    D, E = list(range(6)), [6, 7, 8]
    z_dis = s + 0.01 * np.random.default_rng(1).normal(size=s.shape)
    dis = evalkit.theorem1_check(z_dis, s, D, E)
    z_ent = np.column_stack([s[:, 0] + s[:, 6], s[:, 1] + s[:, 7], s[:, 2] + s[:, 8], s[:, 3:6]])
    ent = evalkit.theorem1_check(z_ent, s, D, E)
    assert dis.passed and dis.max_abs < 0.01
    assert not ent.passed and ent.max_abs > 0.1
    assert ent.max_abs > 10 * dis.max_abs
    assert np.isfinite(dis.cov).all() and len(D) + len(E) == s.shape[1]
    for (i, j, k) in [(0, 6, 0), (1, 7, 3), (2, 8, 5)]:
        ref = brute_force_conditional_cov(z_ent, s, D, E, i, j, k)
        assert ent.cov[D.index(i), E.index(j), k] == pytest.approx(ref, abs=1e-10)


def test_theorem1_empty_sets_pass_vacuously():
    s = nine_sources(100)
    rep = evalkit.theorem1_check(s, s, D=[], E=[6])
    assert rep.passed and rep.cov.size == 0


def test_theorem1_flags_sparse_bins(tmp_path):
    s = nine_sources(200)
    rep = evalkit.theorem1_check(s, s, bins=12)
    assert rep.sparse_bins and all(c < 30 for _, _, c in rep.sparse_bins)
    rows = list(csv.reader(open(rep.write_csv(tmp_path / "t.csv"))))
    assert rows[0] == ["relevant_source", "irrelevant_source", "latent_dim", "conditional_cov"]
    assert len(rows) == 1 + 6 * 3 * 9


# ---------------------------------------------------------------------------
# latent trajectories


def test_trajectory_rows_and_source_alignment(tmp_path):
    model = small_model()
    policy = toyenv.uniform_policy(3)
    traj = evalkit.latent_trajectory_dump(model, SMALL, policy, tmp_path / "traj.csv", seed=2)
    rows = list(csv.reader(open(tmp_path / "traj.csv")))
    assert len(rows) == 1 + SMALL.episode_length
    assert rows[0] == ["t", "z_d0", "z_d1", "z_d2", "z_d3"] + list(toyenv.SOURCE_NAMES)
    # replay the same actions and compare sources step by step
    env = toyenv.PointReach(dataclasses.replace(SMALL, seed=2))
    env.reset()
    replay = toyenv.uniform_policy(3)
    for t in range(SMALL.episode_length):
        env.step(replay(None))
        assert np.array_equal(traj["sources"][t], env.state.sources.as_array())
        assert [float(x) for x in rows[t + 1][5:]] == env.state.sources.as_array().tolist()


def test_trajectory_frozen_state_gives_constant_latents():
    model = small_model()
    s = SourceVector(0.3, -0.2, 0.0, 0.0, 0.3, -0.2, 0.5, 1.0, 1.5)
    traj = evalkit.latent_trajectory(model, SMALL, lambda obs: np.zeros(2), seed=0, init_state=EnvState(s))
    span = float((model.values.max() - model.values.min()).detach())
    assert traj["z_d"].std(axis=0).max() < 0.1 * span
    assert np.all(traj["sources"] == traj["sources"][0])


def test_encode_dataset_joint_mode_tiles_frame():
    pairs = toyenv.labeled_dataset(SMALL, 5, seed=0)
    z, s = evalkit.encode_dataset(small_model(framestack_joint=True), pairs)
    assert z.shape == (5, 4) and s.shape == (5, 9)


# ---------------------------------------------------------------------------
# ablations


def test_ablation_plans():
    base = ExperimentConfig()
    runs, seeds = ablation.plan(base, "beta", out_dir="/tmp/x")
    assert len(runs) == 16 and seeds == [0, 1, 2, 3]
    assert {a for a, *_ in runs} == {"beta_1", "beta_10", "beta_50", "beta_100"}
    assert ablation.plan(base, "vanilla_ae")[1] == [0, 1, 2]
    for name in ablation.ABLATIONS:
        runs, seeds = ablation.plan(base, name, 2)
        per_arm = {}
        for arm, s, cfg, _ in runs:
            per_arm.setdefault(arm, []).append(s)
            assert cfg.run.seed == s
        assert all(v == seeds for v in per_arm.values())
    with pytest.raises(ValueError):
        ablation.plan(base, "dropout")


def test_beta_100_arm_matches_base_config():
    base = ExperimentConfig()
    arms = dict(ablation.arm_configs(base, "beta"))
    assert arms["beta_100"].to_json() == base.to_json()


def test_framestack_joint_arm_drops_temporal_encoder():
    arms = dict(ablation.arm_configs(ExperimentConfig().replace(
        env={"image_size": 32}, alda={"conv_width": 8}, sac={"hidden": 16}), "framestack_joint"))
    agent = build_agent(arms["framestack_joint"])
    assert len(agent.model.temporal) == 0 and agent.model.state_dim == agent.model.cfg.n_z
    assert agent.model.encoder["conv0.w"].shape[1] == 9  # the whole [3k, H, W] stack goes in
