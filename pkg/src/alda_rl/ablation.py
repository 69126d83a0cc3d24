"""Ablation arms (beta, framestack, latent size, critic gradients, no association)."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .config import ExperimentConfig, save_config

log = logging.getLogger(__name__)

ABLATIONS: Dict[str, List[Tuple[str, dict]]] = {
    "beta": [(f"beta_{b:g}", {"alda": {"beta": float(b)}}) for b in (1, 10, 50, 100)],
    "framestack_joint": [("alda", {}), ("framestack_joint", {"alda": {"framestack_joint": True}})],
    "latent_dim": [(f"latent_{n}", {"alda": {"n_z": n}}) for n in (12, 24, 48)],
    "critic_grads": [("alda", {}), ("critic_grads", {"alda": {"critic_grads_to_encoder": True}})],
    "vanilla_ae": [("alda", {}), ("vanilla_ae", {"alda": {"latent_mode": "vanilla_ae"}})],
}
# the appendix studies average 4 seeds; the association comparison uses 3
DEFAULT_SEEDS = {"beta": 4, "framestack_joint": 4, "latent_dim": 4, "critic_grads": 4, "vanilla_ae": 3}

CURVE_HEADER = ("arm", "seed", "step", "shift_kind", "episodes", "mean_return", "std_return")


def arm_configs(base: ExperimentConfig, ablation: str) -> List[Tuple[str, ExperimentConfig]]:
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; expected one of {sorted(ABLATIONS)}")
    return [(name, base.replace(**overrides)) for name, overrides in ABLATIONS[ablation]]


def seed_list(base: ExperimentConfig, n_seeds: int) -> List[int]:
    return [base.run.seed + i for i in range(n_seeds)]


def plan(base: ExperimentConfig, ablation: str, n_seeds: Optional[int] = None, out_dir: Optional[Path] = None):
    """Every (arm, seed, config, run_dir) of an ablation; all arms share one seed list."""
    arms = arm_configs(base, ablation)
    n_seeds = n_seeds or DEFAULT_SEEDS[ablation]
    seeds = seed_list(base, n_seeds)
    out_dir = Path(out_dir or base.run.out_dir)
    runs = []
    for arm, cfg in arms:
        for s in seeds:
            run_dir = out_dir / arm / f"seed_{s}"
            runs.append((arm, s, cfg.replace(run={"seed": s, "out_dir": str(run_dir)}), run_dir))
    return runs, seeds


def _run_one(args):
    cfg, run_dir = args
    from .training import run_training

    run_dir = Path(run_dir)
    if (run_dir / "summary.json").exists():
        return json.loads((run_dir / "summary.json").read_text())
    resume = run_dir.exists() and any(run_dir.iterdir())
    return run_training(cfg, run_dir, resume=resume)


def _read_curves(run_dir: Path):
    path = Path(run_dir) / "eval.csv"
    if not path.exists():
        return []
    with open(path) as fh:
        return list(csv.DictReader(fh))


def ablation_run(
    base: ExperimentConfig,
    ablation: str,
    n_seeds: Optional[int] = None,
    out_dir: Optional[Path] = None,
    workers: int = 1,
) -> Dict[str, object]:
    """Train every arm on every seed to the same budget, then write
    ``curves_<arm>.csv`` per arm and ``merged.csv`` (one row per arm x seed)."""
    runs, seeds = plan(base, ablation, n_seeds, out_dir)
    out_dir = Path(out_dir or base.run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_arm: Dict[str, List[int]] = {}
    for arm, s, _, _ in runs:
        by_arm.setdefault(arm, []).append(s)
    if any(v != seeds for v in by_arm.values()):
        raise AssertionError("arms were scheduled with different seed lists")
    (out_dir / "seeds.json").write_text(json.dumps({"ablation": ablation, "seeds": seeds, "arms": list(by_arm)}, indent=1))
    for arm, cfg in arm_configs(base, ablation):
        save_config(cfg, out_dir / arm / "arm_config.json")
    log.info("ablation %s: %d arms x %d seeds", ablation, len(by_arm), len(seeds))

    jobs = [(cfg, str(run_dir)) for _, _, cfg, run_dir in runs]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            summaries = list(pool.map(_run_one, jobs))
    else:
        summaries = [_run_one(j) for j in jobs]

    merged = []
    for arm in by_arm:
        with open(out_dir / f"curves_{arm}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CURVE_HEADER)
            for (a, s, _, run_dir) in runs:
                if a != arm:
                    continue
                for row in _read_curves(run_dir):
                    w.writerow([arm, s, row["step"], row["shift_kind"], row["episodes"], row["mean_return"], row["std_return"]])
    shifts = list(base.run.eval_shifts)
    with open(out_dir / "merged.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "seed", "steps"] + [f"final_{s}" for s in shifts])
        for (arm, s, _, _), summ in zip(runs, summaries):
            final = summ.get("final_eval", {})
            row = [arm, s, summ.get("steps")] + [final.get(sh, "") for sh in shifts]
            w.writerow(row)
            merged.append(row)
    return {"ablation": ablation, "seeds": seeds, "arms": list(by_arm), "rows": merged}
