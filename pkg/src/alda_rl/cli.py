"""Command-line front end: ``alda {train,eval,traverse,ablate,theorem1,mig,dataset,trajectory}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import ablation, evalkit, toyenv
from .alda import latent_traversal, traversal_strip, write_png
from .config import ConfigError, ExperimentConfig, int_seed, load_config, resolve_out_dir
from .diffkit import CheckpointError

log = logging.getLogger("alda")


def _checkpoint_dir(path: str) -> Path:
    """Accept a checkpoint directory or a run directory (latest checkpoint)."""
    from .training import latest_checkpoint

    p = Path(path)
    if (p / "params.json").exists():
        return p
    latest = latest_checkpoint(p)
    if latest is None:
        raise CheckpointError(f"no checkpoint found at {p}")
    return latest


def _run_dir_of(ckpt: Path) -> Path:
    return ckpt.parent.parent if ckpt.parent.name == "checkpoints" else ckpt


def _load(path: str):
    from .training import load_checkpoint

    ckpt = _checkpoint_dir(path)
    agent, cfg, step = load_checkpoint(ckpt)
    return agent, cfg, step, ckpt


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    from .training import run_training

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    run = {}
    if args.steps is not None:
        run["steps"] = args.steps
    if args.seed is not None:
        run["seed"] = args.seed
    if args.out is not None:
        run["out_dir"] = args.out
    if run:
        cfg = cfg.replace(run=run)
    out = resolve_out_dir(cfg.run.out_dir)
    summary = run_training(cfg, out, resume=args.resume)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_eval(args) -> int:
    if args.random:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        policy, tag, run_dir = toyenv.uniform_policy(args.seed), "uniform_random", resolve_out_dir(cfg.run.out_dir)
    else:
        agent, cfg, step, ckpt = _load(args.checkpoint)
        policy, tag, run_dir = evalkit.AgentPolicy(agent), ckpt.name, _run_dir_of(ckpt)
    rep = evalkit.evaluate_policy(cfg.env, args.shift, policy, args.episodes, args.seed, checkpoint=tag,
                                  workers=args.workers)
    out = Path(args.out) if args.out else run_dir / "reports" / f"eval_{tag}_{args.shift}_seed{args.seed}.csv"
    rep.write_csv(out)
    print(f"{args.shift}: {rep.mean_return:.3f} +- {rep.std_return:.3f} over {rep.episodes} episodes -> {out}")
    return 0


def cmd_traverse(args) -> int:
    agent, cfg, step, ckpt = _load(args.checkpoint)
    n_z = cfg.alda.n_z
    dims = list(range(n_z)) if args.all else list(args.dims or [])
    if not dims:
        raise SystemExit("traverse: pass --dims or --all")
    bad = [d for d in dims if not 0 <= d < n_z]
    if bad:
        raise IndexError(f"latent dims {bad} out of range [0, {n_z})")
    env = toyenv.PointReach(dataclasses.replace(cfg.env, seed=args.obs_seed))
    obs = env.reset()
    out_dir = Path(args.out) if args.out else _run_dir_of(ckpt) / "traversals" / ckpt.name
    for d in dims:
        imgs = latent_traversal(agent.model, torch.from_numpy(obs), d)
        path = write_png(traversal_strip(imgs), out_dir / f"latent_{d:02d}.png")
        print(path)
    return 0


def cmd_ablate(args) -> int:
    base = load_config(args.config) if args.config else ExperimentConfig()
    if args.steps is not None:
        base = base.replace(run={"steps": args.steps})
    out = resolve_out_dir(args.out or str(Path(base.run.out_dir) / f"ablate_{args.name}"))
    runs, seeds = ablation.plan(base, args.name, args.seeds, out)
    print(f"ablation {args.name}: {len(runs)} runs ({len(runs) // len(seeds)} arms x {len(seeds)} seeds)")
    if args.dry_run:
        for arm, s, _, run_dir in runs:
            print(f"{arm}\tseed={s}\t{run_dir}")
        return 0
    res = ablation.ablation_run(base, args.name, args.seeds, out, workers=args.workers)
    print(f"merged table: {out / 'merged.csv'} ({len(res['rows'])} rows)")
    return 0


def _labeled(cfg, n, shift, seed):
    env_cfg = toyenv.make_shift(cfg.env, shift)
    return toyenv.labeled_dataset(env_cfg, n, seed=seed)


def cmd_theorem1(args) -> int:
    agent, cfg, step, ckpt = _load(args.checkpoint)
    pairs = _labeled(cfg, args.n, args.shift, args.seed)
    z, s = evalkit.encode_dataset(agent.model, pairs)
    rep = evalkit.theorem1_check(z, s, bins=agent.model.values.detach().numpy(), threshold=args.threshold)
    out = Path(args.out) if args.out else _run_dir_of(ckpt) / "reports" / f"theorem1_{ckpt.name}_{args.shift}.csv"
    rep.write_csv(out)
    print(f"max |cov| = {rep.max_abs:.4f} (threshold {rep.threshold}) -> {'PASS' if rep.passed else 'FAIL'}; "
          f"{len(rep.sparse_bins)} sparse bins -> {out}")
    return 0


def cmd_mig(args) -> int:
    agent, cfg, step, ckpt = _load(args.checkpoint)
    pairs = _labeled(cfg, args.n, args.shift, args.seed)
    z, s = evalkit.encode_dataset(agent.model, pairs)
    codebook = agent.model.values.detach().numpy() if cfg.alda.latent_mode != "vanilla_ae" else cfg.alda.codes_per_latent
    res = evalkit.mig(z, s, latent_bins=codebook)
    out = Path(args.out) if args.out else _run_dir_of(ckpt) / "reports" / f"mig_{ckpt.name}_{args.shift}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "mig"])
        for k, v in res.per_source.items():
            w.writerow([k, repr(v)])
        w.writerow(["mean", repr(res.mean)])
    print(f"MIG mean {res.mean:.4f}; skipped {res.skipped} -> {out}")
    return 0


def cmd_dataset(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    pairs = _labeled(cfg, args.n, args.shift, args.seed)
    out = Path(args.out) if args.out else resolve_out_dir(cfg.run.out_dir) / "datasets"
    path = toyenv.export_dataset(pairs, out, name=f"pointreach_{args.shift}_seed{args.seed}")
    print(path)
    return 0


def cmd_trajectory(args) -> int:
    agent, cfg, step, ckpt = _load(args.checkpoint)
    out = Path(args.out) if args.out else _run_dir_of(ckpt) / "reports" / f"trajectory_{ckpt.name}_seed{args.seed}.csv"
    evalkit.latent_trajectory_dump(agent.model, cfg.env, evalkit.AgentPolicy(agent), out, seed=args.seed)
    print(out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alda", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train SAC+ALDA on PointReach")
    t.add_argument("--config", help="experiment config (JSON)")
    t.add_argument("--steps", type=int, help="override run.steps")
    t.add_argument("--seed", type=int, help="override run.seed")
    t.add_argument("--out", help="override run.out_dir")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in the output dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot evaluation of a checkpoint")
    e.add_argument("--checkpoint", help="checkpoint dir or run dir")
    e.add_argument("--random", action="store_true", help="evaluate the uniform-random policy instead")
    e.add_argument("--config", help="config for --random")
    e.add_argument("--shift", default="none", choices=toyenv.SHIFT_KINDS)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", help="report CSV path")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("traverse", help="decode latent traversals to PNG strips")
    v.add_argument("--checkpoint", required=True)
    g = v.add_mutually_exclusive_group(required=True)
    g.add_argument("--dims", type=int, nargs="+")
    g.add_argument("--all", action="store_true")
    v.add_argument("--obs-seed", type=int, default=0, help="seed of the reset whose first frame is traversed")
    v.add_argument("--out")
    v.set_defaults(func=cmd_traverse)

    a = sub.add_parser("ablate", help="run an ablation study")
    a.add_argument("name", choices=sorted(ablation.ABLATIONS))
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, help="seeds per arm (default: 4, or 3 for vanilla_ae)")
    a.add_argument("--steps", type=int)
    a.add_argument("--out")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--dry-run", action="store_true", help="print the schedule only")
    a.set_defaults(func=cmd_ablate)

    for name, fn, default_shift, hlp in (
        ("theorem1", cmd_theorem1, "color_hard", "conditional covariance between task-relevant and -irrelevant probes"),
        ("mig", cmd_mig, "none", "mutual information gap against ground-truth sources"),
    ):
        c = sub.add_parser(name, help=hlp)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--n", type=int, default=5000)
        c.add_argument("--shift", default=default_shift, choices=toyenv.SHIFT_KINDS)
        c.add_argument("--seed", type=int, default=0)
        c.add_argument("--out")
        if name == "theorem1":
            c.add_argument("--threshold", type=float, default=0.05)
        c.set_defaults(func=fn)

    d = sub.add_parser("dataset", help="export a labeled (sources, frame) dataset")
    d.add_argument("--config")
    d.add_argument("--n", type=int, default=1000)
    d.add_argument("--shift", default="none", choices=toyenv.SHIFT_KINDS)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_dataset)

    r = sub.add_parser("trajectory", help="dump one episode of latent and source trajectories")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    r.set_defaults(func=cmd_trajectory)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    if args.command == "eval" and not args.random and not args.checkpoint:
        parser.error("eval needs --checkpoint or --random")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, FileExistsError, IndexError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
