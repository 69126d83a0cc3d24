import os
from pathlib import Path

import numpy as np
import pytest
import torch

from alda_rl import diffkit as dk

torch.set_num_threads(1)

SEEDS = (0, 1, 2, 3, 4)

# 64 px, 30k-step runs produced by `alda ablate vanilla_ae --seeds 3`
RESULTS = Path(os.environ.get("ALDA_RESULTS", Path(__file__).resolve().parents[1] / "results"))
LONG_RUNS = RESULTS / "ablate_vanilla_ae"


def long_run_dirs(arm):
    dirs = sorted((LONG_RUNS / arm).glob("seed_*"))
    if not dirs or not all((d / "summary.json").exists() for d in dirs):
        pytest.skip(f"long runs missing under {LONG_RUNS / arm}; run `alda ablate vanilla_ae --seeds 3`")
    return dirs


def gradient_error(fn, inputs, eps=1e-4):
    """Worst relative error between autograd (float32) and float64 central differences.

    ``fn`` maps a dict of tensors to a scalar tensor and must work for
    either dtype.
    """
    params = {k: torch.tensor(v, dtype=torch.float32, requires_grad=True) for k, v in inputs.items()}
    analytic = dk.backward(fn(params), params)

    def f(point):
        with torch.no_grad():
            return float(fn({k: torch.from_numpy(v) for k, v in point.items()}))

    numeric = dk.finite_difference_gradient(f, {k: np.asarray(v, np.float64) for k, v in inputs.items()}, eps=eps)
    return max(dk.relative_error(analytic[k].numpy(), numeric[k]) for k in inputs)


def projected(out, seed=123):
    """Scalarise ``out`` with a fixed random projection so every output entry matters."""
    g = np.random.default_rng(seed).standard_normal(tuple(out.shape))
    return (out * torch.as_tensor(g, dtype=out.dtype)).sum()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
