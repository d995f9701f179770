from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from firesale_lab.synth import GeneratorSpec, gen_economy  # noqa: E402


def random_instance(seed: int, max_dim: int = 3, **overrides):
    """Random economy with N, I <= max_dim plus a perturbed allocation and wedge."""
    rng = np.random.default_rng(10_000 + seed)
    N, I = (int(v) for v in rng.integers(1, max_dim + 1, size=2))
    M = int(rng.integers(1, N + 1))
    spec = GeneratorSpec(n_assets=N, n_intermediaries=I, n_constraints=M, seed=seed, **overrides)
    params, prior, q = gen_economy(spec)
    q = q * rng.uniform(0.3, 1.7, size=q.shape)
    tau = rng.normal(scale=0.2, size=q.shape)
    return params, prior, q, tau


@pytest.fixture
def demo_economy():
    """The 2-asset, 2-intermediary, 1-constraint demo used across policy tests."""
    return gen_economy(GeneratorSpec(n_assets=2, n_intermediaries=2, n_constraints=1, seed=7))
