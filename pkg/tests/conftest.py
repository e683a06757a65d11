from __future__ import annotations

import numpy as np
import pytest

from fedfluence.data import synth_generate
from fedfluence.fedavg import FederationConfig
from fedfluence.model import ModelSpec


def random_problem(rng: np.random.Generator, kind: str = "logreg", n: int | None = None):
    """Random (spec, params, (X, y)) with parameters large enough to be off the uniform point."""
    d = int(rng.integers(1, 6))
    C = int(rng.integers(2, 5))
    hidden = (int(rng.integers(2, 6)),) if kind == "mlp" else ()
    spec = ModelSpec(kind, d, C, hidden)
    params = spec.init_params(int(rng.integers(1 << 30)), scale=0.7)
    n = n or int(rng.integers(1, 8))
    X = rng.standard_normal((n, d))
    y = rng.integers(0, C, size=n)
    return spec, params, (X, y)


@pytest.fixture
def small_federation():
    spec = ModelSpec("logreg", 3, 3)
    data = synth_generate(6, 3, 3, seed=1, min_size=8)
    cfg = FederationConfig(lr=0.1, num_clients=6, clients_per_round=3, local_iters=3,
                           rounds=6, grad_samples=4, selection_seed=2, init_seed=3)
    return spec, data, cfg
