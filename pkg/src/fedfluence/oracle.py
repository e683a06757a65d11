"""Leave-one-out ground truth.

The removed client is filtered out of the replayed selection sequence, so
surviving participants see exactly the same rounds and sampling seeds as in
the full run; only their starting models differ.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Iterable

import numpy as np

from .data import FederationData
from .errors import ComparisonError, ShapeError
from .fedavg import FederationConfig, FederationTrajectory, run_federation
from .model import LayeredParams, ModelSpec


def leave_one_out_retrain(spec: ModelSpec, data: FederationData, config: FederationConfig,
                          c: int) -> FederationTrajectory:
    if c not in data.client_ids:
        raise KeyError(f"unknown client {c}")
    return run_federation(spec, data, config, exclude=[c], record=False, keep_records=False)


def _loo_models(args):
    spec, data, config, c = args
    return c, leave_one_out_retrain(spec, data, config, c).models


def leave_one_out_all(spec: ModelSpec, data: FederationData, config: FederationConfig,
                      clients: Iterable[int], workers: int = 1) -> dict[int, list[LayeredParams]]:
    """LOO global-model sequences for several clients, optionally in parallel."""
    jobs = [(spec, data, config, c) for c in clients]
    if workers <= 1 or len(jobs) <= 1:
        return dict(_loo_models(j) for j in jobs)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return dict(pool.map(_loo_models, jobs))


def exact_fip(full: FederationTrajectory, loo: FederationTrajectory, t: int) -> LayeredParams:
    """``w_t`` with the client removed minus ``w_t``."""
    if full.rounds != loo.rounds:
        raise ComparisonError(f"trajectories cover {full.rounds} and {loo.rounds} rounds")
    if not 0 <= t <= full.rounds:
        raise ComparisonError(f"round {t} outside [0, {full.rounds}]")
    if full.models[0] != loo.models[0]:
        raise ComparisonError("trajectories do not share an initial model")
    return loo.models[t] - full.models[t]


def estimation_error(exact: LayeredParams, estimated: LayeredParams) -> float:
    """Euclidean distance over all blocks concatenated."""
    if exact.shapes != estimated.shapes:
        raise ShapeError(f"layout mismatch: {exact.shapes} vs {estimated.shapes}")
    return float(np.sqrt(sum(float((a - b) @ (a - b)) for a, b in zip(exact.blocks, estimated.blocks))))
