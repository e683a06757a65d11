"""Federated averaging with per-round records for the influence estimator.

Every random draw is keyed by explicit integers so that any round can be
replayed in isolation:

* participant selection: ``(selection_seed, 0, t)``
* gradient sampling:     ``(selection_seed, 1, t, client_id, i)``
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .data import ClientDataset, FederationData
from .errors import ConfigError, DegenerateRoundError, DivergenceError, EmptyInputError, FormatError
from .model import LayeredParams, ModelSpec, grad, per_example_grads

MODES = ("basic", "lwet", "lwet-fine")
HESSIANS = ("exact", "fisher")
CHECKPOINT_MAGIC = "FEDFLU1"


@dataclass(frozen=True)
class FederationConfig:
    lr: float = 0.003
    num_clients: int = 10
    clients_per_round: int = 5
    local_iters: int = 5
    rounds: int = 10
    grad_samples: int = 5
    selection_seed: int = 0
    init_seed: int = 0
    mode: str = "lwet"
    hessian: str = "fisher"
    overflow_guard: float = 1e30
    keep_iterates: bool = True

    def __post_init__(self):
        if self.hessian == "exact-dense":
            object.__setattr__(self, "hessian", "exact")
        if self.mode == "lwet-fine-grained":
            object.__setattr__(self, "mode", "lwet-fine")

    def validate(self, data: FederationData | None = None) -> "FederationConfig":
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.num_clients < 2:
            raise ConfigError("need at least 2 clients")
        if not 2 <= self.clients_per_round <= self.num_clients:
            raise ConfigError(f"clients_per_round must lie in [2, {self.num_clients}]")
        if self.local_iters < 1:
            raise ConfigError("local_iters must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.grad_samples < 1:
            raise ConfigError("grad_samples must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.hessian not in HESSIANS:
            raise ConfigError(f"hessian must be one of {HESSIANS}, got {self.hessian!r}")
        if not self.overflow_guard > 0:
            raise ConfigError("overflow_guard must be positive")
        if data is not None:
            if len(data.clients) != self.num_clients:
                raise ConfigError(f"config expects {self.num_clients} clients, data has {len(data.clients)}")
            smallest = min(c.n for c in data.clients)
            if self.grad_samples > smallest:
                raise ConfigError(f"grad_samples={self.grad_samples} exceeds smallest client size {smallest}")
        return self

    def with_(self, **changes) -> "FederationConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class RoundRecord:
    """What the server keeps from round ``t``.

    ``grad_samples[k][i][j]`` is an ``(N_s, p_j)`` array of per-example
    gradients drawn by client ``k`` at local iterate ``i`` (before the step).
    ``iterates[k][i]`` is that iterate, kept only for exact-Hessian validation.
    """

    t: int
    participants: tuple[int, ...]
    local_models: Mapping[int, LayeredParams]
    sizes: Mapping[int, int]
    grad_samples: Mapping[int, list[list[np.ndarray]]] = field(default_factory=dict)
    iterates: Mapping[int, list[LayeredParams]] = field(default_factory=dict)


@dataclass
class FederationTrajectory:
    models: list[LayeredParams]
    records: list[RoundRecord]
    excluded: frozenset = frozenset()
    degenerate_rounds: list[int] = field(default_factory=list)
    participants: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return len(self.models) - 1

    def __getitem__(self, t: int) -> LayeredParams:
        return self.models[t]


def select_participants(config: FederationConfig, t: int,
                        client_ids: Iterable[int] | None = None) -> tuple[int, ...]:
    """Uniform draw without replacement; depends only on (selection seed, t)."""
    ids = sorted(client_ids) if client_ids is not None else list(range(config.num_clients))
    if len(ids) != config.num_clients:
        raise ConfigError(f"expected {config.num_clients} client ids, got {len(ids)}")
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    rng = np.random.default_rng([config.selection_seed, 0, t])
    picked = rng.choice(config.num_clients, size=config.clients_per_round, replace=False)
    return tuple(sorted(ids[i] for i in picked))


def local_train(spec: ModelSpec, w_start: LayeredParams, client: ClientDataset,
                config: FederationConfig, t: int, record: bool = True):
    """Run ``m`` full-batch gradient steps from ``w_start``.

    Returns ``(w_local, grad_samples, iterates)``; the last two are empty
    lists when ``record`` is false.
    """
    if client.n < 1:
        raise EmptyInputError(f"client {client.client_id} has no data")
    w = w_start
    samples, iterates = [], []
    for i in range(config.local_iters):
        if record:
            rng = np.random.default_rng([config.selection_seed, 1, t, client.client_id, i])
            idx = np.sort(rng.choice(client.n, size=config.grad_samples, replace=False))
            g = per_example_grads(spec, w, client.subset(idx))
            samples.append([g[j] for j in range(spec.num_blocks)])
            if config.keep_iterates:
                iterates.append(w)
        w = w - config.lr * grad(spec, w, client)
        if not w.is_finite():
            raise DivergenceError(
                f"non-finite parameters in round {t}, client {client.client_id}, iteration {i + 1}",
                round=t, client=client.client_id, iteration=i + 1)
    return w, samples, iterates


def aggregate(locals_: Mapping[int, LayeredParams], sizes: Mapping[int, int]) -> LayeredParams:
    """Dataset-size weighted average of local models."""
    if not locals_:
        raise EmptyInputError("no local models to aggregate")
    keys = sorted(locals_)
    missing = [k for k in keys if k not in sizes]
    if missing:
        raise KeyError(f"no size for clients {missing}")
    total = sum(sizes[k] for k in keys)
    return LayeredParams.weighted_sum([locals_[k] for k in keys], [sizes[k] / total for k in keys])


def aggregate_without(locals_: Mapping[int, LayeredParams], sizes: Mapping[int, int], c: int) -> LayeredParams:
    """Aggregate with client ``c`` dropped and the remaining weights renormalised."""
    if c not in locals_:
        return aggregate(locals_, sizes)
    rest = {k: v for k, v in locals_.items() if k != c}
    if not rest:
        raise DegenerateRoundError(f"client {c} is the only participant")
    return aggregate(rest, sizes)


def run_federation(spec: ModelSpec, data: FederationData, config: FederationConfig, *,
                   exclude: Iterable[int] = (), record: bool = True,
                   start: tuple[int, LayeredParams] | None = None,
                   exclude_from: int = 1,
                   on_round: Callable[[RoundRecord, LayeredParams, LayeredParams], None] | None = None,
                   keep_records: bool = True) -> FederationTrajectory:
    """Train a federation; optionally with clients removed from every round.

    ``exclude`` filters the replayed selection sequence from round
    ``exclude_from`` on. A round whose filtered participant set is empty
    carries the global model over unchanged and is listed in
    ``degenerate_rounds``. ``start=(t0, w)`` resumes after round ``t0``.
    """
    config.validate(data)
    excluded = frozenset(exclude)
    ids = data.client_ids
    clients = {c.client_id: c for c in data.clients}
    if start is None:
        t0, w = 0, spec.init_params(config.init_seed)
    else:
        t0, w = start
    models, records, degenerate, chosen = [w], [], [], []
    for t in range(t0 + 1, config.rounds + 1):
        selected = select_participants(config, t, ids)
        if t >= exclude_from:
            selected = tuple(k for k in selected if k not in excluded)
        chosen.append(selected)
        if not selected:
            degenerate.append(t)
            models.append(w)
            continue
        locals_, samples, iterates = {}, {}, {}
        for k in selected:
            locals_[k], samples[k], iterates[k] = local_train(spec, w, clients[k], config, t, record)
        sizes = {k: clients[k].n for k in selected}
        w_prev, w = w, aggregate(locals_, sizes)
        rec = RoundRecord(t, selected, locals_, sizes, samples if record else {}, iterates if record else {})
        if on_round is not None:
            on_round(rec, w, w_prev)
        if keep_records:
            records.append(rec)
        models.append(w)
    return FederationTrajectory(models, records, excluded, degenerate, chosen)


def replay_round(record: RoundRecord) -> LayeredParams:
    return aggregate(record.local_models, record.sizes)


def _params_to_json(p: LayeredParams) -> dict:
    return {"shapes": [list(s) for s in p.shapes], "blocks": [b.tolist() for b in p.blocks]}


def _params_from_json(obj: dict) -> LayeredParams:
    return LayeredParams([np.array(b, dtype=np.float64) for b in obj["blocks"]],
                         tuple(tuple(s) for s in obj["shapes"]))


def save_trajectory(traj: FederationTrajectory, path) -> None:
    """Write a ``FEDFLU1`` checkpoint: magic line followed by one JSON document."""
    doc = {
        "excluded": sorted(traj.excluded),
        "degenerate_rounds": traj.degenerate_rounds,
        "participants": [list(p) for p in traj.participants],
        "models": [_params_to_json(w) for w in traj.models],
        "records": [
            {
                "t": r.t,
                "participants": list(r.participants),
                "sizes": {str(k): v for k, v in r.sizes.items()},
                "local_models": {str(k): _params_to_json(v) for k, v in r.local_models.items()},
                "grad_samples": {str(k): [[g.tolist() for g in it] for it in v]
                                 for k, v in r.grad_samples.items()},
                "iterates": {str(k): [_params_to_json(w) for w in v] for k, v in r.iterates.items()},
            }
            for r in traj.records
        ],
    }
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        json.dump(doc, fh)


def load_trajectory(path) -> FederationTrajectory:
    with Path(path).open("r", encoding="utf-8") as fh:
        magic = fh.readline().rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"not a trajectory checkpoint (header {magic!r})", 1)
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid checkpoint body: {exc.msg}", exc.lineno + 1) from None
    records = []
    for r in doc["records"]:
        records.append(RoundRecord(
            t=r["t"],
            participants=tuple(r["participants"]),
            local_models={int(k): _params_from_json(v) for k, v in r["local_models"].items()},
            sizes={int(k): v for k, v in r["sizes"].items()},
            grad_samples={int(k): [[np.array(g, dtype=np.float64) for g in it] for it in v]
                          for k, v in r["grad_samples"].items()},
            iterates={int(k): [_params_from_json(w) for w in v] for k, v in r["iterates"].items()},
        ))
    return FederationTrajectory(
        models=[_params_from_json(w) for w in doc["models"]],
        records=records,
        excluded=frozenset(doc["excluded"]),
        degenerate_rounds=list(doc["degenerate_rounds"]),
        participants=[tuple(p) for p in doc["participants"]],
    )
