"""Desk-scale studies: estimator error, FIL correlation, valuation, cleansing."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .config import STRATEGIES, ExperimentConfig
from .data import FederationData
from .errors import ConfigError, EmptyInputError, UndefinedCorrelationError
from .fedavg import FederationTrajectory, RoundRecord, run_federation
from .influence import (ExactHessians, FedInfluenceEstimator, combinatorial_influence, compute_diagnostics)
from .metrics import fia, fil, pearson, rank_clients
from .model import LayeredParams, ModelSpec, accuracy, loss
from .oracle import estimation_error, leave_one_out_all

DESK_SCALE_CLIENTS = 50
CAPPED_SUBSET = 20


@dataclass
class ResultTable:
    kind: str
    digest: str
    rows: list[tuple[int, int, str, float]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def add(self, t: int, client: int, metric: str, value: float):
        self.rows.append((int(t), int(client), metric, float(value)))

    def values(self, metric: str, client: int | None = None) -> dict[int, float]:
        return {t: v for t, c, m, v in self.rows if m == metric and (client is None or c == client)}

    def get(self, metric: str, t: int | None = None, client: int = -1) -> float:
        for rt, c, m, v in self.rows:
            if m == metric and c == client and (t is None or rt == t):
                return v
        raise KeyError((metric, t, client))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# fedfluence kind={self.kind} config_sha256={self.digest}\n")
        for note in self.notes:
            buf.write(f"# {note}\n")
        buf.write("round,client,metric,value\n")
        for t, c, m, v in self.rows:
            buf.write(f"{t},{c},{m},{v!r}\n")
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")


class _SharedExactHessians:
    """One exact-Hessian cache per round, shared by all exact-mode estimators."""

    def __init__(self, spec, data, cap=None):
        self.spec, self.data, self.cap = spec, data, cap
        self._round, self._cache = None, None

    def for_record(self, record: RoundRecord) -> ExactHessians:
        if self._round != record.t:
            self._round, self._cache = record.t, ExactHessians(self.spec, self.data, record, self.cap)
        return self._cache


@dataclass
class TrainedRun:
    spec: ModelSpec
    data: FederationData
    trajectory: FederationTrajectory
    estimators: dict[tuple[str, str], FedInfluenceEstimator]
    max_combinatorial_norm: float = 0.0


def train_with_estimators(cfg: ExperimentConfig, data: FederationData | None = None, *,
                          estimators: Iterable[tuple[str, str]] | None = None,
                          snapshot_rounds: Iterable[int] | None = None,
                          keep_records: bool = False) -> TrainedRun:
    """Train the federation once and feed every round to each estimator."""
    spec = cfg.model
    data = data if data is not None else cfg.build_data()
    fed = cfg.federation
    keys = list(estimators) if estimators is not None else list(cfg.estimator_list)
    shared = _SharedExactHessians(spec, data)
    ests = {key: FedInfluenceEstimator(spec, data, fed, mode=key[0], hessian=key[1],
                                       snapshot_rounds=snapshot_rounds, hessian_source=shared.for_record)
            for key in keys}
    run = TrainedRun(spec, data, None, ests)

    def on_round(record, w_t, w_prev):
        for c in record.participants:
            run.max_combinatorial_norm = max(run.max_combinatorial_norm,
                                             combinatorial_influence(record, c, w_t, w_prev).norm())
        for est in ests.values():
            est.step(record, w_t, w_prev)
            if keep_records:
                est.records_seen.append(record)

    needs_iterates = any(h == "exact" for _, h in keys)
    run.trajectory = run_federation(spec, data, fed.with_(keep_iterates=needs_iterates),
                                    on_round=on_round, keep_records=keep_records)
    return run


def tracked_clients(cfg: ExperimentConfig, data: FederationData) -> list[int]:
    """Clients evaluated against the oracle.

    ``oracle_cap`` > 0 picks that many clients with the experiment seed; with
    no cap, every client at desk scale, else a seeded subset of 20.
    """
    ids = list(data.client_ids)
    cap = cfg.experiment.oracle_cap
    if cap == 0:
        cap = len(ids) if len(ids) <= DESK_SCALE_CLIENTS else CAPPED_SUBSET
    if cap >= len(ids):
        return ids
    rng = np.random.default_rng([cfg.experiment.experiment_seed, 7])
    return sorted(int(c) for c in rng.choice(ids, size=cap, replace=False))


def _eval_rounds(cfg: ExperimentConfig) -> list[int]:
    rounds = cfg.experiment.eval_rounds
    return sorted(set(rounds)) if rounds else list(range(1, cfg.federation.rounds + 1))


def run_fip_error(cfg: ExperimentConfig, *, workers: int = 1, data: FederationData | None = None) -> ResultTable:
    """Distance between exact and estimated FIP per (round, client, estimator)."""
    cfg.validate()
    table = ResultTable("fip-error", cfg.digest())
    rounds = _eval_rounds(cfg)
    run = train_with_estimators(cfg, data, snapshot_rounds=rounds)
    data, traj = run.data, run.trajectory
    clients = tracked_clients(cfg, data)
    loo = leave_one_out_all(cfg.model, data, cfg.federation, clients, workers)
    table.add(0, -1, "max_combinatorial_norm", run.max_combinatorial_norm)
    for (mode, hess), est in run.estimators.items():
        key = f"{mode}/{hess}"
        trunc = est.state.truncation_events()
        table.add(trunc[0][0] if trunc else 0, -1, f"first_truncation[{key}]", 1.0 if trunc else 0.0)
        for t, j, c, _ in trunc:
            table.add(t, c, f"truncation_layer[{key}]", j)
    for t in rounds:
        for c in clients:
            exact = loo[c][t] - traj.models[t]
            table.add(t, c, "fip_norm", exact.norm())
            for (mode, hess), est in run.estimators.items():
                key = f"{mode}/{hess}"
                eps = est.epsilon(c, t)
                table.add(t, c, f"eps_norm[{key}]", eps.norm())
                table.add(t, c, f"delta[{key}]", estimation_error(exact, eps))
    return table


def run_fil_correlation(cfg: ExperimentConfig, *, workers: int = 1,
                        data: FederationData | None = None) -> ResultTable:
    """Pearson r between estimated and exact FIL at each evaluation round."""
    cfg.validate()
    table = ResultTable("fil-correlation", cfg.digest())
    rounds = _eval_rounds(cfg)
    T = cfg.federation.rounds
    if T not in rounds:
        rounds.append(T)
    key = cfg.estimator_list[0]
    run = train_with_estimators(cfg, data, estimators=[key], snapshot_rounds=rounds)
    data, traj, est = run.data, run.trajectory, run.estimators[key]
    spec, test = cfg.model, run.data.test
    clients = tracked_clients(cfg, data)
    loo = leave_one_out_all(spec, data, cfg.federation, clients, workers)
    for t in rounds:
        w = traj.models[t]
        exact = [fil(spec, w, loo[c][t] - w, test) for c in clients]
        if cfg.experiment.self_test:
            estimated = list(exact)
        else:
            estimated = [fil(spec, w, est.epsilon(c, t), test) for c in clients]
        try:
            r = pearson(estimated, exact)
        except (UndefinedCorrelationError, EmptyInputError) as exc:
            table.notes.append(f"round {t}: {exc}")
            r = math.nan
        table.add(t, -1, "pearson", r)
        if t == T:
            for c, e_hat, e in zip(clients, estimated, exact):
                table.add(t, c, "fil_est", e_hat)
                table.add(t, c, "fil_exact", e)
    return table


def _removal_set(values: dict[int, float], strategy: str, n_remove: int, metric: str,
                 rng: np.random.Generator | None = None) -> list[int]:
    if n_remove == 0:
        return []
    order = rank_clients(values, "valuable-first", metric)
    if strategy == "highest":
        return sorted(order[:n_remove])
    if strategy == "lowest":
        return sorted(order[-n_remove:])
    if strategy == "random":
        return sorted(int(c) for c in rng.choice(sorted(values), size=n_remove, replace=False))
    raise ConfigError(f"unknown strategy {strategy!r}")


def _continue_without(cfg: ExperimentConfig, data: FederationData, traj: FederationTrajectory,
                      removed: list[int]) -> LayeredParams:
    x = cfg.experiment.intervention_round
    if not removed:
        return traj.models[-1]
    rest = run_federation(cfg.model, data, cfg.federation, exclude=removed, exclude_from=x + 1,
                          start=(x, traj.models[x]), record=False, keep_records=False)
    return rest.models[-1]


def client_values(cfg: ExperimentConfig, run: TrainedRun, t: int) -> dict[int, float]:
    """Estimated FIL or FIA of every client at round ``t``."""
    est = next(iter(run.estimators.values()))
    w = run.trajectory.models[t]
    metric_fn = fil if cfg.experiment.metric == "fil" else fia
    return {c: metric_fn(cfg.model, w, est.epsilon(c, t), run.data.test) for c in run.data.client_ids}


def _strategies(cfg: ExperimentConfig) -> tuple[str, ...]:
    s = cfg.experiment.strategy
    return STRATEGIES if s == "all" else (s,)


def cleanse(cfg: ExperimentConfig, run: TrainedRun, values: dict[int, float], fraction: float,
            strategy: str) -> dict[str, float]:
    """Final test loss/accuracy after removing ``fraction`` of clients at the intervention round.

    The random strategy is averaged over ``repeats`` removal draws keyed by
    the experiment seed.
    """
    spec, data, test = cfg.model, run.data, run.data.test
    n_remove = int(round(fraction * len(data.client_ids)))
    if n_remove >= len(data.client_ids):
        raise ConfigError("removal fraction removes every client")
    metric = cfg.experiment.metric
    draws = cfg.experiment.repeats if strategy == "random" else 1
    losses, accs, removed_sets = [], [], []
    for r in range(draws):
        rng = np.random.default_rng([cfg.experiment.experiment_seed, 11, r, int(round(fraction * 1e6))])
        removed = _removal_set(values, strategy, n_remove, metric, rng)
        w = _continue_without(cfg, data, run.trajectory, removed)
        losses.append(loss(spec, w, test))
        accs.append(accuracy(spec, w, test))
        removed_sets.append(removed)
    return {
        "loss": float(np.mean(losses)),
        "loss_std": float(np.std(losses)),
        "accuracy": float(np.mean(accs)),
        "accuracy_std": float(np.std(accs)),
        "removed": removed_sets,
    }


def _prepare_intervention(cfg: ExperimentConfig, data):
    x = cfg.experiment.intervention_round
    run = train_with_estimators(cfg, data, estimators=[cfg.estimator_list[0]], snapshot_rounds=[x])
    return run, client_values(cfg, run, x)


def run_cleansing(cfg: ExperimentConfig, *, workers: int = 1, data: FederationData | None = None) -> ResultTable:
    """Remove a fraction of clients by estimated influence and finish training."""
    cfg.validate()
    table = ResultTable("cleansing", cfg.digest())
    T, x = cfg.federation.rounds, cfg.experiment.intervention_round
    run, values = _prepare_intervention(cfg, data)
    spec, test = cfg.model, run.data.test
    for c in sorted(values):
        table.add(x, c, f"value[{cfg.experiment.metric}]", values[c])
    table.add(T, -1, "final_loss[none]", loss(spec, run.trajectory.models[-1], test))
    table.add(T, -1, "final_accuracy[none]", accuracy(spec, run.trajectory.models[-1], test))
    frac = cfg.experiment.removal_fraction
    for strategy in _strategies(cfg):
        res = cleanse(cfg, run, values, frac, strategy)
        table.add(T, -1, f"final_loss[{strategy}]", res["loss"])
        table.add(T, -1, f"final_accuracy[{strategy}]", res["accuracy"])
        if strategy == "random":
            table.add(T, -1, "final_loss_std[random]", res["loss_std"])
            table.add(T, -1, "final_accuracy_std[random]", res["accuracy_std"])
        else:
            for c in res["removed"][0]:
                table.add(x, c, f"removed[{strategy}]", 1.0)
    return table


def run_valuation(cfg: ExperimentConfig, *, workers: int = 1, data: FederationData | None = None) -> ResultTable:
    """Final loss/accuracy for every (removal fraction, strategy) pair."""
    cfg.validate()
    table = ResultTable("valuation", cfg.digest())
    T = cfg.federation.rounds
    run, values = _prepare_intervention(cfg, data)
    spec, test = cfg.model, run.data.test
    table.add(T, -1, "final_loss[none@0]", loss(spec, run.trajectory.models[-1], test))
    table.add(T, -1, "final_accuracy[none@0]", accuracy(spec, run.trajectory.models[-1], test))
    for frac in cfg.experiment.fractions:
        for strategy in _strategies(cfg):
            res = cleanse(cfg, run, values, frac, strategy)
            table.add(T, -1, f"final_loss[{strategy}@{frac:g}]", res["loss"])
            table.add(T, -1, f"final_accuracy[{strategy}@{frac:g}]", res["accuracy"])
    return table


def run_diagnostics(cfg: ExperimentConfig, *, workers: int = 1, data: FederationData | None = None) -> ResultTable:
    """Per-layer case classification, per-round estimate norms and truncation log."""
    cfg.validate()
    table = ResultTable("diagnostics", cfg.digest())
    key = cfg.estimator_list[0]
    run = train_with_estimators(cfg, data, estimators=[key], snapshot_rounds=[], keep_records=True)
    est = run.estimators[key]
    report = compute_diagnostics(est.state, est.records_seen, cfg.federation, history=est.history)
    T = cfg.federation.rounds
    for ld in report.layers:
        tag = f"L{ld.layer}"
        table.add(T, -1, f"case[{tag}]", ld.case)
        table.add(T, -1, f"gamma[{tag}]", ld.gamma)
        table.add(T, -1, f"alpha[{tag}]", ld.alpha)
        table.add(T, -1, f"lambda_min[{tag}]", ld.lam_min)
        table.add(T, -1, f"lambda_max[{tag}]", ld.lam_max)
        table.add(T, -1, f"expansions[{tag}]", ld.expansion_events)
    for t, j, c, kind in report.events:
        table.add(t, c, f"{kind}[L{j}]", 1.0)
    for t, c, j, n, mapped, truncated in report.norms:
        table.add(t, c, f"eps_norm[L{j}]", n)
    return table


RUNNERS = {
    "fip-error": run_fip_error,
    "fil-correlation": run_fil_correlation,
    "cleansing": run_cleansing,
    "valuation": run_valuation,
    "diagnostics": run_diagnostics,
}


def run_experiment(cfg: ExperimentConfig, *, workers: int = 1, data: FederationData | None = None) -> ResultTable:
    return RUNNERS[cfg.experiment.kind](cfg, workers=workers, data=data)
