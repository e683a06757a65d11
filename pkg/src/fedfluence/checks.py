"""Quantitative checks shared by ``fedfluence verify`` and the test suite.

Each check returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import time
import tracemalloc

import numpy as np

from .config import ExperimentConfig
from .data import synth_generate
from .experiments import ResultTable, run_cleansing, run_experiment, run_fil_correlation, run_fip_error
from .fedavg import FederationConfig, run_federation
from .influence import InfluenceState, update_influence
from .model import ModelSpec

Check = tuple[str, bool, str]


def mean_delta_by_round(table: ResultTable, key: str) -> dict[int, float]:
    acc: dict[int, list[float]] = {}
    for t, c, m, v in table.rows:
        if m == f"delta[{key}]":
            acc.setdefault(t, []).append(v)
    return {t: float(np.mean(v)) for t, v in sorted(acc.items())}


def determinism(cfg: ExperimentConfig, workers: int = 1) -> Check:
    first = run_experiment(cfg, workers=workers).to_csv()
    second = run_experiment(cfg, workers=workers).to_csv()
    return ("determinism", first == second, f"{len(first)} bytes, identical={first == second}")


def fil_correlation(cfg: ExperimentConfig, seeds=(0, 1, 2), threshold: float = 0.8, workers: int = 1) -> Check:
    T = cfg.federation.rounds
    rs = []
    for s in seeds:
        c = cfg.override(data={"seed": s}, experiment={"kind": "fil-correlation"})
        rs.append(run_fil_correlation(c, workers=workers).get("pearson", T))
    ok = all(r >= threshold for r in rs)
    return ("fil-correlation", ok, "final-round r per seed: " + ", ".join(f"{r:.4f}" for r in rs)
            + f" (need >= {threshold})")


def lwet_necessity(cfg: ExperimentConfig, workers: int = 1) -> Check:
    fed = cfg.federation
    basic, lwet = f"basic/{fed.hessian}", f"lwet/{fed.hessian}"
    c = cfg.override(experiment={"kind": "fip-error", "estimators": (basic, lwet), "eval_rounds": ()})
    table = run_fip_error(c, workers=workers)
    comb = table.get("max_combinatorial_norm", 0)
    max_basic = max(v for _, _, m, v in table.rows if m == f"eps_norm[{basic}]")
    max_lwet = max(v for _, _, m, v in table.rows if m == f"eps_norm[{lwet}]")
    trunc = [t for t, _, m, _ in table.rows if m == f"truncation_layer[{lwet}]"]
    db, dl = mean_delta_by_round(table, basic), mean_delta_by_round(table, lwet)
    first = min(trunc) if trunc else None
    worse = [t for t in dl if first is not None and t >= first and dl[t] > db[t]]
    ok = max_basic > 1e6 and max_lwet < 10 * comb and len(trunc) >= 1 and not worse
    detail = (f"basic max|eps|={max_basic:.3g} (>1e6), lwet max|eps|={max_lwet:.3g} "
              f"(<10x{comb:.3g}), truncations={len(trunc)} first at round {first}, "
              f"rounds where lwet mean delta > basic: {worse[:5]}")
    return ("lwet-necessity", ok, detail)


def error_growth(cfg: ExperimentConfig, workers: int = 1) -> Check:
    key = f"{cfg.federation.mode}/exact"
    c = cfg.override(experiment={"kind": "fip-error", "estimators": (key,), "eval_rounds": ()})
    table = run_fip_error(c, workers=workers)
    d = mean_delta_by_round(table, key)
    T = cfg.federation.rounds
    ts = np.array(sorted(d), dtype=float)
    ys = np.array([d[int(t)] for t in ts])
    slope = float(np.polyfit(ts, ys, 1)[0])
    ratio = d[T] / d[T // 2] if d[T // 2] > 0 else float("inf")
    ok = slope >= 0 and ratio <= 4
    return ("error-growth", ok, f"slope={slope:.3g} (>=0), delta_T/delta_T/2={ratio:.3f} (<=4)")


def cleansing_order(cfg: ExperimentConfig, seeds=range(5), fraction: float = 0.2) -> Check:
    T = cfg.federation.rounds
    results = {"lowest": [], "random": [], "highest": []}
    for s in seeds:
        c = cfg.override(data={"seed": s}, experiment={
            "kind": "cleansing", "intervention_round": T // 2, "removal_fraction": fraction, "strategy": "all"})
        table = run_cleansing(c)
        for k in results:
            results[k].append(table.get(f"final_loss[{k}]"))
    lo, ra, hi = (float(np.mean(results[k])) for k in ("lowest", "random", "highest"))
    ok = lo <= ra <= hi and lo < hi
    return ("cleansing-order", ok, f"mean final loss lowest={lo:.4f} <= random={ra:.4f} <= highest={hi:.4f}")


def estimator_round_time(input_dim: int, *, classes: int = 10, num_clients: int = 20, per_round: int = 5,
                         local_iters: int = 5, grad_samples: int = 20, rounds: int = 3,
                         repeats: int = 3, seed: int = 0) -> tuple[float, int, int]:
    """Median wall time of one Fisher-path estimator round for a logistic model.

    Returns ``(seconds, peak traced bytes, parameter count)``.
    """
    spec = ModelSpec("logreg", input_dim, classes)
    data = synth_generate(num_clients, input_dim, classes, seed, "iid-balanced", median_size=grad_samples)
    cfg = FederationConfig(lr=0.01, num_clients=num_clients, clients_per_round=per_round,
                           local_iters=local_iters, rounds=rounds, grad_samples=grad_samples,
                           mode="basic", hessian="fisher", keep_iterates=False)
    traj = run_federation(spec, data, cfg)
    times = []
    for _ in range(repeats):
        state = InfluenceState.initial(data.client_ids, spec.shapes)
        for rec in traj.records:
            w_t, w_prev = traj.models[rec.t], traj.models[rec.t - 1]
            start = time.perf_counter()
            state = update_influence(state, rec, w_t, w_prev, lr=cfg.lr, mode="basic", log=False)
            times.append(time.perf_counter() - start)
    state = InfluenceState.initial(data.client_ids, spec.shapes)
    tracemalloc.start()
    for rec in traj.records:
        state = update_influence(state, rec, traj.models[rec.t], traj.models[rec.t - 1],
                                 lr=cfg.lr, mode="basic", log=False)
    peak = tracemalloc.get_traced_memory()[1]
    tracemalloc.stop()
    return float(np.median(times)), peak, sum(r * c for r, c in spec.shapes)


def linear_scaling(input_dim: int = 500, max_ratio: float = 2.6) -> Check:
    t1, _, p1 = estimator_round_time(input_dim)
    t2, peak, p2 = estimator_round_time(2 * input_dim)
    ratio = t2 / t1
    quadratic = 8 * p2 * p2
    ok = ratio <= max_ratio and peak < quadratic / 10
    return ("linear-scaling", ok, f"p {p1}->{p2}: time ratio {ratio:.2f} (<= {max_ratio}); "
            f"peak {peak / 1e6:.1f} MB vs p^2 {quadratic / 1e6:.0f} MB")


def verify(cfg: ExperimentConfig, workers: int = 1) -> list[Check]:
    """Checks appropriate to the config's experiment kind, plus determinism."""
    results = [determinism(cfg, workers)]
    kind = cfg.experiment.kind
    keys = cfg.estimator_list
    if kind == "fil-correlation" and cfg.model.kind == "logreg":
        results.append(fil_correlation(cfg, workers=workers))
        results.append(error_growth(cfg, workers=workers))
        results.append(cleansing_order(cfg))
    elif kind == "fip-error" and {m for m, _ in keys} >= {"basic", "lwet"} and cfg.federation.overflow_guard > 1e100:
        results.append(lwet_necessity(cfg, workers=workers))
    elif kind == "cleansing":
        results.append(cleansing_order(cfg))
    return results
