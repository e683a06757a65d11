"""Curvature-based regime estimates for a convex and a non-convex run."""

from __future__ import annotations

from fedfluence.config import preset
from fedfluence.experiments import run_diagnostics

convex = preset("convex-small").override(experiment={"kind": "diagnostics"})
mlp = preset("nonconvex-small")
inflated = mlp.override(federation={"lr": 10 * mlp.federation.lr, "overflow_guard": 1e300},
                        experiment={"kind": "diagnostics", "estimators": ("lwet/fisher",)})

for title, cfg in (("convex, small step", convex), ("MLP, step x10", inflated)):
    table = run_diagnostics(cfg)
    T = cfg.federation.rounds
    print(f"{title}:")
    print("  layer  lambda_min  lambda_max   alpha    gamma   case  expansions")
    for j, name in enumerate(cfg.model.block_names):
        tag = f"L{j}"
        print(f"  {name:5s} {table.get(f'lambda_min[{tag}]', T):10.4f} {table.get(f'lambda_max[{tag}]', T):11.4f}"
              f" {table.get(f'alpha[{tag}]', T):7.4f} {table.get(f'gamma[{tag}]', T):8.4f}"
              f" {int(table.get(f'case[{tag}]', T)):5d} {int(table.get(f'expansions[{tag}]', T)):11d}")
    print()
