"""Why layer-wise truncation is needed on a non-convex model.

The blowup preset trains an MLP with a large step. Without truncation the
estimate is pushed through expanding local maps every round and its norm
explodes; with truncation a layer falls back to the within-round
reaggregation gap as soon as its map is seen to expand.
"""

from __future__ import annotations

import numpy as np

from fedfluence.config import preset
from fedfluence.experiments import run_fip_error

cfg = preset("blowup-demo").override(experiment={"estimators": ("basic/fisher", "lwet/fisher")})
table = run_fip_error(cfg)

for t, c, m, v in table.rows:
    if m == "truncation_layer[lwet/fisher]":
        print(f"round {t}: layer {cfg.model.block_names[int(v)]} truncated (first seen on client {c})")

print("\nround   max|eps| basic   max|eps| lwet   mean delta basic   mean delta lwet")
rounds = sorted({t for t, _, m, _ in table.rows if m.startswith("delta[")})
for t in rounds[:10] + rounds[10::20]:
    row = {m: [v for tt, _, mm, v in table.rows if tt == t and mm == m] for m in (
        "eps_norm[basic/fisher]", "eps_norm[lwet/fisher]", "delta[basic/fisher]", "delta[lwet/fisher]")}
    print(f"{t:5d}   {max(row['eps_norm[basic/fisher]']):14.3e}   {max(row['eps_norm[lwet/fisher]']):13.3e}"
          f"   {np.mean(row['delta[basic/fisher]']):16.3e}   {np.mean(row['delta[lwet/fisher]']):15.3e}")
