"""Client cleansing: drop clients by estimated value midway and finish training.

Removing the clients with the lowest estimated influence on test loss
should leave a model at least as good as removing a random subset, which
in turn beats removing the most valuable clients.
"""

from __future__ import annotations

import numpy as np

from fedfluence.config import preset
from fedfluence.experiments import run_cleansing

cfg = preset("convex-small").override(experiment={"kind": "cleansing", "strategy": "all"})
rows = []
for seed in range(5):
    table = run_cleansing(cfg.override(data={"seed": seed}))
    rows.append({s: table.get(f"final_loss[{s}]") for s in ("none", "lowest", "random", "highest")})
    print(f"data seed {seed}: " + "  ".join(f"{s}={v:.4f}" for s, v in rows[-1].items()))

print("\nmean final test loss over seeds:")
for s in ("none", "lowest", "random", "highest"):
    print(f"  remove {s:8s} {np.mean([r[s] for r in rows]):.4f}")
