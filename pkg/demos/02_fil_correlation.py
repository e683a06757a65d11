"""Estimated versus exact influence on test loss for the convex preset.

Every client is removed in turn and the federation retrained to get the
exact answer; the estimator sees only one training run.
"""

from __future__ import annotations

from fedfluence.config import preset
from fedfluence.experiments import run_fil_correlation

cfg = preset("convex-small")
table = run_fil_correlation(cfg)

print("round  pearson r")
for t, r in sorted(table.values("pearson").items()):
    print(f"{t:5d}  {r:8.4f}")

T = cfg.federation.rounds
exact = {c: v for t, c, m, v in table.rows if m == "fil_exact"}
est = {c: v for t, c, m, v in table.rows if m == "fil_est"}
print(f"\nround {T}, per client (positive = removing the client hurts the model):")
print("client   estimated      exact")
for c in sorted(exact, key=exact.get, reverse=True):
    print(f"{c:6d}  {est[c]:+.5f}  {exact[c]:+.5f}")
