"""Applying the local-training map without ever building a p x p matrix.

The estimator needs prod_i (I - lr H_i) applied to a vector. With H_i
replaced by the mean outer product of N_s sampled gradients, each factor is
a rank-N_s update, so the product costs O(m N_s p) instead of O(p^2).
"""

from __future__ import annotations

import time

import numpy as np

from fedfluence.influence import dense_reference_apply, sequential_apply_fisher

rng = np.random.default_rng(0)
m, ns = 5, 20

# small p: both paths agree to rounding error
p = 40
groups = [rng.standard_normal((ns, p)) for _ in range(m)]
eps = rng.standard_normal(p)
fast = sequential_apply_fisher(groups, eps, lr=0.01)
dense = dense_reference_apply([G.T @ G / ns for G in groups], eps, lr=0.01)
print(f"p={p}: relative gap between recursion and dense product = "
      f"{np.linalg.norm(fast - dense) / np.linalg.norm(dense):.1e}")

# large p: only the recursion is practical
for p in (10_000, 20_000, 40_000):
    groups = [rng.standard_normal((ns, p)) for _ in range(m)]
    eps = rng.standard_normal(p)
    start = time.perf_counter()
    for _ in range(20):
        sequential_apply_fisher(groups, eps, lr=1e-5)
    per_call = (time.perf_counter() - start) / 20
    print(f"p={p:6d}: {per_call * 1e3:6.2f} ms per application; a dense H would need {8 * p * p / 1e9:5.1f} GB")
