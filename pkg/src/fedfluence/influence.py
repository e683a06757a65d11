"""Fed-Influence estimator.

For every client ``c`` the server keeps a per-layer estimate of how the
global model would move if ``c`` had never participated. Each round the
estimate is pushed through the participants' linearised local training and
the within-round reaggregation gap is added::

    eps_t = M_t^{-c} eps_{t-1} + (w_t without c) - w_t

``M_t^{-c}`` is the size-weighted average over surviving participants of
``prod_i (I - lr H_i)``. With the Fisher approximation the product is
applied to a vector by a rank-``N_s`` recursion, so no ``p x p`` matrix is
ever formed. Layers whose map starts expanding the estimate are truncated
to the reaggregation gap alone from that round on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import FederationData
from .errors import InfluenceOverflowError, ShapeError
from .fedavg import FederationConfig, FederationTrajectory, RoundRecord, aggregate_without
from .model import LayeredParams, ModelSpec, exact_layer_hessian

EXAMINE_TOL = 1e-9
CASE2_BAND = (0.999, 1.001)

HessianFn = Callable[[int, int, int], np.ndarray]


@dataclass
class InfluenceState:
    """Estimated FIP for every tracked client.

    ``eps[j]`` has one row per client (in ``client_ids`` order) holding the
    layer-``j`` block. ``layer_flags`` are the layer-wide truncation flags,
    ``pair_flags[k_pos, j]`` the per-(participant, layer) flags of the
    fine-grained variant. Both are sticky.
    """

    client_ids: tuple[int, ...]
    shapes: tuple[tuple[int, int], ...]
    eps: list[np.ndarray]
    layer_flags: np.ndarray
    pair_flags: np.ndarray
    t: int = 0
    events: tuple = ()
    round_log: list = field(default_factory=list)

    @classmethod
    def initial(cls, client_ids: Iterable[int], shapes) -> "InfluenceState":
        ids = tuple(sorted(client_ids))
        shapes = tuple(tuple(s) for s in shapes)
        eps = [np.zeros((len(ids), r * c)) for r, c in shapes]
        return cls(ids, shapes, eps, np.zeros(len(shapes), dtype=bool),
                   np.zeros((len(ids), len(shapes)), dtype=bool))

    def index(self, c: int) -> int:
        return self.client_ids.index(c)

    def epsilon(self, c: int) -> LayeredParams:
        i = self.index(c)
        return LayeredParams([e[i].copy() for e in self.eps], self.shapes)

    def truncation_events(self) -> list[tuple]:
        return [e for e in self.events if e[3] == "truncation"]

    def expansion_events(self) -> list[tuple]:
        return [e for e in self.events if e[3] in ("truncation", "expansion")]


def combinatorial_influence(record: RoundRecord, c: int, w_t: LayeredParams,
                            w_prev: LayeredParams | None = None) -> LayeredParams:
    """Reaggregation gap ``w_t(C_t -> C_t minus c) - w_t``.

    Zero when ``c`` sat the round out. If ``c`` was the sole participant the
    round is treated as skipped and the gap is ``w_prev - w_t``.
    """
    if c not in record.local_models:
        return w_t.zeros_like()
    if len(record.local_models) == 1:
        if w_prev is None:
            raise ValueError("degenerate round needs the previous global model")
        return w_prev - w_t
    return aggregate_without(record.local_models, record.sizes, c) - w_t


def _as_groups(samples) -> list[np.ndarray]:
    groups = []
    for g in samples:
        g = np.asarray(g, dtype=np.float64)
        groups.append(g[None, :] if g.ndim == 1 else g)
    return groups


def sequential_apply_fisher(samples: Sequence[np.ndarray], eps_in: np.ndarray, lr: float,
                            n_samples: int | None = None) -> np.ndarray:
    """Apply ``prod_i (I - lr/N_s sum_z g g^T)`` to ``eps_in`` without forming it.

    ``samples[i]`` is the ``(N_s, p)`` gradient matrix of local iteration ``i``;
    iterations are applied in order, 0 first. ``eps_in`` may be a vector of
    length ``p`` or a ``(p, K)`` matrix of stacked vectors.
    """
    sigma = np.array(eps_in, dtype=np.float64, copy=True)
    p = sigma.shape[0]
    for G in _as_groups(samples):
        if G.shape[1] != p:
            raise ShapeError(f"gradient length {G.shape[1]} does not match vector length {p}")
        ns = G.shape[0] if n_samples is None else n_samples
        if G.shape[0] != ns:
            raise ShapeError(f"expected {ns} gradients per iteration, got {G.shape[0]}")
        sigma -= (lr / ns) * (G.T @ (G @ sigma))
    return sigma


def dense_reference_apply(hessians: Sequence[np.ndarray], eps_in: np.ndarray, lr: float) -> np.ndarray:
    """Explicit ``(I - lr H_{m-1}) ... (I - lr H_0) eps_in``."""
    v = np.array(eps_in, dtype=np.float64, copy=True)
    p = v.shape[0]
    for H in hessians:
        H = np.asarray(H, dtype=np.float64)
        if H.shape != (p, p):
            raise ShapeError(f"Hessian of shape {H.shape} cannot act on length {p}")
        v = v - lr * (H @ v)
    return v


def _hessian_lookup(hessians) -> HessianFn | None:
    if hessians is None or callable(hessians):
        return hessians
    return lambda k, i, j: hessians[k][i][j]


def _local_map(record: RoundRecord, k: int, j: int, vecs: np.ndarray, lr: float,
               hessian_fn: HessianFn | None) -> np.ndarray:
    if hessian_fn is None:
        return sequential_apply_fisher([it[j] for it in record.grad_samples[k]], vecs, lr)
    m = len(record.iterates[k]) if record.iterates.get(k) else len(record.grad_samples[k])
    return dense_reference_apply([hessian_fn(k, i, j) for i in range(m)], vecs, lr)


def _survivor_weights(record: RoundRecord, c: int) -> dict[int, float]:
    rest = [k for k in record.participants if k != c]
    total = sum(record.sizes[k] for k in rest)
    return {k: record.sizes[k] / total for k in rest}


def weighted_sequential(record: RoundRecord, c: int, eps_prev: Sequence[np.ndarray], *, lr: float,
                        mode: str = "basic", state: InfluenceState | None = None,
                        hessians=None) -> list[np.ndarray | None]:
    """``M_{t,(j)}^{-c} eps_prev_(j)`` for every layer.

    With a ``state``, layers under a layer-wide flag come back as ``None``
    (lwet modes) and, in ``lwet-fine`` mode, participants flagged for a
    layer contribute nothing to it.
    """
    hessian_fn = _hessian_lookup(hessians)
    weights = _survivor_weights(record, c)
    out = []
    for j, e in enumerate(eps_prev):
        e = np.asarray(e, dtype=np.float64)
        if state is not None and mode == "lwet" and state.layer_flags[j]:
            out.append(None)
            continue
        if not weights:
            out.append(e.copy())
            continue
        acc = np.zeros_like(e)
        for k, wk in weights.items():
            if state is not None and mode == "lwet-fine" and state.pair_flags[state.index(k), j]:
                continue
            acc += wk * _local_map(record, k, j, e, lr, hessian_fn)
        out.append(acc)
    return out


def examine_truncation(state: InfluenceState | None, layer: int, mapped_norm: float, prev_norm: float,
                       client: int | None = None, tol: float = EXAMINE_TOL) -> bool:
    """True if the layer (or the (client, layer) pair) is, or now becomes, truncated."""
    if state is not None:
        if client is None and state.layer_flags[layer]:
            return True
        if client is not None and state.pair_flags[state.index(client), layer]:
            return True
    if prev_norm <= 0:
        return False
    return bool(mapped_norm > prev_norm * (1 + tol))


def update_influence(state: InfluenceState, record: RoundRecord, w_t: LayeredParams,
                     w_prev: LayeredParams, *, lr: float, mode: str = "lwet", hessians=None,
                     overflow_guard: float = 1e30, log: bool = True) -> InfluenceState:
    """Advance every tracked client's estimate by one round.

    ``hessians`` switches from the Fisher recursion to explicit matrices; it
    is either ``hessians[k][i][j]`` nesting or a callable ``(k, i, j)``.
    Examination verdicts are gathered over all clients and committed once,
    so every client in the round sees the same flags.
    """
    hessian_fn = _hessian_lookup(hessians)
    ids = state.client_ids
    K = len(ids)
    P = record.participants
    pos = {c: i for i, c in enumerate(ids)}
    total = sum(record.sizes[k] for k in P)

    # weights[c_pos, k_idx]: weight of participant k in M^{-c}
    weights = np.zeros((K, len(P)))
    degenerate = np.zeros(K, dtype=bool)
    for ci, c in enumerate(ids):
        if c in record.local_models:
            denom = total - record.sizes[c]
            if len(P) == 1:
                degenerate[ci] = True
                continue
        else:
            denom = total
        for ki, k in enumerate(P):
            if k != c:
                weights[ci, ki] = record.sizes[k] / denom

    comb = [np.zeros_like(e) for e in state.eps]
    for c in P:
        if c not in pos:
            continue
        gap = combinatorial_influence(record, c, w_t, w_prev)
        for j, b in enumerate(gap.blocks):
            comb[j][pos[c]] = b

    layer_flags = state.layer_flags.copy()
    pair_flags = state.pair_flags.copy()
    events = list(state.events)
    new_eps, rows = [], []
    for j, E in enumerate(state.eps):
        prev_norm = np.linalg.norm(E, axis=1)
        if mode == "lwet" and layer_flags[j]:
            new_eps.append(comb[j].copy())
            if log:
                new_norm = np.linalg.norm(new_eps[-1], axis=1)
                rows += [(record.t, c, j, float(new_norm[i]), float("nan"), True) for i, c in enumerate(ids)]
            continue

        active = [ki for ki, k in enumerate(P)
                  if not (mode == "lwet-fine" and k in pos and pair_flags[pos[k], j])]
        maps = {ki: _local_map(record, P[ki], j, E.T, lr, hessian_fn).T for ki in active}

        if mode == "lwet-fine":
            for ki in list(active):
                k = P[ki]
                local_norm = np.linalg.norm(maps[ki], axis=1)
                fired = [c for i, c in enumerate(ids) if c != k and weights[i, ki] > 0
                         and examine_truncation(None, j, local_norm[i], prev_norm[i])]
                if fired and k in pos:
                    pair_flags[pos[k], j] = True
                    events.append((record.t, j, k, "truncation"))
                    active.remove(ki)

        mapped = np.zeros_like(E)
        for ki in active:
            mapped += weights[:, ki, None] * maps[ki]
        mapped[degenerate] = E[degenerate]
        mapped_norm = np.linalg.norm(mapped, axis=1)

        fired = [c for i, c in enumerate(ids) if examine_truncation(None, j, mapped_norm[i], prev_norm[i])]
        truncate = False
        if fired:
            if mode == "lwet":
                layer_flags[j] = True
                truncate = True
                events.append((record.t, j, fired[0], "truncation"))
            else:
                events.append((record.t, j, fired[0], "expansion"))
        new = comb[j].copy() if truncate else mapped + comb[j]
        new_eps.append(new)
        if log:
            new_norm = np.linalg.norm(new, axis=1)
            rows += [(record.t, c, j, float(new_norm[i]), float(mapped_norm[i]), truncate)
                     for i, c in enumerate(ids)]

    for j, E in enumerate(new_eps):
        bad = ~np.isfinite(E) | (np.abs(E) > overflow_guard)
        if bad.any():
            ci = int(np.argwhere(bad.any(axis=1))[0, 0])
            row = E[ci]
            value = float(np.max(np.abs(row[np.isfinite(row)]))) if np.isfinite(row).any() else float("inf")
            if not np.isfinite(row).all():
                value = float("inf")
            raise InfluenceOverflowError(ids[ci], j, record.t, value)

    return InfluenceState(ids, state.shapes, new_eps, layer_flags, pair_flags, record.t,
                          tuple(events), rows)


class ExactHessians:
    """Lazily computed exact layer Hessians at the iterates of one round."""

    def __init__(self, spec: ModelSpec, data: FederationData, record: RoundRecord, cap: int | None = None):
        self.spec = spec
        self.data = data
        self.record = record
        self.cap = cap
        self._cache: dict[tuple[int, int, int], np.ndarray] = {}

    def __call__(self, k: int, i: int, j: int) -> np.ndarray:
        key = (k, i, j)
        if key not in self._cache:
            iterates = self.record.iterates.get(k)
            if not iterates:
                raise ValueError("exact Hessians need local iterates; set keep_iterates")
            kwargs = {} if self.cap is None else {"cap": self.cap}
            self._cache[key] = exact_layer_hessian(self.spec, iterates[i], self.data.client(k), j, **kwargs)
        return self._cache[key]


class FedInfluenceEstimator:
    """Drives :func:`update_influence` over a trajectory and keeps history.

    ``snapshot_rounds`` selects the rounds whose full estimate is retained
    (``None`` keeps every round).
    """

    def __init__(self, spec: ModelSpec, data: FederationData, config: FederationConfig, *,
                 mode: str | None = None, hessian: str | None = None,
                 snapshot_rounds: Iterable[int] | None = None, hessian_cap: int | None = None,
                 hessian_source: Callable[[RoundRecord], HessianFn] | None = None):
        self.spec = spec
        self.data = data
        self.config = config
        self.mode = mode or config.mode
        self.hessian = hessian or config.hessian
        if self.hessian == "exact-dense":
            self.hessian = "exact"
        self.hessian_cap = hessian_cap
        self.hessian_source = hessian_source
        self.state = InfluenceState.initial(data.client_ids, spec.shapes)
        self.snapshot_rounds = None if snapshot_rounds is None else set(snapshot_rounds)
        self.snapshots: dict[int, list[np.ndarray]] = {0: [e.copy() for e in self.state.eps]}
        self.history: list[tuple] = []
        self.records_seen: list[RoundRecord] = []

    def step(self, record: RoundRecord, w_t: LayeredParams, w_prev: LayeredParams) -> InfluenceState:
        hessians = None
        if self.hessian == "exact":
            if self.hessian_source is not None:
                hessians = self.hessian_source(record)
            else:
                hessians = ExactHessians(self.spec, self.data, record, self.hessian_cap)
        self.state = update_influence(self.state, record, w_t, w_prev, lr=self.config.lr, mode=self.mode,
                                      hessians=hessians, overflow_guard=self.config.overflow_guard)
        self.history.extend(self.state.round_log)
        if self.snapshot_rounds is None or record.t in self.snapshot_rounds:
            self.snapshots[record.t] = [e.copy() for e in self.state.eps]
        return self.state

    def run(self, trajectory: FederationTrajectory) -> InfluenceState:
        by_round = {r.t: r for r in trajectory.records}
        for t in range(1, trajectory.rounds + 1):
            if t in by_round:
                self.step(by_round[t], trajectory.models[t], trajectory.models[t - 1])
                self.records_seen.append(by_round[t])
            else:
                self.state.t = t
                if self.snapshot_rounds is None or t in self.snapshot_rounds:
                    self.snapshots[t] = [e.copy() for e in self.state.eps]
        return self.state

    def epsilon(self, c: int, t: int | None = None) -> LayeredParams:
        if t is None:
            return self.state.epsilon(c)
        i = self.state.index(c)
        return LayeredParams([e[i].copy() for e in self.snapshots[t]], self.state.shapes)


@dataclass
class LayerDiagnostics:
    layer: int
    lam_min: float
    lam_max: float
    alpha: float
    gamma: float
    case: int
    expansion_events: int


@dataclass
class DiagnosticsReport:
    layers: list[LayerDiagnostics]
    norms: list[tuple]
    events: list[tuple]
    max_exact_fip_norm: float | None = None


def classify_case(gamma: float) -> int:
    if gamma < CASE2_BAND[0]:
        return 1
    if gamma <= CASE2_BAND[1]:
        return 2
    return 3


def _fisher_curvature(G: np.ndarray) -> tuple[float, float]:
    """Extreme Rayleigh quotients of ``G^T G / N_s`` seen along the sampled gradients.

    The largest quotient is the top eigenvalue (via the ``N_s x N_s`` Gram
    matrix); the smallest is taken over the gradient directions themselves.
    """
    ns = G.shape[0]
    gram = G @ G.T / ns
    top = float(np.linalg.eigvalsh(gram)[-1])
    sq = np.einsum("ij,ij->i", G, G)
    keep = sq > 0
    if not keep.any():
        return 0.0, top
    quotients = (gram[keep] ** 2).sum(axis=1) * ns / sq[keep]
    return float(quotients.min()), top


def compute_diagnostics(state: InfluenceState, records: Sequence[RoundRecord], config: FederationConfig, *,
                        history: Sequence[tuple] = (), hessians: Mapping[int, HessianFn] | None = None,
                        max_exact_fip_norm: float | None = None) -> DiagnosticsReport:
    """Per-layer curvature, contraction and case estimates.

    Curvature bounds come from the Fisher outer products in ``records``
    unless ``hessians`` (round -> ``(k, i, j)`` callable) supplies exact
    matrices. A layer on which an expansion was ever observed is reported as
    Case 3 regardless of the curvature estimate.
    """
    if not records:
        raise ValueError("diagnostics need at least one completed round")
    lr, m = config.lr, config.local_iters
    J = len(state.shapes)
    lo = np.full(J, np.inf)
    hi = np.full(J, -np.inf)
    for rec in records:
        fn = None if hessians is None else hessians.get(rec.t)
        for k in rec.participants:
            for i in range(len(rec.grad_samples[k])):
                for j in range(J):
                    if fn is not None:
                        ev = np.linalg.eigvalsh(fn(k, i, j))
                        a, b = float(ev[0]), float(ev[-1])
                    else:
                        a, b = _fisher_curvature(rec.grad_samples[k][i][j])
                    lo[j] = min(lo[j], a)
                    hi[j] = max(hi[j], b)
    expansions: dict[int, int] = {}
    for ev in state.expansion_events():
        expansions[ev[1]] = expansions.get(ev[1], 0) + 1
    layers = []
    for j in range(J):
        alpha = max(abs(1 - lr * lo[j]), abs(1 - lr * hi[j]))
        gamma = alpha ** m
        case = 3 if expansions.get(j) else classify_case(gamma)
        layers.append(LayerDiagnostics(j, float(lo[j]), float(hi[j]), float(alpha), float(gamma), case,
                                       expansions.get(j, 0)))
    return DiagnosticsReport(layers, list(history), list(state.events), max_exact_fip_norm)


def snapshot_rows(history: Iterable[tuple]) -> list[dict]:
    """Export rows ``(round, client, layer, eps_norm, truncated)`` for plotting."""
    return [{"round": t, "client": c, "layer": j, "eps_norm": n, "truncated": bool(tr)}
            for t, c, j, n, _mapped, tr in history]
