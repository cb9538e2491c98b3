"""Exact continuous-time Markov chain analysis of the batching system.

States are enumerated by breadth-first reachability from the state in which
every client holds its token.  Each variant is described by a transition
function ``state -> [(rate, next_state, completed_jobs_per_type)]`` which the
builder and the simulator share.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError, NumericalError, StateSpaceTooLarge
from .model import SingleTypeConfig, TwoTypeConfig, max_batch_size

__all__ = [
    "MarkovModel",
    "StationaryResult",
    "ExactOptimum",
    "build",
    "build_single",
    "build_two_type_preemptive",
    "build_two_type_nonpreemptive",
    "solve_stationary",
    "check_irreducible",
    "optimize_batch_exact",
    "throughput_upper_bound",
    "state_cap",
    "single_state_count",
    "transition_function",
    "initial_state",
    "write_throughput_table",
    "export_matrix_market",
]

DEFAULT_STATE_CAP = 2_000_000
DENSE_LIMIT = 2000
ITERATIVE_LIMIT = 5_000
ILU_DROP = 1e-2
ILU_FILL = 10

SINGLE = "single"
PREEMPTIVE = "two_type_preemptive"
NONPREEMPTIVE = "two_type_nonpreemptive"


def state_cap():
    """Enumeration cap; the ``BATCHMF_STATE_CAP`` environment variable overrides it."""
    raw = os.environ.get("BATCHMF_STATE_CAP")
    if raw is None:
        return DEFAULT_STATE_CAP
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError("BATCHMF_STATE_CAP", f"expected an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError("BATCHMF_STATE_CAP", "must be positive")
    return cap


@dataclass(frozen=True, eq=False)
class MarkovModel:
    """Enumerated chain.  ``generator`` rows are source states and sum to zero.

    ``rewards[i, s]`` is the job completion rate of type ``i`` in state ``s``,
    so stationary throughput is ``pi @ rewards.sum(0)``.
    """

    states: tuple
    index: dict
    generator: sp.csr_matrix
    variant: str
    rewards: np.ndarray
    config: object = None

    @property
    def size(self):
        return len(self.states)

    @property
    def completion_rate(self):
        return self.rewards.sum(axis=0)


@dataclass(frozen=True, eq=False)
class StationaryResult:
    pi: np.ndarray
    throughput: float
    residual: float
    per_type: tuple = ()
    method: str = "dense"


@dataclass(frozen=True)
class SweepRow:
    k: int
    theta: float
    states: int
    residual: float


@dataclass(frozen=True)
class ExactOptimum:
    k_star: int
    theta_star: float
    table: tuple
    pruned: tuple = field(default=())


# --------------------------------------------------------------------------
# transition functions


def _single_step(cfg: SingleTypeConfig):
    n, m, k, lam = cfg.n, cfg.m, cfg.k, cfg.lam
    mu = cfg.mu
    merge = cfg.merge_rate
    instant = cfg.batching is None
    done = (k,)

    def step(s):
        x, y, zk = s
        out = []
        if x > 0:
            if instant and y + 1 == k:
                out.append((lam * x, (x - 1, 0, zk + k), None))
            else:
                out.append((lam * x, (x - 1, y + 1, zk), None))
        if not instant and y >= k:
            out.append((merge * (y // k), (x, y - k, zk + k), None))
        z = zk // k
        if z > 0:
            out.append((mu * min(m, z), (x + k, y, zk - k), done))
        return out

    return step


def _arrivals_two_type(cfg, s, out, queue_type1):
    """Producer moves for both two-type variants.

    ``queue_type1(s)`` returns the successor after a type-1 batch forms.
    """
    x, y1, y2 = s[0], s[1], s[2]
    if x == 0:
        return
    lam, p = cfg.lam, cfg.p
    if p > 0:
        rate = lam * x * p
        if cfg.batching1 is None and y1 + 1 == cfg.k1:
            out.append((rate, queue_type1((x - 1, 0) + s[2:]), None))
        else:
            out.append((rate, (x - 1, y1 + 1) + s[2:], None))
    if p < 1:
        rate = lam * x * (1 - p)
        if cfg.batching2 is None and y2 + 1 == cfg.k2:
            out.append((rate, (x - 1, y1, 0) + s[3:], None))
        else:
            out.append((rate, (x - 1, y1, y2 + 1) + s[3:], None))


def _preemptive_step(cfg: TwoTypeConfig):
    n, m, k1, k2 = cfg.n, cfg.m, cfg.k1, cfg.k2
    mu1, mu2 = cfg.mu1, cfg.mu2
    M1 = None if cfg.batching1 is None else cfg.batching1.rate(k1)
    M2 = None if cfg.batching2 is None else cfg.batching2.rate(k2)
    done1, done2 = (k1, 0), (0, k2)

    def form1(s):
        x, y1, y2, zk1 = s
        return (x, y1, y2, zk1 + k1)

    def step(s):
        x, y1, y2, zk1 = s
        out = []
        _arrivals_two_type(cfg, s, out, form1)
        if M1 is not None and y1 >= k1:
            out.append((M1 * (y1 // k1), (x, y1 - k1, y2, zk1 + k1), None))
        if M2 is not None and y2 >= k2:
            # the new type-2 batch joins the implicit pool z2
            out.append((M2 * (y2 // k2), (x, y1, y2 - k2, zk1), None))
        z1 = zk1 // k1
        z2 = (n - x - y1 - y2 - zk1) // k2
        v1 = min(m, z1)
        v2 = min(max(0, m - z1), z2)
        if v1 > 0:
            out.append((v1 * mu1, (x + k1, y1, y2, zk1 - k1), done1))
        if v2 > 0:
            out.append((v2 * mu2, (x + k2, y1, y2, zk1), done2))
        return out

    return step


def _nonpreemptive_step(cfg: TwoTypeConfig):
    n, m, k1, k2 = cfg.n, cfg.m, cfg.k1, cfg.k2
    mu1, mu2 = cfg.mu1, cfg.mu2
    M1 = None if cfg.batching1 is None else cfg.batching1.rate(k1)
    M2 = None if cfg.batching2 is None else cfg.batching2.rate(k2)
    done1, done2 = (k1, 0), (0, k2)

    def step(s):
        x, y1, y2, uk, vk = s
        v1 = vk // k1
        v2 = min(m - v1, (n - x - y1 - y2 - uk - vk) // k2)
        full = v1 + v2 == m

        def form1(t):
            # a new type-1 batch queues only if every server is busy
            if full:
                return t[:3] + (t[3] + k1, t[4])
            return t[:4] + (t[4] + k1,)

        out = []
        _arrivals_two_type(cfg, s, out, form1)
        if M1 is not None and y1 >= k1:
            out.append((M1 * (y1 // k1), form1((x, y1 - k1, y2, uk, vk)), None))
        if M2 is not None and y2 >= k2:
            out.append((M2 * (y2 // k2), (x, y1, y2 - k2, uk, vk), None))
        if v1 > 0:
            if uk == 0:
                out.append((v1 * mu1, (x + k1, y1, y2, uk, vk - k1), done1))
            else:
                out.append((v1 * mu1, (x + k1, y1, y2, uk - k1, vk), done1))
        if v2 > 0:
            if uk == 0:
                out.append((v2 * mu2, (x + k2, y1, y2, uk, vk), done2))
            else:
                out.append((v2 * mu2, (x + k2, y1, y2, uk - k1, vk + k1), done2))
        return out

    return step


def _variant_of(config):
    if isinstance(config, SingleTypeConfig):
        return SINGLE
    if isinstance(config, TwoTypeConfig):
        return PREEMPTIVE if config.discipline == "preemptive" else NONPREEMPTIVE
    raise TypeError(f"no exact chain for {type(config).__name__}")


def transition_function(config):
    """Return ``(variant, step, ntypes)`` for a single- or two-type config."""
    variant = _variant_of(config)
    if variant == SINGLE:
        return variant, _single_step(config), 1
    if variant == PREEMPTIVE:
        return variant, _preemptive_step(config), 2
    return variant, _nonpreemptive_step(config), 2


def initial_state(config):
    """All clients active, nothing queued or in service."""
    variant = _variant_of(config)
    return {SINGLE: (config.n, 0, 0), PREEMPTIVE: (config.n, 0, 0, 0)}.get(
        variant, (config.n, 0, 0, 0, 0)
    )


# --------------------------------------------------------------------------
# construction


def single_state_count(config: SingleTypeConfig):
    """Number of reachable states of the single-type chain."""
    n, k = config.n, config.k
    if config.batching is None:
        return n + 1
    zmax = n // k
    return (zmax + 1) * (n + 1) - k * zmax * (zmax + 1) // 2


def _explore(start, step, ntypes, cap):
    index = {start: 0}
    states = [start]
    rows, cols, vals = [], [], []
    rewards = [[] for _ in range(ntypes)]
    reward_rows = []
    i = 0
    while i < len(states):
        for rate, target, done in step(states[i]):
            if rate <= 0:
                continue
            j = index.get(target)
            if j is None:
                if len(states) >= cap:
                    raise StateSpaceTooLarge(cap)
                j = index[target] = len(states)
                states.append(target)
            rows.append(i)
            cols.append(j)
            vals.append(rate)
            if done is not None:
                reward_rows.append(i)
                for t in range(ntypes):
                    rewards[t].append(rate * done[t])
        i += 1
    size = len(states)
    off = sp.coo_matrix((vals, (rows, cols)), shape=(size, size)).tocsr()
    out_rate = np.asarray(off.sum(axis=1)).ravel()
    generator = (off - sp.diags(out_rate)).tocsr()
    reward = np.zeros((ntypes, size))
    for t in range(ntypes):
        np.add.at(reward[t], reward_rows, rewards[t])
    return tuple(states), index, generator, reward


def build(config, cap=None) -> MarkovModel:
    """Build the exact chain for any single- or two-type config."""
    cap = state_cap() if cap is None else cap
    variant, step, ntypes = transition_function(config)
    if variant == SINGLE and single_state_count(config) > cap:
        raise StateSpaceTooLarge(cap)
    states, index, generator, reward = _explore(initial_state(config), step, ntypes, cap)
    return MarkovModel(states, index, generator, variant, reward, config)


def build_single(config: SingleTypeConfig, cap=None) -> MarkovModel:
    if not isinstance(config, SingleTypeConfig):
        raise TypeError("build_single needs a SingleTypeConfig")
    return build(config, cap)


def build_two_type_preemptive(config: TwoTypeConfig, cap=None) -> MarkovModel:
    if config.discipline != "preemptive":
        raise ConfigError("discipline", "expected 'preemptive'")
    return build(config, cap)


def build_two_type_nonpreemptive(config: TwoTypeConfig, cap=None) -> MarkovModel:
    if config.discipline != "nonpreemptive":
        raise ConfigError("discipline", "expected 'nonpreemptive'")
    return build(config, cap)


# --------------------------------------------------------------------------
# analysis


def check_irreducible(model: MarkovModel) -> bool:
    """True iff the positive-rate transition graph is strongly connected."""
    if model.size == 1:
        return True
    Q = model.generator.tocoo()
    keep = (Q.row != Q.col) & (Q.data > 0)
    graph = sp.csr_matrix(
        (np.ones(keep.sum()), (Q.row[keep], Q.col[keep])), shape=Q.shape
    )
    ncomp, _ = connected_components(graph, directed=True, connection="strong")
    return ncomp == 1


def _balance_system(Q, pin=0):
    """Row-scaled ``Q^T`` with balance equation ``pin`` replaced by ``pi[pin] = 1``.

    Pinning one state keeps the system as sparse as ``Q``; the solution is
    normalised afterwards.
    """
    A = Q.T.tolil()
    A[pin, :] = 0.0
    A[pin, pin] = 1.0
    A = A.tocsr()
    scale = 1.0 / abs(A).max(axis=1).toarray().ravel()
    A = (sp.diags(scale) @ A).tocsc()
    b = np.zeros(Q.shape[0])
    b[pin] = scale[pin]
    return A, b


def _normalised_system(Q):
    """``Q^T`` with the first balance equation replaced by ``sum(pi) = 1``."""
    A = Q.T.tolil()
    A[0, :] = np.ones(Q.shape[0])
    b = np.zeros(Q.shape[0])
    b[0] = 1.0
    return A.tocsc(), b


def _solve_direct(Q):
    A, b = _normalised_system(Q)
    lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
    x = lu.solve(b)
    # one round of iterative refinement
    return x + lu.solve(b - A @ x)


def _heavy_state(Q, steps=20_000, seed=0):
    """State with the most expected holding time along a short jump-chain walk."""
    Q = Q.tocsr()
    indptr, indices, data = Q.indptr, Q.indices, Q.data
    rng = np.random.default_rng(seed)
    u = rng.random(steps)
    dwell = np.zeros(Q.shape[0])
    s = 0
    for i in range(steps):
        lo, hi = indptr[s], indptr[s + 1]
        cols, rates = indices[lo:hi], data[lo:hi]
        off = cols != s
        cols, rates = cols[off], rates[off]
        cum = np.cumsum(rates)
        dwell[s] += 1.0 / cum[-1]
        s = int(cols[min(np.searchsorted(cum, u[i] * cum[-1], side="right"), len(cols) - 1)])
    return int(np.argmax(dwell))


def _solve_iterative(Q, tol, cycles=20):
    """ILU-preconditioned GMRES, pinning the most probable state.

    Pinning a heavy state keeps the unknowns well scaled.  Returns ``None``
    when the residual target is not reached.
    """
    A, b = _balance_system(Q, _heavy_state(Q))
    ilu = spla.spilu(A, drop_tol=ILU_DROP, fill_factor=ILU_FILL, permc_spec="MMD_AT_PLUS_A")
    precond = spla.LinearOperator(A.shape, ilu.solve)
    x = ilu.solve(b)
    for _ in range(cycles):
        x, _ = spla.gmres(A, b, x0=x, M=precond, rtol=1e-15, atol=0.0, restart=40, maxiter=1)
        pi = np.abs(x) / np.abs(x).sum()
        if np.max(np.abs(Q.T @ pi)) < 0.1 * tol:
            return x
    return None


def solve_stationary(model: MarkovModel, method="auto", tol=1e-8) -> StationaryResult:
    """Solve ``pi Q = 0``, ``sum(pi) = 1``.

    ``method`` is ``dense``, ``sparse`` (direct LU), ``iterative`` (ILU +
    GMRES, falling back to LU) or ``auto``: dense below 2000 states,
    iterative above 5000 states, LU in between.
    """
    Q = model.generator
    size = Q.shape[0]
    if size == 0:
        raise NumericalError("empty model")
    if method == "auto":
        if size < DENSE_LIMIT:
            method = "dense"
        elif size > ITERATIVE_LIMIT:
            method = "iterative"
        else:
            method = "sparse"
    if method not in ("dense", "sparse", "iterative"):
        raise ValueError(f"unknown method {method!r}")
    if size == 1:
        pi = np.ones(1)
    else:
        try:
            if method == "dense":
                A, b = _normalised_system(Q)
                pi = scipy.linalg.solve(A.toarray(), b)
            elif method == "iterative":
                pi = _solve_iterative(Q, tol)
                if pi is None:
                    method = "sparse"
                    pi = _solve_direct(Q)
            else:
                pi = _solve_direct(Q)
        except (np.linalg.LinAlgError, RuntimeError, scipy.linalg.LinAlgError) as exc:
            raise NumericalError(f"singular balance system: {exc}") from exc
    if not np.all(np.isfinite(pi)):
        raise NumericalError("non-finite stationary vector")
    pi = pi / pi.sum()
    pi = np.where((pi < 0) & (pi > -1e-12), 0.0, pi)
    if np.any(pi < 0):
        residual = float(np.max(np.abs(Q.T @ pi)))
        raise NumericalError("negative stationary probabilities", residual)
    pi = pi / pi.sum()
    residual = float(np.max(np.abs(Q.T @ pi)))
    if residual > tol:
        raise NumericalError(f"stationary residual {residual:.3g} exceeds {tol:g}", residual)
    per_type = tuple(float(pi @ r) for r in model.rewards)
    return StationaryResult(pi, float(sum(per_type)), residual, per_type, method)


def throughput_upper_bound(config) -> float:
    """Capacity bound ``min(k mu m, n lam mu / (lam + mu))`` on stationary throughput.

    Valid for any batching law: at most ``m`` batches of ``k`` jobs are in
    service, and ``Theta = lam E[X] <= mu E[jobs in service] <= mu (n - E[X])``.
    For two types the faster batch rate is used.
    """
    if isinstance(config, SingleTypeConfig):
        k, mu = config.k, config.mu
    else:
        k = max(config.k1, config.k2)
        mu = max(config.mu1, config.mu2)
    lam = config.lam
    return min(k * mu * config.m, config.n * lam * mu / (lam + mu))


def _evaluate(config):
    model = build(config)
    result = solve_stationary(model)
    return model.size, result.throughput, result.residual


def _evaluate_k(args):
    template, k = args
    try:
        return _evaluate(template.with_k(k))
    except Exception as exc:  # annotate with the failing k
        exc.args = (f"k={k}: {exc}",) + exc.args[1:]
        raise


def optimize_batch_exact(template, K=None, prune=False, jobs=1) -> ExactOptimum:
    """Maximise exact throughput over ``k = 1..K`` (uniform ``k`` for two types).

    ``K`` defaults to the largest admissible batch size: ``n``, or
    ``(n + 1) // 2`` for two types, where larger uniform batches deadlock.

    With ``prune=True`` batch sizes whose capacity bound cannot beat the best
    throughput found so far are skipped; the argmax is unchanged.
    """
    kmax = max_batch_size(template)
    K = kmax if K is None else K
    if not 1 <= K <= kmax:
        raise ConfigError("kmax", f"must lie in [1, {kmax}], got {K}")
    ks = list(range(1, K + 1))
    rows = {}
    pruned = []
    if prune:
        bounds = {k: throughput_upper_bound(template.with_k(k)) for k in ks}
        best = -math.inf
        for k in sorted(ks, key=lambda k: (-bounds[k], k)):
            if bounds[k] < best:
                pruned.append(k)
                continue
            size, theta, res = _evaluate_k((template, k))
            rows[k] = SweepRow(k, theta, size, res)
            best = max(best, theta)
    elif jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for k, (size, theta, res) in zip(ks, pool.map(_evaluate_k, [(template, k) for k in ks])):
                rows[k] = SweepRow(k, theta, size, res)
    else:
        for k in ks:
            size, theta, res = _evaluate_k((template, k))
            rows[k] = SweepRow(k, theta, size, res)
    table = tuple(rows[k] for k in sorted(rows))
    best_row = max(table, key=lambda r: (r.theta, -r.k))
    return ExactOptimum(best_row.k, best_row.theta, table, tuple(sorted(pruned)))


# --------------------------------------------------------------------------
# export


def write_throughput_table(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "theta", "states", "residual"])
        for row in rows:
            writer.writerow([row.k, repr(row.theta), row.states, repr(row.residual)])


def export_matrix_market(model: MarkovModel, path):
    scipy.io.mmwrite(path, model.generator, comment=f"generator of {model.variant} chain")
