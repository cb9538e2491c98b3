"""Event-driven simulation of the exact chains and transient analysis."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .ctmc import MarkovModel, initial_state, solve_stationary, state_cap, transition_function
from .errors import ConfigError, ModelError, StateSpaceTooLarge
from .meanfield import Trajectory
from .model import SingleTypeConfig

__all__ = [
    "SimulationResult",
    "MixingCurve",
    "simulate",
    "mixing_curve",
    "scaled_path",
    "scale_config",
    "sup_distance",
]

CHUNK = 1 << 16


@dataclass(frozen=True, eq=False)
class SimulationResult:
    events: int
    horizon: float
    warmup: float
    completed: tuple
    throughput: float
    ci: tuple
    per_type_throughput: tuple
    seed: int
    occupancy: dict = None
    trace: list = None


@dataclass(frozen=True, eq=False)
class MixingCurve:
    t: np.ndarray
    tv: np.ndarray


def _label(src, dst, done):
    if done is not None:
        return "service" if len(done) == 1 else f"service{1 + int(done[0] == 0)}"
    return "arrival" if dst[0] < src[0] else "batch"


def simulate(
    config,
    horizon=None,
    events=None,
    seed=0,
    warmup=0.2,
    batches=30,
    occupancy=False,
    trace=False,
    start=None,
):
    """Simulate the exact chain of ``config`` until ``horizon`` or ``events``.

    Holding times are exponential at the total exit rate; the next transition
    is picked proportionally to its rate.  The first ``warmup`` fraction of
    the simulated time is excluded from throughput and occupancy.  The run is
    a deterministic function of ``(config, seed)``.
    """
    if (horizon is None) == (events is None):
        raise ValueError("give exactly one of horizon or events")
    if (horizon is not None and not horizon > 0) or (events is not None and events < 1):
        raise ValueError("simulation budget must be positive")
    if not 0 <= warmup < 1:
        raise ValueError("warmup must lie in [0, 1)")
    _, step, ntypes = transition_function(config)
    rng = np.random.default_rng(seed)
    cache = {}

    def moves(s):
        entry = cache.get(s)
        if entry is None:
            out = [tr for tr in step(s) if tr[0] > 0]
            if not out:
                raise ModelError(f"absorbing state {s}")
            cum = np.cumsum([tr[0] for tr in out]).tolist()
            entry = cache[s] = (cum, [tr[1] for tr in out], [tr[2] for tr in out])
        return entry

    state = initial_state(config) if start is None else tuple(start)
    t = 0.0
    count = 0
    done_t, done_jobs = [], []
    log = [(0.0, "start", state)] if trace else None
    visits = [] if occupancy else None
    budget = events if events is not None else math.inf
    expo = rng.standard_exponential(CHUNK).tolist()
    unif = rng.random(CHUNK).tolist()
    pos = 0
    while count < budget:
        cum, targets, dones = moves(state)
        total = cum[-1]
        if pos == CHUNK:
            expo = rng.standard_exponential(CHUNK).tolist()
            unif = rng.random(CHUNK).tolist()
            pos = 0
        t_next = t + expo[pos] / total
        if horizon is not None and t_next > horizon:
            if occupancy:
                visits.append((t, horizon, state))
            t = horizon
            break
        i = bisect.bisect_right(cum, unif[pos] * total)
        pos += 1
        i = min(i, len(cum) - 1)
        if occupancy:
            visits.append((t, t_next, state))
        t = t_next
        nxt = targets[i]
        if dones[i] is not None:
            done_t.append(t)
            done_jobs.append(dones[i])
        if trace:
            log.append((t, _label(state, nxt, dones[i]), nxt))
        state = nxt
        count += 1

    horizon = t if horizon is None else horizon
    t0 = warmup * horizon
    span = horizon - t0
    done_t = np.asarray(done_t)
    jobs = np.asarray(done_jobs, dtype=float).reshape(-1, ntypes)
    keep = done_t > t0
    completed = tuple(float(v) for v in jobs[keep].sum(axis=0))
    per_type = tuple(float(c / span) for c in completed) if span > 0 else (math.nan,) * ntypes
    throughput = float(sum(per_type))
    ci = _batch_means_ci(done_t[keep], jobs[keep].sum(axis=1), t0, horizon, batches)
    occ = None
    if occupancy:
        occ = {}
        for a, b, s in visits:
            lo = max(a, t0)
            if b > lo:
                occ[s] = occ.get(s, 0.0) + (b - lo)
        occ = {s: v / span for s, v in occ.items()}
    return SimulationResult(
        count, horizon, t0, completed, throughput, ci, per_type, seed, occ, log
    )


def _batch_means_ci(times, jobs, t0, t1, batches, level=0.95):
    if batches < 2 or t1 <= t0:
        return (math.nan, math.nan)
    edges = np.linspace(t0, t1, batches + 1)
    idx = np.clip(np.searchsorted(edges, times, side="left") - 1, 0, batches - 1)
    per_batch = np.bincount(idx, weights=jobs, minlength=batches) / np.diff(edges)
    mean = per_batch.mean()
    half = stats.t.ppf(0.5 + level / 2, batches - 1) * per_batch.std(ddof=1) / math.sqrt(batches)
    return (float(mean - half), float(mean + half))


def mixing_curve(model: MarkovModel, times, pi0=None, start=0, tail=1e-12, cap=None) -> MixingCurve:
    """Total variation distance to stationarity via uniformization.

    The chain starts in state index ``start`` (the all-active state for built
    models).  Between consecutive grid times the law is propagated with
    Poisson-weighted powers of the uniformized kernel, truncated at ``tail``
    Poisson mass.
    """
    cap = state_cap() if cap is None else cap
    if model.size > cap:
        raise StateSpaceTooLarge(cap, "transient computation")
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or np.any(times < 0):
        raise ValueError("times must be non-negative and sorted")
    if pi0 is None:
        pi0 = solve_stationary(model).pi
    Q = model.generator
    rate = float(np.max(-Q.diagonal())) if model.size > 1 else 0.0
    p = np.zeros(model.size)
    p[start] = 1.0
    tv = np.empty(len(times))
    if rate == 0.0:
        tv[:] = 0.5 * np.abs(p - pi0).sum()
        return MixingCurve(times, tv)
    kernel_t = (sp.identity(model.size, format="csr") + Q / rate).T.tocsr()
    now = 0.0
    for i, t in enumerate(times):
        dt = t - now
        if dt > 0:
            p = _uniformized_step(p, kernel_t, rate * dt, tail)
            now = t
        tv[i] = 0.5 * np.abs(p - pi0).sum()
    return MixingCurve(times, tv)


def _uniformized_step(p, kernel_t, mean, tail):
    right = int(stats.poisson.isf(tail / 2, mean)) + 1
    left = int(stats.poisson.ppf(tail / 2, mean))
    weights = stats.poisson.pmf(np.arange(left, right + 1), mean)
    out = np.zeros_like(p)
    v = p
    for j in range(right + 1):
        if j >= left:
            out += weights[j - left] * v
        v = kernel_t @ v
    return out / weights.sum()


def scale_config(config: SingleTypeConfig, n):
    """Member of the family with ``n`` clients and ``m = round(alpha n)`` servers."""
    m = max(1, int(round(config.alpha * n)))
    return replace(config, n=n, m=m)


def scaled_path(config: SingleTypeConfig, T, seed=0, x0=None) -> Trajectory:
    """Active-client fraction ``X(t)/n`` on ``[0, T]`` under instantaneous batching."""
    if not isinstance(config, SingleTypeConfig) or config.batching is not None:
        raise ConfigError("batching", "scaled paths need a single-type config with instantaneous batching")
    n, k = config.n, config.k
    start = None
    if x0 is not None:
        queued = n - x0
        start = (x0, queued % k, queued - queued % k)
    res = simulate(config, horizon=T, seed=seed, warmup=0.0, trace=True, start=start, batches=0)
    t = np.array([row[0] for row in res.trace] + [T])
    w = np.array([row[2][0] for row in res.trace] + [res.trace[-1][2][0]]) / n
    return Trajectory(t, w)


def sup_distance(path: Trajectory, ode: Trajectory):
    """``sup_t |path(t) - ode(t)|`` for a piecewise-constant path.

    The one-dimensional ODE solution is monotone, so on each constant piece
    the supremum is attained at an endpoint.
    """
    left = np.interp(path.t[:-1], ode.t, ode.w)
    right = np.interp(path.t[1:], ode.t, ode.w)
    vals = path.w[:-1]
    return float(max(np.max(np.abs(vals - left)), np.max(np.abs(vals - right))))
