"""Fluid-limit (mean-field) analysis of the batching system.

The scaled processes track fractions of the client population: for one job
type ``w`` is the fraction of active clients; for two types ``(w1, w2)`` are
the active fraction and the type-1 job fraction; for ``r`` types and ``d``
service levels ``w[i, j]`` is the fraction of type-``i`` jobs waiting for or
at level ``j``.  Batching is instantaneous in this regime.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import IntegrationError, NumericalError
from .model import MultiTypeConfig, SingleTypeConfig, SpeedupModel, TwoTypeConfig

__all__ = [
    "MeanFieldSolution",
    "Trajectory",
    "TwoTypeRates",
    "TwoTypeStability",
    "MultiTypeEquilibrium",
    "AsymptoticOptimum",
    "fixed_point_single",
    "throughput_bound",
    "drift_single",
    "integrate",
    "integrate_to_equilibrium",
    "optimal_k_asymptotic",
    "fixed_point_two_type",
    "drift_two_type",
    "classify_two_type",
    "optimal_k_two_type",
    "drift_multi",
    "multi_type_fixed_point",
    "equilibrium_multi",
]

SIMPLEX_TOL = 1e-6
CLAMP_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MeanFieldSolution:
    w: np.ndarray
    throughput_per_client: float
    alpha: float
    residual: float = 0.0
    branch: str = ""

    def total_throughput(self, n):
        return n * self.throughput_per_client


@dataclass(frozen=True, eq=False)
class Trajectory:
    t: np.ndarray
    w: np.ndarray

    @property
    def terminal(self):
        return self.w[-1]


# --------------------------------------------------------------------------
# one job type


def fixed_point_single(lam, speedup: SpeedupModel, k, alpha) -> MeanFieldSolution:
    """Closed-form equilibrium ``min(mu/(lam+mu), alpha k mu / lam)``."""
    mu = speedup.rate(k)
    client = mu / (lam + mu)
    server = alpha * k * mu / lam
    w = min(client, server)
    residual = abs(drift_single(w, lam, speedup, k, alpha))
    return MeanFieldSolution(
        np.array([w]), lam * w, alpha, residual, "client" if client <= server else "server"
    )


def throughput_bound(n, m, k, lam, speedup: SpeedupModel):
    """Upper bound ``min(k mu m, n lam mu / (lam + mu))`` on stationary throughput."""
    mu = speedup.rate(k)
    return min(k * mu * m, n * lam * mu / (lam + mu))


def drift_single(w, lam, speedup: SpeedupModel, k, alpha):
    """``k mu min(alpha, (1-w)/k) - lam w``; vectorised over ``w``."""
    mu = speedup.rate(k)
    return k * mu * np.minimum(alpha, (1.0 - np.asarray(w)) / k) - lam * np.asarray(w)


def _project(w, simplex_axes):
    """Clamp round-off excursions back into the state space.

    Components must stay in [0, 1] and, over ``simplex_axes``, sum to at most
    one.  Excursions beyond ``SIMPLEX_TOL`` mean the step size is unstable.
    """
    lo = float(np.min(w))
    total = w.sum(axis=simplex_axes) if simplex_axes else w
    hi = float(np.max(total))
    if lo < -SIMPLEX_TOL or hi > 1 + SIMPLEX_TOL or not np.all(np.isfinite(w)):
        raise IntegrationError(f"trajectory left the state space (min {lo:.3g}, max {hi:.3g})")
    w = np.clip(w, 0.0, 1.0)
    if simplex_axes:
        total = w.sum(axis=simplex_axes, keepdims=True)
        w = np.where(total > 1.0, w / np.maximum(total, 1.0), w)
    return w


def integrate(drift, w0, T, h=None, rate_scale=1.0, simplex_axes=(-1,), record_every=1):
    """Fixed-step classic Runge-Kutta integration of ``dw/dt = drift(w)``.

    The default step keeps ``rate_scale * h <= 0.01``; ``drift`` must accept
    arrays so several starting points can be stacked along leading axes.
    ``simplex_axes`` are the axes whose sum must stay at most one (pass
    ``()`` for a box constraint only).
    """
    w = _project(np.array(w0, dtype=float), simplex_axes)
    if h is None:
        h = 0.01 / rate_scale
    steps = max(1, int(math.ceil(T / h - 1e-9)))
    h = T / steps
    times = [0.0]
    path = [w.copy()]
    for i in range(1, steps + 1):
        k1 = drift(w)
        k2 = drift(w + 0.5 * h * k1)
        k3 = drift(w + 0.5 * h * k2)
        k4 = drift(w + h * k3)
        w = _project(w + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), simplex_axes)
        if i % record_every == 0 or i == steps:
            times.append(i * h)
            path.append(w.copy())
    return Trajectory(np.array(times), np.array(path))


def integrate_to_equilibrium(
    drift, w0, h, tol=1e-8, patience=10, max_time=1e6, target=None, simplex_axes=(-1,)
):
    """Integrate until converged; returns ``(w, t)``.

    Converged means ``|w - target|_inf < tol`` (or ``|drift(w)|_inf < tol`` when
    no target is known) for ``patience`` consecutive steps.
    """
    w = _project(np.array(w0, dtype=float), simplex_axes)
    t = 0.0
    streak = 0
    while t < max_time:
        k1 = drift(w)
        k2 = drift(w + 0.5 * h * k1)
        k3 = drift(w + 0.5 * h * k2)
        k4 = drift(w + h * k3)
        w = _project(w + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), simplex_axes)
        t += h
        gap = np.max(np.abs(w - target)) if target is not None else np.max(np.abs(drift(w)))
        streak = streak + 1 if gap < tol else 0
        if streak >= patience:
            return w, t
    raise IntegrationError(f"no convergence within t={max_time:g}")


@dataclass(frozen=True)
class AsymptoticOptimum:
    k: int
    w: float
    throughput_per_client: float
    method: str
    k_crossing: float = math.nan


def _grid_optimum(lam, mu, alpha, ks):
    w = np.minimum(mu / (lam + mu), alpha * ks * mu / lam)
    i = int(np.argmax(w))  # first maximiser, i.e. the smallest k
    return int(ks[i]), float(w[i])


def optimal_k_asymptotic(lam, speedup: SpeedupModel, alpha, K, method="auto") -> AsymptoticOptimum:
    """Batch size maximising the equilibrium active fraction over ``k = 1..K``.

    When ``mu(k)`` is non-increasing and ``k mu(k)`` non-decreasing on the grid
    the optimum sits next to the crossing of the client- and server-bound
    branches, found in closed form for the linear law and by Brent's method
    otherwise.  ``method='grid'`` forces exhaustive evaluation.  Either way the
    cost depends on ``K`` only, never on the population size.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    ks = np.arange(1, K + 1, dtype=float)
    mu = speedup.rate(ks)
    if method == "grid":
        k, w = _grid_optimum(lam, mu, alpha, ks)
        return AsymptoticOptimum(k, w, lam * w, "grid")
    monotone = bool(np.all(np.diff(mu) <= 1e-15 * mu[:-1]) and np.all(np.diff(ks * mu) >= -1e-12 * (ks * mu)[:-1]))
    if not monotone:
        if method == "crossing":
            raise ValueError("crossing method needs mu non-increasing and k mu non-decreasing")
        k, w = _grid_optimum(lam, mu, alpha, ks)
        return AsymptoticOptimum(k, w, lam * w, "grid")

    def gap(kr):
        m_ = speedup.rate(kr)
        return m_ / (lam + m_) - alpha * kr * m_ / lam

    def value(kk):
        m_ = speedup.rate(kk)
        return min(m_ / (lam + m_), alpha * kk * m_ / lam)

    if gap(1.0) <= 0:
        kc = 1.0
    elif gap(float(K)) >= 0:
        kc = float(K)
    elif speedup.form == "linear":
        a, b = speedup.params
        # lam (a k + b) = alpha k (lam (a k + b) + 1)
        qa = alpha * lam * a
        qb = alpha * lam * b + alpha - lam * a
        qc = -lam * b
        if qa == 0:
            kc = -qc / qb
        else:
            disc = math.sqrt(qb * qb - 4 * qa * qc)
            # numerically stable positive root
            kc = (2 * -qc) / (qb + disc) if qb > 0 else (-qb + disc) / (2 * qa)
    else:
        kc = brentq(gap, 1.0, float(K), xtol=1e-12)
    candidates = sorted({min(max(int(math.floor(kc)), 1), K), min(max(int(math.ceil(kc)), 1), K)})
    vals = [value(c) for c in candidates]
    best = max(range(len(candidates)), key=lambda i: (vals[i], -candidates[i]))
    k = candidates[best]
    return AsymptoticOptimum(k, vals[best], lam * vals[best], "crossing", kc)


# --------------------------------------------------------------------------
# two job types, preemptive priority


@dataclass(frozen=True)
class TwoTypeRates:
    """Batch rates ``mu1 = mu1(k1)``, ``mu2 = mu2(k2)`` and the server ratio ``alpha``."""

    lam: float
    p: float
    k1: int
    k2: int
    mu1: float
    mu2: float
    alpha: float

    @classmethod
    def from_config(cls, cfg: TwoTypeConfig, alpha=None):
        if cfg.batching1 is not None or cfg.batching2 is not None:
            warnings.warn("mean-field analysis assumes instantaneous batching; ignoring batching laws")
        return cls(cfg.lam, cfg.p, cfg.k1, cfg.k2, cfg.mu1, cfg.mu2, cfg.alpha if alpha is None else alpha)

    @property
    def rate_scale(self):
        return max(self.lam, self.k1 * self.mu1, self.k2 * self.mu2, self.mu1, self.mu2)


def fixed_point_two_type(rates: TwoTypeRates) -> MeanFieldSolution:
    lam, p, k1, k2, mu1, mu2, a = (
        rates.lam, rates.p, rates.k1, rates.k2, rates.mu1, rates.mu2, rates.alpha,
    )
    if p == 1.0:
        client, server = mu1 / (lam + mu1), k1 * mu1 * a / lam
    elif p == 0.0:
        client, server = mu2 / (lam + mu2), k2 * mu2 * a / lam
    else:
        client = mu1 * mu2 / (mu1 * lam * (1 - p) + mu2 * lam * p + mu1 * mu2)
        server = k1 * k2 * mu1 * mu2 * a / (k1 * mu1 * lam * (1 - p) + k2 * mu2 * lam * p)
    w1 = min(client, server)
    w = np.array([w1, lam * p * w1 / mu1])
    residual = float(np.max(np.abs(drift_two_type(w, rates))))
    return MeanFieldSolution(w, lam * w1, a, residual, "client" if client <= server else "server")


def drift_two_type(w, rates: TwoTypeRates):
    """Drift of (active fraction, type-1 job fraction); vectorised over leading axes."""
    w = np.asarray(w, dtype=float)
    w1, w2 = w[..., 0], w[..., 1]
    lam, p, k1, k2, mu1, mu2, a = (
        rates.lam, rates.p, rates.k1, rates.k2, rates.mu1, rates.mu2, rates.alpha,
    )
    served1 = k1 * mu1 * np.minimum(a, w2 / k1)
    served2 = k2 * mu2 * np.minimum(np.maximum(0.0, a - w2 / k1), (1.0 - w1 - w2) / k2)
    return np.stack([-lam * w1 + served1 + served2, lam * p * w1 - served1], axis=-1)


def to_z(w):
    w = np.asarray(w, dtype=float)
    return np.stack([w[..., 0] + w[..., 1], w[..., 1]], axis=-1)


def from_z(z):
    z = np.asarray(z, dtype=float)
    return np.stack([z[..., 0] - z[..., 1], z[..., 1]], axis=-1)


def l1_gap(z, rates: TwoTypeRates):
    """Spare server capacity ``alpha - z2/k1 - (1-z1)/k2``; positive below the line L1."""
    z = np.asarray(z, dtype=float)
    return rates.alpha - z[..., 1] / rates.k1 - (1.0 - z[..., 0]) / rates.k2


@dataclass(frozen=True)
class TwoTypeStability:
    case: int
    z11: float
    z12: float
    eta: float
    z10: float
    attractor: tuple
    branch: str
    w: tuple
    degenerate: bool = False
    note: str = ""


def classify_two_type(rates: TwoTypeRates) -> TwoTypeStability:
    """Region analysis in the coordinates ``z1 = w1 + w2``, ``z2 = w2``.

    Cases: 1 (k1 a >= 1, k2 a >= 1), 2 (k1 a >= 1, k2 a < 1),
    3 (both < 1), 4 (k1 a < 1, k2 a >= 1).
    """
    lam, p, k1, k2, mu1, mu2, a = (
        rates.lam, rates.p, rates.k1, rates.k2, rates.mu1, rates.mu2, rates.alpha,
    )
    big1, big2 = k1 * a >= 1, k2 * a >= 1
    case = 1 if big1 and big2 else 2 if big1 else 4 if big2 else 3
    notes = []
    degenerate = False
    den11 = mu1 * lam * (1 - p) + mu2 * lam * p + mu1 * mu2
    z11 = (mu1 + lam * p) * mu2 / den11
    den12 = k1 * mu1 * lam * (1 - p) + k2 * mu2 * lam * p
    z12 = k1 * k2 * (mu1 + lam * p) * mu2 * a / den12
    eta = lam * p / (mu1 + lam * p)
    den10 = k1 * mu1 + k1 * lam * p - k2 * lam * p
    if abs(den10) <= 1e-14 * (k1 * mu1 + (k1 + k2) * lam * p):
        z10 = math.nan
        degenerate = True
        notes.append("L1 and L2 are parallel")
    else:
        z10 = k1 * (mu1 + lam * p) * (1 - k2 * a) / den10
    z1 = min(z11, z12)
    attractor = (z1, eta * z1)
    w = tuple(float(v) for v in from_z(np.array(attractor)))
    return TwoTypeStability(
        case, z11, z12, eta, z10, attractor,
        "client" if z11 <= z12 else "server", w, degenerate, "; ".join(notes),
    )


def optimal_k_two_type(lam, p, service1, service2, alpha, K, uniform=False):
    """Grid search of ``w1*`` over ``(k1, k2)`` in ``[1, K]^2`` (or ``k1 = k2``).

    Returns ``(k1, k2, w1*)``; ties go to the lexicographically smallest pair.
    """
    ks = np.arange(1, K + 1)
    mu1 = service1.rate(ks)
    mu2 = service2.rate(ks)
    best = (-1.0, 0, 0)
    pairs = ((k, k) for k in ks) if uniform else ((a, b) for a in ks for b in ks)
    for k1, k2 in pairs:
        rates = TwoTypeRates(lam, p, int(k1), int(k2), float(mu1[k1 - 1]), float(mu2[k2 - 1]), alpha)
        w1 = float(fixed_point_two_type(rates).w[0])
        if w1 > best[0]:
            best = (w1, int(k1), int(k2))
    return best[1], best[2], best[0]


# --------------------------------------------------------------------------
# r job types, d service levels


def drift_multi(w, cfg: MultiTypeConfig):
    """Piecewise-linear drift for ``w`` of shape ``(..., r, d)``.

    Type 1 is never throttled by capacity; type ``i > 1`` at level ``j`` is
    served on ``min(w_ij, k_i max(0, alpha_j - sum_{l<i} w_lj / k_l))``.
    """
    w = np.asarray(w, dtype=float)
    lam = cfg.lam
    p = np.asarray(cfg.p)
    k = np.asarray(cfg.k, dtype=float)
    mu = np.asarray(cfg.mu)
    alpha = np.asarray(cfg.alpha)
    r, d = cfg.r, cfg.d
    # batches of higher-priority types occupying each level
    higher = np.cumsum(w / k[:, None], axis=-2) - w / k[:, None]
    served = np.minimum(w, np.maximum(0.0, alpha - higher) * k[:, None])
    served[..., 0, :] = w[..., 0, :]
    outflow = mu * served
    active = 1.0 - w.sum(axis=(-2, -1))
    dw = -outflow
    dw[..., :, 0] += lam * p * active[..., None]
    if d > 1:
        dw[..., :, 1:] += outflow[..., :, :-1]
    return dw


@dataclass(frozen=True, eq=False)
class MultiTypeEquilibrium:
    A: np.ndarray
    B: np.ndarray
    c_a: np.ndarray
    c_b: np.ndarray
    sum_a: float
    sum_b: float
    capacity: float
    branch: str
    w: np.ndarray
    max_real_eig_A: float
    max_real_eig_B: float
    residual: float

    @property
    def active_fraction(self):
        return 1.0 - float(self.w.sum())


def multi_type_fixed_point(cfg: MultiTypeConfig) -> MultiTypeEquilibrium:
    """Closed-form equilibrium for one service level and a uniform batch size.

    Selects ``A^-1 c_a`` when its mass is below ``k alpha`` and ``B^-1 c_b``
    otherwise, after checking both matrices are nonsingular and stable.
    """
    if cfg.d != 1:
        raise ValueError("closed form needs a single service level")
    if len(set(cfg.k)) != 1:
        raise ValueError("closed form needs a uniform batch size")
    r = cfg.r
    k = cfg.k[0]
    ka = k * cfg.alpha[0]
    lp = cfg.lam * np.asarray(cfg.p)
    mu = np.array([row[0] for row in cfg.mu])
    A = -np.tile(lp[:, None], (1, r)) - np.diag(mu)
    B = A.copy()
    B[-1, :] = mu[-1] - lp[-1]
    B[-1, -1] = -lp[-1]
    c_a = -lp.copy()
    c_b = -lp.copy()
    c_b[-1] += ka * mu[-1]
    eig_a = float(np.max(np.linalg.eigvals(A).real))
    eig_b = float(np.max(np.linalg.eigvals(B).real))
    try:
        x_a = np.linalg.solve(A, c_a)
        x_b = np.linalg.solve(B, c_b)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular equilibrium matrix: {exc}") from exc
    if eig_a >= -1e-12 or eig_b >= -1e-12:
        raise NumericalError(f"unstable equilibrium matrices (max Re eig {eig_a:.3g}, {eig_b:.3g})")
    s = float(np.sum(lp / mu))
    sum_a, sum_b = float(x_a.sum()), float(x_b.sum())
    if abs(sum_a - s / (1 + s)) > 1e-9 or abs(sum_b - (s - ka) / s) > 1e-9 * max(1.0, abs(sum_b)):
        raise NumericalError("equilibrium mass disagrees with its closed form")
    if sum_a < ka:
        branch, w = "A", x_a
    else:
        branch, w = "B", x_b
    w = w.reshape(r, 1)
    residual = float(np.max(np.abs(drift_multi(w, cfg))))
    return MultiTypeEquilibrium(A, B, c_a, c_b, sum_a, sum_b, ka, branch, w, eig_a, eig_b, residual)


def equilibrium_multi(cfg: MultiTypeConfig, w0=None, tol=1e-10, max_time=None, h=None):
    """Equilibrium for general ``(r, d)`` by long-horizon integration.

    Only the limit matters here, and a fixed point of the RK4 map is a zero
    of the drift, so the default step is a stable ``0.1 / rate`` rather than
    the trajectory-accurate ``0.01 / rate``.
    """
    scale = cfg.lam + sum(max(row) for row in cfg.mu) * max(cfg.k)
    h = 0.1 / scale if h is None else h
    if w0 is None:
        w0 = np.zeros((cfg.r, cfg.d))
    slowest = min(cfg.lam, min(min(row) for row in cfg.mu))
    max_time = max_time if max_time is not None else 1e4 / slowest
    w, _ = integrate_to_equilibrium(
        lambda x: drift_multi(x, cfg), w0, h, tol=tol, max_time=max_time, simplex_axes=(-2, -1)
    )
    return w


def single_from_config(cfg: SingleTypeConfig) -> MeanFieldSolution:
    if cfg.batching is not None:
        warnings.warn("mean-field analysis assumes instantaneous batching; ignoring the batching law")
    return fixed_point_single(cfg.lam, cfg.service, cfg.k, cfg.alpha)
