"""Speedup-law estimation from measured batch service times.

Workflow: choose the batch sizes to measure with a D-optimal design, fit each
parametric form by ordinary least squares on the mean service times, and keep
the form with the smallest squared error in the original time scale.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DesignError, FitError
from .model import FORMS, PARAM_NAMES, SpeedupModel

__all__ = [
    "ServiceSample",
    "FormFit",
    "FitResult",
    "FEATURE_MAPS",
    "design_select",
    "log_det_information",
    "ols_fit",
    "select_model",
    "fit_speedup",
    "read_samples",
]

EXHAUSTIVE_LIMIT = 100_000
RESTARTS = 10


@dataclass(frozen=True)
class ServiceSample:
    k: int
    samples: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in self.samples)
        if not values:
            raise FitError(f"no samples for k={self.k}")
        if any(not v > 0 for v in values):
            raise FitError(f"service times must be positive (k={self.k})")
        object.__setattr__(self, "samples", values)

    @property
    def mean(self):
        return math.fsum(self.samples) / len(self.samples)


def read_samples(path):
    """Read ``k,service_time_seconds`` rows into ``{k: ServiceSample}``."""
    raw = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "k" not in cols or "service_time_seconds" not in cols:
            raise ConfigError("csv", "expected columns k, service_time_seconds")
        for line, row in enumerate(reader, start=2):
            try:
                k = int(row["k"])
                value = float(row["service_time_seconds"])
            except (TypeError, ValueError):
                raise ConfigError(f"csv line {line}", "unparseable row") from None
            if k < 1:
                raise ConfigError(f"csv line {line}", "batch size must be >= 1")
            raw.setdefault(k, []).append(value)
    if not raw:
        raise ConfigError("csv", "no measurements")
    return {k: ServiceSample(k, tuple(v)) for k, v in sorted(raw.items())}


FEATURE_MAPS = {
    "linear": lambda k: np.stack([np.ones_like(k), k], axis=-1),
    "log": lambda k: np.stack([np.ones_like(k), np.log(k)], axis=-1),
    "union": lambda k: np.stack([np.ones_like(k), k, np.log(k)], axis=-1),
}


def _features(features):
    if callable(features):
        return features
    try:
        return FEATURE_MAPS[features]
    except KeyError:
        raise DesignError(f"unknown feature map {features!r}") from None


def log_det_information(phi):
    """``log det(Phi^T Phi)`` for stacked design matrices; ``-inf`` if singular."""
    info = np.einsum("...ip,...iq->...pq", phi, phi)
    sign, logdet = np.linalg.slogdet(info)
    return np.where(sign > 0, logdet, -np.inf)


def design_select(candidates, budget, features="union", seed=0, method="auto"):
    """D-optimal choice of ``budget`` distinct batch sizes from ``candidates``.

    Maximises ``log det(Phi^T Phi)`` (equivalently minimises the log
    determinant of the OLS covariance).  Exhaustive when at most 1e5 subsets
    exist, otherwise coordinate exchange with random restarts.  The result
    depends only on the candidate set, not its order.
    """
    cands = sorted(set(int(c) for c in candidates))
    if len(cands) != len(list(candidates)):
        raise DesignError("candidate batch sizes must be distinct")
    phi_all = np.asarray(_features(features)(np.asarray(cands, dtype=float)), dtype=float)
    nfeat = phi_all.shape[1]
    if budget < nfeat:
        raise DesignError(f"budget {budget} is below the {nfeat} model features")
    if budget > len(cands):
        raise DesignError(f"budget {budget} exceeds the {len(cands)} candidates")
    if method == "auto":
        method = "exhaustive" if math.comb(len(cands), budget) <= EXHAUSTIVE_LIMIT else "exchange"
    if method == "exhaustive":
        idx, value = _exhaustive(phi_all, budget)
    elif method == "exchange":
        idx, value = _exchange(phi_all, budget, seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.isfinite(value):
        raise DesignError("every feasible design is rank deficient")
    return tuple(cands[i] for i in idx)


def _exhaustive(phi_all, budget):
    best_val, best_idx = -np.inf, None
    combos = itertools.combinations(range(len(phi_all)), budget)
    while True:
        chunk = list(itertools.islice(combos, 4096))
        if not chunk:
            break
        idx = np.array(chunk)
        vals = log_det_information(phi_all[idx])
        i = int(np.argmax(vals))
        if vals[i] > best_val + 1e-12:
            best_val, best_idx = float(vals[i]), chunk[i]
    if best_idx is None:
        best_idx = tuple(range(budget))
    return best_idx, best_val


def _exchange(phi_all, budget, seed):
    rng = np.random.default_rng(seed)
    ncand = len(phi_all)
    best_val, best_idx = -np.inf, None
    for _ in range(RESTARTS):
        design = list(rng.choice(ncand, size=budget, replace=False))
        value = float(log_det_information(phi_all[design]))
        improved = True
        while improved:
            improved = False
            for pos in range(budget):
                others = [c for c in range(ncand) if c not in design]
                if not others:
                    break
                trial = np.array([design[:pos] + [c] + design[pos + 1:] for c in others])
                vals = log_det_information(phi_all[trial])
                j = int(np.argmax(vals))
                if vals[j] > value + 1e-12:
                    design[pos] = others[j]
                    value = float(vals[j])
                    improved = True
        key = tuple(sorted(design))
        if value > best_val + 1e-12 or (abs(value - best_val) <= 1e-12 and key < best_idx):
            best_val, best_idx = value, key
    return best_idx, best_val


@dataclass(frozen=True)
class FormFit:
    form: str
    params: tuple
    residual: float

    @property
    def model(self):
        return SpeedupModel(self.form, self.params)

    @property
    def satisfies_form_constraint(self):
        return self.model.satisfies_form_constraint


def _means(samples):
    items = sorted(samples.values(), key=lambda s: s.k) if isinstance(samples, dict) else sorted(samples, key=lambda s: s.k)
    ks = np.array([s.k for s in items], dtype=float)
    if len(set(ks)) != len(ks):
        raise FitError("duplicate batch sizes in the design")
    return ks, np.array([s.mean for s in items])


def ols_fit(form, samples) -> FormFit:
    """Least-squares fit of one form to the per-``k`` mean service times.

    ``linear`` and ``log`` are linear in their parameters; ``power`` is fitted
    on ``log g = log gamma + exponent log k``.  The reported residual is
    always the squared error of the fitted curve in seconds.
    """
    if form not in FORMS:
        raise FitError(f"unknown form {form!r}")
    if isinstance(samples, dict) or (samples and isinstance(next(iter(samples)), ServiceSample)):
        ks, ys = _means(samples)
    else:
        pairs = list(samples)
        ks = np.array([k for k, _ in pairs], dtype=float)
        ys = np.array([y for _, y in pairs], dtype=float)
    if form == "linear":
        X, target = np.column_stack([ks, np.ones_like(ks)]), ys
    else:
        X = np.column_stack([np.log(ks), np.ones_like(ks)])
        target = ys
        if form == "power":
            if np.any(ys <= 0):
                raise FitError("power fit needs positive means")
            target = np.log(ys)
    if len(ks) < 2 or np.linalg.matrix_rank(X) < 2:
        raise FitError(f"{form} fit is rank deficient on batch sizes {sorted(set(ks.astype(int)))}")
    coef, *_ = np.linalg.lstsq(X, target, rcond=None)
    if form == "power":
        params = (float(math.exp(coef[1])), float(coef[0]))
    else:
        params = (float(coef[0]), float(coef[1]))
    fitted = SpeedupModel(form, params).formula(ks)
    return FormFit(form, params, float(np.sum((fitted - ys) ** 2)))


@dataclass(frozen=True)
class FitResult:
    design: tuple
    fits: dict
    selected: str
    failures: dict

    @property
    def residuals(self):
        return {f: fit.residual for f, fit in self.fits.items()}

    @property
    def model(self):
        return self.fits[self.selected].model

    @property
    def flagged(self):
        """True when the selected law breaks its form constraint."""
        return not self.fits[self.selected].satisfies_form_constraint

    def to_dict(self):
        return {
            "design": list(self.design),
            "forms": {
                f: {
                    "params": dict(zip(PARAM_NAMES[f], fit.params)),
                    "residual": fit.residual,
                    "satisfies_constraint": fit.satisfies_form_constraint,
                }
                for f, fit in self.fits.items()
            },
            "failures": dict(self.failures),
            "selected": self.selected,
            "flagged": self.flagged,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def select_model(fits, design=(), failures=None) -> FitResult:
    """Pick the smallest residual; ties go to linear, then power, then log."""
    fits = {f.form: f for f in fits} if not isinstance(fits, dict) else dict(fits)
    if not fits:
        detail = "; ".join(f"{k}: {v}" for k, v in (failures or {}).items())
        raise FitError(f"every form failed to fit ({detail})")
    order = {f: i for i, f in enumerate(FORMS)}
    selected = min(fits, key=lambda f: (fits[f].residual, order[f]))
    return FitResult(tuple(design), fits, selected, dict(failures or {}))


def fit_speedup(samples, design=None, forms=FORMS) -> FitResult:
    """Fit all forms on the samples at ``design`` (default: every sampled k)."""
    if design is None:
        design = tuple(sorted(samples))
    missing = [k for k in design if k not in samples]
    if missing:
        raise FitError(f"no samples for batch sizes {missing}")
    chosen = {k: samples[k] for k in design}
    fits, failures = {}, {}
    for form in forms:
        try:
            fits[form] = ols_fit(form, chosen)
        except FitError as exc:
            failures[form] = str(exc)
    return select_model(fits, design, failures)
