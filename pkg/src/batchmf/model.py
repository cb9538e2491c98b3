"""Speedup laws and system configurations.

All rates are per second.  Service and batching laws are stored as batch
service times ``g(k)`` (seconds per batch); the corresponding batch rate is
``1 / g(k)``.  Job-level quantities only appear when throughput is computed.
"""

from __future__ import annotations

import json
import math
from dataclasses import MISSING, dataclass, fields, replace
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, DomainError

__all__ = [
    "SpeedupModel",
    "SingleTypeConfig",
    "TwoTypeConfig",
    "MultiTypeConfig",
    "eval_service_time",
    "check_subadditive",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "dump_config",
    "max_batch_size",
]

FORMS = ("linear", "power", "log")
PARAM_NAMES = {
    "linear": ("a", "b"),
    "power": ("gamma", "exponent"),
    "log": ("c", "d"),
}


@dataclass(frozen=True)
class SpeedupModel:
    """Batch service time law ``g(k)``.

    ``linear``: ``a*k + b``; ``power``: ``gamma * k**exponent``;
    ``log``: ``c*log(k) + d`` (natural log).
    """

    form: str
    params: tuple

    def __post_init__(self):
        if self.form not in FORMS:
            raise ConfigError("form", f"unknown speedup form {self.form!r}")
        params = tuple(float(p) for p in self.params)
        if len(params) != 2 or not all(math.isfinite(p) for p in params):
            raise ConfigError("params", f"{self.form} needs two finite parameters")
        object.__setattr__(self, "params", params)

    @classmethod
    def linear(cls, a, b):
        return cls("linear", (a, b))

    @classmethod
    def power(cls, gamma, exponent):
        return cls("power", (gamma, exponent))

    @classmethod
    def log(cls, c, d):
        return cls("log", (c, d))

    @classmethod
    def constant(cls, rate):
        """Batch rate independent of ``k`` (no speedup, no slowdown)."""
        return cls("linear", (0.0, 1.0 / rate))

    def service_time(self, k):
        """Evaluate ``g(k)``; accepts scalars or arrays of batch sizes."""
        k_arr = np.asarray(k, dtype=float)
        if np.any(k_arr < 1):
            raise DomainError(f"batch size must be >= 1, got {k}")
        g = self.formula(k_arr)
        bad = ~(g > 0)
        if np.any(bad):
            first = float(k_arr[bad].flat[0]) if k_arr.ndim else float(k_arr)
            raise DomainError(f"non-positive service time for {self} at k={first:g}")
        return float(g) if g.ndim == 0 else g

    def formula(self, k):
        """The law's expression without domain checks."""
        k_arr = np.asarray(k, dtype=float)
        p, q = self.params
        if self.form == "linear":
            return p * k_arr + q
        if self.form == "power":
            return p * k_arr**q
        return p * np.log(k_arr) + q

    def rate(self, k):
        """Batch completion rate ``1/g(k)``."""
        return 1.0 / self.service_time(k)

    @property
    def satisfies_form_constraint(self):
        # linear a < 1, power exponent < 1, log c < 1
        return self.params[0 if self.form != "power" else 1] < 1

    def to_dict(self):
        names = PARAM_NAMES[self.form]
        return {"form": self.form, **dict(zip(names, self.params))}

    @classmethod
    def from_dict(cls, data, path="speedup"):
        if not isinstance(data, dict):
            raise ConfigError(path, "expected an object")
        form = data.get("form")
        if form not in FORMS:
            raise ConfigError(f"{path}.form", f"expected one of {FORMS}, got {form!r}")
        names = PARAM_NAMES[form]
        for key in data:
            if key != "form" and key not in names:
                raise ConfigError(f"{path}.{key}", "unknown field")
        values = []
        for name in names:
            if name not in data:
                raise ConfigError(f"{path}.{name}", "missing field")
            values.append(_number(data[name], f"{path}.{name}"))
        return cls(form, tuple(values))


def eval_service_time(model: SpeedupModel, k) -> float:
    if k < 1:
        raise DomainError(f"batch size must be >= 1, got {k}")
    return model.service_time(k)


def check_subadditive(model: SpeedupModel, K: int):
    """Exhaustive check of ``g(k1+k2) <= g(k1) + g(k2)`` for ``k1+k2 <= K``.

    Returns ``(True, None)`` or ``(False, (k1, k2))`` with the first violating
    pair in lexicographic order.
    """
    if K < 2:
        raise DomainError("K must be at least 2")
    g = model.service_time(np.arange(1, K + 1))
    tol = 1e-12 * float(np.max(np.abs(g)))
    for k1 in range(1, K // 2 + 1):
        k2 = np.arange(k1, K - k1 + 1)
        bad = g[k1 + k2 - 1] > g[k1 - 1] + g[k2 - 1] + tol
        if bad.any():
            return False, (k1, int(k2[np.argmax(bad)]))
    return True, None


def _number(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    return value


def _integer(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        else:
            raise ConfigError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {value}")
    return value


def _positive(value, path):
    value = _number(value, path)
    if not value > 0 or not math.isfinite(value):
        raise ConfigError(path, f"must be positive and finite, got {value!r}")
    return value


Batching = Optional[SpeedupModel]  # None means instantaneous batching


@dataclass(frozen=True)
class SingleTypeConfig:
    n: int
    m: int
    lam: float
    k: int
    service: SpeedupModel
    batching: Batching = None

    def __post_init__(self):
        _integer(self.n, "n", 1)
        _integer(self.m, "m", 1)
        _integer(self.k, "k", 1)
        _positive(self.lam, "lam")
        if self.k > self.n:
            raise ConfigError("k", f"batch size {self.k} exceeds the client count {self.n}")
        _check_law(self.service, "service")
        if self.batching is not None:
            _check_law(self.batching, "batching")

    @property
    def alpha(self):
        return self.m / self.n

    @property
    def mu(self):
        return self.service.rate(self.k)

    @property
    def merge_rate(self):
        """Batching rate ``M(k)``; ``inf`` for instantaneous batching."""
        return math.inf if self.batching is None else self.batching.rate(self.k)

    def with_k(self, k):
        return replace(self, k=k)


@dataclass(frozen=True)
class TwoTypeConfig:
    n: int
    m: int
    lam: float
    p: float
    k1: int
    k2: int
    service1: SpeedupModel
    service2: SpeedupModel
    batching1: Batching = None
    batching2: Batching = None
    discipline: str = "preemptive"

    def __post_init__(self):
        _integer(self.n, "n", 1)
        _integer(self.m, "m", 1)
        _integer(self.k1, "k1", 1)
        _integer(self.k2, "k2", 1)
        _positive(self.lam, "lam")
        _number(self.p, "p")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("p", f"must lie in [0, 1], got {self.p}")
        if self.discipline not in ("preemptive", "nonpreemptive"):
            raise ConfigError(
                "discipline", f"expected 'preemptive' or 'nonpreemptive', got {self.discipline!r}"
            )
        if self.k1 > self.n or self.k2 > self.n:
            raise ConfigError("k1" if self.k1 > self.n else "k2", "batch size exceeds the client count")
        if 0.0 < self.p < 1.0 and self.n < self.k1 + self.k2 - 1:
            # otherwise all clients can wait in two partial batches forever
            raise ConfigError(
                "n", f"need n >= k1 + k2 - 1 = {self.k1 + self.k2 - 1} to avoid a deadlocked state"
            )
        _check_law(self.service1, "service1")
        _check_law(self.service2, "service2")
        for name in ("batching1", "batching2"):
            if getattr(self, name) is not None:
                _check_law(getattr(self, name), name)

    @property
    def alpha(self):
        return self.m / self.n

    @property
    def mu1(self):
        return self.service1.rate(self.k1)

    @property
    def mu2(self):
        return self.service2.rate(self.k2)

    def with_k(self, k):
        """Uniform batch size ``k1 = k2 = k``."""
        return replace(self, k1=k, k2=k)


@dataclass(frozen=True)
class MultiTypeConfig:
    """``r`` job types with preemptive priority (lower index first) and ``d``
    service levels.  ``mu[i][j]`` is the rate of type ``i`` at level ``j``."""

    n: int
    lam: float
    p: tuple
    k: tuple
    mu: tuple
    m: tuple

    def __post_init__(self):
        _integer(self.n, "n", 1)
        _positive(self.lam, "lam")
        p = tuple(float(_number(v, f"p[{i}]")) for i, v in enumerate(self.p))
        k = tuple(_integer(v, f"k[{i}]", 1) for i, v in enumerate(self.k))
        m = tuple(_integer(v, f"m[{j}]", 1) for j, v in enumerate(self.m))
        mu = tuple(
            tuple(float(_positive(v, f"mu[{i}][{j}]")) for j, v in enumerate(row))
            for i, row in enumerate(self.mu)
        )
        r, d = len(p), len(m)
        if r == 0 or d == 0:
            raise ConfigError("p" if r == 0 else "m", "must be non-empty")
        if len(k) != r:
            raise ConfigError("k", f"expected {r} batch sizes, got {len(k)}")
        if len(mu) != r or any(len(row) != d for row in mu):
            raise ConfigError("mu", f"expected a {r}x{d} matrix of rates")
        if any(v < 0 for v in p) or abs(sum(p) - 1.0) > 1e-12:
            raise ConfigError("p", "probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "mu", mu)

    @property
    def r(self):
        return len(self.p)

    @property
    def d(self):
        return len(self.m)

    @property
    def alpha(self):
        return tuple(mj / self.n for mj in self.m)


def max_batch_size(config):
    """Largest uniform batch size admitted by ``config.with_k``."""
    if isinstance(config, TwoTypeConfig) and 0.0 < config.p < 1.0:
        return (config.n + 1) // 2
    return config.n


Config = Union[SingleTypeConfig, TwoTypeConfig, MultiTypeConfig]

_KINDS = {
    "single": SingleTypeConfig,
    "two_type": TwoTypeConfig,
    "multi_type": MultiTypeConfig,
}
_LAW_FIELDS = {"service", "batching", "service1", "service2", "batching1", "batching2"}


def _check_law(law, path):
    if not isinstance(law, SpeedupModel):
        raise ConfigError(path, f"expected a SpeedupModel, got {type(law).__name__}")


def config_from_dict(data) -> Config:
    """Parse a JSON-style mapping; errors carry the offending field path."""
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    kind = data.get("model")
    if kind not in _KINDS:
        raise ConfigError("model", f"expected one of {sorted(_KINDS)}, got {kind!r}")
    cls = _KINDS[kind]
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key == "model":
            continue
        if key not in known:
            raise ConfigError(key, "unknown field")
        if key in _LAW_FIELDS:
            if key.startswith("batching") and (value is None or value == "instantaneous"):
                value = None
            else:
                value = SpeedupModel.from_dict(value, key)
        elif cls is MultiTypeConfig and key in ("p", "k", "m"):
            if not isinstance(value, list):
                raise ConfigError(key, "expected a list")
            value = tuple(value)
        elif cls is MultiTypeConfig and key == "mu":
            if not isinstance(value, list) or not all(isinstance(row, list) for row in value):
                raise ConfigError(key, "expected a list of lists")
            value = tuple(tuple(row) for row in value)
        kwargs[key] = value
    missing = [f.name for f in fields(cls) if f.name not in kwargs and f.default is MISSING]
    if missing:
        raise ConfigError(missing[0], "missing field")
    try:
        return cls(**kwargs)
    except DomainError as exc:
        raise ConfigError("", str(exc)) from exc


def config_to_dict(config: Config) -> dict:
    kind = {v: k for k, v in _KINDS.items()}[type(config)]
    out = {"model": kind}
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name in _LAW_FIELDS:
            value = "instantaneous" if value is None else value.to_dict()
        elif isinstance(value, tuple):
            value = [list(row) if isinstance(row, tuple) else row for row in value]
        out[f.name] = value
    return out


def load_config(path) -> Config:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(data)


def dump_config(config: Config, path):
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2)
        fh.write("\n")
