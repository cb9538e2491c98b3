"""Command-line front end.

Every command reads a JSON config (``fit`` reads a timing CSV instead),
writes plot-ready CSV/JSON plus a PNG figure into ``--out`` and leaves a
``manifest.json`` there describing the run.

Exit codes: 0 ok, 2 config error, 3 resource cap exceeded, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import ctmc, fitting, meanfield, plotting, simulate
from .errors import (
    BatchMFError,
    ConfigError,
    DesignError,
    DomainError,
    FitError,
    ModelError,
    NumericalError,
    StateSpaceTooLarge,
)
from .model import (
    MultiTypeConfig,
    SingleTypeConfig,
    TwoTypeConfig,
    config_to_dict,
    load_config,
    max_batch_size,
)

__all__ = ["RunManifest", "main", "build_parser"]

EXIT_OK, EXIT_CONFIG, EXIT_CAP, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"

# stable CSV headers
ANALYZE_HEADER = ["k", "theta", "states", "residual", "irreducible"]
EXACT_HEADER = ["k", "theta", "states", "residual"]
MEANFIELD_HEADER = ["k", "throughput", "w"]
SWEEP_HEADER = ["k", "throughput", "ci_lo", "ci_hi"]
MIXING_HEADER = ["t", "tv"]


@dataclass
class RunManifest:
    command: str
    config: str | None
    out: str
    seed: int | None
    overrides: dict = field(default_factory=dict)
    exit_code: int | None = None

    def write(self):
        path = Path(self.out) / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _config(args):
    if args.config is None:
        raise ConfigError("--config", "required for this command")
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        raise ConfigError("--config", f"no such file {args.config}") from None
    if args.k is not None:
        if isinstance(cfg, MultiTypeConfig):
            raise ConfigError("--k", "not supported for multi-type configs")
        cfg = cfg.with_k(args.k)
    return cfg


def _exact_only(cfg):
    if isinstance(cfg, MultiTypeConfig):
        raise ConfigError("model", "exact chains exist only for single- and two-type configs")
    return cfg


def _k_label(cfg):
    if isinstance(cfg, SingleTypeConfig):
        return cfg.k
    return cfg.k1 if cfg.k1 == cfg.k2 else f"{cfg.k1}:{cfg.k2}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _kmax(args, cfg):
    kmax = max_batch_size(cfg)
    K = kmax if args.kmax is None else args.kmax
    if not 1 <= K <= kmax:
        raise ConfigError("--kmax", f"must lie in [1, {kmax}], got {K}")
    return K


# --------------------------------------------------------------------------
# commands


def cmd_analyze(args, out):
    cfg = _exact_only(_config(args))
    model = ctmc.build(cfg)
    irreducible = ctmc.check_irreducible(model)
    if not irreducible:
        raise NumericalError("chain is not irreducible")
    res = ctmc.solve_stationary(model)
    row = [_k_label(cfg), repr(res.throughput), model.size, repr(res.residual), irreducible]
    _write_csv(out / "analyze.csv", ANALYZE_HEADER, [row])
    _write_json(
        out / "analyze.json",
        {"config": config_to_dict(cfg), "theta": res.throughput, "per_type": list(res.per_type),
         "states": model.size, "residual": res.residual, "irreducible": irreducible, "solver": res.method},
    )
    print(",".join(ANALYZE_HEADER))
    print(",".join(str(v) for v in row))


def _meanfield_curve(cfg, K):
    """Mean-field throughput ``n lam w*(k)`` for ``k = 1..K`` and its argmax."""
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for k in range(1, K + 1):
            c = cfg.with_k(k)
            if isinstance(c, SingleTypeConfig):
                sol = meanfield.single_from_config(c)
            else:
                sol = meanfield.fixed_point_two_type(meanfield.TwoTypeRates.from_config(c))
            rows.append((k, sol.total_throughput(cfg.n), float(sol.w[0])))
    if isinstance(cfg, SingleTypeConfig):
        k_star = meanfield.optimal_k_asymptotic(cfg.lam, cfg.service, cfg.alpha, K).k
    else:
        k_star = max(rows, key=lambda r: (r[2], -r[0]))[0]
    return k_star, rows


def cmd_optimize(args, out):
    cfg = _exact_only(_config(args))
    method = args.method or "both"
    if method not in ("exact", "meanfield", "both"):
        raise ConfigError("--method", f"expected exact, meanfield or both, got {method!r}")
    K = _kmax(args, cfg)
    summary = {"kmax": K, "method": method}
    series, marks = {}, {}
    if method in ("meanfield", "both"):
        k_mf, rows = _meanfield_curve(cfg, K)
        _write_csv(out / "optimize_meanfield.csv", MEANFIELD_HEADER, [(k, repr(t), repr(w)) for k, t, w in rows])
        summary["k_meanfield"] = k_mf
        series["mean-field"] = ([r[0] for r in rows], [r[1] for r in rows])
        marks["k* mean-field"] = k_mf
        print(f"k*_meanfield = {k_mf}")
    if method in ("exact", "both"):
        opt = ctmc.optimize_batch_exact(cfg, K, prune=args.prune, jobs=args.jobs)
        ctmc.write_throughput_table(opt.table, out / "optimize_exact.csv")
        summary.update(k_exact=opt.k_star, theta_exact=opt.theta_star, pruned=list(opt.pruned))
        series["exact"] = ([r.k for r in opt.table], [r.theta for r in opt.table])
        marks["k* exact"] = opt.k_star
        print(f"k*_exact = {opt.k_star}  theta = {opt.theta_star:.6g}")
    if method == "both":
        summary["k_gap"] = abs(summary["k_exact"] - summary["k_meanfield"])
        print(f"|k*_exact - k*_meanfield| = {summary['k_gap']}")
    _write_json(out / "optimize.json", summary)
    plotting.plot_throughput(series, out / "throughput.png", marks)


def cmd_meanfield(args, out):
    cfg = _config(args)
    T = args.horizon
    report = {"config": config_to_dict(cfg)}
    if isinstance(cfg, SingleTypeConfig):
        sol = meanfield.single_from_config(cfg)
        K = _kmax(args, cfg)
        opt = meanfield.optimal_k_asymptotic(cfg.lam, cfg.service, cfg.alpha, K)
        report.update(
            w=float(sol.w[0]), branch=sol.branch, throughput=sol.total_throughput(cfg.n),
            bound=meanfield.throughput_bound(cfg.n, cfg.m, cfg.k, cfg.lam, cfg.service),
            k_star=opt.k, k_star_throughput=opt.throughput_per_client * cfg.n,
        )
        drift = lambda w: meanfield.drift_single(w, cfg.lam, cfg.service, cfg.k, cfg.alpha)  # noqa: E731
        scale = max(cfg.lam, cfg.k * cfg.mu)
        w0, axes, labels = np.array(1.0), (), ["active"]
    elif isinstance(cfg, TwoTypeConfig):
        rates = meanfield.TwoTypeRates.from_config(cfg)
        sol = meanfield.fixed_point_two_type(rates)
        stab = meanfield.classify_two_type(rates)
        report.update(
            w=sol.w.tolist(), branch=sol.branch, throughput=sol.total_throughput(cfg.n),
            case=stab.case, attractor=stab.attractor, z11=stab.z11, z12=stab.z12,
        )
        drift = lambda w: meanfield.drift_two_type(w, rates)  # noqa: E731
        scale = rates.rate_scale
        w0, axes, labels = np.array([1.0, 0.0]), (-1,), ["active", "type-1 jobs"]
    else:
        eq = meanfield.equilibrium_multi(cfg)
        report.update(w=eq.tolist(), active=1.0 - float(eq.sum()))
        if cfg.d == 1 and len(set(cfg.k)) == 1:
            fp = meanfield.multi_type_fixed_point(cfg)
            report.update(branch=fp.branch, closed_form=fp.w.ravel().tolist())
        drift = lambda w: meanfield.drift_multi(w, cfg)  # noqa: E731
        scale = max(cfg.lam, max(max(r) for r in cfg.mu) * max(cfg.k))
        w0, axes = np.zeros((cfg.r, cfg.d)), (-2, -1)
        labels = [f"type {i + 1} level {j + 1}" for i in range(cfg.r) for j in range(cfg.d)]
    if T is None:
        T = 50.0 / min(scale, cfg.lam)
    steps = int(math.ceil(T * scale / 0.01))
    traj = meanfield.integrate(drift, w0, T, rate_scale=scale, simplex_axes=axes, record_every=max(1, steps // 500))
    flat = traj.w.reshape(len(traj.t), -1)
    _write_csv(
        out / "trajectory.csv", ["t"] + [f"w{i + 1}" for i in range(flat.shape[1])],
        [[repr(float(t))] + [repr(float(v)) for v in row] for t, row in zip(traj.t, flat)],
    )
    _write_json(out / "meanfield.json", report)
    plotting.plot_trajectory(traj.t, flat, out / "trajectory.png", labels)
    for key in ("w", "branch", "throughput", "k_star", "case"):
        if key in report:
            print(f"{key} = {report[key]}")


def cmd_simulate(args, out):
    cfg = _exact_only(_config(args))
    seed = 0 if args.seed is None else args.seed
    res = simulate.simulate(cfg, events=args.events or 100_000, seed=seed, trace=args.trace)
    _write_json(
        out / "simulate.json",
        {"events": res.events, "horizon": res.horizon, "warmup": res.warmup, "seed": seed,
         "completed": list(res.completed), "throughput": res.throughput, "ci": list(res.ci),
         "per_type_throughput": list(res.per_type_throughput)},
    )
    if args.trace:
        _write_csv(
            out / "trace.csv", ["t", "event"] + [f"s{i}" for i in range(len(res.trace[0][2]))],
            [[repr(t), label, *state] for t, label, state in res.trace],
        )
    print(f"throughput = {res.throughput:.6g}  95% CI = ({res.ci[0]:.6g}, {res.ci[1]:.6g})")


def cmd_mixing(args, out):
    cfg = _exact_only(_config(args))
    model = ctmc.build(cfg)
    times = np.linspace(0.0, args.horizon or 0.05, args.points)
    curve = simulate.mixing_curve(model, times)
    _write_csv(out / "mixing.csv", MIXING_HEADER, [(repr(float(t)), repr(float(v))) for t, v in zip(curve.t, curve.tv)])
    plotting.plot_mixing(curve.t, curve.tv, out / "mixing.png")
    below = curve.t[curve.tv < 0.05]
    print(f"states = {model.size}  TV(t_end) = {curve.tv[-1]:.3g}")
    print("TV < 0.05 at t = " + (f"{below[0]:.4g} s" if len(below) else "never on this grid"))


def _sweep_point(payload):
    cfg, k, events, seed = payload
    res = simulate.simulate(cfg.with_k(k), events=events, seed=seed)
    return k, res.throughput, res.ci


def cmd_sweep(args, out):
    """Simulated throughput for ``k = 1..kmax``; all points share the seed."""
    cfg = _exact_only(_config(args))
    K = _kmax(args, cfg)
    seed = 0 if args.seed is None else args.seed
    payloads = [(cfg, k, args.events or 100_000, seed) for k in range(1, K + 1)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, payloads))
    else:
        results = [_sweep_point(p) for p in payloads]
    results.sort(key=lambda r: r[0])
    _write_csv(out / "sweep.csv", SWEEP_HEADER, [(k, repr(t), repr(lo), repr(hi)) for k, t, (lo, hi) in results])
    plotting.plot_throughput({"simulated": ([r[0] for r in results], [r[1] for r in results])}, out / "sweep.png")
    best = max(results, key=lambda r: (r[1], -r[0]))
    print(f"best simulated k = {best[0]}  throughput = {best[1]:.6g}")


def bundled_dataset():
    return resources.files("batchmf") / "data" / "synthetic_linear.csv"


def cmd_fit(args, out):
    path = args.data or bundled_dataset()
    samples = fitting.read_samples(path)
    design = None
    if args.budget is not None:
        cands = sorted(samples) if args.candidates is None else _int_list(args.candidates, "--candidates")
        design = fitting.design_select(cands, args.budget, seed=args.seed or 0)
    result = fitting.fit_speedup(samples, design)
    (out / "fit.json").write_text(result.to_json() + "\n")
    ks = list(result.design)
    plotting.plot_fit(ks, [samples[k].mean for k in ks], {f: fit.model for f, fit in result.fits.items()}, out / "fit.png")
    print(f"design = {list(result.design)}")
    for form, fit in result.fits.items():
        print(f"{form}: params = {fit.params}  residual = {fit.residual:.6g}")
    print(f"selected = {result.selected}" + ("  (violates form constraint)" if result.flagged else ""))


def _int_list(text, flag):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(flag, "expected comma-separated integers") from None


COMMANDS = {
    "analyze": (cmd_analyze, "stationary throughput of the exact chain at one batch size"),
    "optimize": (cmd_optimize, "optimal batch size (exact, mean-field or both)"),
    "meanfield": (cmd_meanfield, "mean-field equilibrium and trajectory"),
    "simulate": (cmd_simulate, "event-driven simulation of the exact chain"),
    "mixing": (cmd_mixing, "total variation distance to stationarity over time"),
    "fit": (cmd_fit, "fit speedup laws to measured service times"),
    "sweep": (cmd_sweep, "simulated throughput over a range of batch sizes"),
}

# flags recorded as manifest overrides when set
OVERRIDE_FLAGS = ("k", "kmax", "method", "events", "jobs", "prune", "horizon", "points",
                  "trace", "data", "budget", "candidates")


def build_parser():
    parser = argparse.ArgumentParser(prog="batchmf", description="Batch-size sizing for batched service systems.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="JSON model config")
        p.add_argument("--k", type=int, help="batch size (overrides the config)")
        p.add_argument("--kmax", type=int, help="largest batch size to consider (default n)")
        p.add_argument("--method", help="optimize: exact, meanfield or both")
        p.add_argument("--seed", type=int, help="random seed (default 0)")
        p.add_argument("--events", type=int, help="simulation event budget (default 100000)")
        p.add_argument("--out", default="batchmf-out", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for k sweeps")
        if name == "optimize":
            p.add_argument("--prune", action="store_true", help="skip k whose capacity bound cannot win")
        if name in ("meanfield", "mixing"):
            p.add_argument("--horizon", type=float, help="time horizon in seconds")
        if name == "mixing":
            p.add_argument("--points", type=int, default=101, help="time grid size")
        if name == "simulate":
            p.add_argument("--trace", action="store_true", help="write the event trace")
        if name == "fit":
            p.add_argument("--data", help="CSV with columns k,service_time_seconds (default: bundled sample)")
            p.add_argument("--budget", type=int, help="choose this many batch sizes by D-optimal design")
            p.add_argument("--candidates", help="comma-separated candidate batch sizes")
    return parser


def _exit_code(exc):
    if isinstance(exc, StateSpaceTooLarge):
        return EXIT_CAP
    if isinstance(exc, (ConfigError, DomainError, FitError, DesignError, FileNotFoundError)):
        return EXIT_CONFIG
    if isinstance(exc, (NumericalError, ModelError, ArithmeticError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    if isinstance(exc, (BatchMFError, ValueError)):
        return EXIT_CONFIG
    raise exc


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    overrides = {f: getattr(args, f) for f in OVERRIDE_FLAGS if getattr(args, f, None) not in (None, False)}
    if args.jobs == 1:
        overrides.pop("jobs")
    manifest = RunManifest(args.command, args.config, str(out), args.seed, overrides)
    manifest.write()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda msg, *a, **k: print(f"warning: {msg}", file=sys.stderr)
            COMMANDS[args.command][0](args, out)
        code = EXIT_OK
    except Exception as exc:  # mapped onto the exit-code contract
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        if code == EXIT_CAP:
            print("hint: `batchmf meanfield` or `batchmf optimize --method meanfield` work at any n",
                  file=sys.stderr)
    manifest.exit_code = code
    manifest.write()
    return code


if __name__ == "__main__":
    sys.exit(main())
