"""Command-line front end.

Subcommands: ``synth``, ``train``, ``predict``, ``alpha-sweep``,
``verify-bounds`` and ``bounds``. Every subcommand accepts
``--config FILE``, a flat ``key = value`` file whose keys are the long
option names; flags given on the command line take precedence.

Exit codes: 0 success, 2 input or schema error, 3 numerical failure,
4 results written but the optimizer did not converge.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .kernels import PARAM_NAMES, Hyperparams, parse_kernel, se_eigen_tail, se_spectrum
from .linalg import NumericalFailure, SolverConfig
from .model import Dataset, FitConfig, GPModel, fit, predict, rmse, select_alpha
from .theory import (
    BoundInputs,
    corollary_epsilon,
    matern_inducing_exponent,
    se_corollary_inducing_count,
    theorem1_bound,
    theorem2_bound,
    verify_bounds_empirically,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_NOT_CONVERGED = 4

_FEATURE = re.compile(r"^x(\d+)$")


class SchemaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Synthetic functions
# ---------------------------------------------------------------------------


def gramacy_lee(x):
    x = np.asarray(x, dtype=float)
    return np.sin(10 * np.pi * x) / (2 * x) + (x - 1) ** 4


def branin_hoo(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    x1, x2 = x[:, 0], x[:, 1]
    b = 5.1 / (4 * np.pi**2)
    c = 5 / np.pi
    t = 1 / (8 * np.pi)
    return (x2 - b * x1**2 + c * x1 - 6) ** 2 + 10 * (1 - t) * np.cos(x1) + 10


def griewank(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    i = np.arange(1, x.shape[1] + 1)
    return np.sum(x**2, axis=1) / 4000 - np.prod(np.cos(x / np.sqrt(i)), axis=1) + 1


SYNTHETIC = {
    "gramacy-lee": (lambda X: gramacy_lee(X[:, 0]), lambda d: [(0.5, 2.5)], 1),
    "branin": (branin_hoo, lambda d: [(-5.0, 10.0), (0.0, 15.0)], 2),
    "griewank": (griewank, lambda d: [(-600.0, 600.0)] * d, None),
}


def synthesize(function: str, n: int, seed: int = 0, noise_std: float | None = None, dim: int | None = None):
    """Seeded uniform inputs on the standard domain and noisy targets.

    ``noise_std=None`` uses 0.1 times the standard deviation of the clean targets.
    """
    key = function.lower().replace("_", "-")
    key = {"gramacylee": "gramacy-lee", "branin-hoo": "branin", "braninhoo": "branin"}.get(key, key)
    if key not in SYNTHETIC:
        raise SchemaError(f"unknown synthetic function {function!r}")
    if n < 10:
        raise SchemaError("synthetic datasets need N >= 10")
    f, domain, fixed_dim = SYNTHETIC[key]
    d = fixed_dim or (dim or 2)
    if fixed_dim and dim not in (None, fixed_dim):
        raise SchemaError(f"{key} is defined for D={fixed_dim}")
    bounds = np.array(domain(d))
    rng = np.random.default_rng(seed)
    X = bounds[:, 0] + (bounds[:, 1] - bounds[:, 0]) * rng.random((n, d))
    clean = f(X)
    std = 0.1 * float(np.std(clean)) if noise_std is None else float(noise_std)
    if std < 0:
        raise SchemaError("noise std must be non-negative")
    y = clean + std * rng.standard_normal(n) if std > 0 else clean
    return X, y, std


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows, comments=()):
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    text = buf.getvalue()
    if str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def read_table(path):
    """Header and rows of a CSV, skipping ``#`` comment lines."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc.strerror}") from exc
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError(f"{path} has no header line") from None
    rows = [r for r in reader if r]
    return header, rows


def read_dataset(path, target: str | None = "y", require_target: bool = True):
    """Parse ``x1..xD`` feature columns and an optional target column."""
    header, rows = read_table(path)
    feats = sorted((int(m.group(1)), i) for i, h in enumerate(header) if (m := _FEATURE.match(h)))
    if not feats:
        raise SchemaError(f"{path}: no feature columns named x1..xD")
    if [k for k, _ in feats] != list(range(1, len(feats) + 1)):
        raise SchemaError(f"{path}: feature columns must be x1..x{len(feats)} without gaps")
    tcol = None
    if target is not None and target in header:
        tcol = header.index(target)
    elif require_target:
        raise SchemaError(f"{path}: missing target column {target!r}")
    cols = [i for _, i in feats]
    try:
        X = np.array([[float(r[i]) for i in cols] for r in rows], dtype=float).reshape(len(rows), len(cols))
        y = None if tcol is None else np.array([float(r[tcol]) for r in rows], dtype=float)
    except (ValueError, IndexError) as exc:
        raise SchemaError(f"{path}: malformed row ({exc})") from exc
    if not np.all(np.isfinite(X)) or (y is not None and not np.all(np.isfinite(y))):
        raise SchemaError(f"{path}: non-finite values")
    return X, y


def dataset_rows(X, y):
    return [list(x) + [t] for x, t in zip(X, y)]


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def read_config(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read config {path}: {exc.strerror}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(parser: argparse.ArgumentParser, values: dict):
    actions = {}
    for a in parser._actions:
        actions[a.dest] = a
        for opt in a.option_strings:
            actions[opt.lstrip("-").replace("-", "_")] = a
    truthy = ("1", "true", "yes", "on")
    defaults = {}
    for k, v in values.items():
        if k == "config":
            continue
        if k not in actions or k == "help":
            raise SchemaError(f"unknown config key {k!r}")
        a = actions[k]
        if isinstance(a, argparse._StoreTrueAction):
            defaults[a.dest] = v.lower() in truthy
        elif isinstance(a, argparse._StoreFalseAction):
            defaults[a.dest] = v.lower() not in truthy
        else:
            try:
                defaults[a.dest] = a.type(v) if a.type else v
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise SchemaError(f"bad value for config key {k!r}: {v!r}") from exc
            if a.choices is not None and defaults[a.dest] not in a.choices:
                raise SchemaError(f"bad value for config key {k!r}: {v!r}")
    parser.set_defaults(**defaults)


def _alpha_arg(s):
    if s == "cv":
        return s
    a = float(s)
    if not 0 <= a < 1:
        raise argparse.ArgumentTypeError("alpha must lie in [0, 1)")
    return a


def _grid_arg(s):
    try:
        grid = [float(v) for v in s.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad alpha grid {s!r}") from None
    if not grid or any(not 0 <= a < 1 for a in grid):
        raise argparse.ArgumentTypeError("alpha grid entries must lie in [0, 1)")
    return grid


def _m_arg(s):
    if s == "auto":
        return s
    m = int(s)
    if m < 1:
        raise argparse.ArgumentTypeError("M must be >= 1")
    return m


def auto_inducing_count(N: int, D: int, cap: int | None = None) -> int:
    """``min(N, max(10, ceil((log N)^D)))``, optionally capped."""
    M = min(N, max(10, math.ceil(math.log(N) ** D))) if N > 1 else 1
    return min(M, cap) if cap else M


def _add_solver(p):
    g = p.add_argument_group("solver")
    g.add_argument("--cg-tolerance", type=float, default=1e-6)
    g.add_argument("--cg-max-iterations", type=int, default=None)
    g.add_argument("--probes", dest="probe_count", type=int, default=16)
    g.add_argument("--preconditioner", choices=["none", "diagonal", "pivoted-cholesky"], default="diagonal")
    g.add_argument("--preconditioner-rank", type=int, default=10)
    g.add_argument("--jitter", type=float, default=None)
    g.add_argument("--dense-threshold", type=int, default=500)


def _add_fit(p):
    g = p.add_argument_group("fit")
    g.add_argument("--kernel", default="se", help="se, matern32, matern52 or matern72")
    g.add_argument("--optimizer", choices=["ascent", "gradient", "adam"], default="ascent")
    g.add_argument("--max-iterations", type=int, default=10_000)
    g.add_argument("--tolerance", type=float, default=1e-8)
    g.add_argument("--gradient-tolerance", type=float, default=1e-5)
    g.add_argument("--restarts", type=int, default=1)
    g.add_argument("--inducing", choices=["random", "kdpp-exact", "kdpp-approx"], default="random")
    g.add_argument("--M", dest="M", type=_m_arg, default="auto")
    g.add_argument("--max-M", dest="max_M", type=int, default=None, help="hard cap on the auto inducing count")


def _solver(args) -> SolverConfig:
    return SolverConfig(
        cg_tolerance=args.cg_tolerance,
        cg_max_iterations=args.cg_max_iterations,
        probe_count=args.probe_count,
        preconditioner=args.preconditioner,
        preconditioner_rank=args.preconditioner_rank,
        jitter=args.jitter,
        seed=args.seed,
        dense_threshold=args.dense_threshold,
    )


def _fit_config(args) -> FitConfig:
    return FitConfig(
        optimizer=args.optimizer,
        max_iterations=args.max_iterations,
        tolerance=args.tolerance,
        gradient_tolerance=args.gradient_tolerance,
        restarts=args.restarts,
        seed=args.seed,
        solver=_solver(args),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _split(n, frac, seed):
    if not 0 < frac <= 1:
        raise SchemaError("split fraction must lie in (0, 1]")
    perm = np.random.default_rng(seed).permutation(n)
    k = n if frac == 1 else int(round(frac * n))
    if k < 2:
        raise SchemaError("training portion needs at least two rows")
    return np.sort(perm[:k]), np.sort(perm[k:])


def _load_data(args):
    if getattr(args, "data", None):
        return read_dataset(args.data, args.target)
    if getattr(args, "function", None):
        X, y, _ = synthesize(args.function, args.n, args.seed, args.noise_std, args.dim)
        return X, y
    raise SchemaError("give --data or --function")


def cmd_synth(args, out):
    X, y, std = synthesize(args.function, args.n, args.seed, args.noise_std, args.dim)
    header = [f"x{j + 1}" for j in range(X.shape[1])] + ["y"]
    comments = [f"seed={args.seed} function={args.function} n={args.n} noise_std={std!r}"]
    write_csv(args.output, header, dataset_rows(X, y), comments)
    if args.output != "-":
        out.write(f"wrote {X.shape[0]} rows to {args.output}\n")
    return EXIT_OK


def cmd_train(args, out):
    X, y = _load_data(args)
    tr, te = _split(X.shape[0], args.split, args.seed)
    M = auto_inducing_count(tr.size, X.shape[1], args.max_M) if args.M == "auto" else min(args.M, tr.size)
    config = _fit_config(args)
    grid = args.alpha_grid or np.round(np.arange(0.3, 0.7001, 0.05), 10).tolist()
    model = fit(Dataset(X[tr], y[tr]), M, args.alpha, args.kernel, config, strategy=args.inducing, alpha_grid=grid)
    model.save(args.model_out)
    d = model.diagnostics
    hp = model.original_hyperparams()
    out.write(f"model: {args.model_out}\n")
    out.write(f"seed: {args.seed}\n")
    out.write(f"train rows: {tr.size}  test rows: {te.size}  M: {M}  alpha: {model.alpha!r}\n")
    out.write(f"objective: {d['final_objective']!r}\n")
    out.write(f"iterations: {d['iterations']}  gradient norm: {d['gradient_norm']!r}  stop: {d['stop_reason']}\n")
    out.write("hyperparameters: " + "  ".join(f"{k}={hp[k]!r}" for k in PARAM_NAMES) + "\n")
    if te.size:
        mean, _ = predict(model, X[te])
        out.write(f"test rmse: {rmse(mean, y[te])!r}\n")
    if d["zero_iterations"]:
        out.write("flag: zero iterations requested, model holds the initialization\n")
    if d["max_iterations_hit"]:
        out.write("flag: iteration limit reached before convergence\n")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_predict(args, out):
    model = GPModel.load(args.model) if Path(args.model).exists() else None
    if model is None:
        raise SchemaError(f"model file {args.model} not found")
    header, rows = read_table(args.data)
    if not rows:
        X = np.zeros((0, model.inducing.Z.shape[1]))
        if not any(_FEATURE.match(h) for h in header):
            raise SchemaError(f"{args.data}: no feature columns named x1..xD")
        nfeat = sum(1 for h in header if _FEATURE.match(h))
        if nfeat != X.shape[1]:
            raise SchemaError(f"{args.data}: {nfeat} feature columns, model expects {X.shape[1]}")
    else:
        X, _ = read_dataset(args.data, args.target, require_target=False)
        if X.shape[1] != model.inducing.Z.shape[1]:
            raise SchemaError(f"{args.data}: {X.shape[1]} feature columns, model expects {model.inducing.Z.shape[1]}")
    mean, var, info = predict(model, X, return_info=True)
    write_csv(args.output, ["mean", "variance"], zip(mean, var))
    if args.output != "-":
        out.write(f"wrote {mean.size} predictions to {args.output}\n")
    if info["clamped"]:
        out.write(f"note: {info['clamped']} variances clamped at the jitter floor\n")
    return EXIT_OK


def cmd_alpha_sweep(args, out):
    X, y = _load_data(args)
    grid = args.grid or np.linspace(0.05, 0.95, 20).tolist()
    N = int(round(args.split * X.shape[0]))
    M = auto_inducing_count(N, X.shape[1], args.max_M) if args.M == "auto" else args.M
    config = _fit_config(args)
    best, table = select_alpha(Dataset(X, y), grid, M, args.kernel, config, split=args.split, seed=args.seed,
                               strategy=args.inducing, folds=args.folds)
    rows = []
    for r in table:
        r["selected"] = r["alpha"] == best.value
        rows.append([r["alpha"], r["objective"], r["rmse"], r["iterations"], r["converged"], r["selected"], r["error"] or ""])
    header = ["alpha", "train_objective", "test_rmse", "iterations", "converged", "selected", "error"]
    write_csv(args.output, header, rows, [f"seed={args.seed} M={M} split={args.split!r}"])
    out.write(f"selected alpha: {best.value!r}\n")
    for r in table:
        mark = "*" if r["selected"] else " "
        e = "failed" if r["rmse"] is None else f"{r['rmse']:.6g}"
        out.write(f"{mark} alpha={r['alpha']:<8.4g} rmse={e}\n")
    if args.plot and args.output != "-":
        fig = Path(args.figure) if args.figure else Path(args.output).with_suffix(".png")
        from .plotting import plot_alpha_sweep

        plot_alpha_sweep(table, fig, title=f"M={M}")
        out.write(f"figure: {fig}\n")
    if any(r["rmse"] is not None and not r["converged"] for r in table):
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_verify_bounds(args, out):
    hp = Hyperparams(args.lengthscale, args.signal_variance, args.noise_variance)
    spec = parse_kernel(args.kernel, hp)
    M = None if args.M == "auto" else args.M
    solver = SolverConfig(jitter=args.jitter, dense_threshold=max(args.dense_threshold, args.n), seed=args.seed)
    summary = verify_bounds_empirically(args.trials, args.n, M, args.alpha, spec, args.delta, args.seed,
                                        D=args.dim, gamma=args.gamma, epsilon=args.epsilon, config=solver)
    header = ["trial", "measured_divergence", "theorem1", "theorem2", "eigen_tail", "violation", "error"]
    rows = [[r.trial, r.measured_divergence, r.theorem1_value, r.theorem2_value, r.eigen_tail, r.violation, r.error or ""]
            for r in summary.reports]
    verdict = "PASS" if summary.passed else "FAIL"
    rows.append(["summary", summary.fraction, "", "", "", f"envelope={summary.envelope!r}", verdict])
    write_csv(args.output, header, rows, [f"seed={args.seed} N={args.n} M={summary.M} alpha={args.alpha!r} "
                                          f"delta={args.delta!r} epsilon={summary.epsilon!r}"])
    out.write(f"trials: {len(summary.reports)}  failures: {summary.failures}  M: {summary.M}\n")
    out.write(f"violation fraction: {summary.fraction!r}  envelope: {summary.envelope!r}  verdict: {verdict}\n")
    if args.plot and args.output != "-":
        fig = Path(args.figure) if args.figure else Path(args.output).with_suffix(".png")
        from .plotting import plot_bound_report

        plot_bound_report([r.__dict__ for r in summary.reports], fig, title=f"N={args.n}, M={summary.M}")
        out.write(f"figure: {fig}\n")
    return EXIT_OK


def cmd_bounds(args, out):
    hp = Hyperparams(args.lengthscale, args.signal_variance, args.noise_variance)
    sp = se_spectrum(hp)
    m_star = se_corollary_inducing_count(args.n, args.gamma, args.delta, sp, args.noise_variance)
    M = m_star if args.M == "auto" else args.M
    tail = args.eigen_tail if args.eigen_tail is not None else args.n * se_eigen_tail(sp, M)
    eps = args.epsilon if args.epsilon is not None else corollary_epsilon(args.n, args.gamma, args.delta,
                                                                           args.signal_variance, args.noise_variance)
    inp = BoundInputs(args.n, M, args.alpha, args.delta, args.noise_variance, tail, args.signal_variance, eps,
                      args.gamma, args.y_norm_sq)
    out.write(f"M: {M}\n")
    out.write(f"eigen_tail: {tail!r}\n")
    out.write(f"epsilon: {eps!r}\n")
    out.write(f"theorem1: {theorem1_bound(inp)!r}\n")
    out.write(f"theorem2: {theorem2_bound(inp)!r}\n")
    out.write(f"se_corollary_M: {m_star}\n")
    if args.matern_r:
        out.write(f"matern_exponent: {matern_inducing_exponent(args.matern_r, args.gamma)!r}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _data_options(p):
    p.add_argument("--data", help="CSV with columns x1..xD and a target")
    p.add_argument("--target", default="y")
    p.add_argument("--function", help="synthetic source instead of --data")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--dim", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="renyigp", description="Sparse GP regression with the Rényi alpha-ELBO.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value file of option defaults")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)
    p.add_argument("--function", default="gramacy-lee", help="gramacy-lee, branin or griewank")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise-std", type=float, default=None, help="default: 0.1 x target std")
    p.add_argument("--dim", type=int, default=None, help="dimension for griewank")
    p.add_argument("--output", default="-")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="fit a model")
    common(p)
    _data_options(p)
    _add_fit(p)
    _add_solver(p)
    p.add_argument("--alpha", type=_alpha_arg, default=0.5, help="value in [0, 1) or 'cv'")
    p.add_argument("--alpha-grid", type=_grid_arg, default=None)
    p.add_argument("--split", type=float, default=0.6, help="training fraction; 1 uses every row")
    p.add_argument("--model-out", default="model.json")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("predict", help="predict with a saved model")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", default="y")
    p.add_argument("--output", default="-")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("alpha-sweep", help="held-out RMSE over an alpha grid")
    common(p)
    _data_options(p)
    _add_fit(p)
    _add_solver(p)
    p.add_argument("--grid", type=_grid_arg, default=None, help="comma list; default 20 values in [0.05, 0.95]")
    p.add_argument("--split", type=float, default=0.6)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--output", default="sweep.csv")
    p.add_argument("--figure", default=None, help="PNG path; default next to the CSV")
    p.add_argument("--no-plot", dest="plot", action="store_false")
    p.set_defaults(handler=cmd_alpha_sweep)

    p = sub.add_parser("verify-bounds", help="Monte-Carlo check of the divergence bounds")
    common(p)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--M", dest="M", type=_m_arg, default="auto", help="'auto' uses the SE corollary count")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--kernel", default="se")
    p.add_argument("--lengthscale", type=float, default=1.0)
    p.add_argument("--signal-variance", type=float, default=1.0)
    p.add_argument("--noise-variance", type=float, default=1.0)
    p.add_argument("--jitter", type=float, default=None)
    p.add_argument("--dense-threshold", type=int, default=500)
    p.add_argument("--output", default="bounds.csv")
    p.add_argument("--figure", default=None)
    p.add_argument("--no-plot", dest="plot", action="store_false")
    p.set_defaults(handler=cmd_verify_bounds)

    p = sub.add_parser("bounds", help="evaluate the bounds from numbers")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--M", dest="M", type=_m_arg, default="auto")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--eigen-tail", type=float, default=None, help="default: N x SE operator tail")
    p.add_argument("--y-norm-sq", type=float, default=0.0)
    p.add_argument("--lengthscale", type=float, default=1.0)
    p.add_argument("--signal-variance", type=float, default=1.0)
    p.add_argument("--noise-variance", type=float, default=1.0)
    p.add_argument("--matern-r", type=int, default=None)
    p.set_defaults(handler=cmd_bounds)
    return parser


def _subparser(parser, name):
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return a.choices.get(name)
    return None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    out = sys.stdout
    err = sys.stderr
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    start = time.perf_counter()
    try:
        if args.config:
            sp = _subparser(parser, args.command)
            _apply_config(sp, read_config(args.config))
            args = parser.parse_args(argv)
        code = args.handler(args, out)
    except (SchemaError, ValueError, OSError) as exc:
        err.write(f"input error: {exc}\n")
        return EXIT_INPUT
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        err.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERICAL
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    err.write(f"elapsed: {time.perf_counter() - start:.3f} s\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
