"""Estimator: standardization, inducing selection, fitting, prediction and alpha selection."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import pdist

from . import kernels as kern
from .kernels import Hyperparams, KernelSpec, PARAM_NAMES, parse_kernel
from .linalg import EPS_APPROX, EXACT as KDPP_EXACT, NumericalFailure, SolverConfig, kdpp_sample
from .objective import alpha_elbo_and_grad, as_alpha, xi_matvec, xi_solve

FORMAT_TAG = "renyigp-model/1"

RANDOM = "random"
KDPP_EXACT_STRATEGY = "kdpp-exact"
KDPP_APPROX_STRATEGY = "kdpp-approx"
USER = "user"
STRATEGIES = (RANDOM, KDPP_EXACT_STRATEGY, KDPP_APPROX_STRATEGY, USER)

ASCENT = "ascent"
GRADIENT = "gradient"
ADAM = "adam"


class FitFailure(NumericalFailure):
    """The objective could not be evaluated during fitting."""


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardization:
    x_mean: tuple
    x_std: tuple
    y_mean: float
    y_std: float

    def transform_X(self, X):
        return (np.asarray(X, dtype=float) - np.array(self.x_mean)) / np.array(self.x_std)

    def inverse_X(self, X):
        return np.asarray(X, dtype=float) * np.array(self.x_std) + np.array(self.x_mean)

    def transform_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return np.asarray(y, dtype=float) * self.y_std + self.y_mean

    def to_dict(self) -> dict:
        return {"x_mean": list(self.x_mean), "x_std": list(self.x_std), "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d) -> "Standardization":
        return cls(tuple(float(v) for v in d["x_mean"]), tuple(float(v) for v in d["x_std"]), float(d["y_mean"]), float(d["y_std"]))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Training inputs and targets.

    ``standardization`` is the transform already applied to ``X`` and
    ``y``, or ``None`` for raw data.
    """

    X: np.ndarray
    y: np.ndarray
    standardization: Standardization | None = None

    def __post_init__(self):
        X = kern._as_2d(self.X)
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("dataset needs N >= 1 rows and D >= 1 columns")
        if X.shape[0] != y.size:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.size} entries")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains NaN or Inf")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    @property
    def standardized(self) -> bool:
        return self.standardization is not None

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.standardization)


def standardize(raw: Dataset) -> Dataset:
    """Shift and scale every column and the target to mean 0, sample std 1.

    Already-standardized data is returned unchanged.
    """
    if raw.standardized:
        return raw
    if raw.N < 2:
        raise ValueError("standardization needs at least two rows")
    x_mean = raw.X.mean(axis=0)
    x_std = raw.X.std(axis=0, ddof=1)
    for j, s in enumerate(x_std):
        if not s > 0:
            raise ValueError(f"input column x{j + 1} has zero variance")
    y_mean = float(raw.y.mean())
    y_std = float(raw.y.std(ddof=1))
    if not y_std > 0:
        raise ValueError("target column has zero variance")
    st = Standardization(tuple(float(v) for v in x_mean), tuple(float(v) for v in x_std), y_mean, y_std)
    return Dataset(st.transform_X(raw.X), st.transform_y(raw.y), st)


def destandardize(data: Dataset) -> Dataset:
    if not data.standardized:
        return data
    st = data.standardization
    return Dataset(st.inverse_X(data.X), st.inverse_y(data.y), None)


def rmse(predictions, truth) -> float:
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} vs {t.size}")
    if p.size < 1:
        raise ValueError("rmse needs at least one value")
    return float(np.sqrt(np.mean((p - t) ** 2)))


# ---------------------------------------------------------------------------
# Inducing points
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InducingSet:
    Z: np.ndarray
    provenance: str
    seed: int | None = None
    epsilon: float | None = None
    indices: tuple | None = None

    def __post_init__(self):
        Z = kern._as_2d(self.Z)
        if Z.shape[0] < 1:
            raise ValueError("an inducing set needs M >= 1 rows")
        if not np.all(np.isfinite(Z)):
            raise ValueError("inducing inputs must be finite")
        if self.provenance not in STRATEGIES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "Z", Z)

    @property
    def M(self) -> int:
        return self.Z.shape[0]

    def to_dict(self) -> dict:
        return {
            "Z": self.Z.tolist(),
            "provenance": self.provenance,
            "seed": self.seed,
            "epsilon": self.epsilon,
            "indices": None if self.indices is None else list(self.indices),
        }

    @classmethod
    def from_dict(cls, d) -> "InducingSet":
        idx = d.get("indices")
        return cls(np.array(d["Z"], dtype=float), d["provenance"], d.get("seed"), d.get("epsilon"),
                   None if idx is None else tuple(int(i) for i in idx))


def select_inducing(
    data: Dataset,
    M: int,
    strategy: str = RANDOM,
    kernel: KernelSpec | None = None,
    seed: int = 0,
    *,
    epsilon: float = 1e-2,
) -> InducingSet:
    """Pick ``M`` training rows as inducing inputs.

    The k-DPP strategies sample on the training Gram matrix of ``kernel``.
    """
    M = int(M)
    if not 1 <= M <= data.N:
        raise ValueError(f"M must be in [1, N={data.N}], got {M}")
    if M == data.N:
        idx = np.arange(data.N)
    elif strategy == RANDOM:
        idx = np.sort(np.random.default_rng(seed).choice(data.N, size=M, replace=False))
    elif strategy in (KDPP_EXACT_STRATEGY, KDPP_APPROX_STRATEGY):
        if kernel is None:
            raise ValueError("k-DPP selection needs a kernel")
        K = kern.gram(kernel, data.X)
        K += SolverConfig().jitter_for(np.diag(K)) * np.eye(data.N)
        mode = KDPP_EXACT if strategy == KDPP_EXACT_STRATEGY else EPS_APPROX
        idx = kdpp_sample(K, M, mode, epsilon=epsilon, seed=seed)
    else:
        raise ValueError(f"unknown inducing strategy {strategy!r}")
    eps = epsilon if strategy == KDPP_APPROX_STRATEGY else None
    return InducingSet(data.X[idx].copy(), strategy, seed, eps, tuple(int(i) for i in idx))


def user_inducing(Z) -> InducingSet:
    return InducingSet(np.array(Z, dtype=float), USER)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings.

    ``optimizer`` is ``"ascent"`` (quasi-Newton direction with Armijo
    backtracking, monotone), ``"gradient"`` (steepest ascent with the same
    line search) or ``"adam"`` (fixed schedule, not monotone).
    ``max_iterations = 0`` returns the initialization.
    """

    optimizer: str = ASCENT
    max_iterations: int = 10_000
    tolerance: float = 1e-8
    gradient_tolerance: float = 1e-5
    restarts: int = 1
    seed: int = 0
    learning_rate: float = 0.05
    max_step: float = 2.0
    initial: Hyperparams | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.optimizer not in (ASCENT, GRADIENT, ADAM):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not (self.tolerance > 0 and self.gradient_tolerance > 0):
            raise ValueError("tolerances must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


def initial_hyperparams(X, seed: int = 0, max_points: int = 1000) -> Hyperparams:
    """Median pairwise distance lengthscale, unit signal variance, noise 0.1."""
    X = kern._as_2d(X)
    if X.shape[0] > max_points:
        X = X[np.random.default_rng(seed).choice(X.shape[0], size=max_points, replace=False)]
    d = pdist(X) if X.shape[0] > 1 else np.array([1.0])
    d = d[d > 0]
    ell = float(np.median(d)) if d.size else 1.0
    return Hyperparams(ell, 1.0, 0.1)


@dataclass
class _Trace:
    theta: np.ndarray
    value: float
    grad: np.ndarray
    values: list
    iterations: int = 0
    evaluations: int = 1
    converged: bool = False
    reason: str = ""


def _objective(data, Z, family: KernelSpec, alpha, solver):
    def f(theta, need_grad=True):
        spec = family.with_hyperparams(Hyperparams.from_log(theta))
        obj, g = alpha_elbo_and_grad(data.X, data.y, Z, spec, alpha, solver, wrt=PARAM_NAMES if need_grad else ())
        return obj.value, g

    return f


def _safe(f, theta, need_grad=True):
    if not np.all(np.abs(theta) < 30):
        return -np.inf, None
    try:
        return f(theta, need_grad)
    except (NumericalFailure, ValueError, np.linalg.LinAlgError):
        return -np.inf, None


def _line_search_ascent(f, theta0, config: FitConfig) -> _Trace:
    value, grad = _safe(f, theta0)
    if not np.isfinite(value):
        raise FitFailure("objective is not finite at the initialization")
    tr = _Trace(theta0.copy(), value, grad, [value])
    H = np.eye(theta0.size)
    for it in range(config.max_iterations):
        gnorm = float(np.linalg.norm(tr.grad))
        if gnorm <= config.gradient_tolerance:
            tr.converged, tr.reason = True, "gradient"
            break
        d = H @ tr.grad if config.optimizer == ASCENT else tr.grad.copy()
        slope = float(tr.grad @ d)
        if slope <= 0:
            H = np.eye(theta0.size)
            d = tr.grad.copy()
            slope = float(tr.grad @ d)
        big = np.max(np.abs(d))
        if big > config.max_step:
            d *= config.max_step / big
            slope = float(tr.grad @ d)
        step = 1.0
        accepted = False
        for _ in range(50):
            cand = tr.theta + step * d
            v, g = _safe(f, cand)
            tr.evaluations += 1
            if np.isfinite(v) and v >= tr.value + 1e-4 * step * slope and g is not None:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            tr.converged, tr.reason = True, "line-search"
            break
        s = cand - tr.theta
        yk = tr.grad - g  # gradient change of the negated objective
        sy = float(s @ yk)
        if config.optimizer == ASCENT and sy > 1e-12:
            rho = 1.0 / sy
            I = np.eye(theta0.size)
            H = (I - rho * np.outer(s, yk)) @ H @ (I - rho * np.outer(yk, s)) + rho * np.outer(s, s)
        old = tr.value
        tr.theta, tr.value, tr.grad = cand, v, g
        tr.values.append(v)
        tr.iterations = it + 1
        if abs(v - old) <= config.tolerance * max(1.0, abs(old)):
            tr.converged, tr.reason = True, "objective"
            break
    else:
        tr.reason = "max-iterations" if config.max_iterations else "zero-iterations"
    return tr


def _adam(f, theta0, config: FitConfig) -> _Trace:
    value, grad = _safe(f, theta0)
    if not np.isfinite(value):
        raise FitFailure("objective is not finite at the initialization")
    tr = _Trace(theta0.copy(), value, grad, [value])
    best = (value, theta0.copy(), grad)
    m = np.zeros_like(theta0)
    s = np.zeros_like(theta0)
    b1, b2 = 0.9, 0.999
    theta = theta0.copy()
    g = grad
    for it in range(config.max_iterations):
        if np.linalg.norm(g) <= config.gradient_tolerance:
            tr.converged, tr.reason = True, "gradient"
            break
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * g**2
        mh = m / (1 - b1 ** (it + 1))
        sh = s / (1 - b2 ** (it + 1))
        theta = theta + config.learning_rate * mh / (np.sqrt(sh) + 1e-8)
        v, g_new = _safe(f, theta)
        tr.evaluations += 1
        if not np.isfinite(v):
            raise FitFailure(f"objective is not finite at iteration {it + 1}")
        old = tr.values[-1]
        tr.values.append(v)
        tr.iterations = it + 1
        g = g_new
        if v > best[0]:
            best = (v, theta.copy(), g)
        if abs(v - old) <= config.tolerance * max(1.0, abs(old)):
            tr.converged, tr.reason = True, "objective"
            break
    else:
        tr.reason = "max-iterations" if config.max_iterations else "zero-iterations"
    tr.value, tr.theta, tr.grad = best
    return tr


def _optimize(f, theta0, config):
    if config.optimizer == ADAM:
        return _adam(f, theta0, config)
    return _line_search_ascent(f, theta0, config)


@dataclass(frozen=True, eq=False)
class GPModel:
    """A fitted sparse GP; immutable and safe to share between threads.

    ``kernel`` carries hyperparameters on the standardized scale.
    With ``L L^T = K_UU`` and ``a_* = L^{-1} k_U*``, predictions are
    ``mean = a_*^T w`` and ``var = k_** + s2 - a_*^T C a_*`` where
    ``w = L^{-1} K_Uf Xi^{-1} y`` and ``C = L^{-1} K_Uf Xi^{-1} K_fU L^{-T}``.
    These whitened forms equal the cross-covariance predictor
    ``K_*U K_UU^{-1} K_Uf Xi^{-1} y`` without forming ``K_UU^{-1}``.
    """

    kernel: KernelSpec
    alpha: float
    inducing: InducingSet
    standardization: Standardization | None
    weights: np.ndarray
    covariance_factor: np.ndarray
    chol_factor: np.ndarray
    diagnostics: dict
    solver: SolverConfig = field(default_factory=SolverConfig)
    training: Dataset | None = field(default=None, compare=False, repr=False)
    xi_inv_y: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def hyperparams(self) -> Hyperparams:
        return self.kernel.hyperparams

    def original_hyperparams(self) -> dict:
        hp = self.hyperparams
        st = self.standardization
        x_std = np.ones(self.inducing.Z.shape[1]) if st is None else np.array(st.x_std)
        y_var = 1.0 if st is None else st.y_std**2
        return {
            "lengthscale": [float(hp.lengthscale * s) for s in x_std],
            "signal_variance": float(hp.signal_variance * y_var),
            "noise_variance": float(hp.noise_variance * y_var),
        }

    def cache_residual(self) -> float:
        """``||Xi (Xi^{-1} y) - y|| / ||y||`` on the in-memory training data."""
        if self.training is None or self.xi_inv_y is None:
            raise ValueError("training data is not attached to this model")
        t = self.training
        r = xi_matvec(t.X, self.xi_inv_y, self.inducing.Z, self.kernel, self.alpha, self.solver) - t.y
        return float(np.linalg.norm(r) / max(np.linalg.norm(t.y), 1e-300))

    def to_dict(self) -> dict:
        hp = self.hyperparams
        return {
            "format": FORMAT_TAG,
            "kernel": {"family": self.kernel.family, "order": self.kernel.order, "label": self.kernel.label},
            "hyperparams": {"lengthscale": hp.lengthscale, "signal_variance": hp.signal_variance, "noise_variance": hp.noise_variance},
            "hyperparams_original": self.original_hyperparams(),
            "alpha": self.alpha,
            "inducing": self.inducing.to_dict(),
            "standardization": None if self.standardization is None else self.standardization.to_dict(),
            "weights": self.weights.tolist(),
            "covariance_factor": self.covariance_factor.tolist(),
            "chol_factor": self.chol_factor.tolist(),
            "solver": {"jitter": self.solver.jitter, "cg_tolerance": self.solver.cg_tolerance},
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d) -> "GPModel":
        if d.get("format") != FORMAT_TAG:
            raise ValueError(f"unsupported model format {d.get('format')!r}")
        hp = Hyperparams(**{k: float(v) for k, v in d["hyperparams"].items()})
        spec = KernelSpec(d["kernel"]["family"], hp, int(d["kernel"]["order"]))
        st = None if d["standardization"] is None else Standardization.from_dict(d["standardization"])
        solver = SolverConfig(jitter=d["solver"]["jitter"], cg_tolerance=d["solver"]["cg_tolerance"])
        return cls(
            spec, float(d["alpha"]), InducingSet.from_dict(d["inducing"]), st,
            np.array(d["weights"], dtype=float), np.array(d["covariance_factor"], dtype=float).reshape(len(d["weights"]), -1),
            np.array(d["chol_factor"], dtype=float).reshape(len(d["weights"]), -1),
            d["diagnostics"], solver,
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "GPModel":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "GPModel":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _build_model(data: Dataset, inducing: InducingSet, spec: KernelSpec, alpha, solver, diagnostics) -> GPModel:
    Z = inducing.Z
    a, W, info = xi_solve(data.X, data.y, Z, spec, alpha, solver)
    K_fU = kern.gram(spec, data.X, Z)
    K_UU = kern.gram(spec, Z)
    K_UU = K_UU + solver.jitter_for(np.diag(K_UU)) * np.eye(Z.shape[0])
    L = np.linalg.cholesky(K_UU)
    V = sla.solve_triangular(L, K_fU.T, lower=True)
    w = V @ a
    Cf = V @ sla.solve_triangular(L, W.T, lower=True).T
    Cf = 0.5 * (Cf + Cf.T)
    diagnostics = dict(diagnostics, solve_path=info["path"])
    return GPModel(spec, float(as_alpha(alpha, solver).value), inducing, data.standardization, w, Cf, L, diagnostics,
                   solver, data, a)


def fit(
    data: Dataset,
    M: int | None = None,
    alpha=0.5,
    kernel: str | KernelSpec = "se",
    config: FitConfig = FitConfig(),
    *,
    inducing: InducingSet | None = None,
    strategy: str = RANDOM,
    alpha_grid=None,
) -> GPModel:
    """Maximize the alpha-ELBO over the log-hyperparameters.

    ``alpha="cv"`` chooses alpha with :func:`select_alpha` over
    ``alpha_grid`` first. Raw data is standardized automatically. The best
    of ``config.restarts`` runs is returned; restart 0 starts from
    ``config.initial`` or :func:`initial_hyperparams`, later ones perturb it
    by ``N(0, 0.3**2)`` in log space.
    """
    if isinstance(alpha, str):
        if alpha != "cv":
            raise ValueError(f"alpha must be a number or 'cv', got {alpha!r}")
        grid = alpha_grid if alpha_grid is not None else np.round(np.arange(0.3, 0.7001, 0.05), 10).tolist()
        alpha, _ = select_alpha(data, grid, M, kernel, config, strategy=strategy)
    alpha = as_alpha(alpha, config.solver)
    data = standardize(data)
    family = kernel if isinstance(kernel, KernelSpec) else parse_kernel(kernel, Hyperparams(1.0, 1.0, 1.0))
    init = config.initial if config.initial is not None else initial_hyperparams(data.X, config.seed)
    if inducing is None:
        if M is None:
            raise ValueError("give either M or an inducing set")
        inducing = select_inducing(data, M, strategy, family.with_hyperparams(init), config.seed)
    elif inducing.Z.shape[1] != data.D:
        raise ValueError("inducing inputs and data differ in dimension")
    f = _objective(data, inducing.Z, family, alpha, config.solver)
    rng = np.random.default_rng(config.seed)
    starts = [init.to_log()]
    for _ in range(1, config.restarts):
        starts.append(init.to_log() + rng.normal(0.0, 0.3, size=3))

    def run(theta0):
        try:
            return _optimize(f, theta0, config)
        except FitFailure as exc:
            return exc

    threads = config.solver.threads or kern.default_threads()
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(run, starts))
    else:
        runs = [run(t) for t in starts]
    good = [(i, r) for i, r in enumerate(runs) if not isinstance(r, Exception)]
    if not good:
        raise runs[0]
    best_i, best = max(good, key=lambda ir: (ir[1].value, -ir[0]))
    unchanged = best_i == 0 and np.array_equal(best.theta, starts[0])
    spec = family.with_hyperparams(init if unchanged else Hyperparams.from_log(best.theta))
    diagnostics = {
        "optimizer": config.optimizer,
        "iterations": best.iterations,
        "evaluations": best.evaluations,
        "final_objective": best.value,
        "gradient_norm": float(np.linalg.norm(best.grad)),
        "converged": best.converged,
        "stop_reason": best.reason,
        "max_iterations_hit": not best.converged and config.max_iterations > 0,
        "zero_iterations": config.max_iterations == 0,
        "restart": best_i,
        "restart_objectives": [None if isinstance(r, Exception) else r.value for r in runs],
        "objective_trace": best.values,
        "regime": alpha.regime,
    }
    return _build_model(data, inducing, spec, alpha, config.solver, diagnostics)


def predict(model: GPModel, X_star, *, return_info: bool = False):
    """Predictive mean and variance in original target units.

    Variances below the solver jitter are clamped to it; ``return_info``
    adds a dict with the number of clamped entries.
    """
    X_star = kern._as_2d(X_star)
    D = model.inducing.Z.shape[1]
    if X_star.shape[1] != D:
        raise ValueError(f"inputs have {X_star.shape[1]} columns, model expects {D}")
    if not np.all(np.isfinite(X_star)):
        raise ValueError("prediction inputs must be finite")
    st = model.standardization
    Xs = X_star if st is None else st.transform_X(X_star)
    hp = model.hyperparams
    if Xs.shape[0] == 0:
        mean = np.zeros(0)
        var = np.zeros(0)
        clamped = 0
    else:
        A = sla.solve_triangular(model.chol_factor, kern.gram(model.kernel, model.inducing.Z, Xs), lower=True)
        mean = A.T @ model.weights
        var = hp.signal_variance + hp.noise_variance - np.sum(A * (model.covariance_factor @ A), axis=0)
        floor = model.solver.jitter_for([hp.signal_variance])
        low = var < floor
        clamped = int(np.sum(low))
        var = np.where(low, floor, var)
    if st is not None:
        mean = st.inverse_y(mean)
        var = var * st.y_std**2
    if return_info:
        return mean, var, {"clamped": clamped}
    return mean, var


# ---------------------------------------------------------------------------
# Alpha selection
# ---------------------------------------------------------------------------


def _splits(n, split, folds, seed):
    perm = np.random.default_rng(seed).permutation(n)
    if folds is None:
        if not 0 < split < 1:
            raise ValueError("split fraction must lie in (0, 1)")
        n_train = int(round(split * n))
        if not 1 <= n_train < n:
            raise ValueError("split leaves an empty training or test portion")
        return [(np.sort(perm[:n_train]), np.sort(perm[n_train:]))]
    if folds < 2 or folds > n:
        raise ValueError("folds must lie in [2, N]")
    chunks = np.array_split(perm, folds)
    return [(np.sort(np.concatenate(chunks[:k] + chunks[k + 1:])), np.sort(chunks[k])) for k in range(folds)]


def select_alpha(
    data: Dataset,
    grid,
    M: int,
    kernel: str | KernelSpec = "se",
    config: FitConfig = FitConfig(),
    *,
    split: float = 0.6,
    folds: int | None = None,
    seed: int = 0,
    strategy: str = RANDOM,
):
    """Choose alpha by held-out RMSE in original target units.

    Returns ``(alpha, table)`` where ``table`` has one dict per grid
    entry. Failed fits get ``rmse=None`` and are skipped; RMSE ties within
    1e-12 go to the smaller alpha.
    """
    grid = [float(a) for a in grid]
    if not grid:
        raise ValueError("alpha grid is empty")
    for a in grid:
        if not 0.0 <= a < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {a}")
    raw = destandardize(data)
    folds_ = _splits(raw.N, split, folds, seed)

    def evaluate(a):
        errs, objs, iters, conv = [], [], [], []
        try:
            for tr_idx, te_idx in folds_:
                train = raw.subset(tr_idx)
                m = fit(train, min(M, tr_idx.size), a, kernel, config, strategy=strategy)
                mean, _ = predict(m, raw.X[te_idx])
                errs.append(rmse(mean, raw.y[te_idx]))
                objs.append(m.diagnostics["final_objective"])
                iters.append(m.diagnostics["iterations"])
                conv.append(m.diagnostics["converged"])
        except (NumericalFailure, ValueError, np.linalg.LinAlgError) as exc:
            return {"alpha": a, "rmse": None, "objective": None, "iterations": None, "converged": False, "error": str(exc)}
        return {"alpha": a, "rmse": float(np.mean(errs)), "objective": float(np.mean(objs)),
                "iterations": int(sum(iters)), "converged": all(conv), "error": None}

    threads = config.solver.threads or kern.default_threads()
    if threads > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            table = list(pool.map(evaluate, grid))
    else:
        table = [evaluate(a) for a in grid]
    ok = [row for row in table if row["rmse"] is not None]
    if not ok:
        raise FitFailure("every alpha in the grid failed to fit")
    return as_alpha(argmin_alpha(ok), config.solver), table


def argmin_alpha(rows, tie: float = 1e-12) -> float:
    best = min(r["rmse"] for r in rows)
    return min(r["alpha"] for r in rows if r["rmse"] <= best + tie)
