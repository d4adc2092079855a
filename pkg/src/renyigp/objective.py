"""The alpha-ELBO, its gradient, limiting objectives and the upper bound.

For ``alpha`` in ``[0, 1)`` the training objective is

    L_alpha = log N(y; 0, Xi) - alpha / (2 (1 - alpha)) * log|A|

with ``Xi = s2 I + (1 - alpha) K + alpha Q`` and
``A = I + (1 - alpha) / s2 (K - Q)``, where ``Q`` is the Nyström
approximation of ``K`` at the inducing inputs. ``alpha = 0`` is the exact
marginal likelihood and ``alpha -> 1`` the Titsias bound.

Problems with ``N`` up to ``SolverConfig.dense_threshold`` are evaluated
with dense Cholesky factorizations; larger ones go through mBCG, Lanczos
quadrature and stochastic trace estimates with probes seeded from the
config, so repeated evaluations at the same point agree exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import kernels as kern
from .kernels import PARAM_NAMES, KernelSpec
from .linalg import (
    LinearOperator,
    NumericalFailure,
    SolverConfig,
    dense_logdet,
    detlemma_logdet_A,
    make_preconditioner,
    mbcg_solve,
    slq_logdet,
    woodbury_trace_term,
)

EXACT = "exact"
GENERAL = "general"
NEAR_ONE = "near-one"
LEMMA_DEGENERATE = "lemma-degenerate"

LOG_2PI = math.log(2 * math.pi)
_MAX_REJITTER = 3
_CACHE_LIMIT = 4000


@dataclass(frozen=True)
class AlphaParam:
    value: float
    near_one_tolerance: float = 1e-4
    lemma_tolerance: float = 1e-3

    def __post_init__(self):
        if not 0.0 <= self.value < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.value!r}")

    @property
    def regime(self) -> str:
        a = self.value
        if a == 0.0:
            return EXACT
        if a >= 1.0 - self.near_one_tolerance:
            return NEAR_ONE
        if abs(1.0 - 2.0 * a) < self.lemma_tolerance:
            return LEMMA_DEGENERATE
        return GENERAL

    @property
    def exponent(self) -> float:
        """``alpha / (2 (1 - alpha))``, the power on ``|A|``."""
        return self.value / (2.0 * (1.0 - self.value))


def as_alpha(alpha, config: SolverConfig = SolverConfig()) -> AlphaParam:
    if isinstance(alpha, AlphaParam):
        return alpha
    return AlphaParam(float(alpha), config.near_one_tolerance, config.lemma_tolerance)


@dataclass
class ObjectiveValue:
    value: float
    gaussian_term: float
    regularizer: float
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------


class _Kernel:
    """Kernel blocks between training inputs, cached when small enough."""

    def __init__(self, spec: KernelSpec, X: np.ndarray, config: SolverConfig):
        self.spec = spec
        self.X = X
        self.n = X.shape[0]
        self.threads = config.threads
        self._K = None
        self._dK = None

    def matrix(self) -> np.ndarray:
        if self._K is None:
            self._K = kern.gram(self.spec, self.X, threads=self.threads)
        return self._K

    def d_lengthscale(self) -> np.ndarray:
        if self._dK is None:
            self._dK = kern.gram_lengthscale_grad(self.spec, self.X)
        return self._dK

    def matmat(self, V, derivative=False, block=1024):
        if self.n <= _CACHE_LIMIT:
            return (self.d_lengthscale() if derivative else self.matrix()) @ V
        out = np.empty((self.n, V.shape[1]))
        for lo in range(0, self.n, block):
            hi = min(lo + block, self.n)
            if derivative:
                rows = kern.gram_lengthscale_grad(self.spec, self.X[lo:hi], self.X)
            else:
                rows = kern.gram(self.spec, self.X[lo:hi], self.X, threads=1)
            out[lo:hi] = rows @ V
        return out

    def row(self, i):
        if self.n <= _CACHE_LIMIT:
            return self.matrix()[i]
        return kern.gram(self.spec, self.X[i : i + 1], self.X, threads=1)[0]


class _Nystrom:
    """Inducing-point quantities shared by every regime."""

    def __init__(self, spec: KernelSpec, X, Z, config: SolverConfig):
        hp = spec.hyperparams
        self.K_fU = kern.gram(spec, X, Z, threads=config.threads)
        K_UU = kern.gram(spec, Z)
        self.jitter = config.jitter_for(np.diag(K_UU))
        self.jitter_scales = config.jitter is None
        self.K_UU = K_UU + self.jitter * np.eye(K_UU.shape[0])
        try:
            self.chol = sla.cho_factor(self.K_UU, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure("K_UU is not positive definite after jitter") from exc
        self.B = sla.cho_solve(self.chol, self.K_fU.T)
        self.q_diag = np.sum(self.K_fU * self.B.T, axis=1)
        self.resid_diag = np.maximum(hp.signal_variance - self.q_diag, 0.0)
        self.trace_resid = float(np.sum(self.resid_diag))
        self.spec = spec
        self.X = X
        self.Z = Z

    def Q(self) -> np.ndarray:
        Q = self.K_fU @ self.B
        return 0.5 * (Q + Q.T)

    def Q_matmat(self, V):
        return self.K_fU @ (self.B @ V)

    def derivative_blocks(self, name):
        """``(dK_fU, dK_UU)`` for a log-parameter, or ``None`` for the noise."""
        if name == "noise_variance":
            return None
        if name == "signal_variance":
            dK_UU = self.K_UU if self.jitter_scales else self.K_UU - self.jitter * np.eye(self.K_UU.shape[0])
            return self.K_fU, dK_UU
        return (
            kern.gram_lengthscale_grad(self.spec, self.X, self.Z),
            kern.gram_lengthscale_grad(self.spec, self.Z),
        )

    def dQ_matmat(self, blocks, V):
        dK_fU, dK_UU = blocks
        BV = self.B @ V
        return dK_fU @ BV + self.B.T @ (dK_fU.T @ V) - self.B.T @ (dK_UU @ BV)

    def dQ_dense(self, blocks):
        dK_fU, dK_UU = blocks
        P = dK_fU @ self.B
        return P + P.T - self.B.T @ dK_UU @ self.B

    def dQ_trace(self, blocks):
        dK_fU, dK_UU = blocks
        return float(2 * np.sum(dK_fU * self.B.T) - np.sum(self.B * (dK_UU @ self.B)))


def _prepare(X, y, Z, spec):
    X = kern._as_2d(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.size} entries")
    if X.shape[0] < 1:
        raise ValueError("need at least one training point")
    if Z is not None:
        Z = kern._as_2d(Z)
        if Z.shape[1] != X.shape[1]:
            raise ValueError("inducing inputs and training inputs differ in dimension")
        if Z.shape[0] < 1:
            raise ValueError("need at least one inducing input")
    return X, y, Z


def _factor(M, diagnostics):
    """Cholesky with up to three escalating re-jitters."""
    extra = 0.0
    scale = 1e-8 * float(np.mean(np.diag(M)))
    for attempt in range(_MAX_REJITTER + 1):
        try:
            c = sla.cho_factor(M + extra * np.eye(M.shape[0]), lower=True)
            if extra:
                diagnostics["rejitter"] = extra
            return c
        except np.linalg.LinAlgError:
            extra = scale * 10.0**attempt
    raise NumericalFailure("covariance is not positive definite after re-jittering")


def _chol_logdet(c) -> float:
    return float(2 * np.sum(np.log(np.diag(c[0]))))


def _param_index(wrt):
    wrt = tuple(wrt)
    for name in wrt:
        if name not in PARAM_NAMES:
            raise ValueError(f"unknown parameter {name!r}")
    return wrt


# ---------------------------------------------------------------------------
# Exact and SVGP objectives
# ---------------------------------------------------------------------------


def _exact_dense(X, y, spec, config, grad_wrt):
    hp = spec.hyperparams
    n = y.size
    kern_ = _Kernel(spec, X, config)
    K = kern_.matrix()
    diag = {}
    C = K + hp.noise_variance * np.eye(n)
    c = _factor(C, diag)
    a = sla.cho_solve(c, y)
    value = -0.5 * y @ a - 0.5 * _chol_logdet(c) - 0.5 * n * LOG_2PI
    grad = None
    if grad_wrt:
        Cinv = sla.cho_solve(c, np.eye(n))
        grad = []
        for name in grad_wrt:
            if name == "noise_variance":
                dC = hp.noise_variance * np.eye(n)
            elif name == "signal_variance":
                dC = K
            else:
                dC = kern_.d_lengthscale()
            grad.append(0.5 * a @ dC @ a - 0.5 * np.sum(Cinv * dC))
        grad = np.array(grad)
    diag["path"] = "dense"
    return ObjectiveValue(float(value), float(value), 0.0, diag), grad


def _iterative_solve(op, rhs, config, n_probe, rng_seed):
    """One mBCG call over ``[rhs, probes]``; returns solutions, logdet and the preconditioner."""
    P = make_preconditioner(op, config)
    rng = np.random.default_rng(rng_seed)
    probes = P.sample(rng, op.n, n_probe, config.probe_distribution)
    cols = np.hstack([rhs, probes])
    res = mbcg_solve(op, cols, config, preconditioner=P, tridiagonal=True)
    k = rhs.shape[1]
    tri = type(res.tridiagonals)(res.tridiagonals.diagonals[k:], res.tridiagonals.offdiagonals[k:])
    logdet = slq_logdet(tri, op.n, P)
    info = {
        "path": "iterative",
        "cg_converged": res.converged,
        "cg_max_residual": float(np.max(res.residuals)) if res.residuals.size else 0.0,
        "cg_iterations": int(np.max(res.iterations)) if res.iterations.size else 0,
        "probe_count": n_probe,
    }
    if not res.converged:
        info["degraded_accuracy"] = True
    return res.solutions[:, :k], res.solutions[:, k:], probes, P, logdet, info


def _probe_trace(inv_probes, probes, P, apply_d):
    """``Tr(op^{-1} D)`` from probes ``z ~ N(0, P)``: mean of ``(op^{-1} z)^T D (P^{-1} z)``."""
    dz = apply_d(P.solve(probes))
    return float(np.sum(inv_probes * dz) / probes.shape[1])


def _exact_iterative(X, y, spec, config, grad_wrt):
    hp = spec.hyperparams
    n = y.size
    kern_ = _Kernel(spec, X, config)
    s2 = hp.noise_variance
    op = LinearOperator(
        n,
        lambda V: s2 * V + kern_.matmat(V),
        diagonal=np.full(n, hp.signal_variance + s2),
        row=kern_.row,
        shift=s2,
    )
    sols, inv_probes, probes, P, logdet, info = _iterative_solve(op, y[:, None], config, config.probe_count, config.seed)
    a = sols[:, 0]
    value = -0.5 * y @ a - 0.5 * logdet - 0.5 * n * LOG_2PI
    grad = None
    if grad_wrt:
        grad = []
        for name in grad_wrt:
            if name == "noise_variance":
                apply = lambda V: s2 * V
            elif name == "signal_variance":
                apply = kern_.matmat
            else:
                apply = lambda V: kern_.matmat(V, derivative=True)
            quad = float(a @ apply(a[:, None])[:, 0])
            grad.append(0.5 * quad - 0.5 * _probe_trace(inv_probes, probes, P, apply))
        grad = np.array(grad)
    return ObjectiveValue(float(value), float(value), 0.0, info), grad


def _exact(X, y, spec, config, grad_wrt=()):
    if config.is_dense(y.size):
        return _exact_dense(X, y, spec, config, grad_wrt)
    return _exact_iterative(X, y, spec, config, grad_wrt)


def exact_loglik(X, y, spec: KernelSpec, config: SolverConfig = SolverConfig()) -> float:
    """``log N(y; 0, s2 I + K)``."""
    X, y, _ = _prepare(X, y, None, spec)
    return _exact(X, y, spec, config)[0].value


def _svgp(X, y, Z, spec, config, grad_wrt=()):
    """Titsias bound via the Woodbury form of ``(s2 I + Q)^{-1}``; exact at any N."""
    hp = spec.hyperparams
    n = y.size
    s2 = hp.noise_variance
    ny = _Nystrom(spec, X, Z, config)
    diag = {"path": "woodbury"}
    inner = ny.K_UU + ny.K_fU.T @ ny.K_fU / s2
    inner = 0.5 * (inner + inner.T)
    ci = _factor(inner, diag)
    logdet = _chol_logdet(ci) - _chol_logdet(ny.chol) + n * math.log(s2)

    def solve(V):
        return V / s2 - ny.K_fU @ sla.cho_solve(ci, ny.K_fU.T @ V) / s2**2

    a = solve(y)
    gaussian = -0.5 * y @ a - 0.5 * logdet - 0.5 * n * LOG_2PI
    correction = -ny.trace_resid / (2 * s2)
    value = gaussian + correction
    diag["trace_residual"] = ny.trace_resid
    grad = None
    if grad_wrt:
        # Tr((s2 I + Q)^{-1} D) for D = dQ (symmetric, low rank) computed via dense N x M blocks
        grad = []
        for name in grad_wrt:
            blocks = ny.derivative_blocks(name)
            if blocks is None:
                tr_inv = n / s2 - np.trace(sla.cho_solve(ci, ny.K_fU.T @ ny.K_fU)) / s2**2
                g = 0.5 * s2 * (a @ a) - 0.5 * s2 * tr_inv + ny.trace_resid / (2 * s2)
            else:
                dQa = ny.dQ_matmat(blocks, a[:, None])[:, 0]
                dK_fU, dK_UU = blocks
                # dQ = dK_fU B + B^T dK_fU^T - B^T dK_UU B; trace against (s2 I + Q)^{-1}
                SB = solve(ny.B.T)  # N x M
                tr = 2 * np.sum(SB * dK_fU) - np.sum((ny.B @ SB) * dK_UU)
                dtrK = n * hp.signal_variance if name == "signal_variance" else 0.0
                g = 0.5 * a @ dQa - 0.5 * tr - (dtrK - ny.dQ_trace(blocks)) / (2 * s2)
            grad.append(g)
        grad = np.array(grad)
    return ObjectiveValue(float(value), float(gaussian), float(correction), diag), grad


def svgp_elbo(X, y, Z, spec: KernelSpec, config: SolverConfig = SolverConfig()) -> float:
    """``log N(y; 0, s2 I + Q) - Tr(K - Q) / (2 s2)``."""
    X, y, Z = _prepare(X, y, Z, spec)
    return _svgp(X, y, Z, spec, config)[0].value


# ---------------------------------------------------------------------------
# General alpha
# ---------------------------------------------------------------------------


def _general_dense(X, y, Z, spec, alpha: AlphaParam, config, grad_wrt):
    hp = spec.hyperparams
    n = y.size
    s2 = hp.noise_variance
    al = alpha.value
    kern_ = _Kernel(spec, X, config)
    ny = _Nystrom(spec, X, Z, config)
    K = kern_.matrix()
    Q = ny.Q()
    diag = {"path": "dense", "regime": alpha.regime, "trace_residual": ny.trace_resid, "nystrom_jitter": ny.jitter}
    Xi = s2 * np.eye(n) + (1 - al) * K + al * Q
    c = _factor(Xi, diag)
    a = sla.cho_solve(c, y)
    logdet_xi = _chol_logdet(c)
    gaussian = -0.5 * y @ a - 0.5 * logdet_xi - 0.5 * n * LOG_2PI
    use_lemma = alpha.regime == GENERAL
    W = sla.cho_solve(c, ny.K_fU)
    R = K - Q
    if use_lemma:
        logdet_A = detlemma_logdet_A(ny.K_UU, ny.K_fU, W, al, s2, logdet_xi, lemma_tolerance=alpha.lemma_tolerance)
        diag["logdet_A_route"] = "determinant-lemma"
    else:
        A = np.eye(n) + (1 - al) / s2 * R
        cA = _factor(A, diag)
        logdet_A = _chol_logdet(cA)
        diag["logdet_A_route"] = "direct"
    regularizer = -alpha.exponent * logdet_A
    value = gaussian + regularizer
    grad = None
    if grad_wrt:
        Xi_inv = sla.cho_solve(c, np.eye(n))
        grad = []
        for name in grad_wrt:
            blocks = ny.derivative_blocks(name)
            if blocks is None:
                dXi = s2 * np.eye(n)
                dA = -(1 - al) / s2 * R
            else:
                dK = K if name == "signal_variance" else kern_.d_lengthscale()
                dQ = ny.dQ_dense(blocks)
                dXi = (1 - al) * dK + al * dQ
                dA = (1 - al) / s2 * (dK - dQ)
            g = 0.5 * a @ dXi @ a - 0.5 * np.sum(Xi_inv * dXi)
            if use_lemma:
                tr_A = woodbury_trace_term(
                    ny.K_UU, ny.K_fU, W, al, s2, lambda V: dA @ V, float(np.sum(Xi_inv * dA)),
                    lemma_tolerance=alpha.lemma_tolerance,
                )
            else:
                tr_A = float(np.trace(sla.cho_solve(cA, dA)))
            grad.append(g - alpha.exponent * tr_A)
        grad = np.array(grad)
    return ObjectiveValue(float(value), float(gaussian), float(regularizer), diag), grad


def _general_iterative(X, y, Z, spec, alpha: AlphaParam, config, grad_wrt):
    hp = spec.hyperparams
    n = y.size
    s2 = hp.noise_variance
    al = alpha.value
    kern_ = _Kernel(spec, X, config)
    ny = _Nystrom(spec, X, Z, config)
    xi_diag = s2 + (1 - al) * hp.signal_variance + al * ny.q_diag
    xi_op = LinearOperator(
        n,
        lambda V: s2 * V + (1 - al) * kern_.matmat(V) + al * ny.Q_matmat(V),
        diagonal=xi_diag,
        row=lambda i: (1 - al) * kern_.row(i) + al * (ny.K_fU[i] @ ny.B),
        shift=s2,
    )
    rhs = np.hstack([y[:, None], ny.K_fU])
    sols, inv_probes, probes, P, logdet_xi, info = _iterative_solve(xi_op, rhs, config, config.probe_count, config.seed)
    a = sols[:, 0]
    W = sols[:, 1:]
    gaussian = -0.5 * y @ a - 0.5 * logdet_xi - 0.5 * n * LOG_2PI
    diag = dict(info, regime=alpha.regime, trace_residual=ny.trace_resid, nystrom_jitter=ny.jitter)

    def R_matmat(V):
        return kern_.matmat(V) - ny.Q_matmat(V)

    use_lemma = alpha.regime == GENERAL
    if use_lemma:
        logdet_A = detlemma_logdet_A(ny.K_UU, ny.K_fU, W, al, s2, logdet_xi, lemma_tolerance=alpha.lemma_tolerance)
        diag["logdet_A_route"] = "determinant-lemma"
    else:
        a_op = LinearOperator(
            n,
            lambda V: V + (1 - al) / s2 * R_matmat(V),
            diagonal=1 + (1 - al) / s2 * ny.resid_diag,
            row=lambda i: (1 - al) / s2 * (kern_.row(i) - ny.K_fU[i] @ ny.B),
            shift=1.0,
        )
        _, A_inv_probes, A_probes, PA, logdet_A, a_info = _iterative_solve(
            a_op, np.zeros((n, 0)), config, config.probe_count, config.seed + 1
        )
        diag["logdet_A_route"] = "lanczos"
        diag["A_cg_converged"] = a_info["cg_converged"]
    regularizer = -alpha.exponent * logdet_A
    value = gaussian + regularizer
    grad = None
    if grad_wrt:
        grad = []
        for name in grad_wrt:
            blocks = ny.derivative_blocks(name)
            if blocks is None:
                dXi = lambda V: s2 * V
                dA = lambda V: -(1 - al) / s2 * R_matmat(V)
            else:
                if name == "signal_variance":
                    dK = kern_.matmat
                else:
                    dK = lambda V: kern_.matmat(V, derivative=True)
                dXi = lambda V, dK=dK, blocks=blocks: (1 - al) * dK(V) + al * ny.dQ_matmat(blocks, V)
                dA = lambda V, dK=dK, blocks=blocks: (1 - al) / s2 * (dK(V) - ny.dQ_matmat(blocks, V))
            quad = float(a @ dXi(a[:, None])[:, 0])
            g = 0.5 * quad - 0.5 * _probe_trace(inv_probes, probes, P, dXi)
            if use_lemma:
                tr_xi_dA = _probe_trace(inv_probes, probes, P, dA)
                tr_A = woodbury_trace_term(ny.K_UU, ny.K_fU, W, al, s2, dA, tr_xi_dA, lemma_tolerance=alpha.lemma_tolerance)
            else:
                tr_A = _probe_trace(A_inv_probes, A_probes, PA, dA)
            grad.append(g - alpha.exponent * tr_A)
        grad = np.array(grad)
    return ObjectiveValue(float(value), float(gaussian), float(regularizer), diag), grad


def alpha_elbo_and_grad(X, y, Z, spec: KernelSpec, alpha, config: SolverConfig = SolverConfig(), wrt=PARAM_NAMES):
    """Objective value and its gradient with respect to the log-parameters in ``wrt``.

    Pass ``wrt=()`` to skip the gradient (returned as ``None``).
    """
    alpha = as_alpha(alpha, config)
    grad_wrt = _param_index(wrt)
    X, y, Z = _prepare(X, y, Z if alpha.regime != EXACT else Z, spec)
    regime = alpha.regime
    if regime == EXACT:
        obj, grad = _exact(X, y, spec, config, grad_wrt)
        obj.diagnostics["regime"] = regime
    elif regime == NEAR_ONE:
        if Z is None:
            raise ValueError("inducing inputs are required for alpha > 0")
        obj, grad = _svgp(X, y, Z, spec, config, grad_wrt)
        obj.diagnostics["regime"] = regime
    else:
        if Z is None:
            raise ValueError("inducing inputs are required for alpha > 0")
        if config.is_dense(y.size):
            obj, grad = _general_dense(X, y, Z, spec, alpha, config, grad_wrt)
        else:
            obj, grad = _general_iterative(X, y, Z, spec, alpha, config, grad_wrt)
    if not np.isfinite(obj.value):
        raise NumericalFailure("objective is not finite")
    return obj, grad


def alpha_elbo(X, y, Z, spec: KernelSpec, alpha, config: SolverConfig = SolverConfig()) -> ObjectiveValue:
    return alpha_elbo_and_grad(X, y, Z, spec, alpha, config, wrt=())[0]


def alpha_elbo_grad(X, y, Z, spec: KernelSpec, alpha, config: SolverConfig = SolverConfig(), wrt=PARAM_NAMES) -> np.ndarray:
    return alpha_elbo_and_grad(X, y, Z, spec, alpha, config, wrt=wrt)[1]


# ---------------------------------------------------------------------------
# Upper bound and divergences
# ---------------------------------------------------------------------------


def upper_bound(X, y, Z, spec: KernelSpec, alpha, config: SolverConfig = SolverConfig()) -> float:
    """``-1/2 log|2 pi Xi| - 1/2 y^T (Xi + alpha Tr(K - Q) I)^{-1} y``.

    Never below the exact log marginal likelihood.
    """
    alpha = as_alpha(alpha, config)
    X, y, Z = _prepare(X, y, Z, spec)
    if alpha.value == 0.0:
        return exact_loglik(X, y, spec, config)
    hp = spec.hyperparams
    n = y.size
    s2 = hp.noise_variance
    al = alpha.value
    ny = _Nystrom(spec, X, Z, config)
    shift = al * ny.trace_resid
    kern_ = _Kernel(spec, X, config)
    if config.is_dense(n):
        Xi = s2 * np.eye(n) + (1 - al) * kern_.matrix() + al * ny.Q()
        diag = {}
        logdet = _chol_logdet(_factor(Xi, diag))
        quad = y @ sla.cho_solve(_factor(Xi + shift * np.eye(n), diag), y)
    else:
        def base(V):
            return (1 - al) * kern_.matmat(V) + al * ny.Q_matmat(V)

        row = lambda i: (1 - al) * kern_.row(i) + al * (ny.K_fU[i] @ ny.B)
        xi_diag = s2 + (1 - al) * hp.signal_variance + al * ny.q_diag
        xi_op = LinearOperator(n, lambda V: s2 * V + base(V), diagonal=xi_diag, row=row, shift=s2)
        _, _, _, _, logdet, _ = _iterative_solve(xi_op, np.zeros((n, 0)), config, config.probe_count, config.seed)
        sh_op = LinearOperator(n, lambda V: (s2 + shift) * V + base(V), diagonal=xi_diag + shift, row=row, shift=s2 + shift)
        res = mbcg_solve(sh_op, y, config, preconditioner=make_preconditioner(sh_op, config))
        quad = y @ res.solutions
    return float(-0.5 * logdet - 0.5 * n * LOG_2PI - 0.5 * quad)


def measured_divergence(X, y, Z, spec: KernelSpec, alpha, config: SolverConfig = SolverConfig()) -> float:
    """``log p(y) - L_alpha``: the Rényi divergence between the variational and true posteriors."""
    X, y, Z = _prepare(X, y, Z, spec)
    return exact_loglik(X, y, spec, config) - alpha_elbo(X, y, Z, spec, alpha, config).value


def renyi_div_gaussians(mean1, cov1, mean2, cov2, alpha) -> float:
    """Closed-form ``D_alpha[N(m1, S1) || N(m2, S2)]`` for ``alpha`` in ``[0, 1)``.

    With ``S = (1 - alpha) S1 + alpha S2``:

        D = alpha/2 d^T S^{-1} d + (log|S| - (1-alpha) log|S1| - alpha log|S2|) / (2 (1 - alpha))
    """
    alpha = float(alpha)
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    m1 = np.atleast_1d(np.asarray(mean1, dtype=float))
    m2 = np.atleast_1d(np.asarray(mean2, dtype=float))
    S1 = np.atleast_2d(np.asarray(cov1, dtype=float))
    S2 = np.atleast_2d(np.asarray(cov2, dtype=float))
    blend = (1 - alpha) * S1 + alpha * S2
    try:
        c = np.linalg.cholesky(blend)
        ld1 = dense_logdet(S1)
        ld2 = dense_logdet(S2)
    except (np.linalg.LinAlgError, NumericalFailure) as exc:
        raise ValueError("covariances and their blend must be positive definite") from exc
    d = m1 - m2
    w = sla.solve_triangular(c, d, lower=True)
    ld_blend = 2 * np.sum(np.log(np.diag(c)))
    return float(0.5 * alpha * w @ w + (ld_blend - (1 - alpha) * ld1 - alpha * ld2) / (2 * (1 - alpha)))


def kl_gaussians(mean1, cov1, mean2, cov2) -> float:
    m1 = np.atleast_1d(np.asarray(mean1, dtype=float))
    m2 = np.atleast_1d(np.asarray(mean2, dtype=float))
    S1 = np.atleast_2d(np.asarray(cov1, dtype=float))
    S2 = np.atleast_2d(np.asarray(cov2, dtype=float))
    d = m2 - m1
    S2inv_S1 = np.linalg.solve(S2, S1)
    return float(0.5 * (np.trace(S2inv_S1) + d @ np.linalg.solve(S2, d) - m1.size + dense_logdet(S2) - dense_logdet(S1)))


def xi_solve(X, y, Z, spec: KernelSpec, alpha, config: SolverConfig = SolverConfig()):
    """Return ``(Xi^{-1} y, Xi^{-1} K_fU, info)`` for the blended covariance.

    In the near-one regime ``Xi`` is ``s2 I + Q`` and the solve uses the
    Woodbury identity; otherwise dense Cholesky or mBCG per the config.
    """
    alpha = as_alpha(alpha, config)
    X, y, Z = _prepare(X, y, Z, spec)
    hp = spec.hyperparams
    n = y.size
    s2 = hp.noise_variance
    al = 1.0 if alpha.regime == NEAR_ONE else alpha.value
    ny = _Nystrom(spec, X, Z, config)
    rhs = np.hstack([y[:, None], ny.K_fU])
    info = {"regime": alpha.regime}
    if alpha.regime == NEAR_ONE:
        inner = ny.K_UU + ny.K_fU.T @ ny.K_fU / s2
        ci = _factor(0.5 * (inner + inner.T), info)
        sol = rhs / s2 - ny.K_fU @ sla.cho_solve(ci, ny.K_fU.T @ rhs) / s2**2
        info["path"] = "woodbury"
    elif config.is_dense(n):
        kern_ = _Kernel(spec, X, config)
        Xi = s2 * np.eye(n) + (1 - al) * kern_.matrix() + al * ny.Q()
        sol = sla.cho_solve(_factor(Xi, info), rhs)
        info["path"] = "dense"
        info["residual"] = float(np.linalg.norm(Xi @ sol[:, 0] - y) / max(np.linalg.norm(y), 1e-300))
    else:
        kern_ = _Kernel(spec, X, config)
        op = LinearOperator(
            n,
            lambda V: s2 * V + (1 - al) * kern_.matmat(V) + al * ny.Q_matmat(V),
            diagonal=s2 + (1 - al) * hp.signal_variance + al * ny.q_diag,
            row=lambda i: (1 - al) * kern_.row(i) + al * (ny.K_fU[i] @ ny.B),
            shift=s2,
        )
        res = mbcg_solve(op, rhs, config, preconditioner=make_preconditioner(op, config))
        sol = res.solutions
        info.update(path="iterative", cg_converged=res.converged, residual=float(res.residuals[0]))
    info["nystrom_jitter"] = ny.jitter
    return sol[:, 0], sol[:, 1:], info


def xi_matvec(X, v, Z, spec: KernelSpec, alpha, config: SolverConfig = SolverConfig()) -> np.ndarray:
    """``Xi v`` (with ``Xi = s2 I + Q`` in the near-one regime)."""
    alpha = as_alpha(alpha, config)
    X, v, Z = _prepare(X, v, Z, spec)
    al = 1.0 if alpha.regime == NEAR_ONE else alpha.value
    ny = _Nystrom(spec, X, Z, config)
    kern_ = _Kernel(spec, X, config)
    out = spec.hyperparams.noise_variance * v + al * ny.Q_matmat(v[:, None])[:, 0]
    if al < 1.0:
        out += (1 - al) * kern_.matmat(v[:, None])[:, 0]
    return out
