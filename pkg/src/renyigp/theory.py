"""Numerical evaluators for the convergence bounds and an empirical check harness.

The bounds control the Rényi divergence between the sparse variational
posterior and the exact one. With ``S = (M + 1) C + 2 N v0 eps``:

    T1 = alpha S / (2 delta s2) + (1/delta) alpha/(2(1-alpha)) N log(1 + (1-alpha) S / (s2 N))
    T2 = same log term + alpha S / (2 delta s2) * ||y||^2 / s2

``C`` is the eigen tail ``sum_{m > M} lambda_m(K_ff)`` of the Gram matrix,
which is about ``N`` times the operator tail.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels as kern
from .kernels import KernelSpec, SeSpectrum, se_spectrum
from .linalg import EPS_APPROX, NumericalFailure, SolverConfig, kdpp_sample
from .objective import (
    alpha_elbo,
    as_alpha,
    exact_loglik,
    upper_bound,
)


@dataclass(frozen=True)
class BoundInputs:
    N: int
    M: int
    alpha: float
    delta: float
    noise_variance: float
    eigen_tail: float
    v0: float = 1.0
    epsilon: float = 0.0
    gamma: float = 1.0
    y_norm_sq: float = 0.0
    R: float | None = None
    near_one_tolerance: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.epsilon < 0 or self.eigen_tail < 0:
            raise ValueError("epsilon and eigen_tail must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.N < 1 or self.M < 0:
            raise ValueError("need N >= 1 and M >= 0")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")
        if self.R is not None and self.y_norm_sq > self.R * self.N * (1 + 1e-12):
            raise ValueError("||y||^2 exceeds R * N")

    @property
    def spread(self) -> float:
        """``(M + 1) C + 2 N v0 eps``."""
        return (self.M + 1) * self.eigen_tail + 2 * self.N * self.v0 * self.epsilon


def _log_term(inp: BoundInputs) -> float:
    a, s2, N = inp.alpha, inp.noise_variance, inp.N
    S = inp.spread
    if a >= 1.0 - inp.near_one_tolerance:
        return a * S / (2 * inp.delta * s2)
    return a / (2 * (1 - a)) * N * math.log1p((1 - a) * S / (s2 * N)) / inp.delta


def theorem1_bound(inp: BoundInputs) -> float:
    lead = inp.alpha * inp.spread / (2 * inp.delta * inp.noise_variance)
    return lead + _log_term(inp)


def theorem2_bound(inp: BoundInputs) -> float:
    lead = inp.alpha * inp.spread / (2 * inp.delta * inp.noise_variance)
    return _log_term(inp) + lead * (inp.y_norm_sq / inp.noise_variance)


def corollary_epsilon(N: int, gamma: float, delta: float, signal_variance: float, noise_variance: float) -> float:
    """k-DPP accuracy ``delta s2 / (v N^(gamma + 2))`` used by the SE corollary."""
    return delta * noise_variance / (signal_variance * N ** (gamma + 2))


def se_corollary_inducing_count(N: int, gamma: float, delta: float, spectrum: SeSpectrum, noise_variance: float) -> int:
    """``ceil(((3 + gamma) log N + log eta) / log(1/B))``, at least 1."""
    if N < 2:
        raise ValueError("need N >= 2")
    if gamma <= 0 or not 0 < delta < 1:
        raise ValueError("need gamma > 0 and delta in (0, 1)")
    sp = spectrum
    eta = sp.signal_variance * math.sqrt(2 * sp.a) / (sp.a * math.sqrt(sp.A) * noise_variance * delta * (1 - sp.B))
    M = ((3 + gamma) * math.log(N) + math.log(eta)) / math.log(1 / sp.B)
    return max(1, math.ceil(M))


def corollary_rate(N: int, gamma: float, alpha: float, R: float, noise_variance: float) -> float:
    """``alpha / N^gamma * (2 R / s2 + 2 / N)``."""
    return alpha / N**gamma * (2 * R / noise_variance + 2 / N)


def matern_inducing_exponent(r: int, gamma: float) -> float:
    """Smallest ``t`` with ``M = N^t`` sufficient for a Matérn ``r + 1/2`` kernel."""
    if r < 1 or gamma <= 0:
        raise ValueError("need r >= 1 and gamma > 0")
    return (gamma + 2) / (2 * r)


def risk_bound_rhs(logp_theta: float, logp_theta_star: float, L_alpha_terms, n: int, alpha: float, delta: float) -> float:
    """Right-hand side of the Bayes-risk bound.

    ``L_alpha_terms`` is ``(gaussian_term, regularizer)`` with the
    regularizer equal to ``log C_x``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if n < 1:
        raise ValueError("n must be >= 1")
    gaussian, log_cx = L_alpha_terms
    bracket = logp_theta + logp_theta_star - gaussian - log_cx
    return alpha / (n * (1 - alpha)) * bracket + math.log(1 / delta) / (n * (1 - alpha))


def gram_eigen_tail(K, M: int) -> float:
    """``sum_{m > M} lambda_m(K)`` with eigenvalues sorted in decreasing order."""
    w = np.linalg.eigvalsh(np.asarray(K, dtype=float))[::-1]
    return float(np.sum(np.clip(w[M:], 0.0, None)))


# ---------------------------------------------------------------------------
# Sandwich checks
# ---------------------------------------------------------------------------


@dataclass
class SandwichResult:
    """Per-instance ordering checks.

    ``lower_gap = log p(y) - L_alpha`` and ``upper_gap = U - log p(y)``.
    ``neg_log_cx`` is ``-log C_x``; ``am_gm_gap`` is the slack in
    ``-log C_x <= alpha/(2(1-alpha)) N log(Tr(A)/N)``; ``eigen_estimate`` is
    ``-log C_x + ||y||^2/2 (1/s2 - 1/(s2 + alpha lambda_max(K - Q)))``,
    which dominates the realized divergence.
    """

    lower_gap: float
    upper_gap: float
    neg_log_cx: float
    am_gm_gap: float
    eigen_estimate: float
    trace_residual: float


def sandwich_check(data, inducing, spec: KernelSpec, alpha, config: SolverConfig = SolverConfig()) -> SandwichResult:
    """Dense check of ``L_alpha <= log p(y) <= U`` plus regularizer diagnostics.

    ``data`` is an ``(X, y)`` pair or anything with ``X`` and ``y``
    attributes; ``inducing`` is a ``Z`` array or has a ``Z`` attribute.
    """
    X, y = (data.X, data.y) if hasattr(data, "X") else data
    Z = inducing.Z if hasattr(inducing, "Z") else inducing
    X = kern._as_2d(X)
    y = np.asarray(y, dtype=float).ravel()
    Z = kern._as_2d(Z)
    if not config.is_dense(y.size):
        raise ValueError("sandwich_check needs N within the dense threshold")
    alpha = as_alpha(alpha, config)
    exact = exact_loglik(X, y, spec, config)
    obj = alpha_elbo(X, y, Z, spec, alpha, config)
    upper = upper_bound(X, y, Z, spec, alpha, config)
    hp = spec.hyperparams
    s2 = hp.noise_variance
    K = kern.gram(spec, X)
    K_UU = kern.gram(spec, Z)
    K_UU += config.jitter_for(np.diag(K_UU)) * np.eye(Z.shape[0])
    K_fU = kern.gram(spec, X, Z)
    R = K - K_fU @ np.linalg.solve(K_UU, K_fU.T)
    R = 0.5 * (R + R.T)
    a = alpha.value
    n = y.size
    lam = max(float(np.linalg.eigvalsh(R)[-1]), 0.0)
    tr = float(np.trace(R))
    if a == 0.0:
        neg_log_cx, am_gm = 0.0, 0.0
    elif alpha.regime == "near-one":
        neg_log_cx = -obj.regularizer
        am_gm = 0.0
    else:
        neg_log_cx = -obj.regularizer
        am_gm = alpha.exponent * n * math.log1p((1 - a) * tr / (s2 * n)) - neg_log_cx
    eigen = neg_log_cx + 0.5 * float(y @ y) * (1 / s2 - 1 / (s2 + a * lam))
    return SandwichResult(exact - obj.value, upper - exact, neg_log_cx, am_gm, eigen, tr)


@dataclass
class ExpectationBracket:
    """Monte-Carlo estimate of ``E_y[D_alpha]`` against its deterministic bracket."""

    mean: float
    standard_error: float
    exact: float
    lower: float
    upper: float
    draws: int


def expected_divergence_bracket(X, Z, spec: KernelSpec, alpha, draws: int = 200, seed: int = 0,
                                config: SolverConfig = SolverConfig()) -> ExpectationBracket:
    """Average ``log p(y) - L_alpha`` over ``y`` drawn from the GP prior.

    The bracket is ``[-log C_x, -log C_x + alpha Tr(K - Q) / (2 s2)]``.
    ``exact`` is the closed form ``KL(N(0, K + s2 I) || N(0, Xi)) - log C_x``.
    """
    X = kern._as_2d(X)
    Z = kern._as_2d(Z)
    alpha = as_alpha(alpha, config)
    a = alpha.value
    hp = spec.hyperparams
    s2 = hp.noise_variance
    n = X.shape[0]
    K = kern.gram(spec, X)
    K_UU = kern.gram(spec, Z)
    K_UU += config.jitter_for(np.diag(K_UU)) * np.eye(Z.shape[0])
    K_fU = kern.gram(spec, X, Z)
    Q = K_fU @ np.linalg.solve(K_UU, K_fU.T)
    Q = 0.5 * (Q + Q.T)
    C = K + s2 * np.eye(n)
    Xi = s2 * np.eye(n) + (1 - a) * K + a * Q
    L = np.linalg.cholesky(C)
    rng = np.random.default_rng(seed)
    Y = L @ rng.standard_normal((n, draws))
    Ci = np.linalg.inv(C)
    Xii = np.linalg.inv(Xi)
    ld_c = np.linalg.slogdet(C)[1]
    ld_xi = np.linalg.slogdet(Xi)[1]
    obj = alpha_elbo(X, np.zeros(n), Z, spec, alpha, config)
    neg_log_cx = -obj.regularizer
    quad = 0.5 * np.sum(Y * ((Xii - Ci) @ Y), axis=0)
    samples = quad + 0.5 * (ld_xi - ld_c) + neg_log_cx
    kl = 0.5 * (np.trace(Xii @ C) - n + ld_xi - ld_c)
    tr = float(np.trace(K - Q))
    return ExpectationBracket(
        float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(draws)), float(kl + neg_log_cx),
        neg_log_cx, neg_log_cx + a * tr / (2 * s2), draws,
    )


# ---------------------------------------------------------------------------
# Empirical verification
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    trial: int
    theorem1_value: float
    theorem2_value: float
    corollary_M: int
    measured_divergence: float | None = None
    violation: bool | None = None
    theorem1_violation: bool | None = None
    eigen_tail: float | None = None
    error: str | None = None


@dataclass
class VerificationSummary:
    reports: list
    delta: float
    M: int
    epsilon: float
    failures: int = 0
    violations: int = 0
    fraction: float = 0.0
    envelope: float = 0.0
    passed: bool = False
    extras: dict = field(default_factory=dict)


def monte_carlo_envelope(delta: float, trials: int) -> float:
    """``delta + 3 sqrt(delta (1 - delta) / trials)``."""
    return delta + 3 * math.sqrt(delta * (1 - delta) / trials)


def verify_bounds_empirically(
    trials: int,
    N: int,
    M: int | None,
    alpha,
    spec: KernelSpec,
    delta: float,
    seed: int = 0,
    *,
    D: int = 1,
    gamma: float = 1.0,
    epsilon: float | None = None,
    config: SolverConfig = SolverConfig(),
    threads: int | None = None,
) -> VerificationSummary:
    """Draw prior datasets, sample inducing points and compare divergences to the bounds.

    Inputs are i.i.d. standard normal in ``D`` dimensions and targets are
    drawn from the GP prior of ``spec``. Inducing points come from the
    swap-chain k-DPP sampler run at accuracy ``epsilon`` (default: the SE
    corollary value), and the eigen tail is the tail of the empirical
    Gram spectrum. ``M=None`` uses the SE corollary count. A trial counts
    as a violation when the divergence exceeds the second bound.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    if not config.is_dense(N):
        raise ValueError("verification needs N within the dense threshold")
    hp = spec.hyperparams
    s2 = hp.noise_variance
    a = as_alpha(alpha, config).value
    m_star = se_corollary_inducing_count(N, gamma, delta, se_spectrum(hp), s2) if N >= 2 else 1
    M = min(m_star, N) if M is None else int(M)
    if not 1 <= M <= N:
        raise ValueError(f"M must lie in [1, {N}]")
    eps = corollary_epsilon(N, gamma, delta, hp.signal_variance, s2) if epsilon is None else float(epsilon)
    streams = np.random.SeedSequence(seed).spawn(trials)

    def run(i):
        rng = np.random.default_rng(streams[i])
        try:
            X = rng.standard_normal((N, D))
            K = kern.gram(spec, X)
            L = np.linalg.cholesky(K + s2 * np.eye(N))
            y = L @ rng.standard_normal(N)
            Kj = K + config.jitter_for(np.diag(K)) * np.eye(N)
            idx = kdpp_sample(Kj, M, EPS_APPROX, epsilon=max(eps, 1e-300), seed=rng)
            tail = gram_eigen_tail(K, M)
            inp = BoundInputs(N, M, a, delta, s2, tail, hp.signal_variance, eps, gamma, float(y @ y))
            t1, t2 = theorem1_bound(inp), theorem2_bound(inp)
            div = 0.0 if a == 0.0 else _divergence(X, y, X[idx], spec, a, config)
            return BoundReport(i, t1, t2, m_star, div, bool(div > t2), bool(div > t1), tail)
        except (NumericalFailure, ValueError, np.linalg.LinAlgError) as exc:
            return BoundReport(i, math.nan, math.nan, m_star, error=str(exc))

    threads = kern.default_threads() if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(run, range(trials)))
    else:
        reports = [run(i) for i in range(trials)]
    ok = [r for r in reports if r.error is None]
    violations = sum(1 for r in ok if r.violation)
    fraction = violations / len(ok) if ok else math.nan
    env = monte_carlo_envelope(delta, len(ok) if ok else trials)
    return VerificationSummary(
        reports, delta, M, eps, len(reports) - len(ok), violations, fraction, env,
        bool(ok) and fraction <= env,
    )


def _divergence(X, y, Z, spec, alpha, config):
    return exact_loglik(X, y, spec, config) - alpha_elbo(X, y, Z, spec, alpha, config).value


__all__ = [
    "BoundInputs",
    "BoundReport",
    "ExpectationBracket",
    "SandwichResult",
    "VerificationSummary",
    "corollary_epsilon",
    "corollary_rate",
    "expected_divergence_bracket",
    "gram_eigen_tail",
    "matern_inducing_exponent",
    "monte_carlo_envelope",
    "risk_bound_rhs",
    "sandwich_check",
    "se_corollary_inducing_count",
    "theorem1_bound",
    "theorem2_bound",
    "verify_bounds_empirically",
]
