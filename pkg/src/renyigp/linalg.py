"""Iterative solvers and matrix identities for blended GP covariances.

The workhorse is :func:`mbcg_solve`, a batched preconditioned conjugate
gradient solver that also returns the Lanczos tridiagonal matrices of
each right-hand side, which :func:`logdet_lanczos` turns into a
stochastic log-determinant estimate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

NONE = "none"
DIAGONAL = "diagonal"
PIVOTED_CHOLESKY = "pivoted-cholesky"


class NumericalFailure(ArithmeticError):
    """A factorization or iteration produced a non-finite or non-PD result."""


class LemmaDegenerate(ValueError):
    """Alpha lies in the band where the lemma route is disabled; use the direct route."""


@dataclass(frozen=True)
class SolverConfig:
    cg_tolerance: float = 1e-6
    cg_max_iterations: int | None = None  # None means 10 * N
    probe_count: int = 16
    preconditioner: str = DIAGONAL
    preconditioner_rank: int = 10
    jitter: float | None = None  # None means 1e-6 * trace / N of the jittered matrix
    seed: int = 0
    probe_distribution: str = "normal"
    dense_threshold: int = 500
    lemma_tolerance: float = 1e-3
    near_one_tolerance: float = 1e-4
    threads: int | None = None

    def __post_init__(self):
        if self.cg_max_iterations is not None and self.cg_max_iterations < 1:
            raise ValueError("cg_max_iterations must be >= 1")
        if self.probe_count < 1:
            raise ValueError("probe_count must be >= 1")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if self.preconditioner not in (NONE, DIAGONAL, PIVOTED_CHOLESKY):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")
        if self.probe_distribution not in ("normal", "rademacher"):
            raise ValueError(f"unknown probe distribution {self.probe_distribution!r}")

    def max_iterations(self, n: int) -> int:
        return self.cg_max_iterations if self.cg_max_iterations is not None else 10 * n

    def jitter_for(self, diagonal) -> float:
        if self.jitter is not None:
            return self.jitter
        return 1e-6 * float(np.mean(diagonal))

    def is_dense(self, n: int) -> bool:
        return n <= self.dense_threshold


@dataclass
class LinearOperator:
    """Symmetric operator given by its action on blocks of vectors.

    ``row(i)`` returns row ``i`` of ``op - shift * I`` and, with
    ``diagonal``, lets a pivoted-Cholesky preconditioner be built without
    forming the matrix.
    """

    n: int
    matmat: Callable[[np.ndarray], np.ndarray]
    dense: np.ndarray | None = None
    diagonal: np.ndarray | None = None
    row: Callable[[int], np.ndarray] | None = None
    shift: float = 0.0

    @classmethod
    def from_dense(cls, A) -> "LinearOperator":
        A = np.asarray(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"operator must be square, got {A.shape}")
        return cls(A.shape[0], lambda V: A @ V, dense=A, diagonal=np.diag(A).copy(), row=lambda i: A[i])

    def __matmul__(self, V):
        V = np.asarray(V, dtype=float)
        if V.ndim == 1:
            return self.matmat(V[:, None])[:, 0]
        return self.matmat(V)


# ---------------------------------------------------------------------------
# Preconditioners
# ---------------------------------------------------------------------------


class IdentityPreconditioner:
    def solve(self, R):
        return R

    def logdet(self) -> float:
        return 0.0

    def sample(self, rng, n, t, distribution="normal"):
        return draw_probes(rng, n, t, distribution)


class DiagonalPreconditioner:
    def __init__(self, d):
        d = np.asarray(d, dtype=float)
        if np.any(d <= 0):
            raise NumericalFailure("diagonal preconditioner needs a positive diagonal")
        self.d = d

    def solve(self, R):
        return R / self.d[:, None] if R.ndim == 2 else R / self.d

    def logdet(self) -> float:
        return float(np.sum(np.log(self.d)))

    def sample(self, rng, n, t, distribution="normal"):
        return np.sqrt(self.d)[:, None] * draw_probes(rng, n, t, distribution)


class LowRankPreconditioner:
    """``P = L L^T + shift * I`` with Woodbury solves."""

    def __init__(self, L, shift):
        if shift <= 0:
            raise NumericalFailure("low-rank preconditioner needs a positive shift")
        self.L = np.asarray(L, dtype=float)
        self.shift = float(shift)
        k = self.L.shape[1]
        self._chol = sla.cho_factor(np.eye(k) * self.shift + self.L.T @ self.L, lower=True)

    def solve(self, R):
        inner = sla.cho_solve(self._chol, self.L.T @ R)
        return (R - self.L @ inner) / self.shift

    def logdet(self) -> float:
        n, k = self.L.shape
        c = self._chol[0]
        return float((n - k) * math.log(self.shift) + 2 * np.sum(np.log(np.abs(np.diag(c)))))

    def sample(self, rng, n, t, distribution="normal"):
        k = self.L.shape[1]
        w1 = draw_probes(rng, k, t, distribution)
        w2 = draw_probes(rng, n, t, distribution)
        return self.L @ w1 + math.sqrt(self.shift) * w2


def make_preconditioner(op: LinearOperator, config: SolverConfig):
    if config.preconditioner == NONE:
        return IdentityPreconditioner()
    if op.diagonal is None:
        raise ValueError("preconditioning requires the operator diagonal")
    if config.preconditioner == DIAGONAL:
        return DiagonalPreconditioner(op.diagonal)
    if op.row is None:
        raise ValueError("pivoted-Cholesky preconditioning requires row access")
    rank = min(config.preconditioner_rank, op.n)
    L, residual, _ = _pivoted_cholesky(op.diagonal - op.shift, op.row, rank)
    shift = op.shift
    if shift <= 0:
        shift = max(float(np.mean(residual)), config.jitter_for(op.diagonal), 1e-12)
    return LowRankPreconditioner(L, shift)


def draw_probes(rng: np.random.Generator, n: int, t: int, distribution: str = "normal") -> np.ndarray:
    if distribution == "normal":
        return rng.standard_normal((n, t))
    if distribution == "rademacher":
        return rng.choice(np.array([-1.0, 1.0]), size=(n, t))
    raise ValueError(f"unknown probe distribution {distribution!r}")


# ---------------------------------------------------------------------------
# mBCG
# ---------------------------------------------------------------------------


@dataclass
class TridiagonalBatch:
    """Lanczos tridiagonal matrices, one per right-hand side."""

    diagonals: list = field(default_factory=list)
    offdiagonals: list = field(default_factory=list)

    @property
    def iterations(self) -> np.ndarray:
        return np.array([len(d) for d in self.diagonals])

    def matrix(self, j: int) -> np.ndarray:
        d, e = self.diagonals[j], self.offdiagonals[j]
        return np.diag(d) + np.diag(e, 1) + np.diag(e, -1)

    def eigenvalues(self, j: int) -> np.ndarray:
        return sla.eigh_tridiagonal(self.diagonals[j], self.offdiagonals[j], eigvals_only=True)

    def quadrature(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """``e1^T f(T) e1`` for every stored tridiagonal."""
        out = np.empty(len(self.diagonals))
        for j, (d, e) in enumerate(zip(self.diagonals, self.offdiagonals)):
            if len(d) == 1:
                out[j] = f(np.asarray(d))[0]
                continue
            w, V = sla.eigh_tridiagonal(d, e, lapack_driver="stev")
            out[j] = float(np.sum(V[0] ** 2 * f(w)))
        return out


@dataclass
class MBCGResult:
    solutions: np.ndarray
    tridiagonals: TridiagonalBatch | None
    iterations: np.ndarray
    residuals: np.ndarray
    converged: bool


def mbcg_solve(
    op: LinearOperator,
    B,
    config: SolverConfig = SolverConfig(),
    *,
    preconditioner=None,
    tridiagonal: bool = False,
) -> MBCGResult:
    """Solve ``op X = B`` column by column with batched preconditioned CG.

    Every column stops once its relative residual drops below
    ``config.cg_tolerance``. Columns still above it at the iteration cap
    are reported through ``converged=False`` and ``residuals``. With
    ``tridiagonal=True`` the CG coefficients of each column are converted
    into the Lanczos matrix of the preconditioned operator.
    """
    B = np.asarray(B, dtype=float)
    squeeze = B.ndim == 1
    if squeeze:
        B = B[:, None]
    if B.shape[0] != op.n:
        raise ValueError(f"right-hand side has {B.shape[0]} rows, operator has {op.n}")
    if not np.all(np.isfinite(B)):
        raise NumericalFailure("non-finite right-hand side")
    P = IdentityPreconditioner() if preconditioner is None else preconditioner
    n, s = B.shape
    max_iter = config.max_iterations(n)
    tol = config.cg_tolerance

    X = np.zeros_like(B)
    R = B.copy()
    bnorm = np.linalg.norm(B, axis=0)
    safe_bnorm = np.where(bnorm > 0, bnorm, 1.0)
    active = bnorm > 0
    Zr = P.solve(R)
    D = Zr.copy()
    rz = np.sum(R * Zr, axis=0)
    iters = np.zeros(s, dtype=int)
    alphas = [[] for _ in range(s)]
    betas = [[] for _ in range(s)]
    rel = np.zeros(s)

    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        AD = op.matmat(D[:, idx])
        dAd = np.sum(D[:, idx] * AD, axis=0)
        if not np.all(np.isfinite(AD)) or np.any(dAd <= 0):
            raise NumericalFailure("operator is not positive definite along the search direction")
        a = rz[idx] / dAd
        X[:, idx] += a * D[:, idx]
        R[:, idx] -= a * AD
        Zr_new = P.solve(R[:, idx])
        rz_new = np.sum(R[:, idx] * Zr_new, axis=0)
        b = rz_new / rz[idx]
        D[:, idx] = Zr_new + b * D[:, idx]
        rz[idx] = rz_new
        iters[idx] += 1
        rel[idx] = np.linalg.norm(R[:, idx], axis=0) / safe_bnorm[idx]
        if not np.all(np.isfinite(rel[idx])):
            raise NumericalFailure("non-finite residual in conjugate gradients")
        for k, j in enumerate(idx):
            alphas[j].append(a[k])
            betas[j].append(b[k])
        active[idx] = rel[idx] > tol

    tri = None
    if tridiagonal:
        tri = TridiagonalBatch()
        for j in range(s):
            a = np.asarray(alphas[j])
            b = np.asarray(betas[j])
            if a.size == 0:
                tri.diagonals.append(np.zeros(0))
                tri.offdiagonals.append(np.zeros(0))
                continue
            d = 1.0 / a
            d[1:] += b[:-1] / a[:-1]
            e = np.sqrt(np.maximum(b[:-1], 0.0)) / a[:-1]
            tri.diagonals.append(d)
            tri.offdiagonals.append(e)
    sol = X[:, 0] if squeeze else X
    return MBCGResult(sol, tri, iters, rel, bool(np.all(rel <= tol)))


def slq_logdet(tri: TridiagonalBatch, n: int, preconditioner=None) -> float:
    """Combine Lanczos tridiagonals of unit-weight probes into ``log|op|``."""
    q = tri.quadrature(_safe_log)
    logdet_p = 0.0 if preconditioner is None else preconditioner.logdet()
    return float(logdet_p + n * np.mean(q))


def _safe_log(w):
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise NumericalFailure("non-positive Ritz value in Lanczos quadrature")
    return np.log(w)


def logdet_lanczos(op: LinearOperator, config: SolverConfig = SolverConfig(), *, preconditioner=None, rng=None) -> float:
    """Stochastic Lanczos quadrature estimate of ``log|op|``.

    Probes are drawn from ``N(0, P)`` for the preconditioner ``P`` so the
    Lanczos runs see the whitened operator; the estimate is
    ``log|P| + N * mean_i e1^T log(T_i) e1``.
    """
    if preconditioner is None:
        preconditioner = make_preconditioner(op, config)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    Z = preconditioner.sample(rng, op.n, config.probe_count, config.probe_distribution)
    res = mbcg_solve(op, Z, config, preconditioner=preconditioner, tridiagonal=True)
    return slq_logdet(res.tridiagonals, op.n, preconditioner)


# ---------------------------------------------------------------------------
# Pivoted Cholesky
# ---------------------------------------------------------------------------


def _pivoted_cholesky(diag, row: Callable[[int], np.ndarray], rank: int, tol: float = 0.0):
    """Greedy max-diagonal pivoted Cholesky from a diagonal and row access.

    Returns ``(L, residual_diagonal, pivots)``; columns past an exhausted
    residual are left at zero.
    """
    d = np.array(diag, dtype=float)
    n = d.size
    L = np.zeros((n, rank))
    pivots = []
    for k in range(rank):
        i = int(np.argmax(d))
        if d[i] <= tol:
            break
        pivots.append(i)
        col = (np.asarray(row(i), dtype=float) - L[:, :k] @ L[i, :k]) / math.sqrt(d[i])
        col[pivots] = 0.0
        col[i] = math.sqrt(d[i])
        L[:, k] = col
        d = d - col**2
        d[pivots] = 0.0
        d = np.maximum(d, 0.0)
    return L, d, pivots


def pivoted_cholesky(K, rank: int, *, jitter: float = 1e-10, return_residual: bool = False):
    """Rank-``rank`` factor ``L`` with ``L L^T ~ K``, pivoting on the largest residual diagonal.

    The trace error ``Tr(K - L L^T)`` equals the sum of the diagonal
    entries left after the last pivot.
    """
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    if K.ndim != 2 or K.shape[1] != n:
        raise ValueError("K must be square")
    if not 0 <= rank <= n:
        raise ValueError(f"rank must be in [0, {n}]")
    diag = np.diag(K)
    if np.any(diag < -jitter):
        raise ValueError("K has a negative diagonal entry; not PSD")
    L, residual, _ = _pivoted_cholesky(np.maximum(diag, 0.0), lambda i: K[i], rank)
    if return_residual:
        return L, float(np.sum(residual))
    return L


# ---------------------------------------------------------------------------
# Trace estimation and identities
# ---------------------------------------------------------------------------


def stochastic_trace(apply_inverse, apply_derivative, probes, *, dense=None, config: SolverConfig = SolverConfig()) -> float:
    """Estimate ``Tr(Xi^{-1} dXi)`` as ``mean_i (Xi^{-1} z_i)^T (dXi z_i)``.

    When ``dense=(Xi, dXi)`` is given and the size is under the dense
    threshold, the trace is computed exactly instead.
    """
    probes = np.asarray(probes, dtype=float)
    n, t = probes.shape
    if dense is not None and config.is_dense(n):
        Xi, dXi = dense
        dXi = np.asarray(dXi, dtype=float)
        if not np.any(dXi):
            return 0.0
        c = sla.cho_factor(Xi, lower=True)
        return float(np.trace(sla.cho_solve(c, dXi)))
    dz = apply_derivative(probes)
    if not np.any(dz):
        return 0.0
    inv_z = apply_inverse(probes)
    return float(np.sum(inv_z * dz) / t)


def dense_logdet(A) -> float:
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("matrix is not positive definite") from exc
    return float(2 * np.sum(np.log(np.diag(c))))


def _check_lemma_band(alpha: float, tolerance: float):
    if abs(1 - 2 * alpha) < tolerance:
        raise LemmaDegenerate(f"alpha={alpha} lies within {tolerance} of 1/2")


def _schur(K_UU, K_fU, xi_inv_KfU):
    S = K_UU - K_fU.T @ xi_inv_KfU
    return 0.5 * (S + S.T)


def detlemma_logdet_A(K_UU, K_fU, xi_inv_KfU, alpha, noise_variance, logdet_xi, *, lemma_tolerance: float = 1e-3) -> float:
    """``log|A|`` for ``A = I + (1-alpha)/s2 (K - Q)`` using only M x M factorizations.

    Since ``s2 * A = Xi - K_fU K_UU^{-1} K_Uf``, the determinant lemma gives
    ``log|A| = log|K_UU - K_Uf Xi^{-1} K_fU| - log|K_UU| + log|Xi| - N log s2``.
    ``K_UU`` must carry the same jitter used to build ``Q``.
    """
    _check_lemma_band(alpha, lemma_tolerance)
    K_UU = np.asarray(K_UU, dtype=float)
    K_fU = np.asarray(K_fU, dtype=float)
    n = K_fU.shape[0]
    S = _schur(K_UU, K_fU, xi_inv_KfU)
    return dense_logdet(S) - dense_logdet(K_UU) + float(logdet_xi) - n * math.log(noise_variance)


def woodbury_trace_term(
    K_UU,
    K_fU,
    xi_inv_KfU,
    alpha,
    noise_variance,
    apply_dA,
    trace_xi_inv_dA,
    *,
    lemma_tolerance: float = 1e-3,
) -> float:
    """``Tr(A^{-1} dA)`` through the Woodbury expansion of ``(Xi - Q)^{-1}``.

    ``A^{-1} = s2 [Xi^{-1} + W S^{-1} W^T]`` with ``W = Xi^{-1} K_fU`` and
    ``S = K_UU - K_Uf W``, so the trace splits into ``Tr(Xi^{-1} dA)``
    (passed in, exact or stochastic) plus an M x M term.
    """
    _check_lemma_band(alpha, lemma_tolerance)
    W = np.asarray(xi_inv_KfU, dtype=float)
    dAW = apply_dA(W)
    if not np.any(dAW) and trace_xi_inv_dA == 0:
        return 0.0
    S = _schur(np.asarray(K_UU, dtype=float), np.asarray(K_fU, dtype=float), W)
    try:
        c = sla.cho_factor(S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("Schur complement is not positive definite") from exc
    inner = np.trace(sla.cho_solve(c, W.T @ dAW))
    return float(noise_variance * (trace_xi_inv_dA + inner))


# ---------------------------------------------------------------------------
# k-DPP sampling
# ---------------------------------------------------------------------------

EXACT = "exact"
EPS_APPROX = "eps-approx"


def kdpp_subset_probabilities(K, M: int):
    """Enumerate all size-``M`` subsets and their normalized ``det(K_S)``."""
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    subsets = np.array(list(itertools.combinations(range(n), M)), dtype=int)
    blocks = K[subsets[:, :, None], subsets[:, None, :]]
    dets = np.clip(np.linalg.det(blocks), 0.0, None)
    total = dets.sum()
    if not total > 0:
        raise ValueError("all principal minors of size M are zero")
    return subsets, dets / total


def kdpp_chain_length(n: int, M: int, epsilon: float) -> int:
    """Swap-chain length heuristic ``ceil(N * M * log(1/eps))``, at least ``N * M``."""
    return int(math.ceil(n * M * max(1.0, math.log(1.0 / epsilon))))


def kdpp_sample(
    K,
    M: int,
    mode: str = EXACT,
    *,
    epsilon: float = 1e-2,
    seed=None,
    size: int | None = None,
    exhaustive_threshold: int = 20,
    max_steps: int | None = None,
):
    """Draw size-``M`` index sets with probability proportional to ``det(K_S)``.

    ``mode="exact"`` enumerates every subset (``N <= exhaustive_threshold``).
    ``mode="eps-approx"`` runs a Metropolis swap chain started from the
    greedy determinant-maximizing set; its length follows
    :func:`kdpp_chain_length` and is a heuristic, not a mixing guarantee.
    Returns sorted indices, shape ``(M,)`` or ``(size, M)``.
    """
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    if not 1 <= M <= n:
        raise ValueError(f"M must be in [1, {n}], got {M}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    count = 1 if size is None else size
    if M == n:
        out = np.tile(np.arange(n), (count, 1))
        return out[0] if size is None else out
    if mode == EXACT:
        if n > exhaustive_threshold:
            raise ValueError(f"exact k-DPP enumeration is limited to N <= {exhaustive_threshold}")
        subsets, probs = kdpp_subset_probabilities(K, M)
        picks = rng.choice(len(subsets), size=count, p=probs)
        out = subsets[picks]
    elif mode == EPS_APPROX:
        steps = kdpp_chain_length(n, M, epsilon) if max_steps is None else max_steps
        out = np.stack([_swap_chain(K, M, steps, rng) for _ in range(count)])
    else:
        raise ValueError(f"unknown k-DPP mode {mode!r}")
    return out[0] if size is None else out


def _logdet_sub(K, S):
    sign, val = np.linalg.slogdet(K[np.ix_(S, S)])
    return val if sign > 0 else -np.inf


def _swap_chain(K, M, steps, rng):
    n = K.shape[0]
    _, _, pivots = _pivoted_cholesky(np.diag(K), lambda i: K[i], M)
    S = list(pivots)
    if len(S) < M:
        S.extend(int(i) for i in range(n) if i not in S)
        S = S[:M]
    S = np.array(S)
    current = _logdet_sub(K, S)
    if not np.isfinite(current):
        raise ValueError("all principal minors of size M are zero")
    inside = np.zeros(n, dtype=bool)
    inside[S] = True
    for _ in range(steps):
        # lazy chain: stay put half the time
        if rng.random() < 0.5:
            continue
        pos = rng.integers(M)
        outside = np.flatnonzero(~inside)
        j = outside[rng.integers(outside.size)]
        proposal = S.copy()
        proposal[pos] = j
        val = _logdet_sub(K, proposal)
        if np.log(rng.random()) < val - current:
            inside[S[pos]] = False
            inside[j] = True
            S = proposal
            current = val
    return np.sort(S)
