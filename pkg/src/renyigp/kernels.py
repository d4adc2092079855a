"""Stationary kernels, Gram assembly and analytic operator spectra.

Two isotropic families are supported: squared exponential and the
half-integer Matérn kernels of order ``r + 1/2`` for ``r`` in {1, 2, 3}.
Every kernel satisfies ``k(x, x) = signal_variance``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

SE = "se"
MATERN = "matern"

# Polynomial coefficients p(s) in k = v * p(s) * exp(-s), s = sqrt(2r+1) d / l.
_MATERN_POLY = {
    1: (1.0, 1.0),
    2: (1.0, 1.0, 1.0 / 3.0),
    3: (1.0, 1.0, 2.0 / 5.0, 1.0 / 15.0),
}

PARAM_NAMES = ("lengthscale", "signal_variance", "noise_variance")


def default_threads() -> int:
    """Thread count from ``RENYIGP_THREADS`` (defaults to 1)."""
    try:
        return max(1, int(os.environ.get("RENYIGP_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class Hyperparams:
    lengthscale: float
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a positive finite number, got {value!r}")

    def to_log(self) -> np.ndarray:
        return np.log([self.lengthscale, self.signal_variance, self.noise_variance])

    @classmethod
    def from_log(cls, log_params) -> "Hyperparams":
        ell, v, s2 = np.exp(np.asarray(log_params, dtype=float))
        return cls(float(ell), float(v), float(s2))


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus hyperparameters.

    ``order`` is the Matérn index ``r`` (smoothness ``r + 1/2``) and is
    ignored for the squared-exponential family.
    """

    family: str
    hyperparams: Hyperparams
    order: int = 1

    def __post_init__(self):
        if self.family not in (SE, MATERN):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family == MATERN and self.order not in _MATERN_POLY:
            raise ValueError(f"Matérn order r must be one of 1, 2, 3, got {self.order!r}")

    @property
    def label(self) -> str:
        if self.family == SE:
            return "se"
        return f"matern{2 * self.order + 1}2"

    def with_hyperparams(self, hyperparams: Hyperparams) -> "KernelSpec":
        return replace(self, hyperparams=hyperparams)


def parse_kernel(name: str, hyperparams: Hyperparams) -> KernelSpec:
    """Build a spec from a short name: ``se``, ``matern32``, ``matern52``, ``matern72``."""
    key = name.lower().replace("-", "").replace("/", "").replace("_", "")
    if key in ("se", "rbf", "squaredexponential"):
        return KernelSpec(SE, hyperparams)
    table = {"matern32": 1, "matern52": 2, "matern72": 3}
    if key in table:
        return KernelSpec(MATERN, hyperparams, order=table[key])
    raise ValueError(f"unknown kernel {name!r}")


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"inputs must be 1-D or 2-D, got shape {X.shape}")
    return X


def _sqdist(X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(X1**2, axis=1)[:, None]
        + np.sum(X2**2, axis=1)[None, :]
        - 2.0 * X1 @ X2.T
    )
    return np.maximum(d2, 0.0)


def _profile(spec: KernelSpec, d2: np.ndarray, derivative: bool = False) -> np.ndarray:
    """Unit-variance kernel values (or their log-lengthscale derivative)."""
    ell = spec.hyperparams.lengthscale
    if spec.family == SE:
        r2 = d2 / ell**2
        k = np.exp(-0.5 * r2)
        return k * r2 if derivative else k
    r = spec.order
    s = math.sqrt(2 * r + 1) * np.sqrt(d2) / ell
    coeffs = _MATERN_POLY[r]
    p = np.polynomial.polynomial.polyval(s, coeffs)
    if not derivative:
        return p * np.exp(-s)
    dp = np.polynomial.polynomial.polyval(s, np.polynomial.polynomial.polyder(coeffs))
    # ds/dlog(l) = -s
    return -(dp - p) * s * np.exp(-s)


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    """Evaluate ``k(x, x2)`` for two single points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.ndim != 1:
        raise ValueError(f"dimension mismatch: {x.shape} vs {x2.shape}")
    d2 = float(np.sum((x - x2) ** 2))
    return float(spec.hyperparams.signal_variance * _profile(spec, np.array(d2)))


def _blocks(n: int, block_size: int):
    return [(i, min(i + block_size, n)) for i in range(0, n, block_size)]


def gram(spec: KernelSpec, X1, X2=None, *, threads: int | None = None, block_size: int = 512) -> np.ndarray:
    """Cross-covariance matrix ``K[i, j] = k(X1[i], X2[j])``.

    Rows are assembled in independent blocks, so running with several
    threads gives bit-identical output to the sequential loop.
    """
    X1 = _as_2d(X1)
    X2 = X1 if X2 is None else _as_2d(X2)
    if X1.shape[1] != X2.shape[1]:
        raise ValueError(f"dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}")
    v = spec.hyperparams.signal_variance
    out = np.empty((X1.shape[0], X2.shape[0]))
    blocks = _blocks(X1.shape[0], block_size)

    def fill(bounds):
        lo, hi = bounds
        out[lo:hi] = v * _profile(spec, _sqdist(X1[lo:hi], X2))

    threads = default_threads() if threads is None else threads
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, blocks))
    else:
        for b in blocks:
            fill(b)
    if X2 is X1:
        # exact symmetry regardless of floating point in the distance expansion
        out = 0.5 * (out + out.T)
    return out


def gram_lengthscale_grad(spec: KernelSpec, X1, X2=None) -> np.ndarray:
    """Derivative of :func:`gram` with respect to ``log(lengthscale)``."""
    X1 = _as_2d(X1)
    X2 = X1 if X2 is None else _as_2d(X2)
    if X1.shape[1] != X2.shape[1]:
        raise ValueError(f"dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}")
    out = spec.hyperparams.signal_variance * _profile(spec, _sqdist(X1, X2), derivative=True)
    if X2 is X1:
        out = 0.5 * (out + out.T)
    return out


def gram_diag(spec: KernelSpec, X) -> np.ndarray:
    return np.full(_as_2d(X).shape[0], spec.hyperparams.signal_variance)


@dataclass(frozen=True)
class SeSpectrum:
    """Eigen-structure of the SE kernel operator under a Gaussian input density.

    ``a`` is ``1 / (4 * a_scale)``; by default ``a_scale`` is the noise
    variance, see :func:`se_spectrum`.
    """

    a: float
    b: float
    signal_variance: float

    @property
    def c(self) -> float:
        return math.sqrt(self.a**2 + 2 * self.a * self.b)

    @property
    def A(self) -> float:
        return self.a + self.b + self.c

    @property
    def B(self) -> float:
        return self.b / self.A

    def eigenvalue(self, m):
        """``lambda_m = v * sqrt(2a/A) * B**(m-1)`` for ``m >= 1``."""
        m = np.asarray(m, dtype=float)
        return self.signal_variance * math.sqrt(2 * self.a / self.A) * self.B ** (m - 1)

    def trace(self) -> float:
        return se_eigen_tail(self, 0)


def se_spectrum(hyperparams: Hyperparams, a_scale: float | None = None) -> SeSpectrum:
    """Spectral constants for an SE kernel.

    ``a_scale`` defaults to ``hyperparams.noise_variance``. Pass the input
    variance instead to use the classical Gaussian-input convention.
    """
    scale = hyperparams.noise_variance if a_scale is None else float(a_scale)
    if scale <= 0:
        raise ValueError("a_scale must be positive")
    return SeSpectrum(
        a=1.0 / (4.0 * scale),
        b=1.0 / (2.0 * hyperparams.lengthscale**2),
        signal_variance=hyperparams.signal_variance,
    )


def se_eigen_tail(spectrum: SeSpectrum, M: int) -> float:
    """Closed-form ``sum_{m > M} lambda_m``."""
    if M < 0:
        raise ValueError("M must be non-negative")
    B = spectrum.B
    return (
        spectrum.signal_variance
        * math.sqrt(2 * spectrum.a)
        / ((1 - B) * math.sqrt(spectrum.A))
        * B**M
    )


def matern_tail_bound(r: int, M: int) -> float:
    """Three-term Euler-Maclaurin estimate of ``sum_{m > M} m**-(2r+2)``.

    The expansion is asymptotic; at ``M = 1`` it overestimates the true
    tail by about a factor of two.
    """
    if M < 1 or r < 1:
        raise ValueError("need M >= 1 and r >= 1")
    p = 2 * r + 1
    return M ** (-p) / p - 0.5 * M ** (-p - 1) + (p + 1) / 12.0 * M ** (-p - 2)
