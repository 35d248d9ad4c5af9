"""Gaussian algebra shared by the tree and model code.

Variances come in two representations and every helper here accepts both:

* full mode: a symmetric ``(D, D)`` covariance matrix,
* diagonal mode: a ``(D,)`` vector of per-coordinate variances.

The two representations are never mixed inside one computation; the mode is
chosen once per model fit (full vs. diagonal variants) and threaded through.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DegenerateMessageError, InvalidArgumentError

LOG_2PI = float(np.log(2.0 * np.pi))


def as_cov(lam) -> np.ndarray:
    """Normalize a covariance argument (wrapper object or raw array)."""
    values = getattr(lam, "values", lam)
    arr = np.asarray(values, dtype=float)
    if arr.ndim not in (1, 2):
        raise InvalidArgumentError(f"covariance must be 1-D or 2-D, got ndim={arr.ndim}")
    return arr


def is_diagonal_mode(var: np.ndarray) -> bool:
    return np.asarray(var).ndim == 1


def check_psd(var: np.ndarray, name: str = "variance", tol: float = 1e-10) -> None:
    var = np.asarray(var, dtype=float)
    if not np.all(np.isfinite(var)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    if var.ndim == 1:
        if np.any(var < -tol):
            raise InvalidArgumentError(f"{name} has negative diagonal entries")
        return
    if not np.allclose(var, var.T, atol=1e-8):
        raise InvalidArgumentError(f"{name} is not symmetric")
    w = np.linalg.eigvalsh(var)
    if w.min() < -tol * max(1.0, abs(w.max())):
        raise InvalidArgumentError(f"{name} is not positive semi-definite (min eig {w.min():.3g})")


def psd_sqrt(var: np.ndarray) -> np.ndarray:
    """Symmetric square root with eigenvalues clipped at zero (PSD-safe)."""
    var = np.asarray(var, dtype=float)
    if var.ndim == 1:
        return np.sqrt(np.clip(var, 0.0, None))
    w, q = np.linalg.eigh(var)
    w = np.clip(w, 0.0, None)
    return (q * np.sqrt(w)) @ q.T


def inv_psd(var: np.ndarray) -> np.ndarray:
    """Inverse of a positive-definite variance; raises on singularity."""
    var = np.asarray(var, dtype=float)
    if var.ndim == 1:
        if np.any(var <= 0.0):
            raise DegenerateMessageError("singular diagonal variance")
        return 1.0 / var
    try:
        c = cho_factor(var, lower=True)
    except np.linalg.LinAlgError as e:  # pragma: no cover - scipy raises its own
        raise DegenerateMessageError(f"singular variance matrix: {e}") from e
    except Exception as e:
        raise DegenerateMessageError(f"singular variance matrix: {e}") from e
    ident = np.eye(var.shape[0])
    return cho_solve(c, ident)


def solve_psd(var: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """``var^{-1} @ rhs`` for either representation."""
    var = np.asarray(var, dtype=float)
    if var.ndim == 1:
        if np.any(var <= 0.0):
            raise DegenerateMessageError("singular diagonal variance")
        return rhs / var if rhs.ndim == 1 else rhs / var[:, None]
    try:
        c = cho_factor(var, lower=True)
    except Exception as e:
        raise DegenerateMessageError(f"singular variance matrix: {e}") from e
    return cho_solve(c, rhs)


def logdet_psd(var: np.ndarray) -> float:
    var = np.asarray(var, dtype=float)
    if var.ndim == 1:
        if np.any(var <= 0.0):
            raise DegenerateMessageError("singular diagonal variance")
        return float(np.sum(np.log(var)))
    try:
        c, _ = cho_factor(var, lower=True)
    except Exception as e:
        raise DegenerateMessageError(f"singular variance matrix: {e}") from e
    return float(2.0 * np.sum(np.log(np.diag(c))))


def gauss_logpdf(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> float:
    """Log density of N(mean, var) at x, either variance representation."""
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    d = x.size
    r = x - mean
    quad = float(r @ solve_psd(var, r))
    return -0.5 * (d * LOG_2PI + logdet_psd(var) + quad)


def inflate(var: np.ndarray, dt: float, lam: np.ndarray) -> np.ndarray:
    """Variance after Brownian drift of duration ``dt`` with rate ``lam``."""
    return np.asarray(var, dtype=float) + dt * np.asarray(lam, dtype=float)


def combine(mean_a, var_a, mean_b, var_b):
    """Product of two Gaussian factors: returns (mean, var, log_scale).

    ``log_scale`` is the log of the Gaussian-product normalizer
    ``N(mean_a; mean_b, var_a + var_b)``, needed for marginal likelihoods.
    Uses the subtraction form ``v = (I - G) v_a`` with ``G = v_a (v_a+v_b)^-1``
    rather than explicit precision sums, which stays finite when one factor
    has (near-)zero variance.
    """
    mean_a = np.asarray(mean_a, dtype=float)
    mean_b = np.asarray(mean_b, dtype=float)
    var_a = np.asarray(var_a, dtype=float)
    var_b = np.asarray(var_b, dtype=float)
    total = var_a + var_b
    if var_a.ndim == 1:
        if np.any(total <= 0.0):
            raise DegenerateMessageError("zero combined variance in message product")
        gain = var_a / total
        mean = mean_a + gain * (mean_b - mean_a)
        var = var_a - gain * var_a
    else:
        try:
            c = cho_factor(total, lower=True)
        except Exception as e:
            raise DegenerateMessageError(f"zero combined variance in message product: {e}") from e
        gain = cho_solve(c, var_a).T  # var_a @ total^-1, using symmetry of var_a
        mean = mean_a + gain @ (mean_b - mean_a)
        var = var_a - gain @ var_a
        var = 0.5 * (var + var.T)
    log_scale = gauss_logpdf(mean_a, mean_b, total)
    return mean, var, log_scale
