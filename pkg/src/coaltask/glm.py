"""Per-task linear models: MAP estimation and Laplace curvature.

Tasks are linear regression (Gaussian noise ``rho2``) or binary logistic
classification with labels in {-1, +1}.  The MAP weight vector maximizes
Gaussian prior times data likelihood; its curvature supplies the Gaussian
message each task contributes to the tree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .errors import InvalidArgumentError, OptimizationError
from .gaussian import check_psd, inv_psd, solve_psd
from .tree import GaussianMessage

REGRESSION = "regression"
CLASSIFICATION = "classification"

GRAD_TOL = 1e-6
MAX_CG_ITERS = 500


@dataclass
class TaskDataset:
    """One task's labeled examples.

    Classification labels are stored as {-1, +1}; {0, 1} inputs are remapped
    on construction.
    """

    task_id: str | int
    inputs: np.ndarray
    labels: np.ndarray
    kind: str = CLASSIFICATION

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.inputs.ndim != 2:
            raise InvalidArgumentError("inputs must be a 2-D (N, D) array")
        if self.labels.ndim != 1 or self.labels.size != self.inputs.shape[0]:
            raise InvalidArgumentError("labels must be a vector with one entry per input row")
        if self.kind not in (REGRESSION, CLASSIFICATION):
            raise InvalidArgumentError(f"unknown task kind {self.kind!r}")
        if not np.all(np.isfinite(self.inputs)) or not np.all(np.isfinite(self.labels)):
            raise InvalidArgumentError("non-finite values in task data")
        if self.kind == CLASSIFICATION:
            labels = np.where(self.labels == 0.0, -1.0, self.labels)
            bad = set(np.unique(labels)) - {-1.0, 1.0}
            if bad:
                raise InvalidArgumentError(f"classification labels must be in {{-1,+1}}, got {bad}")
            self.labels = labels

    @property
    def n_examples(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "TaskDataset":
        return TaskDataset(self.task_id, self.inputs[idx], self.labels[idx], self.kind)


@dataclass
class WeightPosterior:
    """Gaussian summary of one task's weight vector."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)

    def as_message(self) -> GaussianMessage:
        return GaussianMessage(self.mean, self.cov)


def data_log_likelihood(w: np.ndarray, data: TaskDataset, rho2: float = 1.0) -> float:
    """Summed log likelihood of the labels at weights w (constants included
    for regression so held-out comparisons across rho2 stay meaningful)."""
    z = data.inputs @ w
    if data.kind == REGRESSION:
        r = data.labels - z
        return float(-0.5 * (r @ r) / rho2 - 0.5 * data.n_examples * np.log(2 * np.pi * rho2))
    # log sigma(y z) = -log(1 + exp(-y z))
    return float(-np.sum(np.logaddexp(0.0, -data.labels * z)))


def log_posterior_and_grad(
    w: np.ndarray,
    data: TaskDataset,
    prior: GaussianMessage,
    rho2: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Log prior-times-likelihood and its gradient (prior constants dropped)."""
    w = np.asarray(w, dtype=float)
    diff = w - prior.mean
    pre_diff = solve_psd(prior.var, diff)
    logp = -0.5 * float(diff @ pre_diff)
    grad = -pre_diff
    z = data.inputs @ w
    if data.kind == REGRESSION:
        r = data.labels - z
        logp += float(-0.5 * (r @ r) / rho2)
        grad = grad + data.inputs.T @ r / rho2
    else:
        logp += float(-np.sum(np.logaddexp(0.0, -data.labels * z)))
        grad = grad + data.inputs.T @ (data.labels * expit(-data.labels * z))
    return logp, grad


def _hessian(w: np.ndarray, data: TaskDataset, prior_prec: np.ndarray, rho2: float) -> np.ndarray:
    """Negative log-posterior Hessian (positive definite)."""
    if data.kind == REGRESSION:
        h = data.inputs.T @ data.inputs / rho2
    else:
        s = expit(data.inputs @ w)
        h = data.inputs.T @ (data.inputs * (s * (1.0 - s))[:, None])
    return h + prior_prec


def map_weights(
    data: TaskDataset,
    prior: GaussianMessage,
    noise_rho2: float = 1.0,
) -> np.ndarray:
    """MAP weight vector under the Gaussian prior.

    Polak-Ribiere conjugate gradient (scipy's CG) followed by damped Newton
    polishing until the log-posterior gradient infinity-norm drops below 1e-6.
    """
    if data.kind == REGRESSION and noise_rho2 <= 0:
        raise InvalidArgumentError("rho2 must be positive for regression")
    prior_prec = _as_full_precision(prior.var)
    if data.n_examples == 0:
        return prior.mean.copy()

    def neg(w):
        logp, grad = log_posterior_and_grad(w, data, prior, noise_rho2)
        return -logp, -grad

    res = minimize(neg, prior.mean.copy(), jac=True, method="CG",
                   options={"gtol": GRAD_TOL, "maxiter": MAX_CG_ITERS})
    w = res.x
    _, grad = log_posterior_and_grad(w, data, prior, noise_rho2)
    for _ in range(50):
        if np.max(np.abs(grad)) < GRAD_TOL:
            break
        h = _hessian(w, data, prior_prec, noise_rho2)
        step = np.linalg.solve(h, grad)
        f0, _ = log_posterior_and_grad(w, data, prior, noise_rho2)
        scale = 1.0
        for _ in range(30):
            trial = w + scale * step
            f1, g1 = log_posterior_and_grad(trial, data, prior, noise_rho2)
            if f1 >= f0:
                w, grad = trial, g1
                break
            scale *= 0.5
        else:
            break
    if not np.all(np.isfinite(w)):
        raise OptimizationError("MAP optimization produced non-finite weights")
    return w


def _as_full_precision(var: np.ndarray) -> np.ndarray:
    prec = inv_psd(var)
    return np.diag(prec) if prec.ndim == 1 else prec


def laplace_curvature(data: TaskDataset, w: np.ndarray) -> np.ndarray:
    """Diagonal of the per-example curvature matrix A.

    Classification: A_nn = s_n (1 - s_n) with s_n the predicted positive
    probability.  Regression: the identity.
    """
    if not np.all(np.isfinite(w)):
        raise InvalidArgumentError("non-finite weights")
    if data.kind == REGRESSION:
        return np.ones(data.n_examples)
    s = expit(data.inputs @ w)
    return s * (1.0 - s)


def laplace_covariance(data: TaskDataset, a_diag: np.ndarray, prior_var: np.ndarray) -> np.ndarray:
    """Posterior covariance (X^T A X + prior_var^-1)^-1.

    The inverse-Hessian of the regularized objective; reduces to the prior
    variance with no data.
    """
    prior_prec = _as_full_precision(np.asarray(prior_var, dtype=float))
    if data.n_examples == 0:
        pv = np.asarray(prior_var, dtype=float)
        return np.diag(pv) if pv.ndim == 1 else pv.copy()
    a_diag = np.asarray(a_diag, dtype=float)
    prec = data.inputs.T @ (data.inputs * a_diag[:, None]) + prior_prec
    cov = inv_psd(prec)
    return 0.5 * (cov + cov.T)


def estep_posterior(
    data: TaskDataset,
    prior: GaussianMessage,
    rho2: float = 1.0,
) -> WeightPosterior:
    """MAP mean plus inverse-Hessian covariance of the full objective.

    For regression the curvature is scaled by 1/rho2 so the covariance is the
    exact Gaussian posterior covariance.
    """
    w = map_weights(data, prior, rho2)
    a = laplace_curvature(data, w)
    if data.kind == REGRESSION:
        a = a / rho2
    return WeightPosterior(w, laplace_covariance(data, a, prior.var))


def predict(w: np.ndarray, x: np.ndarray, kind: str) -> float:
    """Point prediction: w.x for regression, positive-class probability for
    classification (hard label = sign at 0.5)."""
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    if w.shape != x.shape:
        raise InvalidArgumentError(f"dimension mismatch: w {w.shape} vs x {x.shape}")
    z = float(w @ x)
    if kind == REGRESSION:
        return z
    return float(expit(z))
