"""Multitask learning: shared correlations, tree-diffused scale parameters.

Each task's weight vector is zero-mean Gaussian with covariance
``exp(S) R exp(S)``: one global correlation matrix R, per-task diagonal
log-standard-deviation matrices S that diffuse over the latent tree.  Hard EM
alternates MAP weights, gradient-ascent updates of each leaf's S given its
parent, a fresh tree over the leaf S vectors, and Inverse-Wishart-style
updates of the diffusion rate and (diagonal-constrained) correlations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import invwishart

from .config import ModelConfig
from .da import heldout_log_likelihood, mstep_lambda, sample_task_data
from .data import split_task
from .errors import InvalidArgumentError, OptimizationError
from .gaussian import as_cov, check_psd, gauss_logpdf, logdet_psd, solve_psd
from .glm import TaskDataset, WeightPosterior, map_weights
from .tree import (
    CoalescentTree,
    DiffusionCovariance,
    GaussianMessage,
    bp_upward,
    diffuse_states,
    greedy_rate1_build,
    node_posteriors,
    sample_coalescent,
)

LOG_DENSITY_FLOOR = -1e12
S_MESSAGE_VAR = 1e-4
S_STEP = 0.1
S_TOL = 1e-6
S_MAX_ITERS = 100_000


@dataclass
class CorrelationMatrix:
    """Symmetric PSD matrix with unit diagonal."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)

    def validate(self) -> None:
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidArgumentError("correlation matrix must be square")
        if not np.allclose(np.diag(m), 1.0, atol=1e-10):
            raise InvalidArgumentError("correlation matrix must have unit diagonal")
        if np.any(np.abs(m) > 1.0 + 1e-10):
            raise InvalidArgumentError("correlations must lie in [-1, 1]")
        check_psd(m, "correlation matrix")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass
class LogStdDev:
    """Diagonal of a log-standard-deviation matrix (unconstrained reals)."""

    diag: np.ndarray

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=float)
        if self.diag.ndim != 1:
            raise InvalidArgumentError("log stddev diagonal must be a vector")
        if not np.all(np.isfinite(self.diag)):
            raise InvalidArgumentError("log stddev entries must be finite")


@dataclass
class MtlParams:
    """Fitted (or generating) multitask model."""

    correlation: CorrelationMatrix
    lam: DiffusionCovariance
    tree: CoalescentTree
    leaf_log_stddev: list[LogStdDev]
    leaf_weights: list[np.ndarray]
    rho2: float
    selected_iter: int | None = None
    holdout_curve: list[float] = field(default_factory=list)


def correlation_log_prior(corr: CorrelationMatrix | np.ndarray) -> float:
    """Unnormalized log density favoring uniform pairwise correlations:

        log p(R) = a log det R - (D+1)/2 sum_i log det R_(ii),
        a = (D+1)(D-1)/2 - 1,

    with R_(ii) the principal submatrix deleting row and column i.  Singular
    R maps to a large negative floor instead of raising, keeping line
    searches total.
    """
    r = corr.matrix if isinstance(corr, CorrelationMatrix) else np.asarray(corr, dtype=float)
    d = r.shape[0]
    sign, logdet = np.linalg.slogdet(r)
    if sign <= 0 or not np.isfinite(logdet):
        return LOG_DENSITY_FLOOR
    a = 0.5 * (d + 1) * (d - 1) - 1.0
    total = a * logdet
    for i in range(d):
        keep = [j for j in range(d) if j != i]
        if not keep:
            continue
        sub = r[np.ix_(keep, keep)]
        s_sign, s_logdet = np.linalg.slogdet(sub)
        if s_sign <= 0 or not np.isfinite(s_logdet):
            return LOG_DENSITY_FLOOR
        total -= 0.5 * (d + 1) * s_logdet
    return float(total)


def task_weight_covariance(s: LogStdDev | np.ndarray, corr: CorrelationMatrix | np.ndarray) -> np.ndarray:
    """Covariance exp(S) R exp(S); diagonal entries exp(2 s_d)."""
    s_vec = s.diag if isinstance(s, LogStdDev) else np.asarray(s, dtype=float)
    r = corr.matrix if isinstance(corr, CorrelationMatrix) else np.asarray(corr, dtype=float)
    e = np.exp(s_vec)
    return r * np.outer(e, e)


def _check_s_args(s, p, lam, w):
    s = np.asarray(s, dtype=float)
    p = np.asarray(p, dtype=float)
    w = np.asarray(w, dtype=float)
    if s.shape != p.shape or s.shape != w.shape:
        raise InvalidArgumentError("s, parent, and w must share one dimension")
    return s, p, np.asarray(as_cov(lam), dtype=float), w


def s_log_posterior(s, parent_p, lam, corr, w) -> float:
    """Log posterior of a leaf's log-stddev vector (additive constants dropped):

        -sum(s) - 1/2 (s-p)^T lam^-1 (s-p) - 1/2 w^T e^-S R^-1 e^-S w

    ``lam`` is the S prior covariance around the parent (branch length times
    the diffusion rate).  Equals log N(w; 0, e^S R e^S) + log N(s; p, lam) up
    to terms independent of s.
    """
    r = corr.matrix if isinstance(corr, CorrelationMatrix) else np.asarray(corr, dtype=float)
    s, p, lam, w = _check_s_args(s, parent_p, lam, w)
    diff = s - p
    quad_prior = float(diff @ solve_psd(lam, diff))
    with np.errstate(over="ignore"):
        v = np.exp(-s) * w
        if not np.all(np.isfinite(v)):
            return -np.inf  # quadratic term overflows: zero density
        quad_w = float(v @ solve_psd(r, v))
    if not np.isfinite(quad_w):
        return -np.inf
    return float(-np.sum(s) - 0.5 * quad_prior - 0.5 * quad_w)


def s_gradient(s, parent_p, lam, corr, w) -> np.ndarray:
    """Exact gradient of ``s_log_posterior`` in the diagonal coordinates:

        -1 - lam^-1 (s - p) + diag(W e^-S R^-1 e^-S W)
    """
    r = corr.matrix if isinstance(corr, CorrelationMatrix) else np.asarray(corr, dtype=float)
    s, p, lam, w = _check_s_args(s, parent_p, lam, w)
    v = np.exp(-s) * w
    return -np.ones_like(s) - solve_psd(lam, s - p) + v * solve_psd(r, v)


def optimize_s(init_s, parent_p, lam, corr, w) -> LogStdDev:
    """Gradient ascent on the S log posterior.

    Backtracking from a base step of 0.1 keeps every step an ascent step;
    terminates when successive iterates differ by < 1e-6 in infinity norm (or
    at the iteration cap).  The returned objective never falls below the
    starting point's.
    """
    s = np.asarray(init_s.diag if isinstance(init_s, LogStdDev) else init_s, dtype=float).copy()
    f = s_log_posterior(s, parent_p, lam, corr, w)
    if not np.isfinite(f):
        raise OptimizationError("non-finite objective at the starting point")
    for _ in range(S_MAX_ITERS):
        grad = s_gradient(s, parent_p, lam, corr, w)
        step = S_STEP
        moved = None
        for _ in range(40):
            trial = s + step * grad
            f_trial = s_log_posterior(trial, parent_p, lam, corr, w)
            if np.isfinite(f_trial) and f_trial >= f:
                moved = trial
                f = f_trial
                break
            step *= 0.5
        if moved is None:
            break
        delta = np.max(np.abs(moved - s))
        s = moved
        if delta < S_TOL:
            break
    if not np.all(np.isfinite(s)):
        raise OptimizationError("S optimization diverged")
    return LogStdDev(s)


# ---------------------------------------------------------------------------
# Sampling


def sample_correlation(dim: int, rng) -> np.ndarray:
    """Correlation of an IW(I, D+1) draw: uniform pairwise-correlation marginals."""
    rng = np.random.default_rng(rng)
    cov = np.atleast_2d(invwishart.rvs(df=dim + 1, scale=np.eye(dim), random_state=rng))
    scale = 1.0 / np.sqrt(np.diag(cov))
    return cov * np.outer(scale, scale)


def sample_mtl_params(
    config: ModelConfig,
    n_tasks: int,
    dim: int,
    rng,
    corr: np.ndarray | None = None,
    lam: np.ndarray | None = None,
    tree: CoalescentTree | None = None,
    leaf_log_stddev: list[np.ndarray] | None = None,
) -> MtlParams:
    """Draw MTL parameters; keyword overrides pin pieces for tests.

    Root log-stddevs start at zero (unit scales) and diffuse down the tree
    with rate lam ~ IW(sigma2 I, D+1).
    """
    rng = np.random.default_rng(rng)
    if corr is None:
        corr = sample_correlation(dim, rng)
    if lam is None:
        lam = np.atleast_2d(invwishart.rvs(df=dim + 1, scale=config.sigma2 * np.eye(dim),
                                           random_state=rng))
    if tree is None:
        tree = sample_coalescent(n_tasks, rng)
    if leaf_log_stddev is None:
        tree = diffuse_states(tree, np.zeros(dim), lam, rng)
        leaf_log_stddev = [tree.node(lid).state for lid in tree.leaf_ids]
    weights = []
    for s in leaf_log_stddev:
        cov = task_weight_covariance(np.asarray(s), corr)
        weights.append(np.linalg.cholesky(cov + 1e-12 * np.eye(dim)) @ rng.standard_normal(dim))
    return MtlParams(
        correlation=CorrelationMatrix(np.asarray(corr, dtype=float)),
        lam=DiffusionCovariance(np.asarray(lam, dtype=float)),
        tree=tree,
        leaf_log_stddev=[LogStdDev(np.asarray(s, dtype=float)) for s in leaf_log_stddev],
        leaf_weights=weights,
        rho2=config.rho2,
    )


def sample_mtl(
    config: ModelConfig, n_tasks: int, dim: int, n_per_task: int, rng_seed
) -> tuple[MtlParams, list[TaskDataset]]:
    """Parameters plus task data; all tasks share one input distribution."""
    rng = np.random.default_rng(rng_seed)
    truth = sample_mtl_params(config, n_tasks, dim, rng)
    tasks = sample_task_data(truth.leaf_weights, n_per_task, config.task_kind, config.rho2, rng)
    return truth, tasks


# ---------------------------------------------------------------------------
# EM


def _correlation_objective(r: np.ndarray, leaf_s: list[np.ndarray], leaf_w: list[np.ndarray]) -> float:
    """R-dependent part of the hard-EM objective: prior plus w likelihoods."""
    total = correlation_log_prior(r)
    if total <= LOG_DENSITY_FLOOR:
        return LOG_DENSITY_FLOOR
    for s, w in zip(leaf_s, leaf_w):
        cov = task_weight_covariance(s, r)
        try:
            total += gauss_logpdf(w, np.zeros_like(w), cov)
        except Exception:
            return LOG_DENSITY_FLOOR
    return total


def update_correlation(
    r_old: np.ndarray, leaf_s: list[np.ndarray], leaf_w: list[np.ndarray]
) -> np.ndarray:
    """Inverse-Wishart-style correlation update with monotone acceptance.

    Whitened weights z_k = e^-S_k w_k are N(0, R) draws under the model; the
    IW-mode scale I + sum z z^T is renormalized to unit diagonal.  The
    candidate is kept only if the R-dependent hard-EM objective (prior plus
    weight likelihoods) does not decrease.
    """
    d = r_old.shape[0]
    scatter = np.eye(d)
    for s, w in zip(leaf_s, leaf_w):
        z = np.exp(-np.asarray(s)) * np.asarray(w)
        scatter += np.outer(z, z)
    scale = 1.0 / np.sqrt(np.diag(scatter))
    candidate = scatter * np.outer(scale, scale)
    if _correlation_objective(candidate, leaf_s, leaf_w) >= _correlation_objective(
        r_old, leaf_s, leaf_w
    ):
        return candidate
    return r_old


def em_fit_mtl(
    data: list[TaskDataset],
    config: ModelConfig,
    fixed_tree: CoalescentTree | None = None,
    fixed_lambda=None,
    holdout_data: list[TaskDataset] | None = None,
) -> MtlParams:
    """Hard-EM fit of the multitask model.

    Per iteration: (1) MAP weights under N(0, e^S R e^S); (2) each leaf's S by
    gradient ascent given its parent's smoothed value (root pinned at 0);
    (3) new tree over the leaf S vectors; (4) diffusion update over the tree
    and the constrained correlation update.  Held-out iterate selection works
    as in the domain-adaptation fit.
    """
    if len(data) < 2:
        raise InvalidArgumentError("need at least 2 tasks")
    if len({t.dim for t in data}) != 1:
        raise InvalidArgumentError("tasks disagree on feature dimension")
    if config.variant not in ("full", "diag"):
        raise InvalidArgumentError(f"MTL supports full/diag variants, not {config.variant!r}")
    d = data[0].dim
    diagonal = config.diagonal
    rng = np.random.default_rng(config.seed)
    if holdout_data is not None:
        if len(holdout_data) != len(data):
            raise InvalidArgumentError("holdout_data must align with data, one task each")
        select = True
        train, held = list(data), list(holdout_data)
    elif config.holdout_fraction > 0:
        select = True
        splits = [split_task(t, config.holdout_fraction, rng) for t in data]
        train = [s[0] for s in splits]
        held = [s[1] for s in splits]
    else:
        select = False
        train, held = list(data), None
    names = [str(t.task_id) for t in train]
    k = len(train)

    def fit_weights(leaf_s, r):
        posts = []
        for task, s in zip(train, leaf_s):
            cov = task_weight_covariance(s, r)
            # scale-relative floor keeps the prior factorizable when the
            # correlation update lands near the PSD boundary
            cov = cov + 1e-10 * float(np.max(np.diag(cov))) * np.eye(d)
            prior = GaussianMessage(np.zeros(d), cov)
            posts.append(map_weights(task, prior, config.rho2))
        return posts

    def s_messages(leaf_s):
        var = S_MESSAGE_VAR * (np.ones(d) if diagonal else np.eye(d))
        return [GaussianMessage(np.asarray(s, dtype=float), var) for s in leaf_s]

    def identity():
        return np.ones(d) if diagonal else np.eye(d)

    # iterate 0 assumes no shared structure: weights under unit-scale priors,
    # then an independent scale estimate per task (parent 0, spherical prior)
    # so the first tree is built over informative S values
    corr = np.eye(d)
    lam = as_cov(fixed_lambda) if fixed_lambda is not None else identity()
    weights = fit_weights([np.zeros(d) for _ in range(k)], corr)
    init_prior = config.sigma2 * identity()
    leaf_s = [
        optimize_s(np.zeros(d), np.zeros(d), init_prior, corr, w).diag for w in weights
    ]
    msgs = s_messages(leaf_s)
    tree = fixed_tree or greedy_rate1_build(msgs, lam, names=names)
    curve = [heldout_wll(weights, held, config.rho2)] if select else []
    snapshots = [(corr, lam, tree, leaf_s, weights)]

    root_pin = GaussianMessage(np.zeros(d), np.zeros(d) if diagonal else np.zeros((d, d)))
    for _ in range(config.em_iters):
        weights = fit_weights(leaf_s, corr)
        marginals = node_posteriors(tree, s_messages(leaf_s), lam, root_pin)
        new_s = []
        for idx, lid in enumerate(tree.leaf_ids):
            parent = tree.node(lid).parent_id
            parent_s = marginals[parent].mean
            branch = tree.branch_length(lid)
            prior_cov = branch * lam
            new_s.append(
                optimize_s(leaf_s[idx], parent_s, prior_cov, corr, weights[idx]).diag
            )
        leaf_s = new_s
        msgs = s_messages(leaf_s)
        if fixed_tree is None:
            tree = greedy_rate1_build(msgs, lam, names=names)
        if fixed_lambda is None:
            lam = mstep_lambda(bp_upward(tree, msgs, lam), lam)
        corr = update_correlation(corr, leaf_s, weights)
        if select:
            curve.append(heldout_wll(weights, held, config.rho2))
        snapshots.append((corr, lam, tree, leaf_s, weights))

    best = int(np.argmax(curve)) if select else len(snapshots) - 1
    corr_b, lam_b, tree_b, s_b, w_b = snapshots[best]
    return MtlParams(
        correlation=CorrelationMatrix(corr_b),
        lam=DiffusionCovariance(lam_b),
        tree=tree_b,
        leaf_log_stddev=[LogStdDev(s) for s in s_b],
        leaf_weights=[np.asarray(w) for w in w_b],
        rho2=config.rho2,
        selected_iter=best,
        holdout_curve=curve,
    )


def heldout_wll(weights: list[np.ndarray], held, rho2: float) -> float:
    posts = [WeightPosterior(w, np.zeros((w.size, w.size))) for w in weights]
    return heldout_log_likelihood(posts, held, rho2)
