"""Domain adaptation: per-task weight vectors coupled through a latent tree.

Generative story: a root weight vector and diffusion covariance come from a
Normal-Inverse-Wishart draw, a tree from the coalescent prior, weight vectors
diffuse down the tree, and each task's labels follow its leaf's linear model.

Fitting is EM.  E-step: each task's MAP weights and inverse-Hessian
covariance under the Gaussian prior its leaf receives from the rest of the
tree.  M-step: diffusion covariance from the Inverse-Wishart mode over
sibling differences, then a fresh greedy tree over the leaf messages.  The
returned iterate maximizes held-out training likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag
from scipy.stats import invwishart

from .config import ModelConfig
from .data import split_task
from .errors import InvalidArgumentError
from .gaussian import as_cov, psd_sqrt
from .glm import (
    REGRESSION,
    TaskDataset,
    WeightPosterior,
    data_log_likelihood,
    estep_posterior,
)
from .tree import (
    CoalescentTree,
    DiffusionCovariance,
    GaussianMessage,
    bp_upward,
    diffuse_states,
    greedy_rate1_build,
    leaf_cavity_priors,
    sample_coalescent,
)

HYPER_GRID = (0.01, 0.1, 1.0, 10.0)


@dataclass
class InputModel:
    """Per-feature input model for the +X and Data variants.

    Continuous features diffuse their per-node means with a diagonal rate;
    discrete features follow the equilibrium-pull kernel of
    ``discrete_transition`` with equilibrium ``q_d`` and rate ``rates[d]``.
    """

    feature_kinds: list[str]
    categories: dict[int, np.ndarray] = field(default_factory=dict)
    equilibrium: dict[int, np.ndarray] = field(default_factory=dict)
    rates: np.ndarray | None = None

    def __post_init__(self):
        for kind in self.feature_kinds:
            if kind not in ("continuous", "discrete"):
                raise InvalidArgumentError(f"unknown feature kind {kind!r}")
        for d, q in self.equilibrium.items():
            q = np.asarray(q, dtype=float)
            if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-8:
                raise InvalidArgumentError(f"equilibrium for feature {d} is not a distribution")

    @classmethod
    def infer(cls, datasets: list[TaskDataset], feature_kinds: list[str] | None = None):
        d = datasets[0].dim
        kinds = list(feature_kinds) if feature_kinds else ["continuous"] * d
        categories = {}
        for j, kind in enumerate(kinds):
            if kind == "discrete":
                values = np.unique(np.concatenate([t.inputs[:, j] for t in datasets]))
                categories[j] = values
        return cls(kinds, categories)


def discrete_transition(q_d: np.ndarray, rate: float, delta: float) -> np.ndarray:
    """Transition matrix exp(Q delta) for the equilibrium-pull rate kernel:
    exp(-delta*rate) I + (1 - exp(-delta*rate)) 1 q^T."""
    q = np.asarray(q_d, dtype=float)
    if q.ndim != 1 or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-8:
        raise InvalidArgumentError("q_d must be a probability vector")
    if rate < 0 or delta < 0:
        raise InvalidArgumentError("rate and delta must be nonnegative")
    decay = np.exp(-delta * rate)
    return decay * np.eye(q.size) + (1.0 - decay) * np.tile(q, (q.size, 1))


def input_summary_message(task: TaskDataset, input_model: InputModel | None = None) -> GaussianMessage:
    """Gaussian summary of one task's input distribution (diagonal variance).

    Continuous feature: empirical mean with variance (empirical variance)/N.
    Discrete feature: one coordinate per category holding its frequency, with
    multinomial variance p(1-p)/N.
    """
    n = task.n_examples
    if n == 0:
        raise InvalidArgumentError("cannot summarize an empty task")
    if input_model is None:
        input_model = InputModel(["continuous"] * task.dim)
    means, variances = [], []
    for j, kind in enumerate(input_model.feature_kinds):
        col = task.inputs[:, j]
        if kind == "continuous":
            means.append(col.mean())
            variances.append(col.var() / n)
        else:
            cats = input_model.categories.get(j)
            if cats is None:
                raise InvalidArgumentError(f"no categories known for discrete feature {j}")
            for c in cats:
                p = float(np.mean(col == c))
                means.append(p)
                variances.append(p * (1.0 - p) / n)
    return GaussianMessage(np.array(means), np.array(variances))


def leaf_messages_with_inputs(
    datasets: list[TaskDataset],
    weight_posteriors: list[WeightPosterior],
    input_model: InputModel | None,
    variant: str,
) -> list[GaussianMessage]:
    """Messages for tree construction when inputs are modeled.

    ``diag+x`` / ``full+x`` concatenate the weight posterior with the input
    summary; ``data`` uses the input summary alone.
    """
    if variant not in ("diag+x", "full+x", "data"):
        raise InvalidArgumentError(f"variant {variant!r} does not model inputs")
    summaries = [input_summary_message(t, input_model) for t in datasets]
    if variant == "data":
        return summaries
    out = []
    for post, summary in zip(weight_posteriors, summaries):
        mean = np.concatenate([post.mean, summary.mean])
        if variant == "diag+x":
            w_var = np.diag(post.cov) if post.cov.ndim == 2 else post.cov
            var = np.concatenate([w_var, summary.var])
        else:
            var = block_diag(post.cov, np.diag(summary.var))
        out.append(GaussianMessage(mean, var))
    return out


@dataclass
class DaParams:
    """Fitted (or generating) domain-adaptation model."""

    lam: DiffusionCovariance
    tree: CoalescentTree
    leaf_posteriors: list[WeightPosterior]
    sigma2: float
    rho2: float
    input_model: InputModel | None = None
    selected_iter: int | None = None
    holdout_curve: list[float] = field(default_factory=list)

    @property
    def weights(self) -> list[np.ndarray]:
        return [p.mean for p in self.leaf_posteriors]


# ---------------------------------------------------------------------------
# Sampling


def sample_da_params(
    config: ModelConfig,
    n_tasks: int,
    dim: int,
    rng,
    lam: np.ndarray | None = None,
    root_mean: np.ndarray | None = None,
    tree: CoalescentTree | None = None,
    leaf_weights: list[np.ndarray] | None = None,
) -> DaParams:
    """Draw model parameters from the generative story.

    The keyword overrides pin individual pieces (known truth in tests).
    """
    rng = np.random.default_rng(rng)
    if lam is None:
        lam = np.atleast_2d(invwishart.rvs(df=dim + 1, scale=config.sigma2 * np.eye(dim),
                                           random_state=rng))
    lam = np.asarray(lam, dtype=float)
    if root_mean is None:
        root_mean = psd_sqrt(lam) @ rng.standard_normal(dim)
    if tree is None:
        tree = sample_coalescent(n_tasks, rng)
    if leaf_weights is None:
        tree = diffuse_states(tree, root_mean, lam, rng)
        leaf_weights = [tree.node(lid).state for lid in tree.leaf_ids]
    else:
        tree = tree.with_states(dict(zip(tree.leaf_ids, leaf_weights)))
    posts = [WeightPosterior(np.asarray(w, dtype=float), np.zeros((dim, dim))) for w in leaf_weights]
    return DaParams(DiffusionCovariance(lam), tree, posts, config.sigma2, config.rho2)


def sample_task_data(
    weights: list[np.ndarray],
    n_per_task: int,
    kind: str,
    rho2: float,
    rng,
    task_ids: list | None = None,
) -> list[TaskDataset]:
    """Standard-Gaussian inputs, labels from each task's linear model."""
    rng = np.random.default_rng(rng)
    out = []
    for k, w in enumerate(weights):
        d = np.asarray(w).size
        x = rng.standard_normal((n_per_task, d))
        z = x @ w
        if kind == REGRESSION:
            y = z + np.sqrt(rho2) * rng.standard_normal(n_per_task)
        else:
            p = 1.0 / (1.0 + np.exp(-z))
            y = np.where(rng.random(n_per_task) < p, 1.0, -1.0)
        out.append(TaskDataset(task_ids[k] if task_ids else f"task{k}", x, y, kind))
    return out


def sample_da(
    config: ModelConfig, n_tasks: int, dim: int, n_per_task: int, rng_seed
) -> tuple[DaParams, list[TaskDataset]]:
    rng = np.random.default_rng(rng_seed)
    truth = sample_da_params(config, n_tasks, dim, rng)
    tasks = sample_task_data(truth.weights, n_per_task, config.task_kind, config.rho2, rng)
    return truth, tasks


# ---------------------------------------------------------------------------
# M-step


def mstep_lambda(tree: CoalescentTree, current_lambda) -> np.ndarray:
    """Inverse-Wishart mode update of the diffusion covariance.

    Accumulates, over internal nodes, the sibling mean difference outer
    product whitened by the combined variance (child variances plus the
    two branch lengths times the current rate):

        S = I + sum_i W_i^{-1/2} D_i D_i^T W_i^{-1/2}

    and returns the mode S / (nu + dim + 1) with nu = dim + K + 1 degrees of
    freedom.  Diagonal mode runs the same update coordinatewise.
    """
    lam = as_cov(current_lambda)
    k = tree.n_leaves
    internal = [n for n in tree.nodes if not n.is_leaf]
    if any(n.message is None for n in tree.nodes):
        raise InvalidArgumentError("mstep_lambda needs messages at every node (run bp_upward)")
    dim = tree.node(tree.leaf_ids[0]).message.dim
    diagonal = lam.ndim == 1
    sigma = np.ones(dim) if diagonal else np.eye(dim)
    for node in internal:
        left, right = node.child_ids
        msg_l, msg_r = tree.node(left).message, tree.node(right).message
        diff = msg_l.mean - msg_r.mean
        t_i = tree.branch_length(left) + tree.branch_length(right)
        total = msg_l.var + msg_r.var + t_i * lam
        if diagonal:
            if np.any(total <= 0):
                raise InvalidArgumentError("non-positive combined variance in M-step")
            sigma = sigma + diff * diff / total
        else:
            w, q = np.linalg.eigh(total)
            if w.min() <= 0:
                raise InvalidArgumentError("singular combined variance in M-step")
            half = (q / np.sqrt(w)) @ q.T
            v = half @ diff
            sigma = sigma + np.outer(v, v)
    if not diagonal:
        evals = np.linalg.eigvalsh(sigma)
        if evals.min() < -1e-10:
            raise InvalidArgumentError("M-step accumulation lost positive semi-definiteness")
    nu = dim + k + 1
    return sigma / (nu + dim + 1)


# ---------------------------------------------------------------------------
# EM


def _identity(dim: int, diagonal: bool) -> np.ndarray:
    return np.ones(dim) if diagonal else np.eye(dim)


def _weight_message(post: WeightPosterior, diagonal: bool) -> GaussianMessage:
    var = np.diag(post.cov) if diagonal else post.cov
    return GaussianMessage(post.mean, var)


def _slice_weight_prior(msg: GaussianMessage, d: int) -> GaussianMessage:
    if msg.dim == d:
        return msg
    if msg.var.ndim == 1:
        return GaussianMessage(msg.mean[:d], msg.var[:d])
    return GaussianMessage(msg.mean[:d], msg.var[:d, :d])


def _project_lambda(lam: np.ndarray, d: int) -> np.ndarray:
    """Keep the weight block, zero the cross block, diagonalize the input block."""
    if lam.ndim == 1 or lam.shape[0] == d:
        return lam
    out = np.zeros_like(lam)
    out[:d, :d] = lam[:d, :d]
    idx = np.arange(d, lam.shape[0])
    out[idx, idx] = lam[idx, idx]
    return out


def heldout_log_likelihood(posts: list[WeightPosterior], held: list[TaskDataset], rho2: float) -> float:
    return sum(data_log_likelihood(p.mean, h, rho2) for p, h in zip(posts, held))


def em_fit_da(
    data: list[TaskDataset],
    config: ModelConfig,
    fixed_tree: CoalescentTree | None = None,
    fixed_lambda=None,
    input_model: InputModel | None = None,
    holdout_data: list[TaskDataset] | None = None,
) -> DaParams:
    """EM fit of the domain-adaptation model.

    Initialization is independent per-task MAP under a N(0, sigma2 I) prior
    (no shared structure).  Each iteration: cavity priors from the current
    tree, per-task MAP + Laplace covariance, diffusion update, tree rebuild.
    The iterate (including iterate 0) with the best held-out likelihood is
    returned.  The holdout comes either from ``holdout_data`` (per-task,
    aligned with ``data``, which is then trained on as-is) or from an
    internal per-task split of fraction ``config.holdout_fraction``; with
    neither, selection is disabled and the final iterate is returned.

    ``fixed_tree`` (leaf k <-> data[k]) and ``fixed_lambda`` pin the tree /
    diffusion; the ``data`` variant clusters input summaries once and fits
    weights with a single E-step against that tree.
    """
    if len(data) < 2:
        raise InvalidArgumentError("need at least 2 tasks")
    if len({t.dim for t in data}) != 1:
        raise InvalidArgumentError("tasks disagree on feature dimension")
    d = data[0].dim
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
    diagonal = config.diagonal
    with_x = config.variant in ("full+x", "diag+x")
    data_only = config.variant == "data"
    names = [str(t.task_id) for t in train]

    if config.models_inputs and input_model is None:
        input_model = InputModel.infer(train)
    input_msgs = (
        [input_summary_message(t, input_model) for t in train] if config.models_inputs else None
    )

    def tree_messages(posts):
        if with_x:
            return leaf_messages_with_inputs(train, posts, input_model, config.variant)
        return [_weight_message(p, diagonal) for p in posts]

    def run_estep(priors):
        posts = []
        for task, prior in zip(train, priors):
            posts.append(estep_posterior(task, prior, config.rho2))
        return posts

    # iterate 0: no shared structure
    prior0 = GaussianMessage(np.zeros(d), config.sigma2 * _identity(d, diagonal))
    posts = run_estep([prior0] * len(train))
    curve = [heldout_log_likelihood(posts, held, config.rho2)] if select else []

    if data_only:
        tree = fixed_tree or greedy_rate1_build(
            leaf_messages_with_inputs(train, posts, input_model, "data"),
            _identity(input_msgs[0].dim, True),
            names=names,
        )
        lam = as_cov(fixed_lambda) if fixed_lambda is not None else _identity(d, diagonal)
        snapshots = [(tree, lam, posts)]
        root_prior = GaussianMessage(np.zeros(d), config.sigma2 * _identity(d, diagonal))
        cavities = leaf_cavity_priors(tree, [_weight_message(p, diagonal) for p in posts],
                                      lam, root_prior)
        posts = run_estep(cavities)
        if select:
            curve.append(heldout_log_likelihood(posts, held, config.rho2))
        snapshots.append((tree, lam, posts))
    else:
        tree_dim = d + input_msgs[0].dim if with_x else d
        lam = as_cov(fixed_lambda) if fixed_lambda is not None else _identity(tree_dim, diagonal)
        msgs = tree_messages(posts)
        tree = fixed_tree or greedy_rate1_build(msgs, lam, names=names)
        snapshots = [(tree, lam, posts)]
        root_prior = GaussianMessage(np.zeros(tree_dim),
                                     config.sigma2 * _identity(tree_dim, diagonal))
        for _ in range(config.em_iters):
            cavities = leaf_cavity_priors(tree, msgs, lam, root_prior)
            posts = run_estep([_slice_weight_prior(c, d) for c in cavities])
            msgs = tree_messages(posts)
            if fixed_lambda is None:
                with_bp = bp_upward(tree, msgs, lam)
                lam = mstep_lambda(with_bp, lam)
                if with_x:
                    lam = _project_lambda(lam, d)
            if fixed_tree is None:
                tree = greedy_rate1_build(msgs, lam, names=names)
            if select:
                curve.append(heldout_log_likelihood(posts, held, config.rho2))
            snapshots.append((tree, lam, posts))

    best = int(np.argmax(curve)) if select else len(snapshots) - 1
    tree_b, lam_b, posts_b = snapshots[best]
    if diagonal:
        posts_b = [WeightPosterior(p.mean, np.diag(np.diag(p.cov))) for p in posts_b]
    return DaParams(
        lam=DiffusionCovariance(lam_b),
        tree=tree_b,
        leaf_posteriors=posts_b,
        sigma2=config.sigma2,
        rho2=config.rho2,
        input_model=input_model,
        selected_iter=best,
        holdout_curve=curve,
    )


def select_hyperparameters(
    data: list[TaskDataset],
    config: ModelConfig,
    grid=HYPER_GRID,
) -> tuple[float, float]:
    """Pick (sigma2, rho2) on the grid by held-out likelihood of a full fit.

    For classification rho2 does not enter the likelihood, so only sigma2 is
    searched.
    """
    from dataclasses import replace

    if config.holdout_fraction <= 0:
        raise InvalidArgumentError("hyperparameter selection needs a holdout fraction")
    rho_grid = grid if data[0].kind == REGRESSION else (config.rho2,)
    best, best_ll = (config.sigma2, config.rho2), -np.inf
    for sigma2 in grid:
        for rho2 in rho_grid:
            fit = em_fit_da(data, replace(config, sigma2=sigma2, rho2=rho2))
            ll = max(fit.holdout_curve)
            if ll > best_ll:
                best, best_ll = (sigma2, rho2), ll
    return best
