"""Brute-force reference computations used to pin expected values.

Everything here works on dense joint-Gaussian algebra over the full set of
leaves and deliberately avoids the package's message-passing code paths.
"""

import numpy as np


def as_full(mat, d):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim == 1:
        return np.diag(mat)
    assert mat.shape == (d, d)
    return mat


def root_depths(tree):
    """Time elapsed from the root down to each node."""
    depth = {tree.root_id: 0.0}
    for nid in tree.preorder():
        if nid == tree.root_id:
            continue
        node = tree.node(nid)
        depth[nid] = depth[node.parent_id] + (node.time - tree.node(node.parent_id).time)
    return depth


def ancestors(tree, nid):
    chain = [nid]
    while tree.node(chain[-1]).parent_id is not None:
        chain.append(tree.node(chain[-1]).parent_id)
    return chain


def mrca_depths(tree):
    """K x K matrix of root-to-MRCA time depths for leaf pairs."""
    depth = root_depths(tree)
    chains = {lid: ancestors(tree, lid) for lid in tree.leaf_ids}
    k = tree.n_leaves
    out = np.zeros((k, k))
    for i, a in enumerate(tree.leaf_ids):
        set_a = set(chains[a])
        for j, b in enumerate(tree.leaf_ids):
            if i == j:
                out[i, j] = depth[a]
                continue
            for anc in chains[b]:
                if anc in set_a:
                    out[i, j] = depth[anc]
                    break
    return out


def dense_root_message(tree, leaf_messages, lam):
    """Gaussian factor p(observations | root value) as (mean, cov) in the root value.

    Builds the KD x KD covariance of the stacked leaf means conditioned on the
    root, then collapses it onto the root coordinate by generalized least
    squares.
    """
    d = leaf_messages[0].dim
    k = tree.n_leaves
    lam_f = as_full(lam, d)
    shared = mrca_depths(tree)
    cov = np.zeros((k * d, k * d))
    for i in range(k):
        for j in range(k):
            block = shared[i, j] * lam_f
            if i == j:
                block = block + as_full(leaf_messages[i].var, d)
            cov[i * d:(i + 1) * d, j * d:(j + 1) * d] = block
    obs = np.concatenate([m.mean for m in leaf_messages])
    design = np.tile(np.eye(d), (k, 1))
    cov_inv = np.linalg.inv(cov)
    var = np.linalg.inv(design.T @ cov_inv @ design)
    mean = var @ (design.T @ cov_inv @ obs)
    return mean, 0.5 * (var + var.T)


def dense_log_likelihood(tree, leaf_messages, lam, root_mean, root_var):
    """Log density of the stacked leaf means under the full joint Gaussian."""
    d = leaf_messages[0].dim
    k = tree.n_leaves
    lam_f = as_full(lam, d)
    root_var_f = as_full(root_var, d)
    shared = mrca_depths(tree)
    cov = np.zeros((k * d, k * d))
    for i in range(k):
        for j in range(k):
            block = root_var_f + shared[i, j] * lam_f
            if i == j:
                block = block + as_full(leaf_messages[i].var, d)
            cov[i * d:(i + 1) * d, j * d:(j + 1) * d] = block
    obs = np.concatenate([m.mean for m in leaf_messages])
    mean = np.tile(np.asarray(root_mean, dtype=float), k)
    r = obs - mean
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return -0.5 * (k * d * np.log(2 * np.pi) + logdet + r @ np.linalg.solve(cov, r))


def dense_leaf_cavity(tree, leaf_messages, lam, root_mean, root_var, leaf_index):
    """p(latent at leaf `leaf_index` | all other leaves' observations)."""
    d = leaf_messages[0].dim
    k = tree.n_leaves
    lam_f = as_full(lam, d)
    root_var_f = as_full(root_var, d)
    shared = mrca_depths(tree)
    depth = root_depths(tree)
    others = [i for i in range(k) if i != leaf_index]
    lid = tree.leaf_ids[leaf_index]

    # joint over (latent_k, obs_others)
    n = (1 + len(others)) * d
    cov = np.zeros((n, n))
    cov[:d, :d] = root_var_f + depth[lid] * lam_f
    for a, i in enumerate(others):
        blk = root_var_f + shared[leaf_index, i] * lam_f
        cov[:d, (1 + a) * d:(2 + a) * d] = blk
        cov[(1 + a) * d:(2 + a) * d, :d] = blk
        for b, j in enumerate(others):
            block = root_var_f + shared[i, j] * lam_f
            if i == j:
                block = block + as_full(leaf_messages[i].var, d)
            cov[(1 + a) * d:(2 + a) * d, (1 + b) * d:(2 + b) * d] = block
    mu = np.tile(np.asarray(root_mean, dtype=float), 1 + len(others))
    obs = np.concatenate([leaf_messages[i].mean for i in others])
    s11 = cov[:d, :d]
    s12 = cov[:d, d:]
    s22 = cov[d:, d:]
    gain = s12 @ np.linalg.inv(s22)
    mean = mu[:d] + gain @ (obs - mu[d:])
    var = s11 - gain @ s12.T
    return mean, 0.5 * (var + var.T)


def random_psd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T) / d + 0.1 * scale * np.eye(d)


def random_messages(rng, k, d, diagonal=False):
    from coaltask.tree import GaussianMessage

    out = []
    for _ in range(k):
        mean = rng.standard_normal(d)
        if diagonal:
            var = rng.uniform(0.1, 1.5, size=d)
        else:
            var = random_psd(rng, d)
        out.append(GaussianMessage(mean, var))
    return out
