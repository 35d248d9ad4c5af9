"""Hierarchical Bayesian transfer learning over latent coalescent trees.

Tasks (domains) sit at the leaves of a binary tree drawn from Kingman's
coalescent.  For domain adaptation the tree couples per-task classifier
weights through Brownian diffusion; for multitask learning it couples the
per-task covariance scales while a single correlation matrix is shared.
Fitting is EM with Gaussian belief propagation over the tree.
"""

__version__ = "0.1.0"

from .tree import (  # noqa: F401
    CoalescentTree,
    DiffusionCovariance,
    GaussianMessage,
    TreeNode,
    bp_upward,
    diffuse_states,
    export_newick,
    greedy_rate1_build,
    leaf_cavity_priors,
    parse_newick,
    sample_coalescent,
    star_tree,
    tree_data_log_likelihood,
)
