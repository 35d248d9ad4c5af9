"""Coalescent task trees and Gaussian message passing over them.

A tree couples K task-specific parameter vectors: leaves sit at time 0, each
merge event sits strictly earlier (more negative) in time, and a vector
diffuses from the root toward the leaves as Brownian motion with rate matrix
``lam`` (variance ``branch_length * lam`` per edge).

Messages are Gaussian factors over a node's latent vector.  ``bp_upward``
folds leaf factors toward the root; ``leaf_cavity_priors`` additionally runs
the downward sweep, yielding for each leaf the distribution of its latent
vector given every *other* leaf's factor (the E-step prior).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMessageError, InvalidArgumentError
from .gaussian import (
    as_cov,
    check_psd,
    combine,
    gauss_logpdf,
    inflate,
    psd_sqrt,
)


@dataclass
class GaussianMessage:
    """Mean/variance factor over a node's latent vector.

    ``var`` is a (D, D) covariance or a (D,) vector of per-coordinate
    variances in diagonal mode.
    """

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.var = np.asarray(self.var, dtype=float)
        if self.var.ndim not in (1, 2):
            raise InvalidArgumentError("message variance must be 1-D or 2-D")
        d = self.mean.size
        shape = (d,) if self.var.ndim == 1 else (d, d)
        if self.var.shape != shape:
            raise InvalidArgumentError(
                f"message variance shape {self.var.shape} does not match mean size {d}"
            )

    @property
    def dim(self) -> int:
        return self.mean.size

    def validate(self) -> None:
        check_psd(self.var, "message variance")


@dataclass
class DiffusionCovariance:
    """Brownian rate matrix: (D, D) PSD, or (D,) positive diagonal entries."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim not in (1, 2):
            raise InvalidArgumentError("diffusion covariance must be 1-D or 2-D")

    @property
    def is_diagonal(self) -> bool:
        return self.values.ndim == 1

    def validate(self) -> None:
        check_psd(self.values, "diffusion covariance")


@dataclass
class TreeNode:
    id: int
    time: float
    parent_id: int | None = None
    child_ids: tuple[int, ...] = ()
    message: GaussianMessage | None = None
    state: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return len(self.child_ids) == 0


@dataclass
class CoalescentTree:
    """Rooted binary tree over K task leaves, node id == index into ``nodes``."""

    nodes: list[TreeNode]
    root_id: int
    leaf_ids: list[int]
    leaf_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.leaf_names:
            self.leaf_names = [f"t{k}" for k in range(len(self.leaf_ids))]

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_ids)

    def node(self, node_id: int) -> TreeNode:
        return self.nodes[node_id]

    def branch_length(self, node_id: int) -> float:
        """Time gap from a node up to its parent (0 for the root)."""
        node = self.nodes[node_id]
        if node.parent_id is None:
            return 0.0
        return node.time - self.nodes[node.parent_id].time

    def postorder(self) -> list[int]:
        """Node ids with every child before its parent."""
        order: list[int] = []
        stack = [self.root_id]
        while stack:
            nid = stack.pop()
            order.append(nid)
            stack.extend(self.nodes[nid].child_ids)
        order.reverse()
        return order

    def preorder(self) -> list[int]:
        return list(reversed(self.postorder()))

    def leaf_set(self, node_id: int) -> frozenset[int]:
        """Leaf ids under a node (the node's clade)."""
        leaves = []
        stack = [node_id]
        while stack:
            nid = stack.pop()
            node = self.nodes[nid]
            if node.is_leaf:
                leaves.append(nid)
            else:
                stack.extend(node.child_ids)
        return frozenset(leaves)

    def validate(self, strict_times: bool = True) -> None:
        """Check the structural invariants; raises InvalidArgumentError.

        ``strict_times=False`` permits zero-length internal branches, which
        manually forced topologies (e.g. a star tree encoded as a caterpillar
        with coincident internal times) rely on.
        """
        k = len(self.leaf_ids)
        n_internal = sum(1 for n in self.nodes if not n.is_leaf)
        n_leaves = sum(1 for n in self.nodes if n.is_leaf)
        if n_leaves != k or set(self.leaf_ids) != {n.id for n in self.nodes if n.is_leaf}:
            raise InvalidArgumentError("leaf_ids inconsistent with leaf nodes")
        if k >= 2 and n_internal != k - 1:
            raise InvalidArgumentError(f"expected {k - 1} internal nodes, found {n_internal}")
        if len(self.leaf_names) != k:
            raise InvalidArgumentError("one leaf name per leaf required")
        for idx, node in enumerate(self.nodes):
            if node.id != idx:
                raise InvalidArgumentError(f"node id {node.id} at index {idx}; ids are positional")
            if not node.is_leaf and len(node.child_ids) != 2:
                raise InvalidArgumentError(f"internal node {node.id} is not binary")
            if node.is_leaf and node.time != 0.0:
                raise InvalidArgumentError(f"leaf {node.id} not at time 0")
            for cid in node.child_ids:
                child = self.nodes[cid]
                if child.parent_id != node.id:
                    raise InvalidArgumentError(f"parent link broken at node {cid}")
                gap = child.time - node.time
                if gap < 0 or (strict_times and gap <= 0):
                    raise InvalidArgumentError(
                        f"node {node.id} (t={node.time}) not earlier than child {cid} (t={child.time})"
                    )
        root = self.nodes[self.root_id]
        if root.parent_id is not None:
            raise InvalidArgumentError("root has a parent")
        if len(self.postorder()) != len(self.nodes):
            raise InvalidArgumentError("tree is not connected or has stray nodes")

    def with_messages(self, messages: dict[int, GaussianMessage]) -> "CoalescentTree":
        nodes = [
            dataclasses.replace(n, message=messages.get(n.id, n.message)) for n in self.nodes
        ]
        return CoalescentTree(nodes, self.root_id, list(self.leaf_ids), list(self.leaf_names))

    def with_states(self, states: dict[int, np.ndarray]) -> "CoalescentTree":
        nodes = [dataclasses.replace(n, state=states.get(n.id, n.state)) for n in self.nodes]
        return CoalescentTree(nodes, self.root_id, list(self.leaf_ids), list(self.leaf_names))


def sample_coalescent(
    n_tasks: int,
    rng_seed: int | np.random.Generator,
    names: list[str] | None = None,
) -> CoalescentTree:
    """Draw a tree from the K-coalescent prior.

    With ``n`` surviving lineages the wait to the next merge is exponential
    with rate ``n (n-1) / 2`` (every pair merges independently at rate 1) and
    the merging pair is uniform over surviving lineages.
    """
    if n_tasks < 2:
        raise InvalidArgumentError("coalescent needs at least 2 leaves")
    rng = np.random.default_rng(rng_seed)
    nodes = [TreeNode(id=k, time=0.0) for k in range(n_tasks)]
    lineages = list(range(n_tasks))
    t = 0.0
    for event in range(n_tasks - 1):
        n = len(lineages)
        rate = n * (n - 1) / 2.0
        t -= rng.exponential(1.0 / rate)
        ia, ib = rng.choice(n, size=2, replace=False)
        a, b = lineages[ia], lineages[ib]
        new_id = n_tasks + event
        nodes.append(TreeNode(id=new_id, time=t, child_ids=(a, b)))
        nodes[a].parent_id = new_id
        nodes[b].parent_id = new_id
        lineages = [x for x in lineages if x not in (a, b)] + [new_id]
    tree = CoalescentTree(nodes, root_id=2 * n_tasks - 2, leaf_ids=list(range(n_tasks)),
                          leaf_names=list(names) if names else [])
    return tree


def star_tree(n_tasks: int, depth: float, names: list[str] | None = None) -> CoalescentTree:
    """Binary caterpillar with all internal nodes at time ``-depth``.

    Zero-length internal branches make every leaf's latent vector an
    independent draw around one shared ancestor: the shared-Gaussian-prior
    special case.
    """
    if n_tasks < 2:
        raise InvalidArgumentError("star tree needs at least 2 leaves")
    if depth <= 0:
        raise InvalidArgumentError("depth must be positive")
    nodes = [TreeNode(id=k, time=0.0) for k in range(n_tasks)]
    prev = 0
    for event in range(n_tasks - 1):
        new_id = n_tasks + event
        other = event + 1
        nodes.append(TreeNode(id=new_id, time=-depth, child_ids=(prev, other)))
        nodes[prev].parent_id = new_id
        nodes[other].parent_id = new_id
        prev = new_id
    return CoalescentTree(nodes, root_id=2 * n_tasks - 2, leaf_ids=list(range(n_tasks)),
                          leaf_names=list(names) if names else [])


def diffuse_states(
    tree: CoalescentTree,
    root_state: np.ndarray,
    lam,
    rng_seed: int | np.random.Generator,
) -> CoalescentTree:
    """Top-down Brownian diffusion: child ~ N(parent, branch_length * lam)."""
    lam_arr = as_cov(lam)
    root_state = np.asarray(root_state, dtype=float)
    d = root_state.size
    expect = (d,) if lam_arr.ndim == 1 else (d, d)
    if lam_arr.shape != expect:
        raise InvalidArgumentError(
            f"diffusion covariance shape {lam_arr.shape} does not match state dim {d}"
        )
    rng = np.random.default_rng(rng_seed)
    states: dict[int, np.ndarray] = {tree.root_id: root_state.copy()}
    for nid in tree.preorder():
        if nid == tree.root_id:
            continue
        node = tree.node(nid)
        dt = tree.branch_length(nid)
        z = rng.standard_normal(d)
        if lam_arr.ndim == 1:
            step = np.sqrt(dt * lam_arr) * z
        else:
            step = psd_sqrt(dt * lam_arr) @ z
        states[nid] = states[node.parent_id] + step
    return tree.with_states(states)


def _upward_messages(
    tree: CoalescentTree,
    leaf_messages: list[GaussianMessage],
    lam: np.ndarray,
) -> tuple[dict[int, GaussianMessage], float]:
    """Fold leaf factors rootward; returns per-node messages and the summed
    log normalizers of the pairwise Gaussian products."""
    if len(leaf_messages) != tree.n_leaves:
        raise InvalidArgumentError("need exactly one message per leaf")
    msg_of_leaf = dict(zip(tree.leaf_ids, leaf_messages))
    messages: dict[int, GaussianMessage] = {}
    log_z = 0.0
    for nid in tree.postorder():
        node = tree.node(nid)
        if node.is_leaf:
            messages[nid] = msg_of_leaf[nid]
            continue
        acc = None
        for cid in node.child_ids:
            child_msg = messages[cid]
            dt = tree.branch_length(cid)
            mean_c = child_msg.mean
            var_c = inflate(child_msg.var, dt, lam)
            if acc is None:
                acc = (mean_c, var_c)
            else:
                mean, var, z = combine(acc[0], acc[1], mean_c, var_c)
                log_z += z
                acc = (mean, var)
        messages[nid] = GaussianMessage(acc[0], acc[1])
    return messages, log_z


def bp_upward(
    tree: CoalescentTree,
    leaf_messages: list[GaussianMessage],
    lam,
) -> CoalescentTree:
    """Attach the upward belief-propagation message to every node.

    At an internal node the message variance is the harmonic combination of
    the two branch-inflated child variances and the mean their
    precision-weighted average:

        v_i = [(v_l + dt_l lam)^-1 + (v_r + dt_r lam)^-1]^-1
        y_i = v_i [(v_l + dt_l lam)^-1 y_l + (v_r + dt_r lam)^-1 y_r]
    """
    messages, _ = _upward_messages(tree, leaf_messages, as_cov(lam))
    return tree.with_messages(messages)


def tree_data_log_likelihood(
    tree: CoalescentTree,
    leaf_messages: list[GaussianMessage],
    lam,
    root_prior: GaussianMessage,
) -> float:
    """Log marginal likelihood of the leaf factors, internal vectors integrated out.

    Equals the dense joint-Gaussian log density of the leaf means under
    root-prior + Brownian covariance + leaf factor variances.
    """
    lam_arr = as_cov(lam)
    messages, log_z = _upward_messages(tree, leaf_messages, lam_arr)
    root_msg = messages[tree.root_id]
    return log_z + gauss_logpdf(root_msg.mean, root_prior.mean, root_msg.var + root_prior.var)


def leaf_cavity_priors(
    tree: CoalescentTree,
    leaf_messages: list[GaussianMessage],
    lam,
    root_prior: GaussianMessage,
) -> list[GaussianMessage]:
    """Per-leaf prior given all *other* leaves' factors (downward sweep).

    For leaf k this is p(latent_k | factors at leaves != k, root prior): the
    downward message from k's parent, excluding k's own upward contribution.
    Returned in ``tree.leaf_ids`` order.
    """
    lam_arr = as_cov(lam)
    up, _ = _upward_messages(tree, leaf_messages, lam_arr)
    down: dict[int, tuple[np.ndarray, np.ndarray]] = {
        tree.root_id: (root_prior.mean, root_prior.var)
    }
    for nid in tree.preorder():
        node = tree.node(nid)
        if node.is_leaf:
            continue
        for cid in node.child_ids:
            mean, var = down[nid]
            for sid in node.child_ids:
                if sid == cid:
                    continue
                sib = up[sid]
                sib_var = inflate(sib.var, tree.branch_length(sid), lam_arr)
                mean, var, _ = combine(mean, var, sib.mean, sib_var)
            down[cid] = (mean, inflate(var, tree.branch_length(cid), lam_arr))
    return [GaussianMessage(*down[lid]) for lid in tree.leaf_ids]


def node_posteriors(
    tree: CoalescentTree,
    leaf_messages: list[GaussianMessage],
    lam,
    root_prior: GaussianMessage,
) -> dict[int, GaussianMessage]:
    """Smoothed marginal at every node: upward sweep combined with the
    downward message (root prior plus everything outside the node's subtree).

    A zero-variance root prior pins the root value exactly.
    """
    lam_arr = as_cov(lam)
    up, _ = _upward_messages(tree, leaf_messages, lam_arr)
    down: dict[int, tuple[np.ndarray, np.ndarray]] = {
        tree.root_id: (root_prior.mean, root_prior.var)
    }
    for nid in tree.preorder():
        node = tree.node(nid)
        if node.is_leaf:
            continue
        for cid in node.child_ids:
            mean, var = down[nid]
            for sid in node.child_ids:
                if sid == cid:
                    continue
                sib = up[sid]
                sib_var = inflate(sib.var, tree.branch_length(sid), lam_arr)
                mean, var, _ = combine(mean, var, sib.mean, sib_var)
            down[cid] = (mean, inflate(var, tree.branch_length(cid), lam_arr))
    out = {}
    for nid in range(len(tree.nodes)):
        d_mean, d_var = down[nid]
        mean, var, _ = combine(up[nid].mean, up[nid].var, d_mean, d_var)
        out[nid] = GaussianMessage(mean, var)
    return out


def _golden_max(f, lo: float, hi: float, tol: float = 1e-7) -> tuple[float, float]:
    """Golden-section maximization of a unimodal scalar function."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = c if fc > fd else d
    return x, max(fc, fd)


def greedy_rate1_build(
    leaf_messages: list[GaussianMessage],
    lam,
    names: list[str] | None = None,
    max_duration: float = 50.0,
) -> CoalescentTree:
    """Bottom-up agglomerative tree construction.

    At each event, for every surviving pair, the candidate coalescence time
    maximizes (log merge likelihood of the two messages at that time) minus
    the duration (unit-rate exponential prior on the wait since the previous
    event); the pair with the best score merges.  The 1-D search runs
    golden-section over durations in [1e-6, max_duration].  Exact score ties
    break toward the pair with the lexicographically smallest (min leaf id)
    key, so results do not depend on evaluation order.
    """
    k = len(leaf_messages)
    if k < 2:
        raise InvalidArgumentError("need at least 2 leaf messages")
    lam_arr = as_cov(lam)
    nodes = [TreeNode(id=i, time=0.0) for i in range(k)]
    # live lineage: (min leaf id, node id, time, mean, var)
    live = [(i, i, 0.0, leaf_messages[i].mean, leaf_messages[i].var) for i in range(k)]
    t_prev = 0.0
    for event in range(k - 1):
        live.sort(key=lambda e: e[0])
        best = None
        for ia in range(len(live)):
            for ib in range(ia + 1, len(live)):
                key_a, _, t_a, mean_a, var_a = live[ia]
                key_b, _, t_b, mean_b, var_b = live[ib]
                base_var = var_a + var_b
                base_gap = (t_a - t_prev) + (t_b - t_prev)

                def score(delta):
                    total = inflate(base_var, base_gap + 2.0 * delta, lam_arr)
                    return -delta + gauss_logpdf(mean_a, mean_b, total)

                delta, val = _golden_max(score, 1e-6, max_duration)
                if best is None or val > best[0]:
                    best = (val, (key_a, key_b), ia, ib, delta)
        _, _, ia, ib, delta = best
        t_new = t_prev - delta
        key_a, id_a, t_a, mean_a, var_a = live[ia]
        key_b, id_b, t_b, mean_b, var_b = live[ib]
        mean, var, _ = combine(
            mean_a, inflate(var_a, t_a - t_new, lam_arr),
            mean_b, inflate(var_b, t_b - t_new, lam_arr),
        )
        new_id = k + event
        nodes.append(TreeNode(id=new_id, time=t_new, child_ids=(id_a, id_b)))
        nodes[id_a].parent_id = new_id
        nodes[id_b].parent_id = new_id
        live = [e for i, e in enumerate(live) if i not in (ia, ib)]
        live.append((min(key_a, key_b), new_id, t_new, mean, var))
        t_prev = t_new
    return CoalescentTree(nodes, root_id=2 * k - 2, leaf_ids=list(range(k)),
                          leaf_names=list(names) if names else [])


# ---------------------------------------------------------------------------
# Serialization


def _format_length(x: float) -> str:
    if x == int(x):
        return str(int(x))
    return repr(float(x))


def _quote_name(name: str) -> str:
    if name and not any(c in name for c in " \t()[]:;,'\""):
        return name
    return "'" + name.replace("'", "''") + "'"


def export_newick(tree: CoalescentTree) -> str:
    """Newick text with branch lengths equal to parent-child time gaps."""
    name_of = dict(zip(tree.leaf_ids, tree.leaf_names))

    def render(nid: int) -> str:
        node = tree.node(nid)
        if node.is_leaf:
            body = _quote_name(name_of[nid])
        else:
            body = "(" + ",".join(render(c) for c in node.child_ids) + ")"
        if node.parent_id is None:
            return body
        return body + ":" + _format_length(tree.branch_length(nid))

    return render(tree.root_id) + ";"


class _NewickParser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, msg: str):
        raise InvalidArgumentError(f"newick parse error at offset {self.pos}: {msg}")

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def parse_name(self) -> str:
        self.skip_ws()
        if self.peek() == "'":
            self.pos += 1
            chars = []
            while True:
                if self.pos >= len(self.text):
                    self.error("unterminated quoted name")
                c = self.text[self.pos]
                if c == "'":
                    if self.pos + 1 < len(self.text) and self.text[self.pos + 1] == "'":
                        chars.append("'")
                        self.pos += 2
                        continue
                    self.pos += 1
                    break
                chars.append(c)
                self.pos += 1
            return "".join(chars)
        chars = []
        while self.peek() and self.peek() not in "():;,":
            chars.append(self.text[self.pos])
            self.pos += 1
        return "".join(chars).strip()

    def parse_length(self) -> float:
        self.skip_ws()
        if self.peek() != ":":
            return 0.0
        self.pos += 1
        start = self.pos
        while self.peek() and (self.peek().isdigit() or self.peek() in "+-.eE"):
            self.pos += 1
        try:
            return float(self.text[start:self.pos])
        except ValueError:
            self.error("bad branch length")

    def parse_clade(self):
        """Returns (children, name, branch_length) nested structure."""
        self.skip_ws()
        if self.peek() == "(":
            self.pos += 1
            children = [self.parse_clade()]
            while True:
                self.skip_ws()
                if self.peek() == ",":
                    self.pos += 1
                    children.append(self.parse_clade())
                elif self.peek() == ")":
                    self.pos += 1
                    break
                else:
                    self.error("expected ',' or ')'")
            name = self.parse_name()
            return (children, name, self.parse_length())
        name = self.parse_name()
        if not name:
            self.error("expected a leaf name")
        return ([], name, self.parse_length())


def parse_newick(text: str) -> CoalescentTree:
    """Inverse of export_newick for ultrametric binary trees.

    Leaf ids are assigned 0..K-1 in order of appearance; node times are
    reconstructed from root-to-node path lengths with leaves placed at 0.
    """
    parser = _NewickParser(text.strip())
    top = parser.parse_clade()
    parser.skip_ws()
    if parser.peek() != ";":
        parser.error("expected ';'")

    leaves: list[tuple[str, float]] = []
    internals: list[tuple] = []

    def walk(clade, depth: float) -> tuple[bool, int]:
        children, name, length = clade
        depth = depth + length
        if not children:
            leaves.append((name, depth))
            return True, len(leaves) - 1
        ids = [walk(c, depth) for c in children]
        internals.append(([i for _, i in ids], depth, [is_leaf for is_leaf, _ in ids]))
        return False, len(internals) - 1

    walk(top, 0.0)
    k = len(leaves)
    max_depth = max(d for _, d in leaves)
    nodes = [TreeNode(id=i, time=d - max_depth) for i, (_, d) in enumerate(leaves)]
    for idx, (child_refs, depth, child_is_leaf) in enumerate(internals):
        nid = k + idx
        cids = tuple(ref if leaf else k + ref for ref, leaf in zip(child_refs, child_is_leaf))
        nodes.append(TreeNode(id=nid, time=depth - max_depth, child_ids=cids))
        for cid in cids:
            nodes[cid].parent_id = nid
    return CoalescentTree(
        nodes,
        root_id=len(nodes) - 1,
        leaf_ids=list(range(k)),
        leaf_names=[name for name, _ in leaves],
    )


def tree_to_dict(tree: CoalescentTree) -> dict:
    """JSON-ready dump with node ids, times, links, and states."""
    return {
        "root_id": tree.root_id,
        "leaf_ids": list(tree.leaf_ids),
        "leaf_names": list(tree.leaf_names),
        "nodes": [
            {
                "id": n.id,
                "time": n.time,
                "parent_id": n.parent_id,
                "child_ids": list(n.child_ids),
                "state": None if n.state is None else np.asarray(n.state).tolist(),
            }
            for n in tree.nodes
        ],
    }


def tree_from_dict(data: dict) -> CoalescentTree:
    nodes = [
        TreeNode(
            id=d["id"],
            time=d["time"],
            parent_id=d["parent_id"],
            child_ids=tuple(d["child_ids"]),
            state=None if d.get("state") is None else np.asarray(d["state"], dtype=float),
        )
        for d in data["nodes"]
    ]
    return CoalescentTree(nodes, data["root_id"], list(data["leaf_ids"]), list(data["leaf_names"]))


def export_tree_json(tree: CoalescentTree) -> str:
    return json.dumps(tree_to_dict(tree), sort_keys=True)
