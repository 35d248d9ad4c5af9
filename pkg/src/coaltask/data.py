"""Dataset ingestion, preprocessing, splits, and the non-tree baselines.

Two on-disk formats, one file per task, tied together by a JSON manifest:

* dense CSV: header row, first column is the label;
* sparse: libsvm-style lines ``label idx:val idx:val ...`` with 1-based
  indices.

Floats are written with ``repr`` so load -> save -> load round-trips
bit-for-bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, InvalidArgumentError
from .glm import CLASSIFICATION, REGRESSION, TaskDataset, map_weights
from .tree import GaussianMessage

SCENARIO_KINDS = ("all-tasks-vary-N", "per-target", "noise-injection")


@dataclass
class ProblemBundle:
    """Train and test tasks sharing one feature space."""

    tasks: list[TaskDataset]
    test_tasks: list[TaskDataset]
    names: list[str]
    holdout_fraction: float = 0.1

    def __post_init__(self):
        dims = {t.dim for t in self.tasks} | {t.dim for t in self.test_tasks}
        if len(dims) > 1:
            raise InvalidArgumentError(f"tasks disagree on feature dimension: {sorted(dims)}")
        if len(self.names) != len(self.tasks):
            raise InvalidArgumentError("one name per task required")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise InvalidArgumentError("holdout_fraction must be in (0, 1)")

    @property
    def feature_dim(self) -> int:
        return self.tasks[0].dim

    @property
    def kind(self) -> str:
        return self.tasks[0].kind

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)


@dataclass
class ExperimentScenario:
    """One experimental axis: which knob varies across grid points."""

    kind: str = "all-tasks-vary-N"
    train_sizes: list[int] = field(default_factory=list)
    target: str | int | None = None
    scramble_fractions: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise InvalidArgumentError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "noise-injection":
            if not self.scramble_fractions:
                raise InvalidArgumentError("noise-injection needs scramble_fractions")
            if any(not 0.0 <= f <= 1.0 for f in self.scramble_fractions):
                raise InvalidArgumentError("scramble fractions must lie in [0, 1]")
        else:
            if not self.train_sizes:
                raise InvalidArgumentError("scenario needs a nonempty train_sizes grid")
            if any(s <= 0 for s in self.train_sizes):
                raise InvalidArgumentError("train sizes must be positive")
        if self.kind == "per-target" and self.target is None:
            raise InvalidArgumentError("per-target scenario needs a target task")

    def points(self) -> list:
        return list(self.scramble_fractions if self.kind == "noise-injection" else self.train_sizes)


# ---------------------------------------------------------------------------
# Loading and saving


def _parse_label(text: str, kind: str, path, line_no) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(f"bad label {text!r}", path, line_no) from None
    if kind == CLASSIFICATION and value not in (-1.0, 0.0, 1.0):
        raise DataFormatError(f"unknown label symbol {text!r}", path, line_no)
    return value


def _load_csv_task(path, name, kind) -> TaskDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError("empty task file", path)
    header = lines[0].split(",")
    d = len(header) - 1
    if d < 1:
        raise DataFormatError("header must list a label column and >=1 features", path, 1)
    labels, rows = [], []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != d + 1:
            raise DataFormatError(f"expected {d + 1} columns, got {len(parts)}", path, i)
        labels.append(_parse_label(parts[0], kind, path, i))
        try:
            rows.append([float(p) for p in parts[1:]])
        except ValueError:
            raise DataFormatError("bad feature value", path, i) from None
    if not rows:
        raise DataFormatError("task file has no data rows", path)
    return TaskDataset(name, np.array(rows), np.array(labels), kind)


def _load_sparse_task(path, name, kind, dim=None) -> TaskDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    entries = []
    max_idx = 0
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split()
        label = _parse_label(parts[0], kind, path, i)
        feats = []
        for token in parts[1:]:
            try:
                idx_s, val_s = token.split(":")
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise DataFormatError(f"bad sparse token {token!r}", path, i) from None
            if idx < 1:
                raise DataFormatError("sparse indices are 1-based", path, i)
            feats.append((idx, val))
            max_idx = max(max_idx, idx)
        entries.append((label, feats))
    if not entries:
        raise DataFormatError("empty task file", path)
    d = dim if dim is not None else max_idx
    if max_idx > d:
        raise DataFormatError(f"index {max_idx} exceeds declared dimension {d}", path)
    inputs = np.zeros((len(entries), d))
    labels = np.zeros(len(entries))
    for row, (label, feats) in enumerate(entries):
        labels[row] = label
        for idx, val in feats:
            inputs[row, idx - 1] = val
    return TaskDataset(name, inputs, labels, kind)


def load_problem(manifest_path, fmt: str | None = None) -> ProblemBundle:
    """Load a bundle from its JSON manifest (one train/test file pair per task)."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    fmt = fmt or manifest.get("format", "csv")
    if fmt not in ("csv", "sparse"):
        raise InvalidArgumentError(f"unknown format {fmt!r}")
    kind = manifest.get("kind", CLASSIFICATION)
    base = os.path.dirname(os.path.abspath(manifest_path))
    dim = manifest.get("dim")

    def load_one(rel, name):
        path = os.path.join(base, rel)
        if fmt == "csv":
            return _load_csv_task(path, name, kind)
        return _load_sparse_task(path, name, kind, dim)

    tasks, test_tasks, names = [], [], []
    for entry in manifest["tasks"]:
        name = entry["name"]
        names.append(name)
        tasks.append(load_one(entry["train"], name))
        if "test" in entry:
            test_tasks.append(load_one(entry["test"], name))
    dims = {t.dim for t in tasks + test_tasks}
    if len(dims) > 1:
        if fmt == "sparse" and dim is None:
            # sparse files only bound the dimension from below: widen to the max
            d = max(dims)
            tasks = [_widen(t, d) for t in tasks]
            test_tasks = [_widen(t, d) for t in test_tasks]
        else:
            raise DataFormatError(f"tasks disagree on feature dimension: {sorted(dims)}",
                                  manifest_path)
    return ProblemBundle(tasks, test_tasks, names,
                         holdout_fraction=manifest.get("holdout_fraction", 0.1))


def _widen(task: TaskDataset, d: int) -> TaskDataset:
    if task.dim == d:
        return task
    inputs = np.zeros((task.n_examples, d))
    inputs[:, : task.dim] = task.inputs
    return TaskDataset(task.task_id, inputs, task.labels, task.kind)


def _format_float(x: float) -> str:
    return repr(float(x))


def save_problem(bundle: ProblemBundle, directory, fmt: str = "csv") -> str:
    """Write one file per task plus a manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    ext = "csv" if fmt == "csv" else "svm"
    entries = []
    test_by_name = {t.task_id: t for t in bundle.test_tasks}
    for name, task in zip(bundle.names, bundle.tasks):
        entry = {"name": name, "train": f"{name}.train.{ext}"}
        _save_task(task, os.path.join(directory, entry["train"]), fmt)
        if name in test_by_name:
            entry["test"] = f"{name}.test.{ext}"
            _save_task(test_by_name[name], os.path.join(directory, entry["test"]), fmt)
        entries.append(entry)
    manifest = {
        "format": fmt,
        "kind": bundle.kind,
        "holdout_fraction": bundle.holdout_fraction,
        "dim": bundle.feature_dim,
        "tasks": entries,
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _save_task(task: TaskDataset, path, fmt):
    with open(path, "w") as fh:
        if fmt == "csv":
            fh.write(",".join(["label"] + [f"x{j + 1}" for j in range(task.dim)]) + "\n")
            for y, row in zip(task.labels, task.inputs):
                fh.write(",".join([_format_float(y)] + [_format_float(v) for v in row]) + "\n")
        else:
            for y, row in zip(task.labels, task.inputs):
                toks = [_format_float(y)]
                for j, v in enumerate(row):
                    if v != 0.0:
                        toks.append(f"{j + 1}:{_format_float(v)}")
                fh.write(" ".join(toks) + "\n")


# ---------------------------------------------------------------------------
# Preprocessing


def pca_reduce(bundle: ProblemBundle, target_dim: int) -> ProblemBundle:
    """Project every task with one PCA basis fit on pooled, centered train inputs."""
    d = bundle.feature_dim
    if target_dim > d:
        raise InvalidArgumentError(f"target_dim {target_dim} exceeds feature dim {d}")
    pooled = np.vstack([t.inputs for t in bundle.tasks])
    center = pooled.mean(axis=0)
    cov = np.cov(pooled - center, rowvar=False, bias=True)
    cov = np.atleast_2d(cov)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:target_dim]
    basis = evecs[:, order]
    # deterministic sign: largest-magnitude loading positive
    for j in range(basis.shape[1]):
        i = np.argmax(np.abs(basis[:, j]))
        if basis[i, j] < 0:
            basis[:, j] = -basis[:, j]

    def project(task: TaskDataset) -> TaskDataset:
        return TaskDataset(task.task_id, (task.inputs - center) @ basis, task.labels, task.kind)

    return ProblemBundle(
        [project(t) for t in bundle.tasks],
        [project(t) for t in bundle.test_tasks],
        list(bundle.names),
        bundle.holdout_fraction,
    )


def split_task(task: TaskDataset, fraction: float, rng) -> tuple[TaskDataset, TaskDataset]:
    """Per-task holdout split, label-stratified for classification."""
    if not 0.0 < fraction < 1.0:
        raise InvalidArgumentError("fraction must be in (0, 1)")
    rng = np.random.default_rng(rng)
    n = task.n_examples
    total = round(fraction * n)
    if total < 1:
        raise InvalidArgumentError(
            f"task {task.task_id!r} too small to hold out >=1 of {n} examples at {fraction}"
        )
    if total >= n:
        raise InvalidArgumentError(f"holdout would consume all {n} examples")
    if task.kind == CLASSIFICATION:
        hold_idx = _stratified_pick(task.labels, total, rng)
    else:
        hold_idx = rng.permutation(n)[:total]
    mask = np.zeros(n, dtype=bool)
    mask[hold_idx] = True
    return task.subset(~mask), task.subset(mask)


def _stratified_pick(labels, total, rng):
    classes = np.unique(labels)
    ideal = {c: total * np.sum(labels == c) / labels.size for c in classes}
    take = {c: min(int(math.floor(ideal[c])), int(np.sum(labels == c))) for c in classes}
    remaining = total - sum(take.values())
    by_remainder = sorted(classes, key=lambda c: (-(ideal[c] - math.floor(ideal[c])), c))
    for c in by_remainder:
        if remaining <= 0:
            break
        if take[c] < np.sum(labels == c):
            take[c] += 1
            remaining -= 1
    picks = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        picks.append(rng.permutation(idx)[: take[c]])
    return np.concatenate(picks)


def split_holdout(bundle: ProblemBundle, fraction: float, rng_seed) -> tuple[ProblemBundle, ProblemBundle]:
    """Split every train task; test tasks ride along with the train bundle."""
    rng = np.random.default_rng(rng_seed)
    train_tasks, hold_tasks = [], []
    for task in bundle.tasks:
        tr, ho = split_task(task, fraction, rng)
        train_tasks.append(tr)
        hold_tasks.append(ho)
    train = ProblemBundle(train_tasks, bundle.test_tasks, list(bundle.names), bundle.holdout_fraction)
    hold = ProblemBundle(hold_tasks, [], list(bundle.names), bundle.holdout_fraction)
    return train, hold


def _derangement(n: int, rng) -> np.ndarray:
    if n < 2:
        return np.arange(n)
    for _ in range(100):
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm
    # fall back to a uniformly random n-cycle, which has no fixed points
    order = rng.permutation(n)
    perm = np.empty(n, dtype=int)
    perm[order] = np.roll(order, 1)
    return perm


def scramble_task(task: TaskDataset, fraction: float, rng_seed) -> TaskDataset:
    """Permute the rows of ceil(fraction * D) randomly chosen feature columns.

    Each chosen column gets its own row derangement; labels and unchosen
    columns are untouched.
    """
    if not 0.0 <= fraction <= 1.0:
        raise InvalidArgumentError("fraction must be in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    n_cols = math.ceil(fraction * task.dim)
    inputs = task.inputs.copy()
    if n_cols > 0:
        cols = rng.choice(task.dim, size=n_cols, replace=False)
        for col in sorted(cols):
            inputs[:, col] = inputs[_derangement(task.n_examples, rng), col]
    return TaskDataset(task.task_id, inputs, task.labels.copy(), task.kind)


# ---------------------------------------------------------------------------
# Baselines


def _spherical_prior(d: int, sigma2: float) -> GaussianMessage:
    return GaussianMessage(np.zeros(d), sigma2 * np.ones(d))


def baseline_pool(datasets: list[TaskDataset], sigma2: float = 1.0, rho2: float = 1.0) -> np.ndarray:
    """One MAP fit on all tasks concatenated."""
    merged = TaskDataset(
        "pool",
        np.vstack([t.inputs for t in datasets]),
        np.concatenate([t.labels for t in datasets]),
        datasets[0].kind,
    )
    return map_weights(merged, _spherical_prior(merged.dim, sigma2), rho2)


def baseline_indp(datasets: list[TaskDataset], sigma2: float = 1.0, rho2: float = 1.0) -> list[np.ndarray]:
    """Independent per-task MAP fits with a spherical prior."""
    return [map_weights(t, _spherical_prior(t.dim, sigma2), rho2) for t in datasets]


def feda_augment(datasets: list[TaskDataset]) -> list[TaskDataset]:
    """Feature augmentation: x in task k maps to a (K+1)D vector whose shared
    block and k-th task block both equal x."""
    k, d = len(datasets), datasets[0].dim
    out = []
    for i, task in enumerate(datasets):
        aug = np.zeros((task.n_examples, (k + 1) * d))
        aug[:, :d] = task.inputs
        aug[:, (i + 1) * d:(i + 2) * d] = task.inputs
        out.append(TaskDataset(task.task_id, aug, task.labels, task.kind))
    return out

def baseline_feda(datasets: list[TaskDataset], sigma2: float = 1.0, rho2: float = 1.0) -> list[np.ndarray]:
    """Single MAP fit in the augmented space; returns per-task effective
    weights (shared block + own block) in the original feature space."""
    k, d = len(datasets), datasets[0].dim
    augmented = feda_augment(datasets)
    merged = TaskDataset(
        "feda",
        np.vstack([t.inputs for t in augmented]),
        np.concatenate([t.labels for t in augmented]),
        datasets[0].kind,
    )
    w = map_weights(merged, _spherical_prior((k + 1) * d, sigma2), rho2)
    shared = w[:d]
    return [shared + w[(i + 1) * d:(i + 2) * d] for i in range(k)]
