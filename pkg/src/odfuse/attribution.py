"""Feature attribution for the boosted-tree model.

Local attributions use the polynomial-time path-dependent tree Shapley
algorithm: when a feature is "absent", its split is replaced by the
cover-weighted average over both branches, and the subset weighting is
carried along the decision path incrementally. Attributions are computed
on pre-clamp raw scores, where the local-accuracy identity

    base_value + sum(contributions) = raw model score

is exact. A brute-force subset-enumeration oracle is included for
verification on small trees, along with permutation importance as a
model-agnostic cross-check.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .fusion import FusionModel, RegressionTree, raw_score_matrix
from .ingest import FeatureVector, FusionDataset

__all__ = [
    "AttributionVector",
    "GlobalImportance",
    "shap_values",
    "shap_matrix",
    "global_importance",
    "permutation_importance",
    "tree_shap_single",
    "tree_expectation",
    "brute_force_shap",
    "write_importance_csv",
    "write_attributions_csv",
    "write_permutation_csv",
]


@dataclass(frozen=True)
class AttributionVector:
    """Per-feature contributions plus the expected score they start from."""

    feature_names: tuple[str, ...]
    contributions: np.ndarray
    base_value: float

    def total(self) -> float:
        return self.base_value + float(self.contributions.sum())


@dataclass(frozen=True)
class GlobalImportance:
    feature_names: tuple[str, ...]
    mean_abs: np.ndarray
    ranking: tuple[str, ...]
    # One-hot road-tag columns folded into a single aggregate importance.
    tag_aggregate: float = 0.0


def _tree_as_lists(tree: RegressionTree):
    return (
        tree.feature.tolist(),
        tree.threshold.tolist(),
        tree.left.tolist(),
        tree.right.tolist(),
        tree.value.tolist(),
        tree.cover.tolist(),
    )


def _extend(path: list[list[float]], pz: float, po: float, pi: int) -> None:
    l = len(path)
    path.append([pi, pz, po, 1.0 if l == 0 else 0.0])
    for i in range(l - 1, -1, -1):
        path[i + 1][3] += po * path[i][3] * (i + 1) / (l + 1)
        path[i][3] = pz * path[i][3] * (l - i) / (l + 1)


def _unwind(path: list[list[float]], index: int) -> None:
    l = len(path) - 1
    z, o = path[index][1], path[index][2]
    n = path[l][3]
    for j in range(l - 1, -1, -1):
        if o != 0.0:
            t = path[j][3]
            path[j][3] = n * (l + 1) / ((j + 1) * o)
            n = t - path[j][3] * z * (l - j) / (l + 1)
        else:
            path[j][3] = path[j][3] * (l + 1) / (z * (l - j))
    for j in range(index, l):
        path[j][0] = path[j + 1][0]
        path[j][1] = path[j + 1][1]
        path[j][2] = path[j + 1][2]
    path.pop()


def _unwound_sum(path: list[list[float]], index: int) -> float:
    l = len(path) - 1
    z, o = path[index][1], path[index][2]
    n = path[l][3]
    total = 0.0
    if o != 0.0:
        for j in range(l - 1, -1, -1):
            t = n * (l + 1) / ((j + 1) * o)
            total += t
            n = path[j][3] - t * z * ((l - j) / (l + 1))
    else:
        for j in range(l - 1, -1, -1):
            total += path[j][3] / (z * ((l - j) / (l + 1)))
    return total


def tree_shap_single(tree: RegressionTree, x, n_features: int) -> np.ndarray:
    """Path-dependent Shapley contributions of one tree for one input row."""
    if tree.cover[0] <= 0:
        raise DataError("tree lacks cover metadata; cannot compute attributions")
    phi = [0.0] * n_features
    _shap_accumulate(_tree_as_lists(tree), [float(v) for v in x], phi, 1.0)
    return np.asarray(phi, dtype=np.float64)


def _shap_accumulate(tree_lists, xs: list[float], phi: list[float], scale: float) -> None:
    feature, threshold, left, right, value, cover = tree_lists

    def recurse(node: int, path: list[list[float]], pz: float, po: float, pi: int) -> None:
        path = [el[:] for el in path]
        _extend(path, pz, po, pi)
        f = feature[node]
        if f < 0:
            leaf_value = value[node] * scale
            for i in range(1, len(path)):
                w = _unwound_sum(path, i)
                el = path[i]
                phi[int(el[0])] += w * (el[2] - el[1]) * leaf_value
            return
        if xs[f] <= threshold[node]:
            hot, cold = left[node], right[node]
        else:
            hot, cold = right[node], left[node]
        iz = io = 1.0
        found = -1
        for i in range(len(path)):
            if path[i][0] == f:
                found = i
                break
        if found >= 0:
            iz, io = path[found][1], path[found][2]
            _unwind(path, found)
        parent_cover = cover[node]
        recurse(hot, path, iz * cover[hot] / parent_cover, io, f)
        recurse(cold, path, iz * cover[cold] / parent_cover, 0.0, f)

    recurse(0, [], 1.0, 1.0, -1)


def tree_expectation(tree: RegressionTree, x, present: frozenset[int] | set[int]) -> float:
    """Cover-weighted conditional expectation with only ``present`` features
    following the input; the brute-force oracle's value function."""
    feature, threshold, left, right, value, cover = _tree_as_lists(tree)
    xs = [float(v) for v in x]

    def recurse(node: int) -> float:
        f = feature[node]
        if f < 0:
            return value[node]
        if f in present:
            child = left[node] if xs[f] <= threshold[node] else right[node]
            return recurse(child)
        cl, cr = cover[left[node]], cover[right[node]]
        return (cl * recurse(left[node]) + cr * recurse(right[node])) / (cl + cr)

    return recurse(0)


def brute_force_shap(tree: RegressionTree, x, n_features: int) -> tuple[np.ndarray, float]:
    """Exact Shapley values by enumerating all 2^n feature subsets.

    Exponential in the feature count; intended as a verification oracle for
    small trees only. Returns (contributions, base value).
    """
    values: dict[frozenset[int], float] = {}

    def v(subset: frozenset[int]) -> float:
        if subset not in values:
            values[subset] = tree_expectation(tree, x, subset)
        return values[subset]

    phi = np.zeros(n_features)
    all_features = list(range(n_features))
    fact = math.factorial
    denom = fact(n_features)
    for i in all_features:
        others = [j for j in all_features if j != i]
        for size in range(len(others) + 1):
            weight = fact(size) * fact(n_features - size - 1) / denom
            for subset in combinations(others, size):
                s = frozenset(subset)
                phi[i] += weight * (v(s | {i}) - v(s))
    return phi, v(frozenset())


def _target_model(model: FusionModel, target: str):
    tm = model.targets.get(target)
    if tm is None:
        raise ConfigError(f"unknown target {target!r}; known: {list(model.targets)}")
    return tm


def shap_values(model: FusionModel, target: str, x: FeatureVector | np.ndarray) -> AttributionVector:
    """Ensemble attributions for one input: per-tree path-dependent values,
    scaled by the learning rate and summed across trees."""
    row = x.to_array() if isinstance(x, FeatureVector) else np.asarray(x, dtype=np.float64)
    phi, base = shap_matrix(model, target, row[None, :])
    return AttributionVector(
        feature_names=model.feature_names, contributions=phi[0], base_value=base
    )


def shap_matrix(model: FusionModel, target: str, X: np.ndarray) -> tuple[np.ndarray, float]:
    """Attributions for every row of a feature matrix; returns (phi, base)."""
    tm = _target_model(model, target)
    lr = model.hyperparams.learning_rate
    n = len(model.feature_names)
    rows = [[float(v) for v in row] for row in X]
    acc = [[0.0] * n for _ in rows]
    base = tm.base_score
    for tree in tm.trees:
        if tree.cover[0] <= 0:
            raise DataError("tree lacks cover metadata; cannot compute attributions")
        lists = _tree_as_lists(tree)
        for xs, phi_row in zip(rows, acc):
            _shap_accumulate(lists, xs, phi_row, lr)
        base += lr * tree.expected_value()
    return np.asarray(acc, dtype=np.float64), float(base)


def global_importance(model: FusionModel, target: str, rows: np.ndarray) -> GlobalImportance:
    """Mean absolute attribution per feature over an evaluation set."""
    if rows.shape[0] == 0:
        raise DataError("global importance needs at least one row")
    phi, _ = shap_matrix(model, target, rows)
    mean_abs = np.abs(phi).mean(axis=0)
    order = sorted(range(len(model.feature_names)), key=lambda i: (-mean_abs[i], i))
    tag_total = float(
        sum(mean_abs[i] for i, name in enumerate(model.feature_names) if name.startswith("tag_"))
    )
    return GlobalImportance(
        feature_names=model.feature_names,
        mean_abs=mean_abs,
        ranking=tuple(model.feature_names[i] for i in order),
        tag_aggregate=tag_total,
    )


def permutation_importance(
    model: FusionModel,
    target: str,
    dataset: FusionDataset,
    repeats: int = 5,
    seed: int = 0,
) -> dict[str, float]:
    """Mean validation R^2 drop when one feature column is shuffled."""
    if repeats < 1:
        raise ConfigError(f"repeats must be positive, got {repeats}")
    if dataset.split_index >= dataset.n_rows:
        raise DataError("validation partition is empty")
    t_index = list(model.targets).index(target) if target in model.targets else None
    if t_index is None:
        raise ConfigError(f"unknown target {target!r}")
    X = dataset.X_valid
    y = dataset.Y_valid[:, t_index]
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise DataError("validation target has zero variance")

    def r2_of(Xm: np.ndarray) -> float:
        pred = np.maximum(raw_score_matrix(model, Xm, target), 0.0)
        return 1.0 - float(np.sum((pred - y) ** 2)) / ss_tot

    base_r2 = r2_of(X)
    rng = np.random.default_rng(seed)
    drops: dict[str, float] = {}
    for j, name in enumerate(model.feature_names):
        acc = 0.0
        for _ in range(repeats):
            Xp = X.copy()
            Xp[:, j] = Xp[rng.permutation(X.shape[0]), j]
            acc += base_r2 - r2_of(Xp)
        drops[name] = acc / repeats
    return drops


def write_importance_csv(path: str | Path, imp: GlobalImportance) -> None:
    rank_of = {name: i + 1 for i, name in enumerate(imp.ranking)}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "mean_abs_shap", "rank"])
        for i, name in enumerate(imp.feature_names):
            writer.writerow([name, repr(float(imp.mean_abs[i])), rank_of[name]])
        writer.writerow(["tagValue", repr(imp.tag_aggregate), ""])


def write_attributions_csv(
    path: str | Path, feature_names: tuple[str, ...], phi: np.ndarray, base: float
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["base_value", *feature_names])
        for row in phi:
            writer.writerow([repr(base), *(repr(float(v)) for v in row)])


def write_permutation_csv(path: str | Path, drops: dict[str, float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "r2_drop"])
        for name, drop in drops.items():
            writer.writerow([name, repr(drop)])
