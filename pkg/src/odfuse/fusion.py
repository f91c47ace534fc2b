"""Multi-target boosted regression trees for count correction.

One independent squared-error model per target (the aggregate total plus
the six length bands), all sharing the same feature matrix. Trees are fit
to residuals with exact greedy splits: every candidate threshold is the
midpoint between consecutive distinct sorted feature values, scored by the
regularized variance-reduction gain

    GL^2/(nL + l2) + GR^2/(nR + l2) - G^2/(n + l2)

where G sums the current residuals (unit hessian per sample). Leaf values
are sum(residuals)/(count + l2) and enter the prediction scaled by the
learning rate. Training draws no random numbers, so models are a pure
function of (data, hyperparameters).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import CATEGORY_ORDER, CountsByCategory, VehicleCategory
from .errors import ConfigError, DataError
from .ingest import FEATURE_NAMES, TARGET_NAMES, FeatureVector, FusionDataset

__all__ = [
    "GbtHyperparams",
    "RegressionTree",
    "FusionModel",
    "MetricRow",
    "MetricsReport",
    "train",
    "predict",
    "predict_matrix",
    "raw_score_matrix",
    "evaluate",
    "residual_table",
    "save_model",
    "load_model",
    "write_metrics_csv",
    "write_residuals_csv",
]

BASELINE_ROW_NAME = "people_flow_baseline"


@dataclass(frozen=True)
class GbtHyperparams:
    """Knobs of the boosted-tree learner.

    ``seed`` is recorded for provenance; the exact-greedy fit itself is
    deterministic and draws no random numbers.
    """

    n_trees: int = 300
    max_depth: int = 6
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    l2_leaf_regularization: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ConfigError(f"n_trees must be positive, got {self.n_trees}")
        if self.max_depth < 1:
            raise ConfigError(f"max_depth must be positive, got {self.max_depth}")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if self.min_samples_leaf < 1:
            raise ConfigError(f"min_samples_leaf must be positive, got {self.min_samples_leaf}")
        if self.l2_leaf_regularization < 0:
            raise ConfigError("l2_leaf_regularization must be non-negative")

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "min_samples_leaf": self.min_samples_leaf,
            "l2_leaf_regularization": self.l2_leaf_regularization,
            "seed": self.seed,
        }


@dataclass
class RegressionTree:
    """Flat-array binary tree. ``feature`` is -1 at leaves; ``cover`` is the
    training-sample count per node (parent cover = left + right)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(X.shape[0], dtype=np.int32)
        while True:
            feats = self.feature[idx]
            active = feats >= 0
            if not active.any():
                return self.value[idx]
            rows = np.nonzero(active)[0]
            node = idx[rows]
            go_left = X[rows, feats[rows]] <= self.threshold[node]
            idx[rows] = np.where(go_left, self.left[node], self.right[node])

    def expected_value(self) -> float:
        """Cover-weighted mean leaf value (prediction for an all-absent input)."""
        leaves = self.feature < 0
        return float(np.dot(self.value[leaves], self.cover[leaves]) / self.cover[0])


@dataclass
class TargetModel:
    base_score: float
    trees: list[RegressionTree]


@dataclass
class FusionModel:
    """Seven independently boosted targets over a shared feature layout."""

    hyperparams: GbtHyperparams
    feature_names: tuple[str, ...]
    targets: dict[str, TargetModel] = field(default_factory=dict)


class _TreeBuilder:
    """Grows one tree on the current residuals via exact greedy splits."""

    def __init__(self, X: np.ndarray, g: np.ndarray, hp: GbtHyperparams):
        self.X = X
        self.g = g
        self.lam = hp.l2_leaf_regularization
        self.msl = hp.min_samples_leaf
        self.max_depth = hp.max_depth
        self.n_features = X.shape[1]
        self._cols = np.arange(self.n_features)
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.cover: list[float] = []
        self.leaf_assignments: list[tuple[np.ndarray, float]] = []

    def build(self, sorted_cols: np.ndarray) -> RegressionTree:
        self._grow(sorted_cols, depth=0)
        return RegressionTree(
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            value=np.asarray(self.value, dtype=np.float64),
            cover=np.asarray(self.cover, dtype=np.float64),
        )

    def _new_node(self) -> int:
        idx = len(self.feature)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        self.cover.append(0.0)
        return idx

    def _make_leaf(self, idx: int, rows: np.ndarray) -> None:
        n = rows.shape[0]
        val = float(self.g[rows].sum() / (n + self.lam))
        self.value[idx] = val
        self.cover[idx] = float(n)
        self.leaf_assignments.append((rows, val))

    def _grow(self, sorted_cols: np.ndarray, depth: int) -> int:
        idx = self._new_node()
        n = sorted_cols.shape[0]
        rows = sorted_cols[:, 0]
        if depth >= self.max_depth or n < 2 * self.msl:
            self._make_leaf(idx, rows)
            return idx

        gv = self.g[sorted_cols]
        xv = self.X[sorted_cols, self._cols[None, :]]
        csum = np.cumsum(gv, axis=0)
        G = csum[-1]
        nL = np.arange(1, n, dtype=np.float64)[:, None]
        nR = n - nL
        GL = csum[:-1]
        GR = G[None, :] - GL
        gain = (
            GL * GL / (nL + self.lam)
            + GR * GR / (nR + self.lam)
            - (G * G / (n + self.lam))[None, :]
        )
        valid = (xv[1:] != xv[:-1]) & (nL >= self.msl) & (nR >= self.msl)
        gain = np.where(valid, gain, -np.inf)
        # Feature-major argmax: ties resolve to the lowest feature index,
        # then the lowest threshold, deterministically.
        flat = int(np.argmax(gain.T))
        f, pos = divmod(flat, n - 1)
        best_gain = gain[pos, f]
        if not np.isfinite(best_gain) or best_gain <= 0.0:
            self._make_leaf(idx, rows)
            return idx

        thr = (xv[pos, f] + xv[pos + 1, f]) / 2.0
        left_rows = sorted_cols[: pos + 1, f]
        goes_left = np.zeros(self.X.shape[0], dtype=bool)
        goes_left[left_rows] = True
        mask = goes_left[sorted_cols]
        n_left = pos + 1
        # Stable per-column partition: boolean indexing on the transposed
        # layout keeps each column's sorted order.
        left_sorted = sorted_cols.T[mask.T].reshape(self.n_features, n_left).T
        right_sorted = sorted_cols.T[~mask.T].reshape(self.n_features, n - n_left).T

        self.feature[idx] = int(f)
        self.threshold[idx] = float(thr)
        left_idx = self._grow(left_sorted, depth + 1)
        right_idx = self._grow(right_sorted, depth + 1)
        self.left[idx] = left_idx
        self.right[idx] = right_idx
        self.cover[idx] = self.cover[left_idx] + self.cover[right_idx]
        return idx


def train(dataset: FusionDataset, hp: GbtHyperparams | None = None) -> FusionModel:
    """Fit all seven target models on the training partition."""
    hp = hp or GbtHyperparams()
    X = dataset.X_train
    if X.shape[0] == 0:
        raise DataError("training partition is empty")
    if not np.isfinite(X).all():
        raise DataError("non-finite feature values in training partition")
    if not np.isfinite(dataset.Y_train).all():
        raise DataError("non-finite target values in training partition")

    sorted_cols = np.argsort(X, axis=0, kind="stable").astype(np.int64)
    model = FusionModel(hyperparams=hp, feature_names=FEATURE_NAMES)
    for t, name in enumerate(TARGET_NAMES):
        y = dataset.Y_train[:, t]
        base = float(y.mean())
        pred = np.full(y.shape[0], base, dtype=np.float64)
        trees: list[RegressionTree] = []
        for _ in range(hp.n_trees):
            builder = _TreeBuilder(X, y - pred, hp)
            tree = builder.build(sorted_cols)
            for rows, val in builder.leaf_assignments:
                pred[rows] += hp.learning_rate * val
            trees.append(tree)
        model.targets[name] = TargetModel(base_score=base, trees=trees)
    return model


def raw_score_matrix(model: FusionModel, X: np.ndarray, target: str) -> np.ndarray:
    """Unclamped ensemble score for one target over a feature matrix."""
    tm = model.targets.get(target)
    if tm is None:
        raise ConfigError(f"unknown target {target!r}; known: {list(model.targets)}")
    out = np.full(X.shape[0], tm.base_score, dtype=np.float64)
    lr = model.hyperparams.learning_rate
    for tree in tm.trees:
        out += lr * tree.predict_batch(X)
    return out


def predict_matrix(model: FusionModel, X: np.ndarray) -> np.ndarray:
    """Clamped predictions for all targets; columns follow TARGET_NAMES."""
    out = np.empty((X.shape[0], len(TARGET_NAMES)), dtype=np.float64)
    for t, name in enumerate(TARGET_NAMES):
        out[:, t] = raw_score_matrix(model, X, name)
    np.maximum(out, 0.0, out=out)
    return out


def predict(model: FusionModel, x: FeatureVector) -> CountsByCategory:
    """Predict per-category counts for one feature vector.

    The total comes from its own model rather than the category sum, so the
    two can disagree; negative raw scores clamp to zero.
    """
    row = predict_matrix(model, x.to_array()[None, :])[0]
    counts: dict[VehicleCategory, float] = {
        cat: float(row[1 + j]) for j, cat in enumerate(CATEGORY_ORDER)
    }
    return CountsByCategory(counts=counts, total=float(row[0]))


@dataclass(frozen=True)
class MetricRow:
    name: str
    rmse_train: float
    r2_train: float | None
    rmse_valid: float
    r2_valid: float | None


@dataclass
class MetricsReport:
    rows: list[MetricRow]

    def row(self, name: str) -> MetricRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def _rmse(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.sqrt(np.mean((pred - y) ** 2)))


def _r2(pred: np.ndarray, y: np.ndarray) -> float | None:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return None
    ss_res = float(np.sum((pred - y) ** 2))
    return 1.0 - ss_res / ss_tot


def evaluate(model: FusionModel, dataset: FusionDataset) -> MetricsReport:
    """Per-target RMSE and R^2 on both partitions, with the raw mobility
    flow as the baseline predictor of the total."""
    if dataset.split_index >= dataset.n_rows:
        raise DataError("validation partition is empty")
    pred_train = predict_matrix(model, dataset.X_train)
    pred_valid = predict_matrix(model, dataset.X_valid)
    rows = [
        MetricRow(
            name=BASELINE_ROW_NAME,
            rmse_train=_rmse(dataset.X_train[:, 0], dataset.Y_train[:, 0]),
            r2_train=_r2(dataset.X_train[:, 0], dataset.Y_train[:, 0]),
            rmse_valid=_rmse(dataset.X_valid[:, 0], dataset.Y_valid[:, 0]),
            r2_valid=_r2(dataset.X_valid[:, 0], dataset.Y_valid[:, 0]),
        )
    ]
    for t, name in enumerate(TARGET_NAMES):
        rows.append(
            MetricRow(
                name=name,
                rmse_train=_rmse(pred_train[:, t], dataset.Y_train[:, t]),
                r2_train=_r2(pred_train[:, t], dataset.Y_train[:, t]),
                rmse_valid=_rmse(pred_valid[:, t], dataset.Y_valid[:, t]),
                r2_valid=_r2(pred_valid[:, t], dataset.Y_valid[:, t]),
            )
        )
    return MetricsReport(rows=rows)


def residual_table(model: FusionModel, dataset: FusionDataset) -> list[tuple[float, float, float]]:
    """Validation rows as (true total, model residual, baseline residual),
    ordered by true total."""
    if dataset.split_index >= dataset.n_rows:
        raise DataError("validation partition is empty")
    y = dataset.Y_valid[:, 0]
    pred = predict_matrix(model, dataset.X_valid)[:, 0]
    baseline = dataset.X_valid[:, 0]
    rows = [(float(y[i]), float(pred[i] - y[i]), float(baseline[i] - y[i])) for i in range(y.shape[0])]
    rows.sort(key=lambda r: r[0])
    return rows


MODEL_FORMAT = "odfuse-fusion-model"
MODEL_VERSION = 1


def save_model(model: FusionModel, path: str | Path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "hyperparams": model.hyperparams.to_dict(),
        "feature_names": list(model.feature_names),
        "targets": {
            name: {
                "base_score": tm.base_score,
                "trees": [
                    {
                        "feature": tree.feature.tolist(),
                        "threshold": tree.threshold.tolist(),
                        "left": tree.left.tolist(),
                        "right": tree.right.tolist(),
                        "value": tree.value.tolist(),
                        "cover": tree.cover.tolist(),
                    }
                    for tree in tm.trees
                ],
            }
            for name, tm in model.targets.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_model(path: str | Path) -> FusionModel:
    p = Path(path)
    if not p.exists():
        raise DataError(f"model file not found: {p}")
    with open(p, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FORMAT:
        raise DataError(f"{p} is not a fusion model file")
    if doc.get("version") != MODEL_VERSION:
        raise DataError(f"unsupported model version {doc.get('version')} in {p}")
    model = FusionModel(
        hyperparams=GbtHyperparams(**doc["hyperparams"]),
        feature_names=tuple(doc["feature_names"]),
    )
    for name, tdoc in doc["targets"].items():
        trees = [
            RegressionTree(
                feature=np.asarray(t["feature"], dtype=np.int32),
                threshold=np.asarray(t["threshold"], dtype=np.float64),
                left=np.asarray(t["left"], dtype=np.int32),
                right=np.asarray(t["right"], dtype=np.int32),
                value=np.asarray(t["value"], dtype=np.float64),
                cover=np.asarray(t["cover"], dtype=np.float64),
            )
            for t in tdoc["trees"]
        ]
        model.targets[name] = TargetModel(base_score=float(tdoc["base_score"]), trees=trees)
    return model


def _fmt(value: float | None) -> str:
    return "NA" if value is None else repr(value)


def write_metrics_csv(path: str | Path, report: MetricsReport) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "rmse_train", "r2_train", "rmse_valid", "r2_valid"])
        for row in report.rows:
            writer.writerow(
                [row.name, repr(row.rmse_train), _fmt(row.r2_train), repr(row.rmse_valid), _fmt(row.r2_valid)]
            )


def write_residuals_csv(path: str | Path, rows: list[tuple[float, float, float]]) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y_total", "residual_model", "residual_baseline"])
        for y, rm, rb in rows:
            writer.writerow([repr(y), repr(rm), repr(rb)])
