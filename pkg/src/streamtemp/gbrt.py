"""Gradient-boosted regression trees and the analyses built on them.

Trees use exact greedy least-squares splitting (every feature, every
boundary between distinct adjacent values).  Boosting fits each tree to the
current residuals and adds it with a constant learning rate on top of the
mean-of-target base prediction, so training MSE is non-increasing in the
number of stages.  Feature importance is the total squared-error reduction
attributed to each feature across all splits.

Also here: recursive feature elimination with cross-validation, Shapley
attribution by permutation sampling, and the attribute-vs-error analysis
used to interpret per-site model errors.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .numerics import Rng, UndefinedCorrelationError, spearman

__all__ = [
    "FeatureMatrix",
    "GbrtConfig",
    "GbrtModel",
    "fit_gbrt",
    "rfe_cv",
    "RfeResult",
    "shapley_values",
    "ErrorAnalysisConfig",
    "AttributeEffect",
    "attribute_error_analysis",
]


@dataclass
class FeatureMatrix:
    """Named feature rows with a target column; fully finite by contract."""

    names: tuple[str, ...]
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.names = tuple(self.names)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[1] != len(self.names):
            raise ValueError("x must be (N, D) matching names")
        if self.y.shape != (self.x.shape[0],):
            raise ValueError("y must be (N,)")
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all()):
            raise ValueError("feature matrix must be fully finite")

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    def select(self, names) -> "FeatureMatrix":
        idx = [self.names.index(n) for n in names]
        return FeatureMatrix(tuple(names), self.x[:, idx], self.y)


@dataclass(frozen=True)
class GbrtConfig:
    estimators: int = 100
    learning_rate: float = 0.3
    max_depth: int = 6
    min_samples_leaf: int = 1
    subsample: float = 1.0

    def __post_init__(self):
        if self.estimators < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("estimators, max_depth, min_samples_leaf must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")


class _Tree:
    """Flat-array binary regression tree."""

    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def finalize(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=np.float64)

    def predict(self, x: np.ndarray) -> np.ndarray:
        idx = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        while True:
            feat = self.feature[idx]
            active = feat >= 0
            if not active.any():
                break
            col = np.maximum(feat, 0)
            go_left = x[rows, col] <= self.threshold[idx]
            nxt = np.where(go_left, self.left[idx], self.right[idx])
            idx = np.where(active, nxt, idx)
        return self.value[idx]


def _build_tree(x, y, row_idx, config: GbrtConfig, importances: np.ndarray) -> _Tree:
    tree = _Tree()

    def grow(rows: np.ndarray, depth: int) -> int:
        node = tree._new_node()
        sub_y = y[rows]
        tree.value[node] = float(sub_y.mean())
        if depth >= config.max_depth or rows.size < 2 * config.min_samples_leaf:
            return node
        best_gain = 0.0
        best_feat = -1
        best_split = -1
        best_order = None
        for j in range(x.shape[1]):
            order = np.argsort(x[rows, j], kind="stable")
            vals = x[rows[order], j]
            i, gain = kernels.best_split_scan(vals, np.ascontiguousarray(sub_y[order]), config.min_samples_leaf)
            if i >= 0 and gain > best_gain:
                best_gain, best_feat, best_split, best_order = gain, j, i, order
        if best_feat < 0:
            return node
        ordered = rows[best_order]
        vals = x[ordered, best_feat]
        threshold = 0.5 * (vals[best_split - 1] + vals[best_split])
        tree.feature[node] = best_feat
        tree.threshold[node] = float(threshold)
        importances[best_feat] += best_gain
        tree.left[node] = grow(ordered[:best_split], depth + 1)
        tree.right[node] = grow(ordered[best_split:], depth + 1)
        return node

    grow(row_idx, 0)
    tree.finalize()
    return tree


@dataclass
class GbrtModel:
    feature_names: tuple[str, ...]
    base_prediction: float
    learning_rate: float
    trees: list[_Tree] = field(default_factory=list)
    importances: np.ndarray | None = None

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != len(self.feature_names):
            raise ValueError(f"expected {len(self.feature_names)} features, got {x.shape[1]}")
        out = np.full(x.shape[0], self.base_prediction)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(x)
        return out

    def staged_train_mse(self, data: FeatureMatrix) -> np.ndarray:
        """Training MSE after 0, 1, ..., n_trees stages."""
        out = np.empty(len(self.trees) + 1)
        pred = np.full(data.n_rows, self.base_prediction)
        out[0] = float(np.mean((data.y - pred) ** 2))
        for m, tree in enumerate(self.trees, start=1):
            pred = pred + self.learning_rate * tree.predict(data.x)
            out[m] = float(np.mean((data.y - pred) ** 2))
        return out

    def feature_importance(self) -> dict[str, float]:
        """Total squared-error reduction per feature, over all trees."""
        imp = self.importances if self.importances is not None else np.zeros(len(self.feature_names))
        return {name: float(v) for name, v in zip(self.feature_names, imp)}


def fit_gbrt(data: FeatureMatrix, config: GbrtConfig, rng: Rng | None = None) -> GbrtModel:
    """Boosted least-squares trees on a feature matrix.

    ``rng`` is consulted only when ``config.subsample`` < 1 (per-tree row
    sampling without replacement); the default configuration is fully
    deterministic.  A constant target yields the base prediction alone.
    """
    if config.subsample < 1.0 and rng is None:
        raise ValueError("subsampling requires an rng")
    base = float(data.y.mean())
    model = GbrtModel(
        feature_names=data.names,
        base_prediction=base,
        learning_rate=config.learning_rate,
        importances=np.zeros(len(data.names)),
    )
    current = np.full(data.n_rows, base)
    all_rows = np.arange(data.n_rows)
    for m in range(config.estimators):
        residual = data.y - current
        if np.all(residual == 0.0):
            break
        if config.subsample < 1.0:
            k = max(1, int(round(config.subsample * data.n_rows)))
            rows = np.sort(rng.generator.permutation(data.n_rows)[:k])
        else:
            rows = all_rows
        tree = _build_tree(data.x, residual, rows, config, model.importances)
        model.trees.append(tree)
        current = current + config.learning_rate * tree.predict(data.x)
    return model


@dataclass
class RfeResult:
    selected: tuple[str, ...]
    history: list[tuple[tuple[str, ...], float]]  # (feature set, CV RMSE)


def _cv_rmse(data: FeatureMatrix, config: GbrtConfig, fold_ids: np.ndarray, folds: int, rng: Rng) -> float:
    rmses = []
    for f in range(folds):
        hold = fold_ids == f
        train = FeatureMatrix(data.names, data.x[~hold], data.y[~hold])
        model = fit_gbrt(train, config, rng.child(f))
        err = data.y[hold] - model.predict(data.x[hold])
        rmses.append(math.sqrt(float(np.mean(err * err))))
    return float(np.mean(rmses))


def rfe_cv(
    data: FeatureMatrix,
    config: GbrtConfig,
    rng: Rng,
    step: int | None = None,
    folds: int = 5,
) -> RfeResult:
    """Recursive feature elimination scored by k-fold cross-validation.

    Each round evaluates the current feature set by CV RMSE, then drops the
    ``step`` least-important features (default: 10% of those remaining,
    at least one) ranked by a fit on all rows.  Returns the evaluated set
    with minimum CV RMSE; ties go to the smaller set.
    """
    if data.n_rows < folds:
        raise ValueError(f"need at least {folds} rows for {folds}-fold CV")
    fold_ids = rng.child_named("folds").generator.permutation(data.n_rows) % folds
    eval_rng = rng.child_named("eval")
    rank_rng = rng.child_named("rank")
    current = list(data.names)
    history: list[tuple[tuple[str, ...], float]] = []
    round_no = 0
    while True:
        sub = data.select(current)
        history.append((tuple(current), _cv_rmse(sub, config, fold_ids, folds, eval_rng.child(round_no))))
        drop = step if step is not None else max(1, round(0.1 * len(current)))
        if len(current) <= drop:
            break
        model = fit_gbrt(sub, config, rank_rng.child(round_no))
        imp = model.feature_importance()
        order = sorted(range(len(current)), key=lambda i: (imp[current[i]], i))
        dropped = {current[i] for i in order[:drop]}
        current = [n for n in current if n not in dropped]
        round_no += 1
    best = min(history, key=lambda h: (h[1], len(h[0])))
    return RfeResult(selected=best[0], history=history)


def shapley_values(
    model: GbrtModel,
    instance: np.ndarray,
    background: np.ndarray,
    samples: int = 64,
    rng: Rng | None = None,
    exact: bool = False,
) -> np.ndarray:
    """Per-feature Shapley contributions to ``model.predict(instance)``.

    Walks feature orderings, switching features one at a time from a
    background row to the instance value and crediting each feature its
    marginal prediction change.  With ``exact=True`` every ordering is paired
    with every background row (exhaustive); otherwise ``samples`` random
    (ordering, background row) pairs are averaged.  Contribution sums
    telescope to prediction minus the mean background prediction over the
    walks used.
    """
    instance = np.asarray(instance, dtype=np.float64)
    background = np.atleast_2d(np.asarray(background, dtype=np.float64))
    d = instance.shape[0]
    if d != len(model.feature_names):
        raise ValueError("instance width must match the model")
    if exact:
        orderings = list(itertools.permutations(range(d)))
        if len(orderings) * background.shape[0] > 200_000:
            raise ValueError("exact enumeration too large; use sampling")
        walks = [(np.array(p), z) for p in orderings for z in background]
    else:
        if rng is None:
            raise ValueError("sampling requires an rng")
        gen = rng.generator
        walks = [
            (gen.permutation(d), background[gen.integers(0, background.shape[0])])
            for _ in range(samples)
        ]
    rows = np.empty((len(walks) * (d + 1), d))
    for w, (perm, z) in enumerate(walks):
        cur = z.copy()
        rows[w * (d + 1)] = cur
        for s, j in enumerate(perm, start=1):
            cur[j] = instance[j]
            rows[w * (d + 1) + s] = cur
    preds = model.predict(rows)
    phi = np.zeros(d)
    for w, (perm, _z) in enumerate(walks):
        base = w * (d + 1)
        for s, j in enumerate(perm, start=1):
            phi[j] += preds[base + s] - preds[base + s - 1]
    return phi / len(walks)


@dataclass(frozen=True)
class ErrorAnalysisConfig:
    """Settings for the attribute-vs-error interpretation run."""

    estimators: int = 200
    learning_rate: float = 0.015
    max_depth: int = 3
    realizations: int = 100
    shap_samples: int = 64
    subsample: float = 0.8
    rfe_folds: int = 5
    rfe_step: int | None = None


@dataclass
class AttributeEffect:
    name: str
    mean_abs_shapley: float
    rmse_spearman: float  # NaN when undefined (constant contributions)
    rank: int


def attribute_error_analysis(
    data: FeatureMatrix,
    rng: Rng,
    config: ErrorAnalysisConfig = ErrorAnalysisConfig(),
) -> tuple[list[AttributeEffect], tuple[str, ...]]:
    """Explain per-site errors from static attributes.

    Fits boosted trees from site attributes to per-site RMSE after feature
    elimination, then averages Shapley magnitudes over ``realizations``
    refits (distinct seeds, row subsampling) and correlates each attribute's
    signed contributions with the error across sites.

    Returns:
        (effects sorted by rank, selected attribute names).
    """
    if float(np.std(data.y)) == 0.0:
        raise ValueError("constant target: error analysis undefined")
    model_config = GbrtConfig(
        estimators=config.estimators,
        learning_rate=config.learning_rate,
        max_depth=config.max_depth,
        subsample=config.subsample,
    )
    rfe = rfe_cv(
        data,
        replace(model_config, subsample=1.0),
        rng.child_named("rfe"),
        step=config.rfe_step,
        folds=min(config.rfe_folds, data.n_rows),
    )
    sub = data.select(rfe.selected)
    n_sites, d = sub.x.shape
    signed = np.zeros((n_sites, d))
    abs_acc = np.zeros(d)
    real_rng = rng.child_named("realizations")
    for r in range(config.realizations):
        rr = real_rng.child(r)
        model = fit_gbrt(sub, model_config, rr.child_named("fit"))
        shap_rng = rr.child_named("shap")
        for i in range(n_sites):
            phi = shapley_values(model, sub.x[i], sub.x, samples=config.shap_samples, rng=shap_rng.child(i))
            signed[i] += phi
            abs_acc += np.abs(phi)
    signed /= config.realizations
    mean_abs = abs_acc / (config.realizations * n_sites)
    order = np.argsort(-mean_abs, kind="stable")
    effects = []
    for rank, j in enumerate(order, start=1):
        try:
            rho = spearman(signed[:, j], sub.y)
        except UndefinedCorrelationError:
            rho = float("nan")
        effects.append(
            AttributeEffect(
                name=sub.names[j],
                mean_abs_shapley=float(mean_abs[j]),
                rmse_spearman=rho,
                rank=rank,
            )
        )
    return effects, rfe.selected
