"""Outcome regression models for the doubly-robust wrapper.

Ordinary least squares (normal equations with a tiny ridge jitter) and a
bagged regression forest grown from scratch: bootstrap bags, sqrt(d) random
candidate features per split, variance-reduction split search exhaustive over
sorted unique values, leaves at max depth or <= 5 samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .estimators import EstimateReport, EstimatorError

RIDGE_JITTER = 1e-10
MIN_LEAF = 5


class OutcomeModelError(ValueError):
    """Raised on unfittable designs or invalid forest configuration."""


def _solve_least_squares(design: np.ndarray, y: np.ndarray) -> np.ndarray:
    n, p = design.shape
    if n <= p:
        raise OutcomeModelError(f"need more than {p} rows to fit {p} coefficients, got {n}")
    if np.linalg.matrix_rank(design) < p:
        raise OutcomeModelError("design matrix is rank deficient")
    gram = design.T @ design
    gram[np.diag_indices_from(gram)] += RIDGE_JITTER
    coef = np.linalg.solve(gram, design.T @ y)
    if not np.all(np.isfinite(coef)):
        raise OutcomeModelError("least-squares solve produced non-finite coefficients")
    return coef


@dataclass
class _TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "_TreeNode | None" = None
    right: "_TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class OutcomeModel:
    """Fitted regression of an outcome on covariates; kind 'ols' or 'forest'."""

    kind: str
    coefficients: np.ndarray | None = None
    trees: list = field(default_factory=list)
    n_trees: int = 0
    max_depth: int = 0
    bag_fraction: float = 0.0
    seed: int = 0

    @property
    def is_fitted(self) -> bool:
        if self.kind == "ols":
            return self.coefficients is not None
        return len(self.trees) > 0

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if not self.is_fitted:
            raise OutcomeModelError("model is not fitted")
        if self.kind == "ols":
            return self.coefficients[0] + X @ self.coefficients[1:]
        out = np.zeros(X.shape[0])
        for tree in self.trees:
            out += _predict_tree(tree, X)
        return out / len(self.trees)


def fit_ols(X: np.ndarray, y: np.ndarray) -> OutcomeModel:
    """Least squares with intercept; coefficients are [intercept, slopes...]."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    design = np.column_stack([np.ones(X.shape[0]), X])
    return OutcomeModel(kind="ols", coefficients=_solve_least_squares(design, y))


def _best_split(x: np.ndarray, y: np.ndarray):
    """Exhaustive variance-reduction split over sorted unique values of x.

    Returns (sse_after, threshold) or None when x is constant.
    """
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    # candidate boundaries sit between distinct consecutive values
    change = np.flatnonzero(xs[1:] > xs[:-1])
    if change.size == 0:
        return None
    csum = np.cumsum(ys)
    csq = np.cumsum(ys * ys)
    total_sum, total_sq, n = csum[-1], csq[-1], ys.size
    nl = change + 1.0
    sum_l = csum[change]
    sq_l = csq[change]
    sse = (sq_l - sum_l**2 / nl) + ((total_sq - sq_l) - (total_sum - sum_l) ** 2 / (n - nl))
    best = int(np.argmin(sse))
    i = change[best]
    return float(sse[best]), float(0.5 * (xs[i] + xs[i + 1]))


def _grow_tree(X, y, idx, depth, max_depth, n_candidates, rng) -> _TreeNode:
    node_y = y[idx]
    if depth >= max_depth or idx.size <= MIN_LEAF or np.ptp(node_y) == 0.0:
        return _TreeNode(value=float(node_y.mean()))
    d = X.shape[1]
    feats = rng.choice(d, size=min(n_candidates, d), replace=False)
    best = None
    for f in feats:
        split = _best_split(X[idx, f], node_y)
        if split is None:
            continue
        if best is None or split[0] < best[0]:
            best = (split[0], int(f), split[1])
    if best is None:
        return _TreeNode(value=float(node_y.mean()))
    _, feature, threshold = best
    mask = X[idx, feature] <= threshold
    left = _grow_tree(X, y, idx[mask], depth + 1, max_depth, n_candidates, rng)
    right = _grow_tree(X, y, idx[~mask], depth + 1, max_depth, n_candidates, rng)
    return _TreeNode(feature=feature, threshold=threshold, left=left, right=right)


def _predict_tree(node: _TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        nd, idx = stack.pop()
        if nd.is_leaf:
            out[idx] = nd.value
            continue
        mask = X[idx, nd.feature] <= nd.threshold
        stack.append((nd.left, idx[mask]))
        stack.append((nd.right, idx[~mask]))
    return out


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    trees: int = 200,
    max_depth: int = 8,
    bag_fraction: float = 0.8,
    seed: int = 0,
) -> OutcomeModel:
    """Bagged regression trees; prediction is the mean over trees."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if trees < 1:
        raise OutcomeModelError("trees must be >= 1")
    if n < 20:
        raise OutcomeModelError(f"need at least 20 rows to fit a forest, got {n}")
    if not 0.0 < bag_fraction <= 1.0:
        raise OutcomeModelError("bag_fraction must lie in (0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_candidates = max(1, int(round(math.sqrt(d))))
    bag_size = max(1, int(round(bag_fraction * n)))
    grown = []
    for _ in range(trees):
        bag = rng.integers(0, n, size=bag_size)
        grown.append(_grow_tree(X, y, bag, 0, max_depth, n_candidates, rng))
    return OutcomeModel(
        kind="forest",
        trees=grown,
        n_trees=trees,
        max_depth=max_depth,
        bag_fraction=bag_fraction,
        seed=seed,
    )


def att_ols_regression(data: Dataset, replication: int = 0) -> EstimateReport:
    """Coefficient on the treatment indicator in y ~ [1, W, X]."""
    treated = data.W == 1
    n1, n0 = int(treated.sum()), int((~treated).sum())
    if n1 == 0 or n0 == 0:
        raise EstimatorError("both treatment groups must be non-empty")
    design = np.column_stack([np.ones(data.W.size), data.W.astype(np.float64), data.X])
    try:
        coef = _solve_least_squares(design, data.y_obs)
    except OutcomeModelError as exc:
        raise EstimatorError(str(exc)) from exc
    return EstimateReport("ols", float(coef[1]), n1, n0, (1.0, 1.0, float(n0)), replication)
