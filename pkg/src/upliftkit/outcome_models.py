"""Outcome regressions f(x, w) = E[Y | X = x, W = w] behind one interface.

Five estimators share the same contract: fit on an encoded design, then
answer `predict(covariates, arm)` for any encodable unit and any arm. The
linear kinds (ols, lasso) expect the interacted encoding so treatment
effects can vary with covariates; the tree kinds work on the plain
covariate + arm dummies and learn interactions through splits.

Predictions are never clipped, even for 0/1 outcomes: policy construction
takes an argmax over arms and clipping could reorder it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dataset import EncodedMatrix, Encoder, ExperimentDataset
from .errors import ConfigError, DataError, NotFittedError
from .tuning import kfold_indices
from .trees import (
    RegressionTree,
    compress_design,
    grow_regression_tree,
    grow_tree_on_aggregates,
)

# Prediction batches at least this large are routed per unique row pattern
# instead of per row; one-hot designs repeat patterns heavily.
COMPRESS_PREDICT_THRESHOLD = 512

RIDGE_JITTER = 1e-8
LASSO_TOL = 1e-7
LASSO_MAX_SWEEPS = 100_000


def _soft_threshold(z: np.ndarray | float, threshold: float):
    return np.sign(z) * np.maximum(np.abs(z) - threshold, 0.0)


class _OutcomeModelBase:
    """Shared prediction plumbing over a stored encoder."""

    kind: str
    encoder: Encoder
    training_mse: float

    def _predict_matrix(self, rows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict(self, covariates: Mapping[str, str], arm: int) -> float:
        """Expected outcome for one unit at one arm; pure and total."""
        row = self.encoder.transform_single(covariates, arm)
        return float(self._predict_matrix(row[None, :])[0])

    def predict_all_arms(self, ds: ExperimentDataset) -> np.ndarray:
        """(N, W) matrix of predictions for every unit at every arm."""
        cov = self.encoder.covariate_block(ds)
        n, w = ds.n, self.encoder.n_arms
        out = np.empty((n, w), dtype=np.float64)
        for arm in range(w):
            rows = self.encoder.assemble(cov, np.full(n, arm, dtype=np.int64))
            out[:, arm] = self._predict_matrix(rows)
        return out

    def predict_dataset(self, ds: ExperimentDataset) -> np.ndarray:
        """Predictions at each unit's observed arm."""
        rows = self.encoder.transform(ds)
        return self._predict_matrix(rows)


@dataclass
class LinearOutcomeModel(_OutcomeModelBase):
    kind: str
    encoder: Encoder
    intercept: float
    coef: np.ndarray
    training_mse: float
    hyper_params: dict = field(default_factory=dict)

    def _predict_matrix(self, rows: np.ndarray) -> np.ndarray:
        return self.intercept + rows @ self.coef


@dataclass
class TreeOutcomeModel(_OutcomeModelBase):
    kind: str
    encoder: Encoder
    tree: RegressionTree
    training_mse: float
    hyper_params: dict = field(default_factory=dict)

    def _predict_matrix(self, rows: np.ndarray) -> np.ndarray:
        return self.tree.predict(rows)


def _sum_tree_predictions(trees: list[RegressionTree], rows: np.ndarray) -> np.ndarray:
    if rows.shape[0] >= COMPRESS_PREDICT_THRESHOLD:
        patterns, pid = compress_design(rows)
        total = np.zeros(patterns.shape[0], dtype=np.float64)
        for tree in trees:
            total += tree.predict(patterns)
        return total[pid]
    total = np.zeros(rows.shape[0], dtype=np.float64)
    for tree in trees:
        total += tree.predict(rows)
    return total


@dataclass
class ForestOutcomeModel(_OutcomeModelBase):
    kind: str
    encoder: Encoder
    trees: list[RegressionTree]
    training_mse: float
    hyper_params: dict = field(default_factory=dict)

    def _predict_matrix(self, rows: np.ndarray) -> np.ndarray:
        return _sum_tree_predictions(self.trees, rows) / len(self.trees)


@dataclass
class BoostedOutcomeModel(_OutcomeModelBase):
    kind: str
    encoder: Encoder
    f0: float
    trees: list[RegressionTree]
    training_mse: float
    round_mse: list[float] = field(default_factory=list)
    hyper_params: dict = field(default_factory=dict)

    def _predict_matrix(self, rows: np.ndarray) -> np.ndarray:
        return self.f0 + _sum_tree_predictions(self.trees, rows)


FittedOutcomeModel = (
    LinearOutcomeModel | TreeOutcomeModel | ForestOutcomeModel | BoostedOutcomeModel
)


def _training_mse(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((pred - y) ** 2))


# -- linear kinds -------------------------------------------------------------


def fit_ols(X: EncodedMatrix, y: np.ndarray) -> LinearOutcomeModel:
    """Least squares with an explicit intercept.

    Rank-deficient designs (one-hot blocks are collinear by construction)
    are resolved by a 1e-8 ridge jitter on the normal equations. Constant
    outcomes short-circuit to coefficient zero with intercept = mean.
    """
    y = np.asarray(y, dtype=np.float64)
    V = X.values
    if y.shape[0] != V.shape[0]:
        raise DataError("y length does not match the design matrix")
    if np.ptp(y) == 0.0:
        coef = np.zeros(V.shape[1])
        return LinearOutcomeModel("ols", X.encoder, float(y[0]), coef, 0.0)
    A = np.hstack([np.ones((V.shape[0], 1)), V])
    gram = A.T @ A + RIDGE_JITTER * np.eye(A.shape[1])
    theta = np.linalg.solve(gram, A.T @ y)
    intercept, coef = float(theta[0]), theta[1:]
    mse_value = _training_mse(intercept + V @ coef, y)
    return LinearOutcomeModel("ols", X.encoder, intercept, coef, mse_value)


def _standardized_gram(V: np.ndarray, y: np.ndarray):
    """Gram matrix and covariance vector of the z-scored design.

    Returns (G, c, mu, sigma, active) where active marks columns with
    nonzero variance; constant columns are excluded from the descent and
    get coefficient zero.
    """
    n = V.shape[0]
    mu = V.mean(axis=0)
    sigma = V.std(axis=0)
    active = sigma > 0
    y_bar = y.mean()
    raw_gram = V.T @ V / n
    raw_c = V.T @ y / n
    with np.errstate(divide="ignore", invalid="ignore"):
        G = (raw_gram - np.outer(mu, mu)) / np.outer(sigma, sigma)
        c = (raw_c - mu * y_bar) / sigma
    G[~active, :] = 0.0
    G[:, ~active] = 0.0
    c[~active] = 0.0
    return G, c, mu, sigma, active


def _coordinate_descent(
    G: np.ndarray,
    c: np.ndarray,
    active: np.ndarray,
    lam: float,
    beta0: np.ndarray | None = None,
    tol: float = LASSO_TOL,
) -> np.ndarray:
    p = len(c)
    beta = np.zeros(p) if beta0 is None else beta0.copy()
    q = G @ beta
    cols = np.nonzero(active)[0]
    for _ in range(LASSO_MAX_SWEEPS):
        max_change = 0.0
        for j in cols:
            z = c[j] - q[j] + beta[j]
            new = _soft_threshold(z, lam)
            change = new - beta[j]
            if change != 0.0:
                q += G[:, j] * change
                beta[j] = new
                max_change = max(max_change, abs(change))
        if max_change <= tol:
            break
    return beta


def lasso_lambda_max(X: EncodedMatrix, y: np.ndarray) -> float:
    """Smallest penalty that zeroes every coefficient (KKT bound)."""
    y = np.asarray(y, dtype=np.float64)
    _, c, _, _, active = _standardized_gram(X.values, y)
    if not active.any():
        return 0.0
    return float(np.max(np.abs(c[active])))


def fit_lasso(X: EncodedMatrix, y: np.ndarray, lam: float) -> LinearOutcomeModel:
    """L1-penalized least squares by cyclic coordinate descent.

    Columns are z-scored before penalization and the intercept is left
    unpenalized; reported coefficients are mapped back to the original 0/1
    column scale. Descent stops when the largest coefficient change in a
    sweep is at most 1e-7 (standardized scale).
    """
    if lam < 0:
        raise ConfigError("lasso penalty must be nonnegative")
    y = np.asarray(y, dtype=np.float64)
    V = X.values
    G, c, mu, sigma, active = _standardized_gram(V, y)
    beta_std = _coordinate_descent(G, c, active, lam)
    coef = np.zeros(V.shape[1])
    coef[active] = beta_std[active] / sigma[active]
    intercept = float(y.mean() - coef @ mu)
    mse_value = _training_mse(intercept + V @ coef, y)
    return LinearOutcomeModel(
        "lasso", X.encoder, intercept, coef, mse_value, hyper_params={"lam": lam}
    )


@dataclass
class CvReport:
    """Cross-validation trace for a hyper-parameter grid.

    chosen is the setting with the lowest mean CV MSE; ties break to the
    earliest grid entry.
    """

    grid: list[dict]
    fold_mse: np.ndarray
    chosen_index: int
    folds: int

    @property
    def chosen(self) -> dict:
        return self.grid[self.chosen_index]

    @property
    def mean_mse(self) -> np.ndarray:
        return self.fold_mse.mean(axis=1)

    def to_csv(self, path: str) -> None:
        keys = sorted({k for setting in self.grid for k in setting})
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                keys + [f"fold{i}_mse" for i in range(self.folds)] + ["mean_mse", "chosen"]
            )
            for i, setting in enumerate(self.grid):
                row = [setting.get(k, "") for k in keys]
                row += [repr(float(v)) for v in self.fold_mse[i]]
                row += [repr(float(self.mean_mse[i])), int(i == self.chosen_index)]
                writer.writerow(row)


def default_lambda_path(lam_max: float, length: int = 98) -> np.ndarray:
    """98 log-spaced penalties from lam_max down to 1e-5 * lam_max."""
    if lam_max <= 0:
        return np.zeros(length)
    return np.geomspace(lam_max, 1e-5 * lam_max, length)


def tune_lasso(
    X: EncodedMatrix,
    y: np.ndarray,
    path: np.ndarray | None = None,
    folds: int = 5,
    seed: int = 0,
) -> CvReport:
    """Five-fold CV over a penalty path, warm-starting along the path.

    The default path is 98 log-spaced values spanning
    [1e-5 * lambda_max, lambda_max].
    """
    y = np.asarray(y, dtype=np.float64)
    V = X.values
    if path is None:
        path = default_lambda_path(lasso_lambda_max(X, y))
    path = np.asarray(path, dtype=np.float64)
    if path.size == 0:
        raise ConfigError("lambda path must be nonempty")
    assignments = kfold_indices(V.shape[0], folds, seed)
    fold_mse = np.empty((path.size, folds))
    for k in range(folds):
        val = assignments == k
        train = ~val
        G, c, mu, sigma, active = _standardized_gram(V[train], y[train])
        y_bar = y[train].mean()
        beta = None
        coefs = np.zeros((V.shape[1], path.size))
        intercepts = np.empty(path.size)
        for i, lam in enumerate(path):
            beta = _coordinate_descent(G, c, active, float(lam), beta0=beta)
            coefs[active, i] = beta[active] / sigma[active]
            intercepts[i] = y_bar - coefs[:, i] @ mu
        preds = intercepts[None, :] + V[val] @ coefs
        fold_mse[:, k] = np.mean((preds - y[val][:, None]) ** 2, axis=0)
    chosen = int(np.argmin(fold_mse.mean(axis=1)))
    grid = [{"lam": float(lam)} for lam in path]
    return CvReport(grid=grid, fold_mse=fold_mse, chosen_index=chosen, folds=folds)


# -- tree kinds ---------------------------------------------------------------


def fit_cart(
    X: EncodedMatrix, y: np.ndarray, complexity: float = 0.0, min_leaf: int = 1
) -> TreeOutcomeModel:
    """Single greedy regression tree.

    A split must reduce SSE by strictly more than complexity * SSE(root);
    complexity = inf therefore yields the root-only tree predicting
    mean(y).
    """
    if min_leaf < 1:
        raise ConfigError("min_leaf must be at least 1")
    if complexity < 0:
        raise ConfigError("complexity must be nonnegative")
    y = np.asarray(y, dtype=np.float64)
    sse_root = float(np.sum((y - y.mean()) ** 2))
    min_gain = np.inf if np.isinf(complexity) else complexity * sse_root
    tree = grow_regression_tree(X.values, y, min_leaf=min_leaf, min_gain=min_gain)
    model = TreeOutcomeModel(
        "cart",
        X.encoder,
        tree,
        0.0,
        hyper_params={"complexity": complexity, "min_leaf": min_leaf},
    )
    model.training_mse = _training_mse(tree.predict(X.values), y)
    return model


def fit_random_forest(
    X: EncodedMatrix,
    y: np.ndarray,
    n_tree: int = 500,
    max_features: str = "all",
    min_split: int = 2,
    seed: int = 0,
    bootstrap: bool = True,
    min_leaf: int = 1,
) -> ForestOutcomeModel:
    """Bagged deep trees; prediction is the mean over member trees.

    Each tree sees a bootstrap row sample (unless bootstrap=False) and, at
    every split, either all columns or a sqrt-sized random subset. Tree
    seeds derive from `seed`, so refits are identical and growth order
    cannot change results.
    """
    if n_tree < 1:
        raise ConfigError("n_tree must be at least 1")
    if max_features not in ("all", "sqrt"):
        raise ConfigError("max_features must be 'all' or 'sqrt'")
    y = np.asarray(y, dtype=np.float64)
    V = X.values
    n, p = V.shape
    m = None if max_features == "all" else max(1, int(np.sqrt(p)))
    patterns, pid = compress_design(V)
    k = patterns.shape[0]
    y_sq = y * y
    trees = []
    for seq in np.random.SeedSequence(seed).spawn(n_tree):
        rng = np.random.default_rng(seq)
        draw_rows = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        boot_pid = pid[draw_rows]
        counts = np.bincount(boot_pid, minlength=k).astype(np.float64)
        sums = np.bincount(boot_pid, weights=y[draw_rows], minlength=k)
        sumsqs = np.bincount(boot_pid, weights=y_sq[draw_rows], minlength=k)
        trees.append(
            grow_tree_on_aggregates(
                patterns,
                counts,
                sums,
                sumsqs,
                min_leaf=min_leaf,
                min_split=min_split,
                max_features=m,
                rng=rng,
            )
        )
    model = ForestOutcomeModel(
        "random_forest",
        X.encoder,
        trees,
        0.0,
        hyper_params={
            "n_tree": n_tree,
            "max_features": max_features,
            "min_split": min_split,
            "seed": seed,
            "bootstrap": bootstrap,
        },
    )
    model.training_mse = _training_mse(model._predict_matrix(V), y)
    return model


def fit_boosted(
    X: EncodedMatrix,
    y: np.ndarray,
    eta: float = 0.1,
    max_depth: int = 6,
    alpha: float = 0.0,
    n_rounds: int = 100,
) -> BoostedOutcomeModel:
    """Stagewise squared-loss boosting with L1 leaf shrinkage.

    Round t grows a depth-limited tree on the current residuals; its leaf
    means are soft-thresholded by alpha and scaled by eta before being
    added to the ensemble. F0 is the outcome mean. Per-round training MSE
    is recorded (non-increasing whenever alpha = 0).
    """
    if not 0.0 < eta <= 1.0:
        raise ConfigError("eta must be in (0, 1]")
    if max_depth < 1:
        raise ConfigError("max_depth must be at least 1")
    if alpha < 0 or n_rounds < 1:
        raise ConfigError("alpha must be nonnegative and n_rounds positive")
    y = np.asarray(y, dtype=np.float64)
    V = X.values
    f0 = float(y.mean())
    resid = y - f0
    patterns, pid = compress_design(V)
    k = patterns.shape[0]
    counts = np.bincount(pid, minlength=k).astype(np.float64)
    trees: list[RegressionTree] = []
    round_mse: list[float] = []
    for _ in range(n_rounds):
        sums = np.bincount(pid, weights=resid, minlength=k)
        sumsqs = np.bincount(pid, weights=resid * resid, minlength=k)
        tree = grow_tree_on_aggregates(patterns, counts, sums, sumsqs, max_depth=max_depth)
        leaves = tree.column < 0
        tree.value[leaves] = eta * _soft_threshold(tree.value[leaves], alpha)
        resid = resid - tree.predict(patterns)[pid]
        trees.append(tree)
        round_mse.append(float(np.mean(resid**2)))
    model = BoostedOutcomeModel(
        "boosted_trees",
        X.encoder,
        f0,
        trees,
        round_mse[-1],
        round_mse=round_mse,
        hyper_params={
            "eta": eta,
            "max_depth": max_depth,
            "alpha": alpha,
            "n_rounds": n_rounds,
        },
    )
    return model


# -- shared operations ---------------------------------------------------------


def predict(model: FittedOutcomeModel, covariates: Mapping[str, str], arm: int) -> float:
    """Predict the outcome for one unit at one arm."""
    if not hasattr(model, "predict") or not hasattr(model, "encoder"):
        raise NotFittedError("predict requires a fitted outcome model")
    return model.predict(covariates, arm)


def mse(model: FittedOutcomeModel, ds: ExperimentDataset, outcome: str) -> float:
    """Mean squared error sum((y_hat - y)^2) / N at the observed arms."""
    if ds.n == 0:
        raise DataError("cannot score an empty dataset")
    y = ds.outcome(outcome)
    return _training_mse(model.predict_dataset(ds), y)
