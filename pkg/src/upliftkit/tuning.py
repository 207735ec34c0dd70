"""Shared five-fold cross-validation and grid/random hyper-parameter search.

Fold assignment is contiguous blocks of a seeded permutation, so a (n,
folds, seed) triple always reproduces the same partition. Searches
evaluate the full grid when it fits the budget and otherwise a
seed-deterministic uniform random subset.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError

MAX_FOLD_RESEEDS = 5


def kfold_indices(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold id per row: contiguous blocks of a seeded permutation."""
    if folds < 2:
        raise ConfigError("folds must be at least 2")
    if folds > n:
        raise ConfigError("folds cannot exceed the number of rows")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    for k, block in enumerate(np.array_split(perm, folds)):
        assignment[block] = k
    return assignment


def arm_balanced_kfold(ds, folds: int, seed: int) -> np.ndarray:
    """Fold assignment whose every training part contains every present arm.

    Degenerate draws (an arm confined to a single fold) are re-drawn with
    the next seed, up to five attempts.
    """
    arms_present = np.nonzero(np.bincount(ds.arm_index, minlength=ds.n_arms))[0]
    for attempt in range(MAX_FOLD_RESEEDS):
        assignment = kfold_indices(ds.n, folds, seed + attempt)
        ok = True
        for k in range(folds):
            train_arms = set(ds.arm_index[assignment != k].tolist())
            if any(w not in train_arms for w in arms_present):
                ok = False
                break
        if ok:
            return assignment
    raise DataError(
        f"could not draw {folds} folds covering every arm in {MAX_FOLD_RESEEDS} attempts"
    )


@dataclass
class CrossValidation:
    mean_loss: float
    fold_loss: np.ndarray


def cross_validate(
    fit: Callable,
    ds,
    folds: int = 5,
    seed: int = 0,
    score: Callable | None = None,
    outcome: str | None = None,
) -> CrossValidation:
    """Generic k-fold CV: fit(train_ds) -> model, score(model, val_ds) -> loss.

    When `score` is omitted, loss defaults to outcome-model MSE on the
    named outcome.
    """
    if score is None:
        if outcome is None:
            raise ConfigError("cross_validate needs a score function or an outcome name")
        from .outcome_models import mse

        score = lambda model, val_ds: mse(model, val_ds, outcome)  # noqa: E731
    assignment = arm_balanced_kfold(ds, folds, seed)
    losses = np.empty(folds)
    for k in range(folds):
        train = ds.subset(np.nonzero(assignment != k)[0])
        val = ds.subset(np.nonzero(assignment == k)[0])
        model = fit(train)
        losses[k] = float(score(model, val))
    return CrossValidation(mean_loss=float(losses.mean()), fold_loss=losses)


def causal_tree_validation_loss(model, val_ds, outcome: str) -> float:
    """Held-out matching criterion for effect trees.

    For each leaf, the grown effect tau_train is matched against the
    validation fold's own difference-in-means in that leaf:

        loss = -(1/Nv) * sum_leaf n_leaf * (2 * tau_train * tau_val - tau_train^2)

    Minimizing this rewards leaves whose effects replicate out of fold and
    penalizes spurious heterogeneity; leaves missing an arm in the fold
    contribute with tau_val = 0 (pure penalty).
    """
    a, b = model.pair
    mask = (val_ds.arm_index == a) | (val_ds.arm_index == b)
    if not mask.any():
        raise DataError(f"validation fold has no units of pair {model.pair}")
    sub = val_ds.subset(np.nonzero(mask)[0])
    leaves = model.apply_dataset(sub)
    tau_train = model.structure.value[leaves]
    treated = (sub.arm_index == a).astype(np.float64)
    y = sub.outcome(outcome)

    n_nodes = model.structure.n_nodes
    nt = np.bincount(leaves, weights=treated, minlength=n_nodes)
    nc = np.bincount(leaves, minlength=n_nodes) - nt
    st = np.bincount(leaves, weights=y * treated, minlength=n_nodes)
    sc = np.bincount(leaves, weights=y * (1.0 - treated), minlength=n_nodes)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau_val_by_leaf = np.where((nt > 0) & (nc > 0), st / np.maximum(nt, 1) - sc / np.maximum(nc, 1), 0.0)
    tau_val = tau_val_by_leaf[leaves]
    criterion = np.mean(2.0 * tau_train * tau_val - tau_train**2)
    return float(-criterion)


def cate_pseudo_outcome_loss(model, val_ds, outcome: str, propensity: float) -> float:
    """IPW pseudo-outcome loss for leafless effect estimators (forests)."""
    a, b = model.pair
    mask = (val_ds.arm_index == a) | (val_ds.arm_index == b)
    sub = val_ds.subset(np.nonzero(mask)[0])
    treated = (sub.arm_index == a).astype(np.float64)
    y = sub.outcome(outcome)
    gamma = y * (treated - propensity) / (propensity * (1.0 - propensity))
    from .cate_models import estimate_dataset

    tau_hat = estimate_dataset(model, sub)
    return float(np.mean((gamma - tau_hat) ** 2))


# -- search --------------------------------------------------------------------


@dataclass
class SearchSpec:
    """What to tune: estimator kind, parameter grid, and evaluation budget.

    Grid entries are either explicit value lists or range mappings like
    {"low": 1e-6, "high": 0.1, "log": true} (add "int": true for integer
    ranges). Explicit grids whose cartesian product fits the budget are
    enumerated exhaustively; anything else is sampled uniformly at random,
    `budget` candidates, deterministic in `seed`.
    """

    kind: str
    grid: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)
    budget: int = 64
    folds: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.budget < 1:
            raise ConfigError("search budget must be at least 1")
        if self.folds < 2:
            raise ConfigError("search folds must be at least 2")


@dataclass
class SearchResult:
    best: dict
    best_loss: float
    trials: list[dict]

    def to_csv(self, path: str) -> None:
        keys = sorted({k for t in self.trials for k in t["params"]})
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(keys + ["mean_loss", "chosen"])
            for trial in self.trials:
                row = [trial["params"].get(k, "") for k in keys]
                row.append(repr(float(trial["mean_loss"])))
                row.append(int(trial["params"] == self.best))
                writer.writerow(row)


def _sample_param(spec, rng: np.random.Generator):
    if isinstance(spec, Mapping):
        low, high = float(spec["low"]), float(spec["high"])
        if spec.get("log"):
            value = float(np.exp(rng.uniform(np.log(low), np.log(high))))
        else:
            value = float(rng.uniform(low, high))
        return int(round(value)) if spec.get("int") else value
    values = list(spec)
    return values[rng.integers(len(values))]


def expand_candidates(grid: dict, budget: int, seed: int) -> list[dict]:
    """Candidate parameter settings honoring the evaluation budget."""
    if not grid:
        return [{}]
    names = list(grid)
    discrete = all(not isinstance(grid[k], Mapping) for k in names)
    if discrete:
        sizes = [len(list(grid[k])) for k in names]
        total = int(np.prod(sizes))
        if total <= budget:
            return [
                dict(zip(names, combo))
                for combo in itertools.product(*(list(grid[k]) for k in names))
            ]
        rng = np.random.default_rng(seed)
        picks = rng.choice(total, size=budget, replace=False)
        candidates = []
        for flat in picks:
            combo = {}
            rem = int(flat)
            for k, size in zip(names, sizes):
                rem, j = divmod(rem, size)
                combo[k] = list(grid[k])[j]
            candidates.append(combo)
        return candidates
    rng = np.random.default_rng(seed)
    return [
        {k: _sample_param(grid[k], rng) for k in names} for _ in range(budget)
    ]


# Hyper-parameter ranges used when a pipeline config requests a search
# without spelling out the grid.
DEFAULT_SEARCH_SPACES: dict[str, dict] = {
    "cart": {"complexity": {"low": 1e-10, "high": 0.17, "log": True}},
    "random_forest": {
        "n_tree": {"low": 100, "high": 1200, "int": True},
        "max_features": ["all", "sqrt"],
        "min_split": {"low": 10, "high": 300, "int": True},
    },
    "boosted_trees": {
        "alpha": [0.1, 0.2, 0.5, 1, 2, 5, 10, 15, 20, 25],
        "eta": {"low": 0.05, "high": 1.0},
        "max_depth": [6, 8, 10, 12],
    },
    "causal_tree": {
        "complexity": {"low": 1e-8, "high": 1e-2, "log": True},
        "q": [100, 200, 300, 400, 500, 600, 700, 800, 900, 1000],
    },
    "causal_forest": {
        "subsample": [0.5],
        "q": [4, 50, 100, 500, 1000],
        "max_imbalance": [None, 0.1, 0.2],
    },
}


def _make_fit(kind: str, params: dict, outcome: str, pair=None) -> Callable:
    from . import cate_models, outcome_models
    from .dataset import encode

    if kind == "ols":
        return lambda ds: outcome_models.fit_ols(
            encode(ds, interactions=True), ds.outcome(outcome)
        )
    if kind == "lasso":
        return lambda ds: outcome_models.fit_lasso(
            encode(ds, interactions=True), ds.outcome(outcome), **params
        )
    if kind == "cart":
        return lambda ds: outcome_models.fit_cart(encode(ds), ds.outcome(outcome), **params)
    if kind == "random_forest":
        return lambda ds: outcome_models.fit_random_forest(
            encode(ds), ds.outcome(outcome), **params
        )
    if kind == "boosted_trees":
        return lambda ds: outcome_models.fit_boosted(
            encode(ds), ds.outcome(outcome), **params
        )
    if kind == "causal_tree":
        return lambda ds: cate_models.fit_causal_tree(ds, pair, outcome, **params)
    if kind == "causal_forest":
        return lambda ds: cate_models.fit_causal_forest(ds, pair, outcome, **params)
    raise ConfigError(f"unknown estimator kind {kind!r}")


def search(spec: SearchSpec, ds, outcome: str, pair=None) -> SearchResult:
    """Evaluate candidate settings by k-fold CV and keep the best.

    Outcome estimators score by validation MSE; causal trees score by the
    held-out matching criterion; causal forests by the IPW pseudo-outcome
    loss. Ties keep the first-evaluated candidate.
    """
    spec.validate()
    if pair is None and spec.kind in ("causal_tree", "causal_forest"):
        raise ConfigError(f"{spec.kind} search needs a treatment pair")
    candidates = expand_candidates(spec.grid, spec.budget, spec.seed)

    if spec.kind == "causal_tree":
        score = lambda model, val: causal_tree_validation_loss(model, val, outcome)  # noqa: E731
    elif spec.kind == "causal_forest":
        from .cate_models import _pair_arrays, _pair_propensity

        sub, treated = _pair_arrays(ds, pair, outcome)
        e = _pair_propensity(ds, pair, treated)
        score = lambda model, val: cate_pseudo_outcome_loss(model, val, outcome, e)  # noqa: E731
    else:
        score = None

    trials = []
    best_idx, best_loss = 0, np.inf
    for i, cand in enumerate(candidates):
        params = {**spec.fixed, **cand}
        fit = _make_fit(spec.kind, params, outcome, pair)
        cv = cross_validate(fit, ds, spec.folds, spec.seed, score=score, outcome=outcome)
        trials.append(
            {"params": params, "mean_loss": cv.mean_loss, "fold_loss": cv.fold_loss.tolist()}
        )
        if cv.mean_loss < best_loss:
            best_idx, best_loss = i, cv.mean_loss
    return SearchResult(
        best=trials[best_idx]["params"], best_loss=best_loss, trials=trials
    )
