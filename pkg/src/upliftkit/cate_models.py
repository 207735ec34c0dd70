"""Pairwise heterogeneous-treatment-effect estimators.

For an ordered arm pair (a, b), a model here estimates
tau(x) = E[Y(a) - Y(b) | X = x] from the two-arm restriction of a
randomized experiment.

Two estimators are provided. The causal tree greedily partitions the
covariate space to maximize the variation of within-leaf effect estimates:
since the overall mean effect is invariant to any further split, that is
the same as maximizing the size-weighted sum of squared leaf effects. Leaf
estimates are plain differences in arm means. The causal forest follows
the generalized-random-forest recipe: outcomes are residualized against an
out-of-fold nuisance fit m(x) and the (known, constant) assignment
propensity, trees split to maximize (nL * nR / nP^2) * (tauL - tauR)^2
with each child's effect computed as the exact residual-on-residual ratio,
and query-time estimates are kernel-weighted ratios with weights given by
co-leaf frequencies across trees.

Honest splitting is deliberately not used; estimation reuses the growing
sample.
"""

from __future__ import annotations

import numpy as np

from .dataset import Encoder, ExperimentDataset
from .errors import ConfigError, DataError, NotFittedError
from .trees import (
    RegressionTree,
    _candidate_columns,
    compress_design,
    grow_tree_on_aggregates,
)
from .tuning import arm_balanced_kfold

COMPRESS_QUERY_THRESHOLD = 512

Pair = tuple[int, int]


def _pair_arrays(ds: ExperimentDataset, pair: Pair, outcome: str):
    a, b = pair
    if a == b or not (0 <= a < ds.n_arms and 0 <= b < ds.n_arms):
        raise ConfigError(f"invalid treatment pair {pair}")
    mask = (ds.arm_index == a) | (ds.arm_index == b)
    if not mask.any():
        raise DataError(f"no units in arms {pair}")
    sub = ds.subset(np.nonzero(mask)[0])
    treated = (sub.arm_index == a).astype(np.float64)
    if treated.sum() == 0 or treated.sum() == sub.n:
        raise DataError(f"both arms of pair {pair} must be present")
    return sub, treated


def _pair_propensity(ds: ExperimentDataset, pair: Pair, treated: np.ndarray) -> float:
    """P(W = a | W in {a, b}); known from design when propensities exist."""
    a, b = pair
    if ds.propensities is not None:
        ea, eb = ds.propensities[a], ds.propensities[b]
        return float(ea / (ea + eb))
    return float(treated.mean())


# -- causal tree ---------------------------------------------------------------


class CausalTreeModel:
    """Greedy effect-variance tree with difference-in-means leaves."""

    kind = "causal_tree"

    def __init__(
        self,
        pair: Pair,
        encoder: Encoder,
        structure: RegressionTree,
        n_treat: np.ndarray,
        n_control: np.ndarray,
        hyper_params: dict,
    ):
        self.pair = pair
        self.encoder = encoder
        self.structure = structure  # node values hold leaf tau-hats
        self.n_treat = n_treat
        self.n_control = n_control
        self.hyper_params = hyper_params

    @property
    def n_leaves(self) -> int:
        return self.structure.n_leaves

    def apply_dataset(self, ds: ExperimentDataset) -> np.ndarray:
        return self.structure.apply(self.encoder.covariate_block(ds))

    def estimate_dataset(self, ds: ExperimentDataset) -> np.ndarray:
        return self.structure.predict(self.encoder.covariate_block(ds))

    def estimate(self, covariates) -> float:
        row = self.encoder.covariate_row(covariates)
        return float(self.structure.predict(row[None, :])[0])


def fit_causal_tree(
    ds: ExperimentDataset,
    pair: Pair,
    outcome: str,
    complexity: float = 0.0,
    q: int = 1,
) -> CausalTreeModel:
    """Grow a causal tree for one treatment pair.

    A split is accepted when it increases the per-unit sum of squared leaf
    effects, (1/N) * sum_leaf n_leaf * tau_leaf^2, by strictly more than
    `complexity`, and every resulting leaf keeps at least `q` units of each
    arm of the pair. complexity = inf gives the single-leaf tree whose
    estimate is the pairwise ATE everywhere.
    """
    if q < 1:
        raise ConfigError("q must be at least 1")
    sub, treated = _pair_arrays(ds, pair, outcome)
    y = sub.outcome(outcome)
    nt_root = int(treated.sum())
    nc_root = sub.n - nt_root
    if q > nt_root or q > nc_root:
        raise DataError(
            f"q={q} exceeds an arm count of pair {pair} ({nt_root} treated, {nc_root} control)"
        )
    encoder = Encoder.fit(sub)
    X = encoder.covariate_block(sub)
    n_root = sub.n

    column: list[int] = []
    left: list[int] = []
    right: list[int] = []
    tau: list[float] = []
    n_all: list[int] = []
    n_t: list[int] = []
    n_c: list[int] = []

    def add_node(rows) -> int:
        t = treated[rows]
        yv = y[rows]
        nt = int(t.sum())
        nc = len(rows) - nt
        value = float(yv[t == 1].mean() - yv[t == 0].mean())
        column.append(-1)
        left.append(-1)
        right.append(-1)
        tau.append(value)
        n_all.append(len(rows))
        n_t.append(nt)
        n_c.append(nc)
        return len(column) - 1

    root = add_node(np.arange(n_root))
    stack = [(root, np.arange(n_root))]
    while stack:
        node, rows = stack.pop()
        n = len(rows)
        yv = y[rows]
        t = treated[rows]
        nt, nc = n_t[node], n_c[node]
        if nt < 2 * q or nc < 2 * q:
            continue
        sub_x = X[rows]
        n1 = sub_x.sum(axis=0)
        t1 = t @ sub_x
        c1 = n1 - t1
        syt1 = (yv * t) @ sub_x
        syc1 = (yv * (1.0 - t)) @ sub_x
        t0 = nt - t1
        c0 = nc - c1
        syt0 = (yv * t).sum() - syt1
        syc0 = (yv * (1.0 - t)).sum() - syc1
        valid = (t1 >= q) & (c1 >= q) & (t0 >= q) & (c0 >= q)
        if not valid.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            tau_r = syt1 / t1 - syc1 / c1
            tau_l = syt0 / t0 - syc0 / c0
        n0 = n - n1
        gain = (n1 * tau_r**2 + n0 * tau_l**2 - n * tau[node] ** 2) / n_root
        gain[~valid] = -np.inf
        best = int(np.argmax(gain))
        if not gain[best] > complexity:
            continue
        go_right = X[rows, best] >= 0.5
        rows_r = rows[go_right]
        rows_l = rows[~go_right]
        li = add_node(rows_l)
        ri = add_node(rows_r)
        column[node] = best
        left[node] = li
        right[node] = ri
        stack.append((li, rows_l))
        stack.append((ri, rows_r))

    structure = RegressionTree(
        column=np.asarray(column, dtype=np.int64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(tau, dtype=np.float64),
        n=np.asarray(n_all, dtype=np.int64),
    )
    return CausalTreeModel(
        pair=pair,
        encoder=encoder,
        structure=structure,
        n_treat=np.asarray(n_t, dtype=np.int64),
        n_control=np.asarray(n_c, dtype=np.int64),
        hyper_params={"complexity": complexity, "q": q, "outcome": outcome},
    )


# -- causal forest -------------------------------------------------------------


class Residualizer:
    """Out-of-fold nuisance estimates for the R-learner residualization.

    m_oof[i] is an outcome prediction for unit i from a forest that never
    saw unit i; e is the treated-arm propensity within the pair, a known
    constant under randomized assignment or an out-of-fold estimate in
    "estimated" mode.
    """

    def __init__(self, m_oof: np.ndarray, e: np.ndarray, mode: str, folds: int):
        self.m_oof = m_oof
        self.e = e
        self.mode = mode
        self.folds = folds


def _oof_forest_predictions(
    patterns: np.ndarray,
    pattern_id: np.ndarray,
    target: np.ndarray,
    fold_assignment: np.ndarray,
    seed: int,
    n_tree: int,
    min_split: int,
) -> np.ndarray:
    out = np.empty(len(target), dtype=np.float64)
    k = patterns.shape[0]
    t_sq = target * target
    folds = int(fold_assignment.max()) + 1
    seqs = np.random.SeedSequence(seed).spawn(folds)
    for f in range(folds):
        val = fold_assignment == f
        train_rows = np.nonzero(~val)[0]
        preds = np.zeros(k, dtype=np.float64)
        for tseq in seqs[f].spawn(n_tree):
            rng = np.random.default_rng(tseq)
            boot = train_rows[rng.integers(0, len(train_rows), size=len(train_rows))]
            bpid = pattern_id[boot]
            tree = grow_tree_on_aggregates(
                patterns,
                np.bincount(bpid, minlength=k).astype(np.float64),
                np.bincount(bpid, weights=target[boot], minlength=k),
                np.bincount(bpid, weights=t_sq[boot], minlength=k),
                min_split=min_split,
                rng=rng,
            )
            preds += tree.predict(patterns)
        out[val] = (preds / n_tree)[pattern_id[val]]
    return out


class _ForestTree:
    """One grown tree plus the per-leaf kernel aggregates for queries."""

    def __init__(
        self,
        structure: RegressionTree,
        leaf_num: np.ndarray,
        leaf_den: np.ndarray,
        sub_rows: np.ndarray,
        sub_leaf: np.ndarray,
    ):
        self.structure = structure
        self.leaf_num = leaf_num  # per-node mean of resid_y * resid_w over members
        self.leaf_den = leaf_den  # per-node mean of resid_w^2 over members
        self.sub_rows = sub_rows
        self.sub_leaf = sub_leaf


class CausalForestModel:
    """GRF-style forest; tau(x) is a kernel-weighted residual ratio."""

    kind = "causal_forest"

    def __init__(
        self,
        pair: Pair,
        encoder: Encoder,
        trees: list[_ForestTree],
        residualizer: Residualizer,
        num_terms: np.ndarray,
        den_terms: np.ndarray,
        n_train: int,
        hyper_params: dict,
    ):
        self.pair = pair
        self.encoder = encoder
        self.trees = trees
        self.residualizer = residualizer
        self.num_terms = num_terms  # (Y_i - m(X_i)) * (W_i - e) per training unit
        self.den_terms = den_terms  # (W_i - e)^2 per training unit
        self.n_train = n_train
        self.hyper_params = hyper_params

    def _accumulate(self, rows: np.ndarray):
        if rows.shape[0] >= COMPRESS_QUERY_THRESHOLD:
            patterns, pid = compress_design(rows)
            num, den = self._accumulate(patterns)
            return num[pid], den[pid]
        num = np.zeros(rows.shape[0], dtype=np.float64)
        den = np.zeros(rows.shape[0], dtype=np.float64)
        for ft in self.trees:
            leaf = ft.structure.apply(rows)
            num += ft.leaf_num[leaf]
            den += ft.leaf_den[leaf]
        return num, den

    def estimate_dataset(self, ds: ExperimentDataset) -> np.ndarray:
        num, den = self._accumulate(self.encoder.covariate_block(ds))
        return num / den

    def estimate(self, covariates) -> float:
        row = self.encoder.covariate_row(covariates)[None, :]
        num, den = self._accumulate(row)
        return float(num[0] / den[0])

    def kernel_weights(self, covariates) -> np.ndarray:
        """Co-leaf frequency weights alpha_i(x) over the training units.

        Each tree spreads weight 1/|leaf(x)| over its subsample members in
        the leaf containing x; weights average over trees and sum to 1.
        """
        row = self.encoder.covariate_row(covariates)[None, :]
        alpha = np.zeros(self.n_train, dtype=np.float64)
        for ft in self.trees:
            leaf = int(ft.structure.apply(row)[0])
            members = ft.sub_rows[ft.sub_leaf == leaf]
            alpha[members] += 1.0 / (len(self.trees) * len(members))
        return alpha


def _grow_forest_tree(
    patterns: np.ndarray,
    counts: np.ndarray,
    t_counts: np.ndarray,
    num_sums: np.ndarray,
    den_sums: np.ndarray,
    q: int,
    mtry: int | None,
    max_imbalance: float | None,
    rng: np.random.Generator,
) -> _ForestTree | None:
    """One causal-forest tree from per-pattern subsample aggregates.

    counts / t_counts are the subsample row and treated-row counts per
    pattern; num_sums / den_sums aggregate the residual products. Returns
    None when the subsample cannot satisfy q at the root.
    """
    p = patterns.shape[1]
    live = np.nonzero(counts > 0)[0]
    n_root = counts[live].sum()
    nt_root = t_counts[live].sum()
    if nt_root < q or n_root - nt_root < q:
        return None

    column: list[int] = []
    left: list[int] = []
    right: list[int] = []
    n_all: list[int] = []

    def add_node(n_rows: float) -> int:
        column.append(-1)
        left.append(-1)
        right.append(-1)
        n_all.append(int(n_rows))
        return len(column) - 1

    row_sets: dict[int, np.ndarray] = {}
    root = add_node(n_root)
    row_sets[root] = live
    stack = [root]
    while stack:
        node = stack.pop()
        rows = row_sets[node]
        cn = counts[rows]
        n = cn.sum()
        nt = t_counts[rows].sum()
        nc = n - nt
        if nt < 2 * q or nc < 2 * q:
            continue
        cols = _candidate_columns(p, mtry, rng)
        sub_x = patterns[np.ix_(rows, cols)]
        n1 = cn @ sub_x
        t1 = t_counts[rows] @ sub_x
        c1 = n1 - t1
        s1 = num_sums[rows] @ sub_x
        d1 = den_sums[rows] @ sub_x
        n0 = n - n1
        t0 = nt - t1
        c0 = nc - c1
        s0 = num_sums[rows].sum() - s1
        d0 = den_sums[rows].sum() - d1
        valid = (t1 >= q) & (c1 >= q) & (t0 >= q) & (c0 >= q) & (d1 > 0) & (d0 > 0)
        if max_imbalance is not None:
            valid &= np.minimum(n1, n0) >= max_imbalance * n
        if not valid.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            crit = (n1 * n0 / n**2) * (s0 / d0 - s1 / d1) ** 2
        crit[~valid] = -np.inf
        best = int(np.argmax(crit))
        if not crit[best] > 0.0:
            continue
        col = int(cols[best])
        go_right = patterns[rows, col] >= 0.5
        rows_r = rows[go_right]
        rows_l = rows[~go_right]
        li = add_node(counts[rows_l].sum())
        ri = add_node(counts[rows_r].sum())
        row_sets[li] = rows_l
        row_sets[ri] = rows_r
        del row_sets[node]
        column[node] = col
        left[node] = li
        right[node] = ri
        stack.append(li)
        stack.append(ri)

    n_nodes = len(column)
    structure = RegressionTree(
        column=np.asarray(column, dtype=np.int64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.zeros(n_nodes, dtype=np.float64),
        n=np.asarray(n_all, dtype=np.int64),
    )
    leaf_num = np.zeros(n_nodes, dtype=np.float64)
    leaf_den = np.zeros(n_nodes, dtype=np.float64)
    for leaf_id, rows in row_sets.items():
        leaf_num[leaf_id] = num_sums[rows].sum() / counts[rows].sum()
        leaf_den[leaf_id] = den_sums[rows].sum() / counts[rows].sum()
    return _ForestTree(structure, leaf_num, leaf_den, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))


def fit_causal_forest(
    ds: ExperimentDataset,
    pair: Pair,
    outcome: str,
    n_tree: int = 200,
    subsample: float = 0.5,
    mtry: int | None = None,
    q: int = 10,
    seed: int = 0,
    propensity_mode: str = "known",
    max_imbalance: float | None = None,
    nuisance_trees: int = 50,
    nuisance_min_split: int = 25,
    folds: int = 5,
) -> CausalForestModel:
    """Fit the two-step causal forest for one treatment pair.

    Step 1 residualizes: m(x) comes from a five-fold out-of-fold random
    forest; the propensity is the known within-pair constant (or, with
    propensity_mode="estimated", an out-of-fold forest fit, for
    observational inputs). Step 2 grows `n_tree` trees on row subsamples
    and `mtry`-column subsets; splits maximize the child-effect criterion
    with exact residual-ratio child effects and are skipped when a child
    would drop below q units of either arm. Trees whose subsample cannot
    satisfy q at the root are discarded; all trees invalid is an error.
    """
    if not 0.0 < subsample <= 1.0:
        raise ConfigError("subsample fraction must be in (0, 1]")
    if n_tree < 1 or q < 1:
        raise ConfigError("n_tree and q must be positive")
    if propensity_mode not in ("known", "estimated"):
        raise ConfigError("propensity_mode must be 'known' or 'estimated'")
    sub, treated = _pair_arrays(ds, pair, outcome)
    y = sub.outcome(outcome)
    encoder = Encoder.fit(sub)
    X = encoder.covariate_block(sub)
    n = sub.n

    root_seq = np.random.SeedSequence(seed)
    fold_seed, m_seed, e_seed, trees_seed = (
        int(s.generate_state(1)[0]) for s in root_seq.spawn(4)
    )
    patterns, pid = compress_design(X)
    k = patterns.shape[0]
    fold_assignment = arm_balanced_kfold(sub, folds, fold_seed)
    m_oof = _oof_forest_predictions(
        patterns, pid, y, fold_assignment, m_seed, nuisance_trees, nuisance_min_split
    )
    if propensity_mode == "known":
        e = np.full(n, _pair_propensity(ds, pair, treated))
    else:
        e = _oof_forest_predictions(
            patterns, pid, treated, fold_assignment, e_seed, nuisance_trees, nuisance_min_split
        )
        e = np.clip(e, 0.01, 0.99)
    resid_y = y - m_oof
    resid_w = treated - e
    num_terms = resid_y * resid_w
    den_terms = resid_w**2

    n_sub = max(1, int(round(subsample * n)))
    trees: list[_ForestTree] = []
    for seq in np.random.SeedSequence(trees_seed).spawn(n_tree):
        rng = np.random.default_rng(seq)
        rows = (
            np.sort(rng.choice(n, size=n_sub, replace=False))
            if n_sub < n
            else np.arange(n)
        )
        bpid = pid[rows]
        ft = _grow_forest_tree(
            patterns,
            np.bincount(bpid, minlength=k).astype(np.float64),
            np.bincount(bpid, weights=treated[rows], minlength=k),
            np.bincount(bpid, weights=num_terms[rows], minlength=k),
            np.bincount(bpid, weights=den_terms[rows], minlength=k),
            q=q,
            mtry=mtry,
            max_imbalance=max_imbalance,
            rng=rng,
        )
        if ft is None:
            continue
        ft.sub_rows = rows
        ft.sub_leaf = ft.structure.apply(patterns)[bpid]
        trees.append(ft)
    if not trees:
        raise DataError(
            f"no subsample of pair {pair} had {q} units of each arm; no valid tree"
        )
    return CausalForestModel(
        pair=pair,
        encoder=encoder,
        trees=trees,
        residualizer=Residualizer(m_oof, e, propensity_mode, folds),
        num_terms=num_terms,
        den_terms=den_terms,
        n_train=n,
        hyper_params={
            "n_tree": n_tree,
            "subsample": subsample,
            "mtry": mtry,
            "q": q,
            "seed": seed,
            "propensity_mode": propensity_mode,
            "max_imbalance": max_imbalance,
            "outcome": outcome,
        },
    )


# -- shared operations ----------------------------------------------------------

PairwiseCateModel = CausalTreeModel | CausalForestModel


class OutcomeModelCate:
    """Pairwise effect view of a fitted outcome model.

    tau(x) = f(x, a) - f(x, b). Used to put outcome estimators on the same
    footing as the dedicated effect estimators in effect-CDF exports and
    dominance-based policies.
    """

    kind = "outcome_difference"

    def __init__(self, model, pair: Pair):
        self.model = model
        self.pair = pair

    def estimate(self, covariates) -> float:
        a, b = self.pair
        return self.model.predict(covariates, a) - self.model.predict(covariates, b)

    def estimate_dataset(self, ds: ExperimentDataset) -> np.ndarray:
        preds = self.model.predict_all_arms(ds)
        a, b = self.pair
        return preds[:, a] - preds[:, b]


def cates_from_outcome(model, n_arms: int) -> dict[Pair, OutcomeModelCate]:
    """All W(W-1)/2 pairwise effect views of one outcome model."""
    return {
        (a, b): OutcomeModelCate(model, (a, b))
        for a in range(n_arms)
        for b in range(a + 1, n_arms)
    }


def estimate(model, covariates) -> float:
    """Point effect estimate tau_hat(x) from any fitted pairwise model."""
    if not hasattr(model, "estimate"):
        raise NotFittedError("estimate requires a fitted pairwise effect model")
    return float(model.estimate(covariates))


def estimate_dataset(model, ds: ExperimentDataset) -> np.ndarray:
    if hasattr(model, "estimate_dataset"):
        return np.asarray(model.estimate_dataset(ds), dtype=np.float64)
    return np.array([model.estimate(ds.covariates_of(i)) for i in range(ds.n)])


def fit_all_pairs(
    ds: ExperimentDataset, kind: str, outcome: str, **hyper_params
) -> dict[Pair, PairwiseCateModel]:
    """Fit one pairwise model per unordered arm pair (W(W-1)/2 models)."""
    if ds.n_arms < 2:
        raise ConfigError("pairwise effects need at least two arms")
    fitters = {"causal_tree": fit_causal_tree, "causal_forest": fit_causal_forest}
    if kind not in fitters:
        raise ConfigError(f"unknown pairwise estimator kind {kind!r}")
    models: dict[Pair, PairwiseCateModel] = {}
    for a in range(ds.n_arms):
        for b in range(a + 1, ds.n_arms):
            try:
                models[(a, b)] = fitters[kind](ds, (a, b), outcome, **hyper_params)
            except Exception as exc:
                raise type(exc)(f"pair ({a}, {b}): {exc}") from exc
    return models


def cate_cdf_export(models: dict[Pair, object], ds: ExperimentDataset, path: str | None = None):
    """Per-unit effect estimates for every pair, optionally written as a
    sorted CSV ready for empirical-CDF plotting."""
    table = {pair: estimate_dataset(model, ds) for pair, model in models.items()}
    if path is not None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["treated_arm", "control_arm", "tau_hat", "cdf"])
            for (a, b), values in sorted(table.items()):
                ordered = np.sort(values)
                for k, v in enumerate(ordered, start=1):
                    writer.writerow([a, b, repr(float(v)), repr(k / len(ordered))])
    return table
