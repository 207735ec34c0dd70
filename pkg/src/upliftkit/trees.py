"""Greedy binary regression trees over 0/1 design matrices.

Splits are always of the form "column == 0 goes left, column == 1 goes
right", which is all one-hot designs need. Equal-gain ties break to the
lowest column index so tree growth is deterministic.

Because inputs are one-hot, many rows share the same pattern. Growth
therefore runs on per-pattern aggregates (counts, outcome sums, outcome
sums of squares); split gains computed from aggregates are the same
numbers as from raw rows, while the work per node shrinks from the number
of rows to the number of distinct patterns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A node is declared pure (left as a leaf) when its SSE is this small
# relative to its sum of squares; guards against float noise manufacturing
# splits of constant nodes.
PURITY_RTOL = 1e-12


@dataclass
class RegressionTree:
    """Array-backed binary tree; column == -1 marks a leaf."""

    column: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.column < 0))

    @property
    def n_nodes(self) -> int:
        return len(self.column)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id for every row of X."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            col = self.column[node]
            internal = col >= 0
            if not internal.any():
                return node
            rows = np.nonzero(internal)[0]
            go_right = X[rows, col[rows]] >= 0.5
            node[rows] = np.where(
                go_right, self.right[node[rows]], self.left[node[rows]]
            )

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "column": self.column.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n": self.n.tolist(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RegressionTree":
        return cls(
            column=np.asarray(raw["column"], dtype=np.int64),
            left=np.asarray(raw["left"], dtype=np.int64),
            right=np.asarray(raw["right"], dtype=np.int64),
            value=np.asarray(raw["value"], dtype=np.float64),
            n=np.asarray(raw["n"], dtype=np.int64),
        )


def compress_design(X: np.ndarray):
    """Unique row patterns and the pattern id of every row."""
    patterns, pattern_id = np.unique(np.asarray(X, dtype=np.float64), axis=0, return_inverse=True)
    return patterns, pattern_id.astype(np.int64).ravel()


def _candidate_columns(p, max_features, rng):
    if max_features is None or max_features >= p:
        return np.arange(p)
    cols = rng.choice(p, size=max_features, replace=False)
    cols.sort()  # keep the lowest-index tie rule under subsampling
    return cols


class _TreeBuffer:
    def __init__(self):
        self.column: list[int] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.n: list[int] = []

    def add(self, value: float, n: int) -> int:
        self.column.append(-1)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        self.n.append(n)
        return len(self.column) - 1

    def split(self, node: int, col: int, left: int, right: int) -> None:
        self.column[node] = col
        self.left[node] = left
        self.right[node] = right

    def finish(self) -> RegressionTree:
        return RegressionTree(
            column=np.asarray(self.column, dtype=np.int64),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            value=np.asarray(self.value, dtype=np.float64),
            n=np.asarray(self.n, dtype=np.int64),
        )


def grow_tree_on_aggregates(
    patterns: np.ndarray,
    counts: np.ndarray,
    sums: np.ndarray,
    sumsqs: np.ndarray,
    min_leaf: int = 1,
    min_split: int = 2,
    max_depth: int | None = None,
    min_gain: float = 0.0,
    max_features: int | None = None,
    rng: np.random.Generator | None = None,
) -> RegressionTree:
    """Grow a tree from per-pattern (count, sum y, sum y^2) aggregates.

    A split is accepted only when its SSE reduction strictly exceeds
    `min_gain` and both children hold at least `min_leaf` underlying rows.
    Leaf values are member means.
    """
    patterns = np.asarray(patterns, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    sums = np.asarray(sums, dtype=np.float64)
    sumsqs = np.asarray(sumsqs, dtype=np.float64)
    p = patterns.shape[1]
    live = np.nonzero(counts > 0)[0]
    n_root = counts[live].sum()
    buf = _TreeBuffer()
    root = buf.add(float(sums[live].sum() / n_root), int(n_root))
    stack = [(root, live, 0)]
    while stack:
        node, rows, depth = stack.pop()
        cn = counts[rows]
        n = cn.sum()
        if n < min_split or (max_depth is not None and depth >= max_depth):
            continue
        s = sums[rows].sum()
        qq = sumsqs[rows].sum()
        sse = qq - s * s / n
        if sse <= PURITY_RTOL * abs(qq):
            continue
        cols = _candidate_columns(p, max_features, rng)
        sub = patterns[np.ix_(rows, cols)]
        n1 = cn @ sub
        s1 = sums[rows] @ sub
        n0 = n - n1
        s0 = s - s1
        valid = (n1 >= min_leaf) & (n0 >= min_leaf)
        if not valid.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = s1**2 / n1 + s0**2 / n0 - s * s / n
        gain[~valid] = -np.inf
        best = int(np.argmax(gain))
        if not gain[best] > min_gain:
            continue
        col = int(cols[best])
        go_right = patterns[rows, col] >= 0.5
        rows_r = rows[go_right]
        rows_l = rows[~go_right]
        n_r = counts[rows_r].sum()
        n_l = n - n_r
        left = buf.add(float(sums[rows_l].sum() / n_l), int(n_l))
        right = buf.add(float(sums[rows_r].sum() / n_r), int(n_r))
        buf.split(node, col, left, right)
        stack.append((left, rows_l, depth + 1))
        stack.append((right, rows_r, depth + 1))
    return buf.finish()


def grow_regression_tree(
    X: np.ndarray,
    y: np.ndarray,
    min_leaf: int = 1,
    min_split: int = 2,
    max_depth: int | None = None,
    min_gain: float = 0.0,
    max_features: int | None = None,
    rng: np.random.Generator | None = None,
) -> RegressionTree:
    """Grow a tree from raw rows (each row its own aggregate)."""
    y = np.asarray(y, dtype=np.float64)
    return grow_tree_on_aggregates(
        X,
        np.ones(len(y)),
        y,
        y * y,
        min_leaf=min_leaf,
        min_split=min_split,
        max_depth=max_depth,
        min_gain=min_gain,
        max_features=max_features,
        rng=rng,
    )
