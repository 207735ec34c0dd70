import numpy as np
import pytest

from upliftkit.dataset import ExperimentDataset


def make_dataset(rows, arm_order=None, propensities=None):
    """rows: list of (covariates dict, arm label, outcomes dict)."""
    records = [
        {"covariates": cov, "arm": arm, "outcomes": out} for cov, arm, out in rows
    ]
    return ExperimentDataset.from_records(
        records, arm_order=arm_order, propensities=propensities
    )


@pytest.fixture
def six_row_ds():
    rows = [
        ({"job": "student"}, "A", {"y": 1.0}),
        ({"job": "student"}, "B", {"y": 0.0}),
        ({"job": "pro"}, "A", {"y": 0.5}),
        ({"job": "pro"}, "B", {"y": 0.25}),
        ({"job": "student"}, "A", {"y": 0.0}),
        ({"job": "pro"}, "B", {"y": 1.0}),
    ]
    return make_dataset(rows, arm_order=["A", "B"], propensities={"A": 0.5, "B": 0.5})


def random_dataset(rng, n=40, n_arms=3, variables=("g", "h"), n_categories=(3, 2),
                   outcome="y", binary=False, propensities=None):
    """Small random dataset for identity and property tests."""
    rows = []
    for _ in range(n):
        cov = {
            v: f"c{rng.integers(k)}"
            for v, k in zip(variables, n_categories)
        }
        arm = f"arm{rng.integers(n_arms)}"
        value = float(rng.integers(2)) if binary else float(rng.normal())
        rows.append((cov, arm, {outcome: value}))
    return make_dataset(
        rows,
        arm_order=[f"arm{w}" for w in range(n_arms)],
        propensities=propensities,
    )
