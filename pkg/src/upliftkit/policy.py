"""Treatment-assignment policies and allocation summaries.

A policy is a deterministic total mapping from covariates to an arm index.
Four constructions are provided: a uniform policy, the argmax of a fitted
outcome model, weak dominance over pairwise effect estimates (with a
caller-supplied fallback arm for cyclic estimates), and an explicit
cell -> arm table.
"""

from __future__ import annotations

import csv
from typing import Mapping, Sequence

import numpy as np

from .cate_models import Pair, estimate_dataset
from .dataset import ExperimentDataset
from .errors import ConfigError, DataError


class Policy:
    """Base class; subclasses implement assign / assign_dataset."""

    kind: str

    def assign(self, covariates: Mapping[str, str]) -> int:
        raise NotImplementedError

    def assign_dataset(self, ds: ExperimentDataset) -> np.ndarray:
        return np.array([self.assign(ds.covariates_of(i)) for i in range(ds.n)], dtype=np.int64)


class UniformPolicy(Policy):
    kind = "uniform"

    def __init__(self, arm: int, n_arms: int | None = None):
        if arm < 0 or (n_arms is not None and arm >= n_arms):
            raise ConfigError(f"invalid arm {arm} for a {n_arms}-arm experiment")
        self.arm = int(arm)

    def assign(self, covariates) -> int:
        return self.arm

    def assign_dataset(self, ds) -> np.ndarray:
        return np.full(ds.n, self.arm, dtype=np.int64)


class OutcomePolicy(Policy):
    """argmax_w f_hat(x, w); ties break to the lowest arm index."""

    kind = "outcome_based"

    def __init__(self, model):
        self.model = model

    @property
    def n_arms(self) -> int:
        return self.model.encoder.n_arms

    def assign(self, covariates) -> int:
        preds = [self.model.predict(covariates, w) for w in range(self.n_arms)]
        return int(np.argmax(preds))

    def assign_dataset(self, ds) -> np.ndarray:
        return np.argmax(self.model.predict_all_arms(ds), axis=1).astype(np.int64)


class CatePolicy(Policy):
    """Weak dominance over all pairwise effects, fallback on cycles.

    Arm j is assigned iff tau_hat(j, k) >= 0 against every other arm k.
    When several arms weakly dominate (exact ties) the lowest index wins;
    when none does (a cycle, typical of noisy estimates) the caller's
    fallback arm, normally the experiment's best average treatment, is
    assigned.
    """

    kind = "cate_based"

    def __init__(self, models: Mapping[Pair, object], fallback: int, n_arms: int | None = None):
        if n_arms is None:
            n_arms = 1 + max(max(a, b) for a, b in models)
        expected = {(a, b) for a in range(n_arms) for b in range(a + 1, n_arms)}
        missing = expected - set(models)
        if missing:
            raise ConfigError(f"missing pairwise models for pairs {sorted(missing)}")
        if not 0 <= fallback < n_arms:
            raise ConfigError(f"fallback arm {fallback} out of range")
        self.models = dict(models)
        self.fallback = int(fallback)
        self.n_arms = n_arms

    def _choose(self, tau: np.ndarray) -> np.ndarray:
        # tau has shape (n, W, W) with tau[:, a, b] = tau_hat_{a,b}; the
        # diagonal is zero so self-comparison never blocks dominance.
        dominates = (tau >= 0.0).all(axis=2)
        any_dom = dominates.any(axis=1)
        first = np.argmax(dominates, axis=1)
        return np.where(any_dom, first, self.fallback).astype(np.int64)

    def assign(self, covariates) -> int:
        tau = np.zeros((1, self.n_arms, self.n_arms))
        for (a, b), model in self.models.items():
            value = float(model.estimate(covariates))
            tau[0, a, b] = value
            tau[0, b, a] = -value
        return int(self._choose(tau)[0])

    def assign_dataset(self, ds) -> np.ndarray:
        tau = np.zeros((ds.n, self.n_arms, self.n_arms))
        for (a, b), model in self.models.items():
            values = estimate_dataset(model, ds)
            tau[:, a, b] = values
            tau[:, b, a] = -values
        return self._choose(tau)


class TablePolicy(Policy):
    """Explicit mapping from cell signatures to arms.

    A cell signature is the tuple of category labels in sorted-variable
    order. Cells outside the table fall back to `default_arm` when given,
    otherwise raise.
    """

    kind = "table"

    def __init__(
        self,
        variables: Sequence[str],
        table: Mapping[tuple, int],
        default_arm: int | None = None,
    ):
        self.variables = tuple(sorted(variables))
        self.table = {tuple(str(v) for v in key): int(arm) for key, arm in table.items()}
        self.default_arm = default_arm

    def assign(self, covariates) -> int:
        key = tuple(str(covariates[v]) for v in self.variables)
        if key in self.table:
            return self.table[key]
        if self.default_arm is not None:
            return self.default_arm
        raise DataError(f"cell {key} not covered by the table policy")

    def to_csv(self, path: str, arm_labels: Sequence[str] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([*self.variables, "arm"])
            for key in sorted(self.table):
                arm = self.table[key]
                label = arm_labels[arm] if arm_labels is not None else arm
                writer.writerow([*key, label])


def uniform_policy(arm: int, n_arms: int | None = None) -> UniformPolicy:
    """The policy assigning `arm` to everyone."""
    return UniformPolicy(arm, n_arms)


def policy_from_outcome(model) -> OutcomePolicy:
    """Assign each unit the arm with the highest predicted outcome."""
    return OutcomePolicy(model)


def policy_from_cates(
    models: Mapping[Pair, object], fallback: int, n_arms: int | None = None
) -> CatePolicy:
    """Assign the arm whose estimated effect is nonnegative against all
    others; cycles get the fallback arm."""
    return CatePolicy(models, fallback, n_arms)


class AllocationSummary:
    """Per-arm assignment fractions of a policy over a dataset."""

    def __init__(self, arm_labels: Sequence[str], fractions: np.ndarray):
        self.arm_labels = tuple(arm_labels)
        self.fractions = np.asarray(fractions, dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return {lab: float(f) for lab, f in zip(self.arm_labels, self.fractions)}


def allocation(policy: Policy, ds: ExperimentDataset) -> AllocationSummary:
    """Fraction of units the policy assigns to each arm."""
    if ds.n == 0:
        raise DataError("cannot summarize allocations on an empty dataset")
    assigned = policy.assign_dataset(ds)
    counts = np.bincount(assigned, minlength=ds.n_arms)
    return AllocationSummary([a.label for a in ds.arms], counts / ds.n)
