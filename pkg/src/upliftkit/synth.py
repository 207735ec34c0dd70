"""Synthetic randomized experiments with analytically known response surfaces.

A DGP here is a finite table: categorical cells (the cartesian product of a
few categorical variables), W arms, and a known mean response per
(cell, arm). Because the truth is tabular, the optimal policy and the exact
value of any policy are available in closed form, which makes these DGPs
usable as oracles for the estimation and evaluation machinery.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import ExperimentDataset, TreatmentArm
from .errors import ConfigError, DataError

Cell = tuple[str, ...]


@dataclass(frozen=True)
class SyntheticDGP:
    """Tabular data generating process for a fully randomized experiment.

    variables maps each covariate name to its category domain; a cell is one
    combination of categories in sorted-variable order. response[cell] is a
    per-arm tuple: success probabilities for Bernoulli outcomes, or
    (mean, sigma) pairs for Gaussian outcomes. Treatment assignment is
    independent of the cell by construction, so unconfoundedness holds
    exactly.
    """

    variables: dict[str, tuple[str, ...]] = field(hash=False)
    arm_labels: tuple[str, ...] = ()
    response: dict[Cell, tuple] = field(default_factory=dict, hash=False)
    propensities: tuple[float, ...] = ()
    cell_mass: dict[Cell, float] | None = field(default=None, hash=False)
    outcome_name: str = "y"
    outcome_kind: str = "bernoulli"
    seed: int = 0

    def __post_init__(self):
        if self.outcome_kind not in ("bernoulli", "gaussian"):
            raise ConfigError(f"unknown outcome kind {self.outcome_kind!r}")
        if len(self.propensities) != self.n_arms:
            raise ConfigError("propensities must cover every arm")
        prop = np.asarray(self.propensities, dtype=float)
        if np.any(prop <= 0) or abs(prop.sum() - 1.0) > 1e-9:
            raise ConfigError("propensities must be positive and sum to 1")
        cells = set(self.cells())
        if set(self.response) != cells:
            raise ConfigError("response table must cover every cell exactly")
        for cell, row in self.response.items():
            if len(row) != self.n_arms:
                raise ConfigError(f"response row for {cell} must cover every arm")
            if self.outcome_kind == "bernoulli":
                if any(not 0.0 <= float(p) <= 1.0 for p in row):
                    raise ConfigError("Bernoulli responses must lie in [0, 1]")
        if self.cell_mass is not None:
            if set(self.cell_mass) != cells:
                raise ConfigError("cell_mass must cover every cell exactly")
            total = sum(self.cell_mass.values())
            if abs(total - 1.0) > 1e-9 or any(m < 0 for m in self.cell_mass.values()):
                raise ConfigError("cell_mass must be a probability vector")

    @property
    def n_arms(self) -> int:
        return len(self.arm_labels)

    @property
    def sorted_variables(self) -> tuple[str, ...]:
        return tuple(sorted(self.variables))

    def cells(self) -> list[Cell]:
        domains = [self.variables[v] for v in self.sorted_variables]
        return [tuple(combo) for combo in itertools.product(*domains)]

    def cell_covariates(self, cell: Cell) -> dict[str, str]:
        return dict(zip(self.sorted_variables, cell))

    def masses(self) -> dict[Cell, float]:
        cells = self.cells()
        if self.cell_mass is None:
            return {c: 1.0 / len(cells) for c in cells}
        return dict(self.cell_mass)

    def mean_response(self, cell: Cell, arm: int) -> float:
        value = self.response[cell][arm]
        if self.outcome_kind == "gaussian":
            return float(value[0])
        return float(value)


@dataclass
class OracleAnswers:
    """Exact optimum of a DGP: per-cell argmax policy and its value."""

    optimal_policy: dict[Cell, int]
    optimal_value: float
    value_of: Callable[[Mapping[Cell, int]], float]


def draw(dgp: SyntheticDGP, n: int, seed: int | None = None) -> ExperimentDataset:
    """Draw n i.i.d. units from the DGP, deterministic for a fixed seed.

    Cells come from the cell-mass distribution, arms from the propensities
    (independently of the cell), and outcomes from the per-(cell, arm)
    response.
    """
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = np.random.default_rng(dgp.seed if seed is None else seed)
    cells = dgp.cells()
    masses = dgp.masses()
    mass_vec = np.array([masses[c] for c in cells])

    cell_idx = rng.choice(len(cells), size=n, p=mass_vec)
    arm_idx = rng.choice(dgp.n_arms, size=n, p=np.asarray(dgp.propensities))

    # Response means looked up per draw from the (cell, arm) table.
    mean_table = np.array(
        [[dgp.mean_response(c, w) for w in range(dgp.n_arms)] for c in cells]
    )
    means = mean_table[cell_idx, arm_idx]
    if dgp.outcome_kind == "bernoulli":
        y = (rng.random(n) < means).astype(np.float64)
    else:
        sigma_table = np.array(
            [[float(dgp.response[c][w][1]) for w in range(dgp.n_arms)] for c in cells]
        )
        y = means + sigma_table[cell_idx, arm_idx] * rng.standard_normal(n)

    variables = dgp.sorted_variables
    categories = {v: tuple(dgp.variables[v]) for v in variables}
    code_of = {
        v: {c: j for j, c in enumerate(categories[v])} for v in variables
    }
    cell_codes = np.array(
        [[code_of[v][cell[d]] for d, v in enumerate(variables)] for cell in cells],
        dtype=np.int32,
    )
    codes = cell_codes[cell_idx]

    arms = [TreatmentArm(w, lab) for w, lab in enumerate(dgp.arm_labels)]
    return ExperimentDataset(
        variables=variables,
        categories=categories,
        codes=codes,
        arms=arms,
        arm_index=arm_idx.astype(np.int32),
        outcomes={dgp.outcome_name: y},
        propensities={w: float(p) for w, p in enumerate(dgp.propensities)},
    )


def _policy_cell_arm(dgp: SyntheticDGP, policy, cell: Cell) -> int:
    if callable(getattr(policy, "assign", None)):
        arm = policy.assign(dgp.cell_covariates(cell))
    elif isinstance(policy, Mapping):
        arm = policy[cell]
    else:
        arm = policy(dgp.cell_covariates(cell))
    arm = int(arm)
    if not 0 <= arm < dgp.n_arms:
        raise DataError(f"policy returned invalid arm {arm} for cell {cell}")
    return arm


def true_policy_value(dgp: SyntheticDGP, policy) -> float:
    """Exact expected outcome of a policy: sum over cells, no sampling.

    `policy` may be a Policy object, a mapping cell -> arm, or a callable
    on covariate mappings.
    """
    masses = dgp.masses()
    return float(
        sum(
            masses[cell] * dgp.mean_response(cell, _policy_cell_arm(dgp, policy, cell))
            for cell in dgp.cells()
        )
    )


def enumerate_optimal(dgp: SyntheticDGP) -> OracleAnswers:
    """Cellwise argmax of the response table; ties break to the lower arm.

    The optimum over all W^(#cells) policies decomposes per cell, so the
    cellwise argmax is the global argmax.
    """
    best: dict[Cell, int] = {}
    for cell in dgp.cells():
        means = [dgp.mean_response(cell, w) for w in range(dgp.n_arms)]
        best[cell] = int(np.argmax(means))  # argmax takes the first maximum
    masses = dgp.masses()

    def value_of(policy) -> float:
        return true_policy_value(dgp, policy)

    optimal_value = float(
        sum(masses[c] * dgp.mean_response(c, best[c]) for c in dgp.cells())
    )
    return OracleAnswers(optimal_policy=best, optimal_value=optimal_value, value_of=value_of)


def random_bernoulli_dgp(
    variables: Mapping[str, Sequence[str]],
    arm_labels: Sequence[str],
    propensities: Sequence[float],
    seed: int,
    base_range: tuple[float, float] = (0.15, 0.55),
    effect_gap: float = 0.05,
    effect_spread: float = 0.15,
    outcome_name: str = "y",
) -> SyntheticDGP:
    """Random Bernoulli response table with a guaranteed winner per cell.

    In every cell the best arm beats the runner-up by at least `effect_gap`,
    which keeps oracle-recovery tests statistically stable by separating
    estimation error from ties.
    """
    if effect_gap <= 0:
        raise ConfigError("effect_gap must be positive")
    rng = np.random.default_rng(seed)
    dgp_vars = {v: tuple(variables[v]) for v in variables}
    n_arms = len(arm_labels)
    response: dict[Cell, tuple] = {}
    domains = [dgp_vars[v] for v in sorted(dgp_vars)]
    for cell in itertools.product(*domains):
        base = rng.uniform(*base_range)
        offsets = rng.uniform(0.0, effect_spread, size=n_arms)
        winner = rng.integers(n_arms)
        offsets[winner] = offsets.max() + effect_gap
        probs = np.clip(base + offsets, 0.0, 1.0)
        if probs[winner] - np.sort(np.delete(probs, winner))[-1] < effect_gap:
            # Clipping at 1.0 can erase the margin; push the losers down.
            probs = np.minimum(probs, probs[winner] - effect_gap)
            probs[winner] += effect_gap
            probs = np.clip(probs, 0.0, 1.0)
        response[tuple(cell)] = tuple(float(p) for p in probs)
    return SyntheticDGP(
        variables=dgp_vars,
        arm_labels=tuple(arm_labels),
        response=response,
        propensities=tuple(float(p) for p in propensities),
        outcome_name=outcome_name,
        seed=int(rng.integers(2**63)),
    )


# -- JSON spec file -----------------------------------------------------------

CELL_SEPARATOR = "|"


def dgp_to_json_dict(dgp: SyntheticDGP) -> dict:
    return {
        "variables": {v: list(dom) for v, dom in dgp.variables.items()},
        "arms": list(dgp.arm_labels),
        "outcome": {"name": dgp.outcome_name, "kind": dgp.outcome_kind},
        "response": {
            CELL_SEPARATOR.join(cell): list(row) for cell, row in dgp.response.items()
        },
        "cell_mass": (
            None
            if dgp.cell_mass is None
            else {CELL_SEPARATOR.join(c): m for c, m in dgp.cell_mass.items()}
        ),
        "propensities": list(dgp.propensities),
        "seed": dgp.seed,
    }


def dgp_from_json_dict(raw: Mapping) -> SyntheticDGP:
    try:
        variables = {v: tuple(dom) for v, dom in raw["variables"].items()}
        outcome = raw.get("outcome", {})
        response = {
            tuple(key.split(CELL_SEPARATOR)): tuple(row)
            for key, row in raw["response"].items()
        }
        mass = raw.get("cell_mass")
        cell_mass = (
            None
            if mass is None
            else {tuple(k.split(CELL_SEPARATOR)): float(m) for k, m in mass.items()}
        )
        return SyntheticDGP(
            variables=variables,
            arm_labels=tuple(raw["arms"]),
            response=response,
            propensities=tuple(float(p) for p in raw["propensities"]),
            cell_mass=cell_mass,
            outcome_name=outcome.get("name", "y"),
            outcome_kind=outcome.get("kind", "bernoulli"),
            seed=int(raw.get("seed", 0)),
        )
    except KeyError as exc:
        raise ConfigError(f"DGP spec is missing key {exc}") from exc


def load_dgp(path: str) -> SyntheticDGP:
    with open(path) as fh:
        return dgp_from_json_dict(json.load(fh))


def save_dgp(dgp: SyntheticDGP, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(dgp_to_json_dict(dgp), fh, indent=2, sort_keys=True)
