"""Experiment data container, one-hot encoding, and train/test splitting.

A dataset is a column store over units of a randomized experiment: purely
categorical covariates, one treatment arm per unit, and one or more numeric
outcomes. Category domains are fixed at construction and survive subsetting,
so encoded column layouts stay identical between a training split and any
data later scored against models fitted on it.

Category and variable ordering is lexicographic everywhere (variable name
first, then category label) so that encoded column indices are reproducible
across runs and machines.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, ParseError, PositivityError, SchemaError

UNKNOWN_CATEGORY = "unknown"

PROPENSITY_SUM_TOL = 1e-9


@dataclass(frozen=True)
class TreatmentArm:
    """One of the W discrete interventions, e.g. a trial length."""

    index: int
    label: str


@dataclass(frozen=True)
class DummyColumn:
    """Descriptor for one 0/1 column of an encoded design matrix.

    kind is "covariate", "arm", or "interaction". Covariate columns carry
    (variable, category); arm columns carry the arm index; interaction
    columns carry all three.
    """

    kind: str
    variable: str | None = None
    category: str | None = None
    arm: int | None = None

    def name(self) -> str:
        if self.kind == "covariate":
            return f"{self.variable}={self.category}"
        if self.kind == "arm":
            return f"arm[{self.arm}]"
        return f"{self.variable}={self.category}:arm[{self.arm}]"


class ExperimentDataset:
    """Immutable table of experimental units.

    Parameters
    ----------
    variables:
        Covariate names, stored sorted lexicographically.
    categories:
        Mapping variable -> tuple of category labels (sorted). Domains are
        shared by all units; empty self-reports must already be mapped to
        the explicit "unknown" category.
    codes:
        (N, D) int array of per-unit category indices into `categories`.
    arms:
        The treatment arms, indices contiguous from 0.
    arm_index:
        (N,) int array of assigned arm per unit.
    outcomes:
        Mapping outcome name -> (N,) float array; all values finite.
    propensities:
        Optional known assignment probabilities per arm index. Must be
        strictly positive and sum to 1 (randomized-assignment positivity).
    """

    def __init__(
        self,
        variables: Sequence[str],
        categories: Mapping[str, Sequence[str]],
        codes: np.ndarray,
        arms: Sequence[TreatmentArm],
        arm_index: np.ndarray,
        outcomes: Mapping[str, np.ndarray],
        propensities: Mapping[int, float] | None = None,
    ):
        self.variables = tuple(variables)
        self.categories = {v: tuple(categories[v]) for v in self.variables}
        self.codes = np.ascontiguousarray(codes, dtype=np.int32)
        self.arms = tuple(arms)
        self.arm_index = np.ascontiguousarray(arm_index, dtype=np.int32)
        self.outcomes = {k: np.asarray(v, dtype=np.float64) for k, v in outcomes.items()}
        self.propensities = dict(propensities) if propensities is not None else None
        self._validate()
        self.codes.setflags(write=False)
        self.arm_index.setflags(write=False)
        for arr in self.outcomes.values():
            arr.setflags(write=False)

    def _validate(self) -> None:
        n = self.codes.shape[0]
        if self.codes.ndim != 2 or self.codes.shape[1] != len(self.variables):
            raise DataError("codes shape does not match variable count")
        if self.arm_index.shape != (n,):
            raise DataError("arm_index length does not match unit count")
        labels = [a.label for a in self.arms]
        if len(set(labels)) != len(labels):
            raise DataError("arm labels must be unique")
        for i, arm in enumerate(self.arms):
            if arm.index != i:
                raise DataError("arm indices must be contiguous from 0")
        if n and (self.arm_index.min() < 0 or self.arm_index.max() >= len(self.arms)):
            raise DataError("unit arm index out of range")
        for d, v in enumerate(self.variables):
            k = len(self.categories[v])
            if n and (self.codes[:, d].min() < 0 or self.codes[:, d].max() >= k):
                raise DataError(f"category code out of range for variable {v!r}")
        for name, arr in self.outcomes.items():
            if arr.shape != (n,):
                raise DataError(f"outcome {name!r} length does not match unit count")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"outcome {name!r} contains non-finite values")
        if self.propensities is not None:
            if set(self.propensities) != set(range(len(self.arms))):
                raise DataError("propensities must cover every arm index")
            values = np.array([self.propensities[w] for w in range(len(self.arms))])
            if np.any(values <= 0):
                raise PositivityError("every arm needs strictly positive propensity")
            if abs(values.sum() - 1.0) > PROPENSITY_SUM_TOL:
                raise DataError("propensities must sum to 1")

    # -- basic accessors ---------------------------------------------------

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def n_arms(self) -> int:
        return len(self.arms)

    @property
    def outcome_names(self) -> tuple[str, ...]:
        return tuple(self.outcomes)

    def arm_by_label(self, label: str) -> TreatmentArm:
        for arm in self.arms:
            if arm.label == label:
                return arm
        raise DataError(f"unknown arm label {label!r}")

    def covariates_of(self, i: int) -> dict[str, str]:
        """Covariate mapping for a single unit."""
        return {
            v: self.categories[v][self.codes[i, d]]
            for d, v in enumerate(self.variables)
        }

    def outcome(self, name: str) -> np.ndarray:
        if name not in self.outcomes:
            raise DataError(f"unknown outcome {name!r}")
        return self.outcomes[name]

    def subset(self, indices: np.ndarray) -> "ExperimentDataset":
        """New dataset restricted to `indices`; domains and arms are kept."""
        indices = np.asarray(indices)
        return ExperimentDataset(
            variables=self.variables,
            categories=self.categories,
            codes=self.codes[indices],
            arms=self.arms,
            arm_index=self.arm_index[indices],
            outcomes={k: v[indices] for k, v in self.outcomes.items()},
            propensities=self.propensities,
        )

    # -- construction ------------------------------------------------------

    @classmethod
    def from_records(
        cls,
        records: Iterable[Mapping],
        arm_order: Sequence[str] | None = None,
        propensities: Mapping[str, float] | None = None,
        categories: Mapping[str, Sequence[str]] | None = None,
    ) -> "ExperimentDataset":
        """Build a dataset from unit records.

        Each record is a mapping with keys "covariates" (mapping variable ->
        category label), "arm" (label), and "outcomes" (mapping name ->
        float). Arms are indexed by first appearance unless `arm_order` is
        given. Category domains default to the labels observed in the data.
        """
        records = list(records)
        if not records:
            raise DataError("cannot build a dataset from zero records")
        variables = sorted(records[0]["covariates"])
        outcome_names = sorted(records[0]["outcomes"])

        if arm_order is not None:
            labels = list(arm_order)
        else:
            labels = []
            for rec in records:
                if rec["arm"] not in labels:
                    labels.append(rec["arm"])
        arms = [TreatmentArm(i, lab) for i, lab in enumerate(labels)]
        label_to_idx = {a.label: a.index for a in arms}

        if categories is None:
            seen: dict[str, set] = {v: set() for v in variables}
            for rec in records:
                for v in variables:
                    seen[v].add(str(rec["covariates"][v]))
            categories = {v: tuple(sorted(seen[v])) for v in variables}
        cat_to_code = {
            v: {c: j for j, c in enumerate(categories[v])} for v in variables
        }

        n = len(records)
        codes = np.empty((n, len(variables)), dtype=np.int32)
        arm_index = np.empty(n, dtype=np.int32)
        outcomes = {k: np.empty(n, dtype=np.float64) for k in outcome_names}
        for i, rec in enumerate(records):
            label = rec["arm"]
            if label not in label_to_idx:
                raise DataError(f"arm label {label!r} not in declared arm list")
            arm_index[i] = label_to_idx[label]
            for d, v in enumerate(variables):
                cat = str(rec["covariates"][v])
                if cat not in cat_to_code[v]:
                    raise DataError(f"category {cat!r} outside domain of {v!r}")
                codes[i, d] = cat_to_code[v][cat]
            for k in outcome_names:
                outcomes[k][i] = float(rec["outcomes"][k])

        prop = None
        if propensities is not None:
            prop = {label_to_idx[lab]: p for lab, p in propensities.items()}
        return cls(variables, categories, codes, arms, arm_index, outcomes, prop)


# -- CSV input/output -------------------------------------------------------


@dataclass
class CsvSchema:
    """Column-role mapping for CSV ingestion.

    arm_order, when given, declares the arm labels and their index order;
    otherwise arms are indexed by first appearance. Propensities, when
    given, are keyed by arm label.
    """

    arm: str
    outcomes: list[str]
    covariates: list[str]
    arm_order: list[str] | None = None
    propensities: dict[str, float] | None = None

    @classmethod
    def from_json(cls, path: str) -> "CsvSchema":
        with open(path) as fh:
            raw = json.load(fh)
        try:
            return cls(
                arm=raw["arm"],
                outcomes=list(raw["outcomes"]),
                covariates=list(raw["covariates"]),
                arm_order=list(raw["arm_order"]) if "arm_order" in raw else None,
                propensities=dict(raw["propensities"]) if "propensities" in raw else None,
            )
        except KeyError as exc:
            raise SchemaError(f"schema file {path} is missing key {exc}") from exc

    def validate(self) -> None:
        if not self.outcomes:
            raise SchemaError("schema must name at least one outcome column")
        if not self.covariates:
            raise SchemaError("schema must name at least one covariate column")


def load_csv(path: str, schema: CsvSchema) -> ExperimentDataset:
    """Read an experiment CSV into a dataset.

    Empty covariate cells become the explicit "unknown" category. Outcome
    cells must parse as finite decimal numbers; failures raise ParseError
    with the 1-based data row number. Arm labels outside a declared
    `arm_order` raise DataError.
    """
    schema.validate()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [schema.arm, *schema.outcomes, *schema.covariates]
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"CSV {path} is missing columns: {missing}")
        records = []
        for row_no, row in enumerate(reader, start=1):
            outcomes = {}
            for col in schema.outcomes:
                cell = (row[col] or "").strip()
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(
                        f"outcome column {col!r} has non-numeric cell {cell!r}", row=row_no
                    ) from None
                if not np.isfinite(value):
                    raise ParseError(
                        f"outcome column {col!r} has non-finite cell {cell!r}", row=row_no
                    )
                outcomes[col] = value
            covariates = {}
            for col in schema.covariates:
                cell = (row[col] or "").strip()
                covariates[col] = cell if cell else UNKNOWN_CATEGORY
            records.append(
                {"covariates": covariates, "arm": (row[schema.arm] or "").strip(), "outcomes": outcomes}
            )
    if not records:
        raise DataError(f"CSV {path} has no data rows")
    return ExperimentDataset.from_records(
        records, arm_order=schema.arm_order, propensities=schema.propensities
    )


def write_csv(ds: ExperimentDataset, path: str, arm_column: str = "arm") -> None:
    """Write a dataset back to CSV (covariates sorted, then arm, outcomes)."""
    columns = [*ds.variables, arm_column, *ds.outcome_names]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for i in range(ds.n):
            cov = ds.covariates_of(i)
            row = [cov[v] for v in ds.variables]
            row.append(ds.arms[ds.arm_index[i]].label)
            row.extend(repr(float(ds.outcomes[k][i])) for k in ds.outcome_names)
            writer.writerow(row)


# -- one-hot encoding --------------------------------------------------------


@dataclass(frozen=True)
class Encoder:
    """Reusable covariate/arm one-hot layout fitted on a dataset.

    Column order: covariate dummies sorted by (variable, category), then
    one dummy per arm, then (when `interactions`) products of covariate
    dummies with arm dummies. By default interactions only involve
    non-baseline arms (baseline = arm 0); `baseline_interactions` adds the
    baseline arm's products as well.

    Unseen categories at transform time map to an all-zeros dummy block,
    equivalent to the pooled baseline.
    """

    variables: tuple[str, ...]
    categories: dict[str, tuple[str, ...]] = field(hash=False)
    n_arms: int = 0
    interactions: bool = False
    baseline_interactions: bool = False

    @classmethod
    def fit(
        cls,
        ds: ExperimentDataset,
        interactions: bool = False,
        baseline_interactions: bool = False,
    ) -> "Encoder":
        return cls(
            variables=ds.variables,
            categories=dict(ds.categories),
            n_arms=ds.n_arms,
            interactions=interactions,
            baseline_interactions=baseline_interactions,
        )

    @property
    def n_covariate_columns(self) -> int:
        return sum(len(self.categories[v]) for v in self.variables)

    @property
    def interaction_arms(self) -> tuple[int, ...]:
        if not self.interactions:
            return ()
        start = 0 if self.baseline_interactions else 1
        return tuple(range(start, self.n_arms))

    @property
    def n_columns(self) -> int:
        p = self.n_covariate_columns + self.n_arms
        p += self.n_covariate_columns * len(self.interaction_arms)
        return p

    def columns(self) -> list[DummyColumn]:
        cols = [
            DummyColumn("covariate", variable=v, category=c)
            for v in self.variables
            for c in self.categories[v]
        ]
        cols.extend(DummyColumn("arm", arm=w) for w in range(self.n_arms))
        for w in self.interaction_arms:
            cols.extend(
                DummyColumn("interaction", variable=v, category=c, arm=w)
                for v in self.variables
                for c in self.categories[v]
            )
        return cols

    def _covariate_block_from_codes(self, codes: np.ndarray) -> np.ndarray:
        n = codes.shape[0]
        block = np.zeros((n, self.n_covariate_columns), dtype=np.float64)
        offset = 0
        for d, v in enumerate(self.variables):
            block[np.arange(n), offset + codes[:, d]] = 1.0
            offset += len(self.categories[v])
        return block

    def covariate_block(self, ds: ExperimentDataset) -> np.ndarray:
        """(N, #covariate dummies) block for a dataset's units."""
        if ds.variables != self.variables or any(
            ds.categories[v] != self.categories[v] for v in self.variables
        ):
            raise DataError("dataset category domains do not match the encoder")
        return self._covariate_block_from_codes(ds.codes)

    def covariate_row(self, covariates: Mapping[str, str]) -> np.ndarray:
        """Single-unit covariate block; unseen categories encode as zeros."""
        row = np.zeros(self.n_covariate_columns, dtype=np.float64)
        offset = 0
        for v in self.variables:
            cats = self.categories[v]
            label = str(covariates.get(v, ""))
            if label in cats:
                row[offset + cats.index(label)] = 1.0
            offset += len(cats)
        return row

    def assemble(self, cov_block: np.ndarray, arm_index: np.ndarray) -> np.ndarray:
        """Full design rows from a covariate block and per-row arm indices."""
        n = cov_block.shape[0]
        out = np.zeros((n, self.n_columns), dtype=np.float64)
        p_cov = self.n_covariate_columns
        out[:, :p_cov] = cov_block
        out[np.arange(n), p_cov + arm_index] = 1.0
        offset = p_cov + self.n_arms
        for w in self.interaction_arms:
            mask = arm_index == w
            out[mask, offset : offset + p_cov] = cov_block[mask]
            offset += p_cov
        return out

    def transform(self, ds: ExperimentDataset) -> np.ndarray:
        return self.assemble(self.covariate_block(ds), np.asarray(ds.arm_index))

    def transform_single(self, covariates: Mapping[str, str], arm: int) -> np.ndarray:
        if not 0 <= arm < self.n_arms:
            raise DataError(f"arm index {arm} out of range")
        row = self.covariate_row(covariates)
        return self.assemble(row[None, :], np.array([arm], dtype=np.int64))[0]


@dataclass(frozen=True)
class EncodedMatrix:
    """A fitted encoder plus the 0/1 design matrix of one dataset."""

    encoder: Encoder
    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def columns(self) -> list[DummyColumn]:
        return self.encoder.columns()


def encode(
    ds: ExperimentDataset,
    interactions: bool = False,
    baseline_interactions: bool = False,
) -> EncodedMatrix:
    """One-hot encode a dataset's covariates and arms.

    With `interactions`, products of every covariate dummy with every
    non-baseline arm dummy are appended, giving (#covariate dummies) x
    (W - 1) extra columns; `baseline_interactions=True` extends the
    products to all W arms.
    """
    if ds.n == 0:
        raise DataError("cannot encode an empty dataset")
    enc = Encoder.fit(
        ds, interactions=interactions, baseline_interactions=baseline_interactions
    )
    values = enc.transform(ds)
    values.setflags(write=False)
    return EncodedMatrix(encoder=enc, values=values)


# -- splitting and propensities ----------------------------------------------


@dataclass
class SplitPair:
    """A seeded train/test partition of a parent dataset."""

    train: ExperimentDataset
    test: ExperimentDataset
    train_fraction: float
    seed: int
    train_arm_counts: dict[str, int]
    test_arm_counts: dict[str, int]


def _arm_counts(ds: ExperimentDataset) -> dict[str, int]:
    counts = np.bincount(ds.arm_index, minlength=ds.n_arms)
    return {arm.label: int(counts[arm.index]) for arm in ds.arms}


def split(ds: ExperimentDataset, train_fraction: float, seed: int) -> SplitPair:
    """Partition units into train/test by a seeded uniform permutation.

    Train size is round-to-nearest: floor(N * fraction + 0.5).
    """
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(ds.n)
    n_train = int(np.floor(ds.n * train_fraction + 0.5))
    train = ds.subset(np.sort(order[:n_train]))
    test = ds.subset(np.sort(order[n_train:]))
    return SplitPair(
        train=train,
        test=test,
        train_fraction=train_fraction,
        seed=seed,
        train_arm_counts=_arm_counts(train),
        test_arm_counts=_arm_counts(test),
    )


def empirical_propensities(ds: ExperimentDataset) -> dict[int, float]:
    """Per-arm assignment shares, count(arm) / N.

    Raises PositivityError when any declared arm has zero observations,
    since every arm must have positive assignment probability for policy
    evaluation to be identified.
    """
    if ds.n == 0:
        raise DataError("cannot compute propensities of an empty dataset")
    counts = np.bincount(ds.arm_index, minlength=ds.n_arms)
    if np.any(counts == 0):
        empty = [ds.arms[w].label for w in np.nonzero(counts == 0)[0]]
        raise PositivityError(f"arms with zero observations: {empty}")
    return {w: counts[w] / ds.n for w in range(ds.n_arms)}
