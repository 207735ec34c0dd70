"""Offline policy evaluation and diagnostic reports.

The workhorse is the inverse-propensity-score estimate of a policy's mean
outcome: only units whose logged arm matches the policy's prescription
contribute, reweighted by the assignment propensity. Two propensity modes
exist: the design's theoretical per-arm constants, and empirical
propensities computed within each prescription stratum (the share of each
actual arm among units prescribed the same arm), which is the variant used
for all reported numbers.

On top of IPS sit the policy-improvement decomposition (the estimated gain
over the logged experiment, expressible cell by cell through a
prescribed-by-actual congruency table), average-treatment-effect tables,
paired bootstrap comparisons between policies, and descriptive
segment-profile and outcome-decomposition reports.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .dataset import ExperimentDataset
from .errors import ConfigError, DataError, PositivityError
from .policy import Policy

UPSILON_FORM_TOL = 1e-10


def _assignments(policy: Policy, ds: ExperimentDataset) -> np.ndarray:
    assigned = np.asarray(policy.assign_dataset(ds), dtype=np.int64)
    if assigned.min() < 0 or assigned.max() >= ds.n_arms:
        raise DataError("policy produced an arm index outside the experiment's arms")
    return assigned


def _policy_id(policy: Policy) -> str:
    return getattr(policy, "policy_id", policy.kind)


@dataclass
class IpsEstimate:
    policy_id: str
    outcome: str
    value: float
    mode: str  # "theoretical" | "empirical"
    warnings: tuple[str, ...] = ()


def ips(
    policy: Policy,
    ds: ExperimentDataset,
    outcome: str,
    propensities: Mapping[int, float] | None = None,
) -> IpsEstimate:
    """IPS reward with theoretical per-arm propensities.

    value = (1/N) * sum_i 1[W_i = pi(X_i)] * Y_i / e(W_i). Propensities
    default to the dataset's known assignment probabilities.
    """
    if propensities is None:
        propensities = ds.propensities
    if propensities is None:
        raise PositivityError("theoretical IPS needs per-arm propensities")
    e = np.array([propensities[w] for w in range(ds.n_arms)], dtype=np.float64)
    if np.any(e <= 0):
        raise PositivityError("every arm propensity must be strictly positive")
    y = ds.outcome(outcome)
    assigned = _assignments(policy, ds)
    congruent = assigned == ds.arm_index
    value = float(np.sum(y[congruent] / e[ds.arm_index[congruent]]) / ds.n)
    return IpsEstimate(_policy_id(policy), outcome, value, "theoretical")


def _stratum_counts(assigned: np.ndarray, arm_index: np.ndarray, w: int):
    code = assigned * w + arm_index
    counts = np.bincount(code, minlength=w * w).reshape(w, w)
    return counts


def ips_empirical(policy: Policy, ds: ExperimentDataset, outcome: str) -> IpsEstimate:
    """IPS reward with within-stratum empirical propensities.

    For a unit prescribed arm s, the propensity of its actual arm w is
    count(W = w, pi = s) / count(pi = s), so each congruent unit is scaled
    by the stratum's own assignment share. Strata with no congruent unit
    contribute zero and are recorded as warnings rather than failing.
    """
    y = ds.outcome(outcome)
    assigned = _assignments(policy, ds)
    w = ds.n_arms
    counts = _stratum_counts(assigned, ds.arm_index, w)
    stratum_sizes = counts.sum(axis=1)
    congruent = assigned == ds.arm_index
    e_hat = np.zeros(ds.n)
    nonzero = congruent & (counts[assigned, ds.arm_index] > 0)
    e_hat[nonzero] = (
        counts[assigned[nonzero], ds.arm_index[nonzero]]
        / stratum_sizes[assigned[nonzero]]
    )
    warnings = []
    for s in range(w):
        if stratum_sizes[s] > 0 and counts[s, s] == 0:
            warnings.append(
                f"prescription stratum arm={ds.arms[s].label} has no congruent unit; it contributes 0"
            )
    value = float(np.sum(y[nonzero] / e_hat[nonzero]) / ds.n)
    return IpsEstimate(_policy_id(policy), outcome, value, "empirical", tuple(warnings))


@dataclass
class CongruencyTable:
    """Prescribed-arm by actual-arm outcome means plus assignment shares.

    means[s, w] is the average outcome of units prescribed arm s that
    actually received arm w (NaN when the stratum cell is empty); the
    diagonal cells are the policy-congruent ones. fractions is the
    prescription share per arm.
    """

    arm_labels: tuple[str, ...]
    fractions: np.ndarray
    means: np.ndarray
    counts: np.ndarray

    def stratum_propensities(self) -> np.ndarray:
        """Within-stratum empirical assignment shares e_hat[s, w]."""
        sizes = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(sizes > 0, self.counts / sizes, 0.0)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["prescribed_arm", "fraction", "actual_arm", "count", "mean_outcome", "congruent"]
            )
            for s, lab_s in enumerate(self.arm_labels):
                for w, lab_w in enumerate(self.arm_labels):
                    mean = self.means[s, w]
                    writer.writerow(
                        [
                            lab_s,
                            repr(float(self.fractions[s])),
                            lab_w,
                            int(self.counts[s, w]),
                            "" if np.isnan(mean) else repr(float(mean)),
                            int(s == w),
                        ]
                    )


def congruency(policy: Policy, ds: ExperimentDataset, outcome: str) -> CongruencyTable:
    """The prescribed-by-actual grid of outcome means for one policy."""
    if ds.n == 0:
        raise DataError("cannot tabulate an empty dataset")
    y = ds.outcome(outcome)
    assigned = _assignments(policy, ds)
    w = ds.n_arms
    counts = _stratum_counts(assigned, ds.arm_index, w)
    code = assigned * w + ds.arm_index
    sums = np.bincount(code, weights=y, minlength=w * w).reshape(w, w)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    fractions = counts.sum(axis=1) / ds.n
    return CongruencyTable(
        arm_labels=tuple(a.label for a in ds.arms),
        fractions=fractions,
        means=means,
        counts=counts,
    )


@dataclass
class UpsilonResult:
    """Policy improvement over the logged experiment, both computations.

    direct = R_IPS(pi) - mean(Y); expanded re-derives the same number from
    the congruency table as
    sum_s upsilon_s * sum_w e_hat[s, w] * (mean[s, s] - mean[s, w]).
    """

    policy_id: str
    outcome: str
    direct: float
    expanded: float
    ips_value: float
    experiment_mean: float

    @property
    def value(self) -> float:
        return self.direct


def upsilon_from_components(
    fractions: Sequence[float],
    stratum_propensities: np.ndarray,
    congruent_minus_incongruent: np.ndarray,
) -> float:
    """Expanded policy-improvement formula from printed components.

    fractions[s] is the share prescribed arm s; stratum_propensities[s, w]
    the within-stratum share actually assigned w; and
    congruent_minus_incongruent[s, w] the outcome-mean difference between
    the congruent cell (s, s) and cell (s, w).
    """
    fr = np.asarray(fractions, dtype=np.float64)
    e = np.asarray(stratum_propensities, dtype=np.float64)
    diff = np.asarray(congruent_minus_incongruent, dtype=np.float64)
    return float(np.sum(fr[:, None] * e * diff))


def upsilon(policy: Policy, ds: ExperimentDataset, outcome: str) -> UpsilonResult:
    """Estimated improvement of a policy over the experiment's mean outcome."""
    est = ips_empirical(policy, ds, outcome)
    y_mean = float(ds.outcome(outcome).mean())
    table = congruency(policy, ds, outcome)
    e_hat = table.stratum_propensities()
    means = np.where(np.isnan(table.means), 0.0, table.means)
    # Empty congruent cells count as zero, mirroring the IPS convention.
    diag = np.where(table.counts.diagonal() > 0, means.diagonal(), 0.0)
    diff = diag[:, None] - np.where(table.counts > 0, means, 0.0)
    expanded = upsilon_from_components(table.fractions, e_hat, diff)
    return UpsilonResult(
        policy_id=est.policy_id,
        outcome=outcome,
        direct=est.value - y_mean,
        expanded=expanded,
        ips_value=est.value,
        experiment_mean=y_mean,
    )


# -- average treatment effects ---------------------------------------------------


@dataclass
class AteRow:
    arm_label: str
    n: int
    mean: float
    diff: float | None
    t_stat: float | None
    p_value: float | None
    pct_gain: float | None


@dataclass
class AteTable:
    outcome: str
    control_label: str
    rows: list[AteRow]

    def row(self, arm_label: str) -> AteRow:
        for row in self.rows:
            if row.arm_label == arm_label:
                return row
        raise KeyError(arm_label)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["arm", "n", "mean", "diff_vs_control", "t_stat", "p_value", "pct_gain"])
            for r in self.rows:
                writer.writerow(
                    [
                        r.arm_label,
                        r.n,
                        repr(r.mean),
                        "" if r.diff is None else repr(r.diff),
                        "" if r.t_stat is None else repr(r.t_stat),
                        "" if r.p_value is None else repr(r.p_value),
                        "" if r.pct_gain is None else repr(r.pct_gain),
                    ]
                )


def _welch(y_w: np.ndarray, y_c: np.ndarray):
    diff = float(y_w.mean() - y_c.mean())
    var_w = y_w.var(ddof=1) if len(y_w) > 1 else 0.0
    var_c = y_c.var(ddof=1) if len(y_c) > 1 else 0.0
    denom_sq = var_w / len(y_w) + var_c / len(y_c)
    if denom_sq == 0.0:
        return diff, 0.0, 1.0
    t = diff / np.sqrt(denom_sq)
    df = denom_sq**2 / (
        (var_w / len(y_w)) ** 2 / max(len(y_w) - 1, 1)
        + (var_c / len(y_c)) ** 2 / max(len(y_c) - 1, 1)
    )
    p = 2.0 * float(stats.t.sf(abs(t), df))
    return diff, float(t), p


def ate_table(ds: ExperimentDataset, outcome: str, control: int) -> AteTable:
    """Per-arm means and Welch t-statistics against a control arm.

    Percentage gain is 100 * (mean_w - mean_control) / mean_control.
    """
    if not 0 <= control < ds.n_arms:
        raise ConfigError(f"control arm {control} out of range")
    y = ds.outcome(outcome)
    groups = {w: y[ds.arm_index == w] for w in range(ds.n_arms)}
    if len(groups[control]) == 0:
        raise DataError("control arm has no observations")
    control_mean = float(groups[control].mean())
    rows = []
    for w in range(ds.n_arms):
        y_w = groups[w]
        if w == control:
            rows.append(AteRow(ds.arms[w].label, len(y_w), control_mean, None, None, None, None))
            continue
        if len(y_w) == 0:
            raise DataError(f"arm {ds.arms[w].label} has no observations")
        diff, t, p = _welch(y_w, groups[control])
        pct = 100.0 * diff / control_mean if control_mean != 0 else np.nan
        rows.append(AteRow(ds.arms[w].label, len(y_w), float(y_w.mean()), diff, t, p, pct))
    return AteTable(outcome=outcome, control_label=ds.arms[control].label, rows=rows)


# -- bootstrap comparison ---------------------------------------------------------


@dataclass
class BootstrapComparison:
    """Paired bootstrap IPS values and pairwise significance tests.

    values[i, r] is policy i's empirical-propensity IPS on resample r; all
    policies share the same resample index sets, so differences are paired.
    mean_diff[i, j] = mean_r(values[i] - values[j]); p_value holds the
    paired t-test p (1.0 by convention when all paired differences are
    exactly zero).
    """

    policy_ids: tuple[str, ...]
    outcome: str
    values: np.ndarray
    mean_diff: np.ndarray
    t_stat: np.ndarray
    p_value: np.ndarray
    seed: int

    def pair(self, id_a: str, id_b: str):
        i, j = self.policy_ids.index(id_a), self.policy_ids.index(id_b)
        return self.mean_diff[i, j], self.t_stat[i, j], self.p_value[i, j]

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["policy_a", "policy_b", "mean_diff", "t_stat", "p_value"])
            for i, a in enumerate(self.policy_ids):
                for j, b in enumerate(self.policy_ids):
                    if i >= j:
                        continue
                    writer.writerow(
                        [a, b, repr(float(self.mean_diff[i, j])), repr(float(self.t_stat[i, j])), repr(float(self.p_value[i, j]))]
                    )


def _paired_t(diffs: np.ndarray):
    b = len(diffs)
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return mean, 0.0, 1.0
        return mean, np.inf if mean > 0 else -np.inf, 0.0
    t = mean / (sd / np.sqrt(b))
    p = 2.0 * float(stats.t.sf(abs(t), b - 1))
    return mean, float(t), p


def bootstrap_compare(
    policies: Mapping[str, Policy],
    ds: ExperimentDataset,
    outcome: str,
    b_rep: int = 1000,
    seed: int = 0,
) -> BootstrapComparison:
    """Evaluate policies on shared bootstrap resamples and compare them.

    Draws `b_rep` with-replacement resamples of the dataset, computes each
    policy's empirical-propensity IPS on every resample, and runs paired
    t-tests on the per-resample differences for every policy pair.
    """
    if b_rep < 2:
        raise ConfigError("b_rep must be at least 2")
    ids = tuple(policies)
    y = ds.outcome(outcome)
    w = ds.n_arms
    # Prescriptions are computed once on the full data; resampling only
    # reweights units, it never changes a unit's prescribed arm.
    codes = {
        pid: _assignments(policies[pid], ds) * w + ds.arm_index for pid in ids
    }
    rng = np.random.default_rng(seed)
    values = np.empty((len(ids), b_rep))
    for r in range(b_rep):
        idx = rng.integers(0, ds.n, size=ds.n)
        y_r = y[idx]
        for i, pid in enumerate(ids):
            code_r = codes[pid][idx]
            counts = np.bincount(code_r, minlength=w * w).reshape(w, w)
            sums = np.bincount(code_r, weights=y_r, minlength=w * w).reshape(w, w)
            sizes = counts.sum(axis=1)
            diag_counts = counts.diagonal()
            ok = diag_counts > 0
            value = np.sum(
                (sizes[ok] / ds.n) * (sums.diagonal()[ok] / diag_counts[ok])
            )
            values[i, r] = value
    k = len(ids)
    mean_diff = np.zeros((k, k))
    t_stat = np.zeros((k, k))
    p_value = np.ones((k, k))
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            mean, t, p = _paired_t(values[i] - values[j])
            mean_diff[i, j] = mean
            t_stat[i, j] = t
            p_value[i, j] = p
    return BootstrapComparison(
        policy_ids=ids,
        outcome=outcome,
        values=values,
        mean_diff=mean_diff,
        t_stat=t_stat,
        p_value=p_value,
        seed=seed,
    )


# -- descriptive reports -----------------------------------------------------------


@dataclass
class SegmentProfile:
    """Distribution tables per prescribed-arm segment.

    category_shares[variable][segment label or "population"] maps category
    label -> share within that segment; outcome_means holds per-segment
    outcome averages. Shares within a variable sum to 1 per segment.
    """

    arm_labels: tuple[str, ...]
    segment_sizes: dict[str, int]
    category_shares: dict[str, dict[str, dict[str, float]]]
    outcome_means: dict[str, dict[str, float]]

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block", "variable", "value", "segment", "share_or_mean"])
            for var, by_segment in self.category_shares.items():
                for segment, shares in by_segment.items():
                    for cat, share in shares.items():
                        writer.writerow(["covariate", var, cat, segment, repr(share)])
            for name, by_segment in self.outcome_means.items():
                for segment, mean in by_segment.items():
                    writer.writerow(["outcome", name, "", segment, repr(mean)])


def segment_profile(
    policy: Policy,
    ds: ExperimentDataset,
    variables: Sequence[str] | None = None,
    outcomes: Sequence[str] | None = None,
) -> SegmentProfile:
    """Describe who gets prescribed what: per-segment covariate shares and
    outcome means, with a population column for reference."""
    variables = list(variables) if variables is not None else list(ds.variables)
    outcomes = list(outcomes) if outcomes is not None else list(ds.outcome_names)
    assigned = _assignments(policy, ds)
    segments: dict[str, np.ndarray] = {"population": np.ones(ds.n, dtype=bool)}
    sizes = {"population": ds.n}
    for arm in ds.arms:
        mask = assigned == arm.index
        segments[arm.label] = mask
        sizes[arm.label] = int(mask.sum())

    category_shares: dict[str, dict[str, dict[str, float]]] = {}
    for var in variables:
        d = ds.variables.index(var)
        cats = ds.categories[var]
        by_segment: dict[str, dict[str, float]] = {}
        for seg, mask in segments.items():
            if sizes[seg] == 0:
                by_segment[seg] = {c: np.nan for c in cats}
                continue
            counts = np.bincount(ds.codes[mask, d], minlength=len(cats))
            by_segment[seg] = {c: float(counts[j] / sizes[seg]) for j, c in enumerate(cats)}
        category_shares[var] = by_segment

    outcome_means: dict[str, dict[str, float]] = {}
    for name in outcomes:
        y = ds.outcome(name)
        outcome_means[name] = {
            seg: (float(y[mask].mean()) if sizes[seg] else np.nan)
            for seg, mask in segments.items()
        }
    return SegmentProfile(
        arm_labels=tuple(a.label for a in ds.arms),
        segment_sizes=sizes,
        category_shares=category_shares,
        outcome_means=outcome_means,
    )


@dataclass
class DecompositionRow:
    arm_label: str
    p_positive: float
    conditional_mean: float
    product: float
    outcome_mean: float
    identity_residual: float


@dataclass
class OutcomeDecomposition:
    binary_outcome: str
    continuous_outcome: str
    precondition_holds: bool
    rows: list[DecompositionRow]

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["arm", "p_positive", "conditional_mean", "product", "outcome_mean", "identity_residual"]
            )
            for r in self.rows:
                writer.writerow(
                    [r.arm_label, repr(r.p_positive), repr(r.conditional_mean), repr(r.product), repr(r.outcome_mean), repr(r.identity_residual)]
                )


def outcome_decomposition(
    ds: ExperimentDataset, binary: str, continuous: str
) -> OutcomeDecomposition:
    """Split E[y | W] into Pr(s = 1 | W) * E[y | W, s = 1] per arm.

    Valid when y is zero whenever the binary outcome s is zero; when that
    precondition fails the identity residual per arm is reported instead
    of raising.
    """
    s = ds.outcome(binary)
    y = ds.outcome(continuous)
    if not np.all(np.isin(s, (0.0, 1.0))):
        raise DataError(f"outcome {binary!r} is not 0/1")
    precondition = bool(np.all(y[s == 0.0] == 0.0))
    rows = []
    for arm in ds.arms:
        mask = ds.arm_index == arm.index
        if not mask.any():
            raise DataError(f"arm {arm.label} has no observations")
        s_w = s[mask]
        y_w = y[mask]
        p = float(s_w.mean())
        cond = float(y_w[s_w == 1.0].mean()) if p > 0 else 0.0
        product = p * cond
        mean_y = float(y_w.mean())
        rows.append(
            DecompositionRow(arm.label, p, cond, product, mean_y, product - mean_y)
        )
    return OutcomeDecomposition(binary, continuous, precondition, rows)
