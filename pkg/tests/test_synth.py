import itertools

import numpy as np
import pytest
from scipy import stats

from upliftkit.errors import ConfigError, DataError
from upliftkit.synth import (
    SyntheticDGP,
    draw,
    dgp_from_json_dict,
    dgp_to_json_dict,
    enumerate_optimal,
    random_bernoulli_dgp,
    true_policy_value,
)


def two_cell_dgp(p_a=(0.2, 0.4), p_b=(0.5, 0.1), propensities=(0.5, 0.5)):
    return SyntheticDGP(
        variables={"g": ("a", "b")},
        arm_labels=("w0", "w1"),
        response={("a",): p_a, ("b",): p_b},
        propensities=propensities,
        seed=7,
    )


class TestDraw:
    def test_degenerate_dgp_forces_outcome(self):
        dgp = SyntheticDGP(
            variables={"g": ("a", "b")},
            arm_labels=("w0", "w1"),
            response={("a",): (1.0, 1.0), ("b",): (1.0, 1.0)},
            propensities=(0.5, 0.5),
            seed=1,
        )
        ds = draw(dgp, 500)
        assert np.all(ds.outcome("y") == 1.0)

    def test_large_sample_arm_mean(self):
        dgp = SyntheticDGP(
            variables={"g": ("only",)},
            arm_labels=("w0", "w1"),
            response={("only",): (0.2, 0.4)},
            propensities=(0.5, 0.5),
            seed=11,
        )
        ds = draw(dgp, 1_000_000)
        y = ds.outcome("y")
        arm1 = y[ds.arm_index == 1]
        assert arm1.mean() == pytest.approx(0.4, abs=0.002)

    def test_propensity_concentration(self):
        dgp = SyntheticDGP(
            variables={"g": ("a",)},
            arm_labels=("w0", "w1", "w2"),
            response={("a",): (0.1, 0.2, 0.3)},
            propensities=(0.15, 0.15, 0.70),
            seed=3,
        )
        ds = draw(dgp, 100_000)
        shares = np.bincount(ds.arm_index, minlength=3) / ds.n
        np.testing.assert_allclose(shares, [0.15, 0.15, 0.70], atol=0.005)

    def test_deterministic_by_seed(self):
        dgp = two_cell_dgp()
        d1, d2 = draw(dgp, 1000, seed=5), draw(dgp, 1000, seed=5)
        np.testing.assert_array_equal(d1.arm_index, d2.arm_index)
        np.testing.assert_array_equal(d1.codes, d2.codes)
        np.testing.assert_array_equal(d1.outcome("y"), d2.outcome("y"))

    def test_gaussian_outcomes(self):
        dgp = SyntheticDGP(
            variables={"g": ("a",)},
            arm_labels=("w0", "w1"),
            response={("a",): ((2.0, 0.5), (5.0, 0.5))},
            propensities=(0.5, 0.5),
            outcome_kind="gaussian",
            seed=2,
        )
        ds = draw(dgp, 50_000)
        y = ds.outcome("y")
        assert y[ds.arm_index == 0].mean() == pytest.approx(2.0, abs=0.02)
        assert y[ds.arm_index == 1].mean() == pytest.approx(5.0, abs=0.02)

    def test_n_must_be_positive(self):
        with pytest.raises(ConfigError):
            draw(two_cell_dgp(), 0)

    def test_unconfounded_by_construction(self):
        # Arm and cell are independent: the chi-squared test should be
        # non-significant at 0.001 in virtually every seed.
        dgp = two_cell_dgp(propensities=(0.3, 0.7))
        hits = 0
        seeds = 40
        for seed in range(seeds):
            ds = draw(dgp, 100_000, seed=seed)
            table = np.zeros((2, 2))
            for cell in range(2):
                for arm in range(2):
                    table[cell, arm] = np.sum(
                        (ds.codes[:, 0] == cell) & (ds.arm_index == arm)
                    )
            _, p, _, _ = stats.chi2_contingency(table)
            hits += p > 0.001
        assert hits >= seeds - 1


class TestTruePolicyValue:
    def test_uniform_policy_definition(self):
        dgp = two_cell_dgp()
        value = true_policy_value(dgp, {("a",): 0, ("b",): 0})
        assert value == pytest.approx(0.5 * 0.2 + 0.5 * 0.5)

    def test_optimal_matches_exhaustive_two_cells(self):
        dgp = two_cell_dgp()
        oracle = enumerate_optimal(dgp)
        cells = dgp.cells()
        best = max(
            (dict(zip(cells, combo)) for combo in itertools.product(range(2), repeat=2)),
            key=lambda pol: true_policy_value(dgp, pol),
        )
        assert true_policy_value(dgp, best) == pytest.approx(oracle.optimal_value)

    def test_any_policy_bounded_by_optimum(self):
        dgp = two_cell_dgp()
        oracle = enumerate_optimal(dgp)
        for combo in itertools.product(range(2), repeat=2):
            policy = dict(zip(dgp.cells(), combo))
            assert true_policy_value(dgp, policy) <= oracle.optimal_value + 1e-12

    def test_invalid_arm_rejected(self):
        dgp = two_cell_dgp()
        with pytest.raises(DataError):
            true_policy_value(dgp, {("a",): 5, ("b",): 0})

    def test_accepts_callable_policies(self):
        dgp = two_cell_dgp()
        value = true_policy_value(dgp, lambda cov: 1)
        assert value == pytest.approx(0.5 * 0.4 + 0.5 * 0.1)


class TestEnumerateOptimal:
    def test_single_cell_argmax(self):
        dgp = SyntheticDGP(
            variables={"g": ("a",)},
            arm_labels=("w0", "w1", "w2"),
            response={("a",): (0.2, 0.4, 0.3)},
            propensities=(1 / 3, 1 / 3, 1 / 3),
            seed=0,
        )
        assert enumerate_optimal(dgp).optimal_policy[("a",)] == 1

    def test_tie_breaks_toward_lower_arm(self):
        dgp = SyntheticDGP(
            variables={"g": ("a",)},
            arm_labels=("w0", "w1"),
            response={("a",): (0.3, 0.3)},
            propensities=(0.5, 0.5),
            seed=0,
        )
        assert enumerate_optimal(dgp).optimal_policy[("a",)] == 0

    def test_eight_cell_three_arm_matches_brute_force(self):
        dgp = random_bernoulli_dgp(
            variables={"cell": [f"c{i}" for i in range(8)]},
            arm_labels=("w0", "w1", "w2"),
            propensities=(0.3, 0.3, 0.4),
            seed=99,
        )
        oracle = enumerate_optimal(dgp)
        cells = dgp.cells()
        best_value = max(
            true_policy_value(dgp, dict(zip(cells, combo)))
            for combo in itertools.product(range(3), repeat=8)
        )
        assert oracle.optimal_value == pytest.approx(best_value)
        assert oracle.value_of(oracle.optimal_policy) == pytest.approx(best_value)

    def test_monotone_dominance(self):
        # Corrupting the oracle policy on any subset of cells can only
        # lower (weakly) its true value.
        dgp = random_bernoulli_dgp(
            variables={"cell": [f"c{i}" for i in range(6)]},
            arm_labels=("w0", "w1", "w2"),
            propensities=(0.2, 0.3, 0.5),
            seed=17,
        )
        oracle = enumerate_optimal(dgp)
        rng = np.random.default_rng(4)
        value_opt = oracle.optimal_value
        for _ in range(20):
            corrupted = dict(oracle.optimal_policy)
            for cell in rng.choice(len(dgp.cells()), size=2, replace=False):
                key = dgp.cells()[cell]
                corrupted[key] = int(rng.integers(3))
            assert true_policy_value(dgp, corrupted) <= value_opt + 1e-12


class TestGeneratorAndJson:
    def test_effect_gap_guarantee(self):
        dgp = random_bernoulli_dgp(
            variables={"a": ["x", "y"], "b": ["u", "v"]},
            arm_labels=("w0", "w1", "w2"),
            propensities=(1 / 3, 1 / 3, 1 / 3),
            seed=5,
        )
        for cell in dgp.cells():
            probs = np.sort([dgp.mean_response(cell, w) for w in range(3)])
            assert probs[-1] - probs[-2] >= 0.05 - 1e-12

    def test_json_roundtrip(self):
        dgp = random_bernoulli_dgp(
            variables={"a": ["x", "y"]},
            arm_labels=("w0", "w1"),
            propensities=(0.5, 0.5),
            seed=8,
        )
        back = dgp_from_json_dict(dgp_to_json_dict(dgp))
        assert back.response == dgp.response
        assert back.arm_labels == dgp.arm_labels
        assert back.propensities == dgp.propensities

    def test_response_table_must_cover_cells(self):
        with pytest.raises(ConfigError):
            SyntheticDGP(
                variables={"g": ("a", "b")},
                arm_labels=("w0",),
                response={("a",): (0.5,)},
                propensities=(1.0,),
            )
