import numpy as np
import pytest

from upliftkit.cate_models import (
    cate_cdf_export,
    cates_from_outcome,
    estimate,
    estimate_dataset,
    fit_all_pairs,
    fit_causal_forest,
    fit_causal_tree,
)
from upliftkit.dataset import encode
from upliftkit.errors import ConfigError, DataError
from upliftkit.outcome_models import fit_ols
from upliftkit.synth import SyntheticDGP, draw

from conftest import make_dataset, random_dataset


def effect_on_v_dgp(tau=0.15, base=0.3):
    """tau depends only on variable v; u is irrelevant noise structure."""
    response = {}
    for v in ("v0", "v1"):
        for u in ("u0", "u1", "u2"):
            delta = tau if v == "v1" else -tau
            response[(u, v)] = (base, base + delta)
    return SyntheticDGP(
        variables={"v": ("v0", "v1"), "u": ("u0", "u1", "u2")},
        arm_labels=("ctrl", "treat"),
        response=response,
        propensities=(0.5, 0.5),
        seed=0,
    )


def two_cell_sign_dgp():
    return SyntheticDGP(
        variables={"g": ("a", "b")},
        arm_labels=("w0", "w1"),
        response={("a",): (0.3, 0.4), ("b",): (0.4, 0.3)},
        propensities=(0.5, 0.5),
        seed=0,
    )


class TestCausalTree:
    def test_infinite_complexity_estimates_ate_everywhere(self):
        ds = draw(effect_on_v_dgp(), 4000, seed=1)
        model = fit_causal_tree(ds, (1, 0), "y", complexity=np.inf, q=1)
        assert model.n_leaves == 1
        y = ds.outcome("y")
        ate = y[ds.arm_index == 1].mean() - y[ds.arm_index == 0].mean()
        assert model.estimate({"v": "v0", "u": "u1"}) == pytest.approx(ate)
        assert model.estimate({"v": "v1", "u": "u2"}) == pytest.approx(ate)

    def test_leaf_estimates_equal_recomputed_diff_in_means(self):
        ds = draw(effect_on_v_dgp(), 6000, seed=2)
        model = fit_causal_tree(ds, (1, 0), "y", complexity=0.0, q=25)
        leaves = model.apply_dataset(ds)
        y = ds.outcome("y")
        for leaf in np.unique(leaves):
            members = leaves == leaf
            treated = members & (ds.arm_index == 1)
            control = members & (ds.arm_index == 0)
            expected = y[treated].mean() - y[control].mean()
            assert model.structure.value[leaf] == expected  # exact, same arithmetic path

    def test_first_split_is_on_v(self):
        ds = draw(effect_on_v_dgp(), 50_000, seed=3)
        model = fit_causal_tree(ds, (1, 0), "y", complexity=0.0, q=200)
        first = model.structure.column[0]
        col = model.encoder.columns()[first]
        assert col.variable == "v"

    def test_q_larger_than_arm_count_errors(self):
        ds = draw(effect_on_v_dgp(), 100, seed=4)
        with pytest.raises(DataError):
            fit_causal_tree(ds, (1, 0), "y", q=1000)

    def test_min_arm_count_respected_in_leaves(self):
        ds = draw(effect_on_v_dgp(), 3000, seed=5)
        q = 40
        model = fit_causal_tree(ds, (1, 0), "y", complexity=0.0, q=q)
        leaf_ids = np.nonzero(model.structure.column < 0)[0]
        assert np.all(model.n_treat[leaf_ids] >= q)
        assert np.all(model.n_control[leaf_ids] >= q)

    def test_variance_objective_equivalence_on_balanced_fixture(self):
        # Hand case with balanced arms in both children, so the mean effect
        # is split-invariant and the two objective forms differ by exactly
        # the constant term.
        rows = []
        x_col, arm, y = (
            [0, 0, 0, 0, 1, 1, 1, 1],
            ["c", "t", "c", "t", "c", "t", "c", "t"],
            [0.0, 1.0, 0.2, 0.8, 0.5, 2.0, 0.3, 1.6],
        )
        for xv, a, yv in zip(x_col, arm, y):
            rows.append(({"x": f"x{xv}"}, a, {"y": yv}))
        ds = make_dataset(rows, arm_order=["c", "t"])
        y = np.asarray(y)
        arm = np.asarray([1 if a == "t" else 0 for a in arm])
        x = np.asarray(x_col)

        def tau(mask):
            return y[mask & (arm == 1)].mean() - y[mask & (arm == 0)].mean()

        def var_of_tau(leaf_masks):
            per_unit = np.empty(len(y))
            for mask in leaf_masks:
                per_unit[mask] = tau(mask)
            return per_unit.var()

        all_mask = np.ones(len(y), dtype=bool)
        left, right = x == 0, x == 1
        sum_form_gain = (
            left.sum() * tau(left) ** 2
            + right.sum() * tau(right) ** 2
            - all_mask.sum() * tau(all_mask) ** 2
        )
        var_form_gain = len(y) * (var_of_tau([left, right]) - var_of_tau([all_mask]))
        assert sum_form_gain == pytest.approx(var_form_gain, abs=1e-10)


class TestCausalForest:
    def test_single_tree_formula_recomputation(self):
        ds = draw(two_cell_sign_dgp(), 2000, seed=6)
        model = fit_causal_forest(
            ds, (1, 0), "y", n_tree=1, subsample=1.0, mtry=None, q=20, seed=1
        )
        for covariates in ({"g": "a"}, {"g": "b"}):
            alpha = model.kernel_weights(covariates)
            manual = float(
                np.sum(alpha * model.num_terms) / np.sum(alpha * model.den_terms)
            )
            assert model.estimate(covariates) == pytest.approx(manual, abs=1e-10)

    def test_kernel_weights_sum_to_one_and_match_recomputation(self):
        ds = draw(effect_on_v_dgp(), 1500, seed=7)
        model = fit_causal_forest(
            ds, (1, 0), "y", n_tree=5, subsample=0.6, mtry=None, q=10, seed=2
        )
        sub = ds.subset(np.arange(ds.n))  # full data; pair restriction inside
        for covariates in ({"v": "v0", "u": "u0"}, {"v": "v1", "u": "u2"}):
            alpha = model.kernel_weights(covariates)
            assert np.all(alpha >= 0)
            assert abs(alpha.sum() - 1.0) <= 1e-12
            # Independent recomputation from tree structures.
            row = model.encoder.covariate_row(covariates)[None, :]
            expected = np.zeros(model.n_train)
            pair_mask = (ds.arm_index == 1) | (ds.arm_index == 0)
            pair_ds = ds.subset(np.nonzero(pair_mask)[0])
            cov_block = model.encoder.covariate_block(pair_ds)
            for ft in model.trees:
                leaf = int(ft.structure.apply(row)[0])
                member_leaves = ft.structure.apply(cov_block[ft.sub_rows])
                members = ft.sub_rows[member_leaves == leaf]
                expected[members] += 1.0 / (len(model.trees) * len(members))
            np.testing.assert_allclose(alpha, expected, atol=1e-15)

    def test_residualizer_uses_known_propensity(self):
        dgp = SyntheticDGP(
            variables={"g": ("a", "b")},
            arm_labels=("w0", "w1", "w2"),
            response={("a",): (0.2, 0.3, 0.4), ("b",): (0.4, 0.3, 0.2)},
            propensities=(0.15, 0.15, 0.7),
            seed=0,
        )
        ds = draw(dgp, 3000, seed=8)
        model = fit_causal_forest(ds, (0, 2), "y", n_tree=2, q=10, seed=3)
        np.testing.assert_allclose(model.residualizer.e, 0.15 / 0.85)

    def test_estimated_propensity_mode(self):
        ds = draw(two_cell_sign_dgp(), 1200, seed=9)
        model = fit_causal_forest(
            ds, (1, 0), "y", n_tree=2, q=10, seed=4, propensity_mode="estimated"
        )
        assert np.all((model.residualizer.e >= 0.01) & (model.residualizer.e <= 0.99))
        assert model.residualizer.e.std() >= 0.0  # per-unit array, not a constant

    def test_two_cell_sign_recovery(self):
        ds = draw(two_cell_sign_dgp(), 50_000, seed=10)
        model = fit_causal_forest(ds, (1, 0), "y", n_tree=32, q=100, seed=5)
        held_out = draw(two_cell_sign_dgp(), 5000, seed=11)
        tau_hat = model.estimate_dataset(held_out)
        truth = np.where(held_out.codes[:, 0] == 0, 0.1, -0.1)
        assert np.mean(np.sign(tau_hat) == np.sign(truth)) >= 0.95

    def test_constant_tau_dispersion(self):
        dgp = SyntheticDGP(
            variables={"g": ("a", "b"), "h": ("x", "y")},
            arm_labels=("w0", "w1"),
            response={
                ("a", "x"): (0.30, 0.42),
                ("a", "y"): (0.35, 0.47),
                ("b", "x"): (0.25, 0.37),
                ("b", "y"): (0.40, 0.52),
            },
            propensities=(0.5, 0.5),
            seed=0,
        )
        ds = draw(dgp, 50_000, seed=12)
        model = fit_causal_forest(ds, (1, 0), "y", n_tree=32, q=200, seed=6)
        tau_hat = model.estimate_dataset(ds)
        assert tau_hat.std() <= 0.25 * 0.12

    def test_antisymmetry_under_pair_swap(self):
        ds = draw(two_cell_sign_dgp(), 5000, seed=13)
        fwd = fit_causal_forest(ds, (1, 0), "y", n_tree=8, q=25, seed=7)
        rev = fit_causal_forest(ds, (0, 1), "y", n_tree=8, q=25, seed=7)
        probe = draw(two_cell_sign_dgp(), 200, seed=14)
        np.testing.assert_allclose(
            fwd.estimate_dataset(probe), -rev.estimate_dataset(probe), atol=1e-10
        )
        t_fwd = fit_causal_tree(ds, (1, 0), "y", q=25)
        t_rev = fit_causal_tree(ds, (0, 1), "y", q=25)
        np.testing.assert_allclose(
            t_fwd.estimate_dataset(probe), -t_rev.estimate_dataset(probe), atol=1e-12
        )

    def test_same_seed_identical_forest(self):
        ds = draw(effect_on_v_dgp(), 3000, seed=15)
        m1 = fit_causal_forest(ds, (1, 0), "y", n_tree=6, q=20, seed=8)
        m2 = fit_causal_forest(ds, (1, 0), "y", n_tree=6, q=20, seed=8)
        probe = draw(effect_on_v_dgp(), 300, seed=16)
        np.testing.assert_array_equal(
            m1.estimate_dataset(probe), m2.estimate_dataset(probe)
        )

    def test_identical_trees_degenerate_ensemble(self):
        ds = draw(two_cell_sign_dgp(), 1500, seed=17)
        model = fit_causal_forest(
            ds, (1, 0), "y", n_tree=3, subsample=1.0, mtry=None, q=15, seed=9
        )
        ft = model.trees[0]
        probe = {"g": "a"}
        row = model.encoder.covariate_row(probe)[None, :]
        leaf = int(ft.structure.apply(row)[0])
        single = ft.leaf_num[leaf] / ft.leaf_den[leaf]
        assert model.estimate(probe) == pytest.approx(single, abs=1e-12)

    def test_invalid_subsample_rejected(self):
        ds = draw(two_cell_sign_dgp(), 500, seed=18)
        with pytest.raises(ConfigError):
            fit_causal_forest(ds, (1, 0), "y", subsample=0.0)

    def test_all_trees_invalid_errors(self):
        ds = draw(two_cell_sign_dgp(), 60, seed=19)
        with pytest.raises(DataError):
            fit_causal_forest(ds, (1, 0), "y", n_tree=3, subsample=0.2, q=50, seed=10)


class TestPairsAndExports:
    def test_fit_all_pairs_counts(self):
        rng = np.random.default_rng(20)
        ds = random_dataset(rng, n=600, n_arms=3, binary=True,
                            propensities={f"arm{w}": 1 / 3 for w in range(3)})
        models = fit_all_pairs(ds, "causal_tree", "y", q=10)
        assert set(models) == {(0, 1), (0, 2), (1, 2)}
        ds2 = random_dataset(rng, n=300, n_arms=2, binary=True)
        assert set(fit_all_pairs(ds2, "causal_tree", "y", q=5)) == {(0, 1)}

    def test_single_arm_errors(self):
        rng = np.random.default_rng(21)
        ds = random_dataset(rng, n=50, n_arms=1, binary=True)
        with pytest.raises(ConfigError):
            fit_all_pairs(ds, "causal_tree", "y")

    def test_pair_errors_carry_pair_identity(self):
        rng = np.random.default_rng(22)
        ds = random_dataset(rng, n=60, n_arms=3, binary=True)
        with pytest.raises(DataError, match=r"pair \(0, 1\)"):
            fit_all_pairs(ds, "causal_tree", "y", q=500)

    def test_cdf_export_matches_pointwise_estimates(self, tmp_path):
        ds = draw(two_cell_sign_dgp(), 800, seed=23)
        models = fit_all_pairs(ds, "causal_tree", "y", q=20)
        table = cate_cdf_export(models, ds, path=str(tmp_path / "cdf.csv"))
        assert set(table) == {(0, 1)}
        assert len(table[(0, 1)]) == ds.n
        for i in (0, 5, 99):
            assert table[(0, 1)][i] == pytest.approx(
                estimate(models[(0, 1)], ds.covariates_of(i))
            )
        assert (tmp_path / "cdf.csv").exists()

    def test_single_leaf_model_gives_degenerate_cdf(self):
        ds = draw(two_cell_sign_dgp(), 500, seed=24)
        models = {(1, 0): fit_causal_tree(ds, (1, 0), "y", complexity=np.inf)}
        table = cate_cdf_export(models, ds)
        assert np.unique(table[(1, 0)]).size == 1

    def test_outcome_model_cates(self):
        ds = draw(two_cell_sign_dgp(), 3000, seed=25)
        model = fit_ols(encode(ds, interactions=True), ds.outcome("y"))
        cates = cates_from_outcome(model, ds.n_arms)
        assert set(cates) == {(0, 1)}
        view = cates[(0, 1)]
        x = {"g": "a"}
        assert view.estimate(x) == pytest.approx(
            model.predict(x, 0) - model.predict(x, 1)
        )
        np.testing.assert_allclose(
            estimate_dataset(view, ds),
            model.predict_all_arms(ds)[:, 0] - model.predict_all_arms(ds)[:, 1],
        )
