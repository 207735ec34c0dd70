import json

import numpy as np
import pytest

from upliftkit.dataset import (
    CsvSchema,
    empirical_propensities,
    encode,
    load_csv,
    split,
    write_csv,
)
from upliftkit.errors import DataError, ParseError, PositivityError, SchemaError

from conftest import make_dataset, random_dataset


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


SCHEMA = CsvSchema(arm="trial", outcomes=["y"], covariates=["job", "region"])


class TestLoadCsv:
    def test_six_row_readback(self, tmp_path):
        path = _write(
            tmp_path,
            "d.csv",
            "job,region,trial,y\n"
            "student,us,A,1\n"
            "pro,us,B,0\n"
            "student,eu,A,1\n"
            "pro,eu,B,0\n"
            "student,us,A,0\n"
            "pro,eu,B,1\n",
        )
        ds = load_csv(path, SCHEMA)
        assert ds.n == 6
        assert ds.n_arms == 2
        assert [a.label for a in ds.arms] == ["A", "B"]  # first-appearance order
        assert ds.outcome("y").tolist() == [1, 0, 1, 0, 0, 1]

    def test_empty_covariate_cell_becomes_unknown(self, tmp_path):
        path = _write(
            tmp_path,
            "d.csv",
            "job,region,trial,y\nstudent,us,A,1\n,us,B,0\n",
        )
        ds = load_csv(path, SCHEMA)
        assert ds.covariates_of(1)["job"] == "unknown"

    def test_non_numeric_outcome_names_row(self, tmp_path):
        path = _write(
            tmp_path,
            "d.csv",
            "job,region,trial,y\nstudent,us,A,1\npro,us,B,oops\n",
        )
        with pytest.raises(ParseError, match="row 2"):
            load_csv(path, SCHEMA)

    def test_nan_outcome_rejected(self, tmp_path):
        path = _write(
            tmp_path,
            "d.csv",
            "job,region,trial,y\nstudent,us,A,NaN\n",
        )
        with pytest.raises(ParseError, match="row 1"):
            load_csv(path, SCHEMA)

    def test_missing_column_is_schema_error(self, tmp_path):
        path = _write(tmp_path, "d.csv", "job,trial,y\nstudent,A,1\n")
        with pytest.raises(SchemaError):
            load_csv(path, SCHEMA)

    def test_unseen_arm_label_beyond_declared_list(self, tmp_path):
        path = _write(
            tmp_path,
            "d.csv",
            "job,region,trial,y\nstudent,us,A,1\npro,us,C,0\n",
        )
        schema = CsvSchema(
            arm="trial", outcomes=["y"], covariates=["job", "region"], arm_order=["A", "B"]
        )
        with pytest.raises(DataError, match="'C'"):
            load_csv(path, schema)

    def test_schema_sidecar_roundtrip(self, tmp_path):
        sidecar = tmp_path / "schema.json"
        sidecar.write_text(
            json.dumps(
                {
                    "arm": "trial",
                    "outcomes": ["y"],
                    "covariates": ["job", "region"],
                    "arm_order": ["B", "A"],
                    "propensities": {"B": 0.4, "A": 0.6},
                }
            )
        )
        schema = CsvSchema.from_json(str(sidecar))
        path = _write(tmp_path, "d.csv", "job,region,trial,y\nstudent,us,A,1\npro,us,B,0\n")
        ds = load_csv(path, schema)
        assert [a.label for a in ds.arms] == ["B", "A"]
        assert ds.propensities == {0: 0.4, 1: 0.6}

    def test_write_then_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = random_dataset(rng, n=30)
        path = str(tmp_path / "out.csv")
        write_csv(ds, path)
        schema = CsvSchema(
            arm="arm",
            outcomes=list(ds.outcome_names),
            covariates=list(ds.variables),
            arm_order=[a.label for a in ds.arms],
        )
        back = load_csv(path, schema)
        assert back.n == ds.n
        assert np.array_equal(back.arm_index, ds.arm_index)
        assert np.array_equal(back.codes, ds.codes)
        np.testing.assert_allclose(back.outcome("y"), ds.outcome("y"))


class TestEncode:
    def test_counting_example(self):
        # 2 variables with 3 and 2 categories, W=3, interactions on.
        rows = []
        for g in range(3):
            for h in range(2):
                for arm in ("a0", "a1", "a2"):
                    rows.append(({"g": f"g{g}", "h": f"h{h}"}, arm, {"y": 0.0}))
        ds = make_dataset(rows)
        em = encode(ds, interactions=True)
        kinds = [c.kind for c in em.columns()]
        assert kinds.count("covariate") == 5
        assert kinds.count("arm") == 3
        assert kinds.count("interaction") == 10
        assert em.n_columns == 18

    def test_paper_shaped_input_column_totals(self):
        # Six variables whose category counts sum to 82, three arms. With
        # interaction products against all three arm dummies the design has
        # 82 + 3 + 246 = 331 explanatory columns.
        sizes = {"v1": 6, "v2": 8, "v3": 42, "v4": 14, "v5": 5, "v6": 7}
        assert sum(sizes.values()) == 82
        rows = []
        for i in range(max(sizes.values())):
            cov = {v: f"c{i % k}" for v, k in sizes.items()}
            rows.append((cov, f"arm{i % 3}", {"y": 0.0}))
        ds = make_dataset(rows, arm_order=["arm0", "arm1", "arm2"])
        full = encode(ds, interactions=True, baseline_interactions=True)
        assert sum(c.kind == "interaction" for c in full.columns()) == 246
        assert full.n_columns == 331
        # Default interactions exclude the baseline arm: 82 * (3 - 1).
        default = encode(ds, interactions=True)
        assert sum(c.kind == "interaction" for c in default.columns()) == 164

    def test_interactions_off(self):
        rng = np.random.default_rng(1)
        ds = random_dataset(rng, n=25)
        em = encode(ds)
        assert all(c.kind in ("covariate", "arm") for c in em.columns())
        assert em.n_columns == 5 + 3

    def test_one_hot_row_sums_per_variable_block(self):
        rng = np.random.default_rng(2)
        ds = random_dataset(rng, n=50)
        em = encode(ds, interactions=True)
        offset = 0
        for v in ds.variables:
            k = len(ds.categories[v])
            block = em.values[:, offset : offset + k]
            np.testing.assert_array_equal(block.sum(axis=1), np.ones(ds.n))
            offset += k
        arm_block = em.values[:, offset : offset + ds.n_arms]
        np.testing.assert_array_equal(arm_block.sum(axis=1), np.ones(ds.n))

    def test_deterministic_and_lexicographic(self):
        rng = np.random.default_rng(3)
        ds = random_dataset(rng, n=20)
        em1, em2 = encode(ds, interactions=True), encode(ds, interactions=True)
        assert em1.columns() == em2.columns()
        np.testing.assert_array_equal(em1.values, em2.values)
        cov_cols = [(c.variable, c.category) for c in em1.columns() if c.kind == "covariate"]
        assert cov_cols == sorted(cov_cols)

    def test_unseen_category_maps_to_zero_block(self):
        rng = np.random.default_rng(4)
        ds = random_dataset(rng, n=20)
        em = encode(ds)
        row = em.encoder.covariate_row({"g": "never-seen", "h": "c0"})
        g_size = len(ds.categories["g"])
        assert row[:g_size].sum() == 0.0
        assert row[g_size:].sum() == 1.0

    def test_interaction_count_invariant(self):
        rng = np.random.default_rng(5)
        ds = random_dataset(rng, n=20, n_arms=4)
        em = encode(ds, interactions=True)
        n_cov = sum(c.kind == "covariate" for c in em.columns())
        n_int = sum(c.kind == "interaction" for c in em.columns())
        assert n_int == n_cov * (ds.n_arms - 1)


class TestSplit:
    def test_exact_split_at_round_count(self):
        rng = np.random.default_rng(6)
        ds = random_dataset(rng, n=100_000, n_arms=2)
        pair = split(ds, 0.7, seed=9)
        assert pair.train.n == 70_000
        assert pair.test.n == 30_000

    def test_rounding_rule(self):
        rng = np.random.default_rng(7)
        ds = random_dataset(rng, n=10)
        assert split(ds, 0.7, seed=1).train.n == 7
        assert split(ds, 0.75, seed=1).train.n == 8  # floor(7.5 + 0.5)

    def test_same_seed_identical_membership(self):
        rng = np.random.default_rng(8)
        ds = random_dataset(rng, n=200)
        p1, p2 = split(ds, 0.6, seed=42), split(ds, 0.6, seed=42)
        np.testing.assert_array_equal(p1.train.codes, p2.train.codes)
        np.testing.assert_array_equal(p1.train.arm_index, p2.train.arm_index)

    def test_partition_property(self):
        rng = np.random.default_rng(9)
        ds = random_dataset(rng, n=101)
        ds_tagged = ds  # outcome values act as unit tags below
        pair = split(ds_tagged, 0.33, seed=5)
        assert pair.train.n + pair.test.n == ds.n
        merged = np.sort(
            np.concatenate([pair.train.outcome("y"), pair.test.outcome("y")])
        )
        np.testing.assert_array_equal(merged, np.sort(ds.outcome("y")))

    def test_fraction_out_of_range(self):
        rng = np.random.default_rng(10)
        ds = random_dataset(rng, n=10)
        with pytest.raises(DataError):
            split(ds, 1.2, seed=0)
        with pytest.raises(DataError):
            split(ds, 0.0, seed=0)

    def test_arm_counts_reported(self):
        rng = np.random.default_rng(11)
        ds = random_dataset(rng, n=300)
        pair = split(ds, 0.5, seed=2)
        for label, count in pair.train_arm_counts.items():
            assert count + pair.test_arm_counts[label] == int(
                np.sum(ds.arm_index == ds.arm_by_label(label).index)
            )


class TestEmpiricalPropensities:
    def test_paper_arm_counts(self):
        # Test-set arm counts from the experiment's split table.
        from upliftkit.dataset import ExperimentDataset, TreatmentArm

        counts = [15_274, 15_139, 70_611]
        n = sum(counts)
        ds = ExperimentDataset(
            variables=["v"],
            categories={"v": ("x",)},
            codes=np.zeros((n, 1), dtype=np.int32),
            arms=[TreatmentArm(0, "7d"), TreatmentArm(1, "14d"), TreatmentArm(2, "30d")],
            arm_index=np.repeat([0, 1, 2], counts),
            outcomes={"y": np.zeros(n)},
        )
        got = empirical_propensities(ds)
        np.testing.assert_allclose(
            [got[0], got[1], got[2]], [0.1512, 0.1499, 0.6989], atol=1e-4
        )

    def test_two_arm_symmetry(self):
        rows = [({"v": "a"}, "A", {"y": 0.0})] * 5 + [({"v": "a"}, "B", {"y": 0.0})] * 5
        ds = make_dataset(rows)
        assert empirical_propensities(ds) == {0: 0.5, 1: 0.5}

    def test_zero_count_arm_errors(self):
        rows = [({"v": "a"}, "A", {"y": 0.0})] * 3
        ds = make_dataset(rows, arm_order=["A", "B"])
        with pytest.raises(PositivityError):
            empirical_propensities(ds)
