"""Config-driven end-to-end pipeline: data, models, policies, reports.

A single JSON config describes where data comes from (a CSV plus schema,
or a synthetic DGP spec to draw from), how to split it, which estimators
to fit (with fixed parameters or a cross-validated search), and how to
evaluate the resulting policies. `run` executes the stages sequentially
and writes a report bundle plus a manifest recording every seed and chosen
hyper-parameter, so any number in the bundle can be reproduced by calling
the corresponding library operation directly.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__, cate_models, evaluation, outcome_models, persistence, synth, tuning
from .dataset import CsvSchema, ExperimentDataset, encode, load_csv, split, write_csv
from .errors import ConfigError, DataError, UpliftError
from .policy import policy_from_cates, policy_from_outcome, uniform_policy

OUTCOME_KINDS = ("ols", "lasso", "cart", "random_forest", "boosted_trees")
CATE_KINDS = ("causal_tree", "causal_forest")


@dataclass
class EstimatorSpec:
    kind: str
    params: dict = field(default_factory=dict)
    search: dict | None = None  # search options; {} means default ranges

    @classmethod
    def from_dict(cls, raw: dict) -> "EstimatorSpec":
        search = raw.get("search")
        if search is True:
            search = {}
        return cls(kind=raw["kind"], params=dict(raw.get("params", {})), search=search)


@dataclass
class PipelineConfig:
    data: dict
    outcome: str
    baseline_arm: str
    fallback_arm: str
    estimators: list[EstimatorSpec]
    split: dict = field(default_factory=lambda: {"train_fraction": 0.7, "seed": 0})
    long_run_outcomes: list[str] = field(default_factory=list)
    decomposition: dict | None = None
    bootstrap: dict = field(default_factory=lambda: {"replicates": 1000, "seed": 0})
    segment_profiles: bool = True
    seed: int | None = None
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        try:
            return cls(
                data=dict(raw["data"]),
                outcome=raw["outcome"],
                baseline_arm=raw["baseline_arm"],
                fallback_arm=raw["fallback_arm"],
                estimators=[EstimatorSpec.from_dict(e) for e in raw.get("estimators", [])],
                split=dict(raw.get("split", {"train_fraction": 0.7, "seed": 0})),
                long_run_outcomes=list(raw.get("long_run_outcomes", [])),
                decomposition=raw.get("decomposition"),
                bootstrap=dict(raw.get("bootstrap", {"replicates": 1000, "seed": 0})),
                segment_profiles=bool(raw.get("segment_profiles", True)),
                seed=raw.get("seed"),
                raw=raw,
            )
        except KeyError as exc:
            raise ConfigError(f"pipeline config is missing key {exc}") from exc

    @classmethod
    def from_json(cls, path: str) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def validate(config: PipelineConfig) -> list[str]:
    """Check a config without running anything; returns diagnostics."""
    problems: list[str] = []
    data = config.data
    if "csv" in data:
        if not os.path.exists(data["csv"]):
            problems.append(f"data csv not found: {data['csv']}")
        if "schema" not in data:
            problems.append("csv data source needs a schema file")
        elif not os.path.exists(data["schema"]):
            problems.append(f"schema file not found: {data['schema']}")
    elif "dgp" in data:
        if not os.path.exists(data["dgp"]):
            problems.append(f"DGP spec not found: {data['dgp']}")
        if int(data.get("n", 0)) < 1:
            problems.append("dgp data source needs a positive draw size n")
    else:
        problems.append("data source must give either 'csv' or 'dgp'")

    fraction = config.split.get("train_fraction", 0.7)
    if not 0.0 < float(fraction) < 1.0:
        problems.append(f"split fraction out of (0,1): {fraction}")
    replicates = int(config.bootstrap.get("replicates", 0))
    if replicates < 2:
        problems.append(f"bootstrap replicates must be at least 2, got {replicates}")
    if not config.estimators and not config.baseline_arm:
        problems.append("need at least one estimator or a uniform baseline policy")
    for est in config.estimators:
        if est.kind not in OUTCOME_KINDS + CATE_KINDS:
            problems.append(f"unknown estimator kind {est.kind!r}")

    arm_labels = _declared_arm_labels(config)
    if arm_labels is not None:
        for role, label in (("baseline", config.baseline_arm), ("fallback", config.fallback_arm)):
            if label not in arm_labels:
                problems.append(f"{role} arm {label!r} not among arms {list(arm_labels)}")
    return problems


def _declared_arm_labels(config: PipelineConfig) -> tuple[str, ...] | None:
    data = config.data
    try:
        if "dgp" in data and os.path.exists(data["dgp"]):
            return tuple(synth.load_dgp(data["dgp"]).arm_labels)
        if "schema" in data and os.path.exists(data["schema"]):
            schema = CsvSchema.from_json(data["schema"])
            if schema.arm_order:
                return tuple(schema.arm_order)
    except UpliftError:
        return None
    return None


class PipelineStageError(UpliftError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def _float_cell(value) -> str:
    return repr(float(value))


def _derive_seeds(config: PipelineConfig, seed_override: int | None) -> dict:
    """One deterministic seed per stage, taken from the config or derived
    from a master seed when --seed overrides it."""
    if seed_override is not None:
        seq = np.random.SeedSequence(seed_override)
        children = seq.spawn(4)
        est_seq = children[3].spawn(32)
        return {
            "master": seed_override,
            "draw": int(children[0].generate_state(1)[0]) % 2**31,
            "split": int(children[1].generate_state(1)[0]) % 2**31,
            "bootstrap": int(children[2].generate_state(1)[0]) % 2**31,
            "estimators": [int(s.generate_state(1)[0]) % 2**31 for s in est_seq],
        }
    master = config.seed if config.seed is not None else 0
    seq = np.random.SeedSequence(master).spawn(1)[0].spawn(32)
    return {
        "master": master,
        "draw": int(config.data.get("draw_seed", master)),
        "split": int(config.split.get("seed", master)),
        "bootstrap": int(config.bootstrap.get("seed", master)),
        "estimators": [int(s.generate_state(1)[0]) % 2**31 for s in seq],
    }


def _fit_outcome_estimator(spec, train, outcome, seed, out_dir):
    """Fit one outcome estimator on the training data, tuning first when
    asked, and return (model, info-dict-for-manifest)."""
    info: dict = {"kind": spec.kind}
    y = train.outcome(outcome)
    if spec.kind == "ols":
        model = outcome_models.fit_ols(encode(train, interactions=True), y)
        info["params"] = {}
    elif spec.kind == "lasso":
        X = encode(train, interactions=True)
        params = dict(spec.params)
        if "lam" not in params:
            report = outcome_models.tune_lasso(
                X, y, folds=int((spec.search or {}).get("folds", 5)), seed=seed
            )
            report.to_csv(os.path.join(out_dir, f"cv_{spec.kind}.csv"))
            params["lam"] = report.chosen["lam"]
        model = outcome_models.fit_lasso(X, y, params["lam"])
        info["params"] = params
    else:
        params = dict(spec.params)
        if spec.search is not None:
            grid = spec.search.get("grid") or tuning.DEFAULT_SEARCH_SPACES[spec.kind]
            sspec = tuning.SearchSpec(
                kind=spec.kind,
                grid=grid,
                fixed=params,
                budget=int(spec.search.get("budget", 16)),
                folds=int(spec.search.get("folds", 5)),
                seed=seed,
            )
            result = tuning.search(sspec, train, outcome)
            result.to_csv(os.path.join(out_dir, f"search_{spec.kind}.csv"))
            params = result.best
            info["search_trials"] = len(result.trials)
        if spec.kind == "random_forest":
            params.setdefault("seed", seed)
        X = encode(train)
        fitter = {
            "cart": outcome_models.fit_cart,
            "random_forest": outcome_models.fit_random_forest,
            "boosted_trees": outcome_models.fit_boosted,
        }[spec.kind]
        model = fitter(X, y, **params)
        info["params"] = params
    info["training_mse"] = model.training_mse
    return model, info


def _fit_cate_estimator(spec, train, outcome, seed, out_dir):
    info: dict = {"kind": spec.kind, "pairs": {}}
    models = {}
    for idx, (a, b) in enumerate(
        (a, b) for a in range(train.n_arms) for b in range(a + 1, train.n_arms)
    ):
        params = dict(spec.params)
        if spec.search is not None:
            grid = spec.search.get("grid") or tuning.DEFAULT_SEARCH_SPACES[spec.kind]
            sspec = tuning.SearchSpec(
                kind=spec.kind,
                grid=grid,
                fixed={k: v for k, v in params.items() if k not in grid},
                budget=int(spec.search.get("budget", 8)),
                folds=int(spec.search.get("folds", 5)),
                seed=seed + idx,
            )
            result = tuning.search(sspec, train, outcome, pair=(a, b))
            result.to_csv(os.path.join(out_dir, f"search_{spec.kind}_{a}_{b}.csv"))
            params = result.best
        if spec.kind == "causal_forest":
            params.setdefault("seed", seed + idx)
        fitter = {
            "causal_tree": cate_models.fit_causal_tree,
            "causal_forest": cate_models.fit_causal_forest,
        }[spec.kind]
        models[(a, b)] = fitter(train, (a, b), outcome, **params)
        info["pairs"][f"{a},{b}"] = params
    return models, info


def run(
    config: PipelineConfig,
    out_dir: str,
    seed_override: int | None = None,
    jobs: int = 1,
) -> dict:
    """Execute the pipeline and write the report bundle into `out_dir`.

    Any stage failure raises PipelineStageError after writing a manifest
    that marks the run incomplete. Reruns with an identical config produce
    byte-identical numeric tables.
    """
    problems = validate(config)
    if problems:
        raise ConfigError("validation stage rejected the config: " + "; ".join(problems))
    os.makedirs(out_dir, exist_ok=True)
    seeds = _derive_seeds(config, seed_override)
    manifest: dict = {
        "tool_version": __version__,
        "config": config.raw,
        "seeds": seeds,
        "jobs": jobs,
        "stages": {},
        "estimators": {},
        "outputs": [],
        "incomplete": True,
    }

    def finish_stage(name: str) -> None:
        manifest["stages"][name] = "complete"

    def write_manifest() -> None:
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    def emit(name: str) -> str:
        manifest["outputs"].append(name)
        return os.path.join(out_dir, name)

    stage = "load_data"
    try:
        if "csv" in config.data:
            schema = CsvSchema.from_json(config.data["schema"])
            ds = load_csv(config.data["csv"], schema)
        else:
            dgp = synth.load_dgp(config.data["dgp"])
            ds = synth.draw(dgp, int(config.data["n"]), seed=seeds["draw"])
        baseline = ds.arm_by_label(config.baseline_arm).index
        fallback = ds.arm_by_label(config.fallback_arm).index
        finish_stage(stage)

        stage = "split"
        fraction = float(config.split.get("train_fraction", 0.7))
        pair = split(ds, fraction, seeds["split"])
        train, test = pair.train, pair.test
        finish_stage(stage)

        stage = "fit"
        models_dir = os.path.join(out_dir, "models")
        os.makedirs(models_dir, exist_ok=True)
        policies: dict[str, object] = {}
        for arm in ds.arms:
            pol = uniform_policy(arm.index, ds.n_arms)
            pol.policy_id = f"uniform_{arm.label}"
            policies[pol.policy_id] = pol
        cate_model_sets: dict[str, dict] = {}
        outcome_model_set: dict[str, object] = {}
        for i, spec in enumerate(config.estimators):
            est_seed = seeds["estimators"][i % len(seeds["estimators"])]
            if spec.kind in OUTCOME_KINDS:
                model, info = _fit_outcome_estimator(
                    spec, train, config.outcome, est_seed, out_dir
                )
                persistence.save_model(model, os.path.join(models_dir, f"{spec.kind}.json"))
                pol = policy_from_outcome(model)
                outcome_model_set[spec.kind] = model
            else:
                models, info = _fit_cate_estimator(
                    spec, train, config.outcome, est_seed, out_dir
                )
                for (a, b), m in models.items():
                    persistence.save_model(
                        m, os.path.join(models_dir, f"{spec.kind}_pair_{a}_{b}.json")
                    )
                pol = policy_from_cates(models, fallback, ds.n_arms)
                cate_model_sets[spec.kind] = models
            pol.policy_id = spec.kind
            policies[spec.kind] = pol
            manifest["estimators"][spec.kind] = info
        finish_stage(stage)

        stage = "policies"
        policy_dir = os.path.join(out_dir, "policies")
        os.makedirs(policy_dir, exist_ok=True)
        for pid, pol in policies.items():
            persistence.save_policy(pol, os.path.join(policy_dir, f"{pid}.json"))
        with open(emit("allocation.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["policy"] + [a.label for a in ds.arms])
            from .policy import allocation as allocation_op

            for pid, pol in policies.items():
                summary = allocation_op(pol, test)
                writer.writerow([pid] + [_float_cell(f) for f in summary.fractions])
        finish_stage(stage)

        stage = "evaluate"
        outcomes = [config.outcome, *config.long_run_outcomes]
        baseline_id = f"uniform_{config.baseline_arm}"
        with open(emit("rewards.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["policy", "outcome", "dataset", "ips_empirical", "ips_theoretical", "upsilon", "pct_gain_vs_baseline"]
            )
            for outcome in outcomes:
                for split_name, data in (("train", train), ("test", test)):
                    base_value = evaluation.ips_empirical(
                        policies[baseline_id], data, outcome
                    ).value
                    for pid, pol in policies.items():
                        est = evaluation.ips_empirical(pol, data, outcome)
                        ups = evaluation.upsilon(pol, data, outcome)
                        theo = (
                            evaluation.ips(pol, data, outcome).value
                            if data.propensities is not None
                            else ""
                        )
                        gain = (
                            100.0 * (est.value - base_value) / base_value
                            if base_value != 0
                            else float("nan")
                        )
                        writer.writerow(
                            [
                                pid,
                                outcome,
                                split_name,
                                _float_cell(est.value),
                                _float_cell(theo) if theo != "" else "",
                                _float_cell(ups.direct),
                                _float_cell(gain),
                            ]
                        )
        with open(emit("ate_table.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["outcome", "dataset", "arm", "n", "mean", "diff", "t_stat", "p_value", "pct_gain"])
            for outcome in outcomes:
                for split_name, data in (("train", train), ("test", test)):
                    table = evaluation.ate_table(data, outcome, baseline)
                    for row in table.rows:
                        writer.writerow(
                            [
                                outcome,
                                split_name,
                                row.arm_label,
                                row.n,
                                _float_cell(row.mean),
                                "" if row.diff is None else _float_cell(row.diff),
                                "" if row.t_stat is None else _float_cell(row.t_stat),
                                "" if row.p_value is None else _float_cell(row.p_value),
                                "" if row.pct_gain is None else _float_cell(row.pct_gain),
                            ]
                        )
        for pid, pol in policies.items():
            for split_name, data in (("train", train), ("test", test)):
                table = evaluation.congruency(pol, data, config.outcome)
                table.to_csv(emit(f"congruency_{pid}_{split_name}.csv"))
        for outcome in outcomes:
            comparison = evaluation.bootstrap_compare(
                policies,
                test,
                outcome,
                b_rep=int(config.bootstrap.get("replicates", 1000)),
                seed=seeds["bootstrap"],
            )
            comparison.to_csv(emit(f"bootstrap_{outcome}.csv"))

        cdf_models: dict[str, dict] = dict(cate_model_sets)
        for kind, model in outcome_model_set.items():
            cdf_models[kind] = cate_models.cates_from_outcome(model, ds.n_arms)
        if cdf_models:
            with open(emit("cate_cdf.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["estimator", "treated_arm", "control_arm", "tau_hat", "cdf"])
                for kind in sorted(cdf_models):
                    table = cate_models.cate_cdf_export(cdf_models[kind], test)
                    for (a, b), values in sorted(table.items()):
                        ordered = np.sort(values)
                        for pos, value in enumerate(ordered, start=1):
                            writer.writerow(
                                [kind, a, b, _float_cell(value), _float_cell(pos / len(ordered))]
                            )
        if config.segment_profiles:
            for pid, pol in policies.items():
                if pol.kind == "uniform":
                    continue
                profile = evaluation.segment_profile(pol, test)
                profile.to_csv(emit(f"segment_profile_{pid}.csv"))
        if config.decomposition:
            decomp = evaluation.outcome_decomposition(
                test,
                config.decomposition["binary"],
                config.decomposition["continuous"],
            )
            decomp.to_csv(emit("outcome_decomposition.csv"))
        finish_stage(stage)
    except Exception as exc:
        manifest["failed_stage"] = stage
        manifest["failure"] = str(exc)
        write_manifest()
        raise PipelineStageError(stage, exc) from exc

    manifest["incomplete"] = False
    write_manifest()
    return manifest


def synth_to_csv(dgp_path: str, out_dir: str, seed_override: int | None = None) -> str:
    """Draw a dataset from a DGP spec and write data.csv + schema.json."""
    dgp = synth.load_dgp(dgp_path)
    n = int(getattr(dgp, "draw_n", 0) or 0)
    with open(dgp_path) as fh:
        raw = json.load(fh)
    n = int(raw.get("n", 10000))
    ds = synth.draw(dgp, n, seed=seed_override)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "data.csv")
    write_csv(ds, csv_path)
    schema = {
        "arm": "arm",
        "outcomes": list(ds.outcome_names),
        "covariates": list(ds.variables),
        "arm_order": [a.label for a in ds.arms],
        "propensities": {a.label: ds.propensities[a.index] for a in ds.arms},
    }
    with open(os.path.join(out_dir, "schema.json"), "w") as fh:
        json.dump(schema, fh, indent=2, sort_keys=True)
    return csv_path


def evaluate_saved_policy(config: dict, out_dir: str) -> dict:
    """CLI `eval` verb: score a persisted policy on a CSV dataset."""
    for key in ("policy", "csv", "schema", "outcome"):
        if key not in config:
            raise ConfigError(f"eval config is missing {key!r}")
    policy = persistence.load_policy(config["policy"])
    policy.policy_id = os.path.splitext(os.path.basename(config["policy"]))[0]
    ds = load_csv(config["csv"], CsvSchema.from_json(config["schema"]))
    outcome = config["outcome"]
    os.makedirs(out_dir, exist_ok=True)
    est = evaluation.ips_empirical(policy, ds, outcome)
    ups = evaluation.upsilon(policy, ds, outcome)
    report = {
        "policy": est.policy_id,
        "outcome": outcome,
        "n": ds.n,
        "ips_empirical": est.value,
        "upsilon": ups.direct,
        "experiment_mean": ups.experiment_mean,
        "warnings": list(est.warnings),
    }
    if ds.propensities is not None:
        report["ips_theoretical"] = evaluation.ips(policy, ds, outcome).value
    evaluation.congruency(policy, ds, outcome).to_csv(os.path.join(out_dir, "congruency.csv"))
    with open(os.path.join(out_dir, "eval_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report
