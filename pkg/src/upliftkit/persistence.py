"""Versioned JSON persistence for fitted models and policies.

Documents carry a format tag and version so future layout changes stay
detectable. Forest documents persist tree structures and the per-leaf
aggregates needed for prediction; fit-time member arrays are not stored,
so a reloaded causal forest predicts identically but cannot re-derive
kernel weights over training units.
"""

from __future__ import annotations

import json
import os
from typing import Mapping

import numpy as np

from . import cate_models, outcome_models
from .dataset import Encoder
from .errors import ConfigError
from .policy import CatePolicy, OutcomePolicy, Policy, TablePolicy, UniformPolicy
from .trees import RegressionTree

MODEL_FORMAT = "upliftkit-model"
POLICY_FORMAT = "upliftkit-policy"
VERSION = 1


def _encoder_to_dict(enc: Encoder) -> dict:
    return {
        "variables": list(enc.variables),
        "categories": {v: list(c) for v, c in enc.categories.items()},
        "n_arms": enc.n_arms,
        "interactions": enc.interactions,
        "baseline_interactions": enc.baseline_interactions,
    }


def _encoder_from_dict(raw: Mapping) -> Encoder:
    return Encoder(
        variables=tuple(raw["variables"]),
        categories={v: tuple(c) for v, c in raw["categories"].items()},
        n_arms=int(raw["n_arms"]),
        interactions=bool(raw["interactions"]),
        baseline_interactions=bool(raw["baseline_interactions"]),
    )


def model_to_dict(model) -> dict:
    doc = {
        "format": MODEL_FORMAT,
        "version": VERSION,
        "kind": model.kind,
        "encoder": _encoder_to_dict(model.encoder),
        "hyper_params": getattr(model, "hyper_params", {}),
    }
    if isinstance(model, outcome_models.LinearOutcomeModel):
        doc["intercept"] = model.intercept
        doc["coef"] = model.coef.tolist()
        doc["training_mse"] = model.training_mse
    elif isinstance(model, outcome_models.TreeOutcomeModel):
        doc["tree"] = model.tree.to_dict()
        doc["training_mse"] = model.training_mse
    elif isinstance(model, outcome_models.ForestOutcomeModel):
        doc["trees"] = [t.to_dict() for t in model.trees]
        doc["training_mse"] = model.training_mse
    elif isinstance(model, outcome_models.BoostedOutcomeModel):
        doc["f0"] = model.f0
        doc["trees"] = [t.to_dict() for t in model.trees]
        doc["round_mse"] = model.round_mse
        doc["training_mse"] = model.training_mse
    elif isinstance(model, cate_models.CausalTreeModel):
        doc["pair"] = list(model.pair)
        doc["tree"] = model.structure.to_dict()
        doc["n_treat"] = model.n_treat.tolist()
        doc["n_control"] = model.n_control.tolist()
    elif isinstance(model, cate_models.CausalForestModel):
        doc["pair"] = list(model.pair)
        doc["trees"] = [
            {
                "structure": ft.structure.to_dict(),
                "leaf_num": ft.leaf_num.tolist(),
                "leaf_den": ft.leaf_den.tolist(),
            }
            for ft in model.trees
        ]
        doc["n_train"] = model.n_train
    else:
        raise ConfigError(f"cannot persist model of type {type(model).__name__}")
    return doc


def model_from_dict(doc: Mapping):
    if doc.get("format") != MODEL_FORMAT:
        raise ConfigError("not a model document")
    if doc.get("version") != VERSION:
        raise ConfigError(f"unsupported model document version {doc.get('version')}")
    kind = doc["kind"]
    enc = _encoder_from_dict(doc["encoder"])
    hyper = dict(doc.get("hyper_params", {}))
    if kind in ("ols", "lasso"):
        return outcome_models.LinearOutcomeModel(
            kind, enc, float(doc["intercept"]), np.asarray(doc["coef"], dtype=np.float64),
            float(doc["training_mse"]), hyper,
        )
    if kind == "cart":
        return outcome_models.TreeOutcomeModel(
            kind, enc, RegressionTree.from_dict(doc["tree"]), float(doc["training_mse"]), hyper
        )
    if kind == "random_forest":
        trees = [RegressionTree.from_dict(t) for t in doc["trees"]]
        return outcome_models.ForestOutcomeModel(kind, enc, trees, float(doc["training_mse"]), hyper)
    if kind == "boosted_trees":
        trees = [RegressionTree.from_dict(t) for t in doc["trees"]]
        return outcome_models.BoostedOutcomeModel(
            kind, enc, float(doc["f0"]), trees, float(doc["training_mse"]),
            list(doc.get("round_mse", [])), hyper,
        )
    if kind == "causal_tree":
        return cate_models.CausalTreeModel(
            pair=tuple(doc["pair"]),
            encoder=enc,
            structure=RegressionTree.from_dict(doc["tree"]),
            n_treat=np.asarray(doc["n_treat"], dtype=np.int64),
            n_control=np.asarray(doc["n_control"], dtype=np.int64),
            hyper_params=hyper,
        )
    if kind == "causal_forest":
        trees = []
        for raw in doc["trees"]:
            ft = cate_models._ForestTree(
                structure=RegressionTree.from_dict(raw["structure"]),
                leaf_num=np.asarray(raw["leaf_num"], dtype=np.float64),
                leaf_den=np.asarray(raw["leaf_den"], dtype=np.float64),
                sub_rows=np.empty(0, dtype=np.int64),
                sub_leaf=np.empty(0, dtype=np.int64),
            )
            trees.append(ft)
        n_train = int(doc["n_train"])
        return cate_models.CausalForestModel(
            pair=tuple(doc["pair"]),
            encoder=enc,
            trees=trees,
            residualizer=None,
            num_terms=np.empty(0),
            den_terms=np.empty(0),
            n_train=n_train,
            hyper_params=hyper,
        )
    raise ConfigError(f"unknown model kind {kind!r}")


def save_model(model, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path: str):
    with open(path) as fh:
        return model_from_dict(json.load(fh))


# -- policies --------------------------------------------------------------------


def save_policy(policy: Policy, path: str, model_dir: str | None = None) -> None:
    """Persist a policy as a JSON wrapper.

    Model-backed policies write their models next to the wrapper (or into
    `model_dir`) and reference them by relative path. Table policies embed
    the table inline.
    """
    base = os.path.dirname(os.path.abspath(path))
    model_dir = model_dir or base
    os.makedirs(model_dir, exist_ok=True)
    doc: dict = {"format": POLICY_FORMAT, "version": VERSION, "kind": policy.kind}
    stem = os.path.splitext(os.path.basename(path))[0]
    if isinstance(policy, UniformPolicy):
        doc["arm"] = policy.arm
    elif isinstance(policy, OutcomePolicy):
        model_path = os.path.join(model_dir, f"{stem}_model.json")
        save_model(policy.model, model_path)
        doc["model"] = os.path.relpath(model_path, base)
    elif isinstance(policy, CatePolicy):
        refs = {}
        for (a, b), model in policy.models.items():
            model_path = os.path.join(model_dir, f"{stem}_pair_{a}_{b}.json")
            save_model(model, model_path)
            refs[f"{a},{b}"] = os.path.relpath(model_path, base)
        doc["models"] = refs
        doc["fallback"] = policy.fallback
        doc["n_arms"] = policy.n_arms
    elif isinstance(policy, TablePolicy):
        doc["variables"] = list(policy.variables)
        doc["table"] = {"|".join(k): v for k, v in policy.table.items()}
        doc["default_arm"] = policy.default_arm
    else:
        raise ConfigError(f"cannot persist policy of type {type(policy).__name__}")
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_policy(path: str) -> Policy:
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != POLICY_FORMAT:
        raise ConfigError("not a policy document")
    kind = doc["kind"]
    if kind == "uniform":
        return UniformPolicy(int(doc["arm"]))
    if kind == "outcome_based":
        return OutcomePolicy(load_model(os.path.join(base, doc["model"])))
    if kind == "cate_based":
        models = {}
        for key, rel in doc["models"].items():
            a, b = (int(x) for x in key.split(","))
            models[(a, b)] = load_model(os.path.join(base, rel))
        return CatePolicy(models, int(doc["fallback"]), int(doc["n_arms"]))
    if kind == "table":
        table = {tuple(k.split("|")): int(v) for k, v in doc["table"].items()}
        default = doc.get("default_arm")
        return TablePolicy(doc["variables"], table, None if default is None else int(default))
    raise ConfigError(f"unknown policy kind {kind!r}")
