"""Experiment configuration: one JSON document, schema-validated up front.

Unknown keys are rejected so typos fail loudly before any work starts.
Defaults below mirror the shipped desk-scale protocol; every section can be
overridden from the file.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import InvalidConfigError
from .flow import FlowConfig
from .graph import CausalDag, build_dag
from .model import ForecastModel, init_model
from .scm import Family, Mechanism, ScmSpec, draw_spec, family_dag
from .training import TrainConfig

_SCHEMA = {
    "dag": {"nodes": int, "edges": list},
    "scm": {
        "family": str, "mechanism": str, "coeff_seed": int,
        "root_amp": float, "root_period": float,
    },
    "window": {"context": int, "total": int},
    "synth": {"length": int, "train_frac": float},
    "model": {"hidden_dim": int, "width": int, "depth": int,
              "per_node_rnn": bool, "init_seed": int},
    "flow": {"integrator": str, "steps": int, "divergence": str,
             "fd_step": float},
    "train": {
        "sigma_min": float, "batch_size": int, "epochs": int,
        "learning_rate": float, "beta1": float, "beta2": float,
        "eps": float, "s_samples_per_point": int,
    },
    "eval": {"batch": int, "realizations": int, "runs": int,
             "intervention_offset": int, "flow_steps": int},
    "seeds": {"data": int, "train": int, "eval": int},
}

_DEFAULTS = {
    "dag": {"nodes": 8, "edges": [[0, 1], [0, 2], [1, 3], [1, 4],
                                  [2, 5], [2, 6], [3, 7]]},
    "scm": {"family": "tree", "mechanism": "additive", "coeff_seed": 7,
            "root_amp": 4.0, "root_period": 20.0},
    "window": {"context": 90, "total": 120},
    "synth": {"length": 2500, "train_frac": 0.8},
    "model": {"hidden_dim": 32, "width": 64, "depth": 3,
              "per_node_rnn": False, "init_seed": 0},
    "flow": {"integrator": "rk4", "steps": 64, "divergence": "autodiff",
             "fd_step": 1e-4},
    "train": {"sigma_min": 0.0, "batch_size": 128, "epochs": 10,
              "learning_rate": 1e-3, "beta1": 0.9, "beta2": 0.999,
              "eps": 1e-8, "s_samples_per_point": 1},
    "eval": {"batch": 32, "realizations": 20, "runs": 10,
             "intervention_offset": 30, "flow_steps": 32},
    "seeds": {"data": 1, "train": 2, "eval": 3},
}


def _check_section(name: str, data: dict, schema: dict) -> dict:
    out = {}
    for key, value in data.items():
        if key not in schema:
            raise InvalidConfigError(f"unknown key {name}.{key}")
        want = schema[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if want is int and isinstance(value, bool):
            raise InvalidConfigError(f"{name}.{key} must be an integer")
        if not isinstance(value, want):
            raise InvalidConfigError(
                f"{name}.{key} must be {want.__name__}, got {type(value).__name__}"
            )
        out[key] = value
    return out


def validate_config(raw: dict) -> dict:
    """Merge over defaults, rejecting unknown keys and wrong types."""
    if not isinstance(raw, dict):
        raise InvalidConfigError("config root must be a JSON object")
    cfg = copy.deepcopy(_DEFAULTS)
    for section, data in raw.items():
        if section not in _SCHEMA:
            raise InvalidConfigError(f"unknown section {section!r}")
        if not isinstance(data, dict):
            raise InvalidConfigError(f"section {section!r} must be an object")
        cfg[section].update(_check_section(section, data, _SCHEMA[section]))

    window = cfg["window"]
    if not 0 < window["context"] < window["total"]:
        raise InvalidConfigError("window.context must lie in (0, window.total)")
    if cfg["synth"]["length"] < window["total"]:
        raise InvalidConfigError("synth.length shorter than one window")
    if not 0.0 < cfg["synth"]["train_frac"] < 1.0:
        raise InvalidConfigError("synth.train_frac must be in (0, 1)")
    try:
        Family(cfg["scm"]["family"])
        Mechanism(cfg["scm"]["mechanism"])
    except ValueError as exc:
        raise InvalidConfigError(str(exc)) from exc
    try:
        config_flow(cfg)
        config_train(cfg)
    except ValueError as exc:
        raise InvalidConfigError(str(exc)) from exc
    edges = cfg["dag"]["edges"]
    if not all(isinstance(e, list) and len(e) == 2 and
               all(isinstance(v, int) for v in e) for e in edges):
        raise InvalidConfigError("dag.edges must be [parent, child] pairs")
    config_dag(cfg)
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
    return validate_config(raw)


def config_dag(cfg: dict) -> CausalDag:
    return build_dag(cfg["dag"]["nodes"],
                     [tuple(e) for e in cfg["dag"]["edges"]])


def config_scm(cfg: dict) -> ScmSpec:
    scm = cfg["scm"]
    return draw_spec(
        Family(scm["family"]), Mechanism(scm["mechanism"]),
        seed=scm["coeff_seed"], dag=config_dag(cfg),
        root_amp=scm["root_amp"], root_period=scm["root_period"],
    )


def config_flow(cfg: dict, steps: int | None = None) -> FlowConfig:
    f = cfg["flow"]
    return FlowConfig(
        integrator=f["integrator"],
        steps=steps if steps is not None else f["steps"],
        divergence=f["divergence"], fd_step=f["fd_step"],
    )


def config_train(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        sigma_min=t["sigma_min"], batch_size=t["batch_size"],
        epochs=t["epochs"], learning_rate=t["learning_rate"],
        beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"],
        seed=cfg["seeds"]["train"],
        s_samples_per_point=t["s_samples_per_point"],
    )


def config_model(cfg: dict) -> ForecastModel:
    m = cfg["model"]
    return init_model(
        config_dag(cfg), hidden_dim=m["hidden_dim"], width=m["width"],
        depth=m["depth"], flow=config_flow(cfg), seed=m["init_seed"],
        per_node_rnn=m["per_node_rnn"],
    )


def canonical_family_config(family: str) -> dict:
    """Config skeleton whose DAG is the canonical graph of the family."""
    dag = family_dag(Family(family))
    raw = {
        "dag": {"nodes": dag.node_count,
                "edges": [list(e) for e in dag.edges]},
        "scm": {"family": family},
    }
    return validate_config(raw)
