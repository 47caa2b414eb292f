"""Experiment configuration: schema, defaults, loading, materialization.

A config is a nested key-value document. Every field has a default below;
unknown keys are rejected with their dotted path, so typos fail loudly
instead of silently training the wrong thing. The materialized document is
snapshotted into each run directory, which together with the seed makes a
run reproducible from its artifacts alone.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

import yaml

from .data import DatasetSuite, generate_dense_suite, generate_domain_suite
from .errors import ConfigurationError
from .losses import DistillationConfig, TermWeights
from .trainer import RunConfig

DEFAULTS = {
    "seed": 0,
    "suite": {
        "kind": "dense",  # dense | domains
        "n_images": 1200,
        "hw": 32,
        "n_domains": 4,
        "n_classes": 10,
        "n_per_class": 20,
    },
    "run": {
        "iterations": 900,
        "teacher_iterations": 700,
        "batch_size": 16,
        "channels": 32,
        "main_lr": 1e-3,
        "main_optimizer": "adam",
        "weight_decay": 0.0,
        "adapter_lr": 0.01,
        "adapter_weight_decay": 1e-4,
        "adapter": "linear",
        "balancer": "uniform",
        "anchor": None,
        "anchor_share": 0.5,
    },
    "distill": {
        "preset": "auto",  # auto | vanilla
        "feature_loss": None,  # None = preset choice
        "prediction_loss": None,
        "bandwidth_frac": 0.5,
        "task_weight": 1.0,
        "feature_weight": None,  # None = preset weights; float = uniform override
        "prediction_weight": None,
        "anchor_weight": 4.0,
        "anneal_horizon": 0,  # 0 = no annealing
    },
    "groups": {
        "n_groups": 2,
        "anchor": None,
    },
    "eval": {
        "split": "test",
        "ways": 5,
        "shots": 5,
        "query_per_class": 10,
        "episodes": 100,
        "adapt_steps": 40,
        "adapt_lr": 0.1,
        "adapt_optimizer": "adadelta",
        "temperature": 1.0,
        "recall_ks": [1, 2, 4, 8],
        "fewshot_domains": None,  # None = the withheld domain
    },
}

# fields whose default is None still carry a fixed expected type
_OPTIONAL_TYPES = {
    "run.anchor": str,
    "groups.anchor": str,
    "distill.feature_loss": str,
    "distill.prediction_loss": str,
    "distill.feature_weight": float,
    "distill.prediction_weight": float,
    "eval.fewshot_domains": list,
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _check(node, defaults, path: str):
    for key, value in node.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigurationError(f"unknown config key: {here}")
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {here} must be a mapping")
            _check(value, default, here)
            continue
        if value is None:
            if default is None or here in _OPTIONAL_TYPES:
                continue
            raise ConfigurationError(f"config key {here} must not be null")
        expected = _OPTIONAL_TYPES.get(here, type(default)) if default is not None else _OPTIONAL_TYPES.get(here)
        if expected is None:
            continue
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            continue
        if not isinstance(value, expected) or isinstance(value, bool) and expected is not bool:
            raise ConfigurationError(
                f"config key {here} expects {expected.__name__}, got {type(value).__name__}"
            )


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides=None) -> dict:
    """Read YAML/JSON, validate against the schema, fill defaults."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        text = p.read_text()
        if p.suffix == ".json":
            doc = json.loads(text)
        else:
            doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ConfigurationError(f"config root must be a mapping: {p}")
    _check(doc, DEFAULTS, "")
    cfg = _merge(DEFAULTS, doc)
    if overrides:
        _check(overrides, DEFAULTS, "")
        cfg = _merge(cfg, overrides)
    return cfg


def snapshot(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return path


def build_suite(cfg: dict) -> DatasetSuite:
    s = cfg["suite"]
    if s["kind"] == "dense":
        return generate_dense_suite(cfg["seed"], s["n_images"], s["hw"])
    if s["kind"] == "domains":
        return generate_domain_suite(
            cfg["seed"], s["n_domains"], s["n_classes"], s["n_per_class"], hw=s["hw"]
        )
    raise ConfigurationError(f"unknown suite kind: {s['kind']!r}")


def build_distill(cfg: dict, suite: DatasetSuite) -> DistillationConfig:
    d = cfg["distill"]
    anchor = cfg["run"]["anchor"]
    if d["preset"] == "vanilla":
        weights = {t.id: TermWeights(task=d["task_weight"]) for t in suite.tasks}
        dc = DistillationConfig(weights=weights)
    elif d["preset"] == "auto":
        if suite.mode == "mtl":
            dc = DistillationConfig.dense_preset(suite.tasks)
        else:
            dc = DistillationConfig.domain_preset(
                suite.tasks,
                anchor=anchor,
                anchor_weight=d["anchor_weight"],
                anneal_horizon=d["anneal_horizon"] or None,
            )
        for w in dc.weights.values():
            w.task = d["task_weight"]
    else:
        raise ConfigurationError(f"unknown distill preset: {d['preset']!r}")

    if d["feature_loss"] is not None:
        dc.feature_loss = d["feature_loss"]
    if d["prediction_loss"] is not None:
        dc.prediction_loss = d["prediction_loss"]
    dc.bandwidth_frac = d["bandwidth_frac"]
    if d["feature_weight"] is not None:
        for w in dc.weights.values():
            w.feature = float(d["feature_weight"])
            w.feature_anneal = None
    if d["prediction_weight"] is not None:
        for w in dc.weights.values():
            w.prediction = float(d["prediction_weight"])
            w.prediction_anneal = None
    return DistillationConfig(
        weights=dc.weights,
        feature_loss=dc.feature_loss,
        prediction_loss=dc.prediction_loss,
        bandwidth_frac=dc.bandwidth_frac,
    )


def build_run_config(cfg: dict, suite: DatasetSuite, out_dir=None) -> RunConfig:
    r = cfg["run"]
    return RunConfig(
        suite=suite,
        iterations=r["iterations"],
        seed=cfg["seed"],
        batch_size=r["batch_size"],
        channels=r["channels"],
        main_lr=r["main_lr"],
        main_optimizer=r["main_optimizer"],
        weight_decay=r["weight_decay"],
        adapter_lr=r["adapter_lr"],
        adapter_weight_decay=r["adapter_weight_decay"],
        adapter_kind=r["adapter"],
        balancer=r["balancer"],
        distill=build_distill(cfg, suite),
        teacher_iterations=r["teacher_iterations"],
        anchor=r["anchor"],
        anchor_share=r["anchor_share"],
        out_dir=out_dir,
    )
