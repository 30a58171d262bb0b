"""
Layered run configuration: built-in defaults < YAML file < command line.

A configuration file is divided into sections (``model``, ``tasks``,
``finetune``, ``merge``, ``sweep``, ``report``) plus a top-level ``seed``::

    seed: 3
    merge:
        method: divergence_guided
        level: layer
        divergence: js
"""

import copy
import logging
import os

import yaml

from .errors import ContractViolation

logger = logging.getLogger(__name__)

THREADS_ENV = "MERGEFORGE_THREADS"
RUN_CONFIG = "run_config.yaml"

DEFAULTS = {
    "seed": 0,
    "model": {
        "d_model": 64,
        "n_layers": 2,
        "n_heads": 4,
        "max_seq_len": 64,
    },
    "tasks": {
        "n_train": 200,
        "n_validation": None,
        "n_test": None,
        "disjoint": False,
        "n_disjoint": 2,
        "classification": None,
        "generation": None,
    },
    "finetune": {
        "learning_rate": 3e-4,
        "batch_size": 16,
        "epochs": 40,
    },
    "merge": {
        "method": "divergence_guided",
        "level": "task",
        "divergence": "js",
        "track": "classification",
        "budget": None,
        "learning_rate": None,
        "epochs": None,
        "init": None,
        "batch_per_task": 4,
        "mask_rate": 0.2,
        "ties_lambda": 1.0,
        "slerp_t": 0.5,
        "scale": 1.0,
        "max_new_tokens": 32,
    },
    "sweep": {
        "methods": ["average", "divergence_guided"],
        "k_min": 2,
        "k_max": None,
    },
    "report": {
        "curve": "iterations",
        "sizes": [25, 50, 100, 200],
        "every": 1,
    },
}


def _merge_layer(base, layer, origin):
    for key, value in layer.items():
        if key not in base:
            raise ContractViolation("unknown configuration key {!r} in {}".format(key, origin))
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ContractViolation("configuration section {!r} must be a mapping".format(key))
            _merge_layer(base[key], value, origin)
        else:
            base[key] = value


class RunConfig:
    """Resolved configuration of one command."""

    def __init__(self, values=None):
        self.values = copy.deepcopy(DEFAULTS) if values is None else values

    @classmethod
    def resolve(cls, path=None, overrides=None):
        config = cls()
        if path is not None:
            config.update(load_yaml(path), path)
        if overrides:
            config.update(overrides, "command line")
        return config

    def update(self, layer, origin="overrides"):
        # flags that were not given arrive as None and must not mask the file
        cleaned = {}
        for key, value in layer.items():
            if isinstance(value, dict):
                value = {k: v for k, v in value.items() if v is not None}
                if not value:
                    continue
            elif value is None:
                continue
            cleaned[key] = value
        _merge_layer(self.values, cleaned, origin)
        return self

    def __getitem__(self, section):
        return self.values[section]

    @property
    def seed(self):
        return int(self.values["seed"])

    def write(self, directory, command=None):
        os.makedirs(directory, exist_ok=True)
        document = dict(self.values)
        if command is not None:
            document = {"command": command, **document}
        path = os.path.join(directory, RUN_CONFIG)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(document, f, default_flow_style=False, sort_keys=True)
        return path


def load_yaml(path):
    if not os.path.isfile(path):
        raise FileNotFoundError("configuration file not found: {}".format(path))
    with open(path, encoding="utf-8") as f:
        document = yaml.safe_load(f) or {}
    if not isinstance(document, dict):
        raise ContractViolation("configuration file {} must hold a mapping".format(path))
    return document


def thread_count():
    """Worker cap from MERGEFORGE_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        threads = int(raw)
    except ValueError:
        raise ContractViolation("{} must be a positive integer, got {!r}".format(THREADS_ENV, raw))
    if threads < 1:
        raise ContractViolation("{} must be a positive integer, got {!r}".format(THREADS_ENV, raw))
    return threads
