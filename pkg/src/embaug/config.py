"""Run configuration: YAML loading with strict unknown-key rejection.

The config file is a nested mapping with the sections below; every key
has a default, unknown sections or keys are errors so a typo cannot
silently change an experiment.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .losses import LossConfig
from .trainer import TrainConfig

DEFAULTS: dict = {
    "dataset": {
        "kind": "blobs",            # blobs | csv
        "classes": 10,
        "per_class": 50,
        "input_dim": 32,
        "center_scale": 1.0,
        "noise_sigma": 0.1,
        "seed": 0,
        "path": None,               # csv feature file (kind: csv)
        "test_path": None,          # optional separate test csv
        "split_fraction": 0.5,      # class-disjoint split; null disables
        "split_seed": 0,
    },
    "model": {
        "arch": "linear",
        "hidden_width": 64,
        "activation": "tanh",
        "embed_dim": 16,
        "normalize_output": True,
    },
    "loss": {
        "kind": "hphn_triplet",
        "margin": 1.0,
        "ms_alpha": 2.0,
        "ms_beta": 50.0,
        "ms_lambda": 1.0,
        "ms_eps": 0.1,
        "npair_reg_coeff": 0.005,
        "triplet_inner": "mean",
        "expansion": {
            "enabled": False,
            "n": 2,
            "normalize": True,
            "rule": "equal_parts",
        },
    },
    "train": {
        "optimizer": "adam",
        "lr": 1e-4,
        "momentum": 0.9,
        "epochs": 10,
        "p_classes": 8,
        "k_samples": 4,
        "seed": 0,
        "eval_every": 1,
        "record_label_certainty": True,
    },
    "eval": {
        "recall_ks": [1, 2, 4, 8],
        "kmeans_seed": 0,
        "kmeans_max_iters": 100,
        "heatmap_pairs_per_class": 1,
        "robustness_combine": 2,
        "robustness_trials": 200,
    },
    "ablate": {
        "n_values": [2, 4, 8, 16, 32],
        "normalize": [True, False],
        "losses": ["hphn_triplet"],
        "seeds": [0, 1, 2],
    },
    "bench": {
        "batch_sizes": [128],
        "n_values": [0, 2, 4, 8, 16, 32],
        "repeats": 10,
        "dim": 64,
    },
    "expand": {
        "n": 2,
        "normalize": True,
        "rule": "equal_parts",
        "normalize_inputs": False,
    },
    "output": {
        "plots": True,
    },
}


@dataclass
class RunConfig:
    """Validated configuration tree with all defaults filled in."""

    tree: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, section: str) -> dict:
        return self.tree[section]

    def loss_config(self) -> LossConfig:
        spec = copy.deepcopy(self.tree["loss"])
        return LossConfig(**spec)

    def train_config(self) -> TrainConfig:
        t = self.tree["train"]
        m = self.tree["model"]
        e = self.tree["eval"]
        return TrainConfig(
            loss=self.loss_config(),
            optimizer=t["optimizer"],
            lr=t["lr"],
            momentum=t["momentum"],
            epochs=t["epochs"],
            p_classes=t["p_classes"],
            k_samples=t["k_samples"],
            seed=t["seed"],
            eval_every=t["eval_every"],
            arch=m["arch"],
            hidden_width=m["hidden_width"],
            activation=m["activation"],
            embed_dim=m["embed_dim"],
            normalize_output=m["normalize_output"],
            record_label_certainty=t["record_label_certainty"],
            recall_ks=tuple(e["recall_ks"]),
            kmeans_seed=e["kmeans_seed"],
            kmeans_max_iters=e["kmeans_max_iters"],
        )

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True)


def _merge(defaults: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        here = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict) and not isinstance(defaults[key], type(None)):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a mapping")
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> RunConfig:
    """Load and validate a YAML config; None gives pure defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root of {path} must be a mapping")
    tree = _merge(DEFAULTS, raw, "")
    _validate(tree)
    return RunConfig(tree)


def _validate(tree: dict) -> None:
    ds = tree["dataset"]
    if ds["kind"] not in ("blobs", "csv"):
        raise ConfigError(f"dataset.kind must be 'blobs' or 'csv', got {ds['kind']!r}")
    if ds["kind"] == "csv" and not ds["path"]:
        raise ConfigError("dataset.kind is 'csv' but dataset.path is not set")
    frac = ds["split_fraction"]
    if frac is not None and not (0.0 < float(frac) < 1.0):
        raise ConfigError("dataset.split_fraction must be in (0, 1) or null")
    try:
        RunConfig(tree).train_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
