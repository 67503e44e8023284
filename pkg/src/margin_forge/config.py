"""Experiment configuration: JSON schema, defaults, overrides, validation.

A config file is a JSON object with the sections below. Every field has a
default (the desk-scale calibration the test suite runs), missing sections
inherit it wholesale, and the fully materialized result is what lands in the
run manifest -- "what ran" is never ambiguous. ``--set key.path=value``
overrides are applied after the file, direct flags (``--seed``, ``--out``,
``--workers``) after those.
"""

from __future__ import annotations

import copy
import json

import numpy as np

from . import datagen, model

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "ExperimentConfig",
    "default_config_json",
    "load_config",
    "parse_override",
    "resolve_config",
]


class ConfigError(ValueError):
    """A config failed validation; ``path`` is the dotted key at fault."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


DEFAULTS = {
    "base_seed": 99,
    "scenario": "white",
    "output_dir": "runs/default",
    "workers": 1,
    "data": {
        "class_count": 3,
        "dim": 2,
        "samples_per_class": 40,
        "means": "circle",
        "circle_radius": 4.0,
        "covariance_scale": 0.5,
    },
    "victim": {
        "hidden": [16],
        "feature_dim": 8,
        "epochs": 150,
        "batch_size": 12,
        "learning_rate": 0.07,
        "weight_decay": 0.0,
    },
    "trigger": {
        "alpha": 0.85,
        "delta": 2.25,
        "steps": 1500,
        "batch_size": 0,
        "objective": "symmetric",
    },
    "attack": {
        "mode": "dirty",
        "source": "uniform",
        "target_class": "auto",
        "pair": "auto",
        "epsilon": None,
        "k": 8,
        "k_values": [0, 1, 2, 4, 8],
        "trials": 5,
        "margin_threshold": 0.5,
    },
}


def _merge(base, incoming, path=""):
    """Overlay ``incoming`` onto ``base`` in place, rejecting unknown keys."""
    for key, value in incoming.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(here, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(here, "expected an object")
            _merge(base[key], value, here)
        else:
            base[key] = value


def parse_override(text):
    """Split a ``key.path=value`` override; the value parses as JSON when it
    can and stays a raw string otherwise."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError("", f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _apply_override(resolved, key, value):
    parts = key.split(".")
    node = resolved
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(".".join(parts[: i + 1]), "unknown key")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(key, "unknown key")
    if isinstance(node[leaf], dict):
        raise ConfigError(key, "cannot replace a whole section via --set")
    node[leaf] = value


def _get(resolved, path):
    node = resolved
    for part in path.split("."):
        node = node[part]
    return node


def _set(resolved, path, value):
    parts = path.split(".")
    node = resolved
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def _as_int(resolved, path, minimum=None):
    v = _get(resolved, path)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(path, f"expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {v}")
    return v


def _as_float(resolved, path, minimum=None, open_min=False, maximum=None):
    v = _get(resolved, path)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    v = float(v)
    if not np.isfinite(v):
        raise ConfigError(path, f"must be finite, got {v!r}")
    if minimum is not None and (v <= minimum if open_min else v < minimum):
        op = ">" if open_min else ">="
        raise ConfigError(path, f"must be {op} {minimum}, got {v}")
    if maximum is not None and v > maximum:
        raise ConfigError(path, f"must be <= {maximum}, got {v}")
    _set(resolved, path, v)
    return v


def _as_choice(resolved, path, choices):
    v = _get(resolved, path)
    if v not in choices:
        raise ConfigError(path, f"must be one of {sorted(choices)}, got {v!r}")
    return v


def _as_str(resolved, path):
    v = _get(resolved, path)
    if not isinstance(v, str) or not v:
        raise ConfigError(path, f"expected a non-empty string, got {v!r}")
    return v


def _as_int_list(resolved, path, minimum=0, allow_empty=False):
    v = _get(resolved, path)
    if not isinstance(v, (list, tuple)):
        raise ConfigError(path, f"expected a list, got {v!r}")
    out = []
    for i, item in enumerate(v):
        if isinstance(item, bool) or not isinstance(item, int):
            raise ConfigError(f"{path}[{i}]", f"expected an integer, got {item!r}")
        if item < minimum:
            raise ConfigError(f"{path}[{i}]", f"must be >= {minimum}, got {item}")
        out.append(item)
    if not out and not allow_empty:
        raise ConfigError(path, "must be non-empty")
    _set(resolved, path, out)
    return out


def _validate(resolved):
    _as_int(resolved, "base_seed", minimum=0)
    _as_choice(resolved, "scenario", {"white", "gray", "black"})
    _as_str(resolved, "output_dir")
    _as_int(resolved, "workers", minimum=1)

    class_count = _as_int(resolved, "data.class_count", minimum=2)
    dim = _as_int(resolved, "data.dim", minimum=1)
    _as_int(resolved, "data.samples_per_class", minimum=2)
    _as_float(resolved, "data.covariance_scale", minimum=0.0, open_min=True)
    radius = _as_float(resolved, "data.circle_radius", minimum=0.0, open_min=True)
    means = _get(resolved, "data.means")
    if means == "circle":
        means = datagen.circle_means(class_count, radius, dim).tolist()
    elif isinstance(means, (list, tuple)):
        arr = np.asarray(means, dtype=object)
        try:
            arr = arr.astype(float)
        except (TypeError, ValueError):
            raise ConfigError("data.means", "entries must all be numbers") from None
        if arr.ndim != 2 or arr.shape != (class_count, dim):
            raise ConfigError(
                "data.means",
                f"expected shape ({class_count}, {dim}), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ConfigError("data.means", "entries must be finite")
        means = arr.tolist()
    else:
        raise ConfigError("data.means",
                          f"expected 'circle' or a matrix, got {means!r}")
    _set(resolved, "data.means", means)

    hidden = _get(resolved, "victim.hidden")
    if not isinstance(hidden, (list, tuple)):
        raise ConfigError("victim.hidden", f"expected a list, got {hidden!r}")
    _as_int_list(resolved, "victim.hidden", minimum=1, allow_empty=True)
    fd = _get(resolved, "victim.feature_dim")
    if fd is not None:
        _as_int(resolved, "victim.feature_dim", minimum=1)
    _as_int(resolved, "victim.epochs", minimum=1)
    _as_int(resolved, "victim.batch_size", minimum=1)
    _as_float(resolved, "victim.learning_rate", minimum=0.0, open_min=True)
    _as_float(resolved, "victim.weight_decay", minimum=0.0)

    _as_float(resolved, "trigger.alpha", minimum=0.0, open_min=True, maximum=1.0)
    _as_float(resolved, "trigger.delta", minimum=0.0, open_min=True)
    _as_int(resolved, "trigger.steps", minimum=1)
    _as_int(resolved, "trigger.batch_size", minimum=0)
    _as_choice(resolved, "trigger.objective",
               {"symmetric", "pairwise_squared", "pairwise"})

    _as_choice(resolved, "attack.mode", {"dirty", "clean"})
    _as_choice(resolved, "attack.source", {"band", "uniform"})
    target = _get(resolved, "attack.target_class")
    if target != "auto":
        if _as_int(resolved, "attack.target_class", minimum=0) >= class_count:
            raise ConfigError("attack.target_class",
                              f"must be < class_count={class_count}")
    pair = _get(resolved, "attack.pair")
    if pair != "auto":
        pair = _as_int_list(resolved, "attack.pair", minimum=0)
        if len(pair) != 2 or pair[0] == pair[1]:
            raise ConfigError("attack.pair", "must name two distinct classes")
        if max(pair) >= class_count:
            raise ConfigError("attack.pair", f"must be < class_count={class_count}")
    eps = _get(resolved, "attack.epsilon")
    if eps is not None:
        _as_float(resolved, "attack.epsilon", minimum=0.0)
    _as_int(resolved, "attack.k", minimum=0)
    _as_int_list(resolved, "attack.k_values", minimum=0)
    _as_int(resolved, "attack.trials", minimum=1)
    _as_float(resolved, "attack.margin_threshold", minimum=0.0, open_min=True)


class ExperimentConfig:
    """A validated, fully materialized experiment description."""

    def __init__(self, resolved):
        self.resolved = resolved

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.resolved == other.resolved

    @property
    def base_seed(self):
        return self.resolved["base_seed"]

    @property
    def scenario(self):
        return self.resolved["scenario"]

    @property
    def output_dir(self):
        return self.resolved["output_dir"]

    @property
    def workers(self):
        return self.resolved["workers"]

    def mixture(self, seed):
        d = self.resolved["data"]
        return datagen.MixtureConfig(
            class_count=d["class_count"], dim=d["dim"],
            samples_per_class=d["samples_per_class"],
            means=np.asarray(d["means"], dtype=np.float64),
            covariance_scale=d["covariance_scale"], seed=seed)

    def arch(self):
        v = self.resolved["victim"]
        return model.ArchSpec(input_dim=self.resolved["data"]["dim"],
                              class_count=self.resolved["data"]["class_count"],
                              hidden=tuple(v["hidden"]),
                              feature_dim=v["feature_dim"])

    def train(self, seed=0):
        v = self.resolved["victim"]
        return model.TrainConfig(epochs=v["epochs"], batch_size=v["batch_size"],
                                 learning_rate=v["learning_rate"], seed=seed,
                                 weight_decay=v["weight_decay"])

    def trigger_kwargs(self):
        t = self.resolved["trigger"]
        return {"steps": t["steps"], "batch_size": t["batch_size"] or None,
                "alpha": t["alpha"], "delta": t["delta"],
                "objective": t["objective"]}

    @property
    def attack(self):
        return self.resolved["attack"]

    def to_json(self):
        return json.dumps(self.resolved, sort_keys=True, indent=2) + "\n"


def resolve_config(raw=None, overrides=(), seed=None, out=None, workers=None):
    """Defaults <- file dict <- --set overrides <- direct flags, then validate."""
    resolved = copy.deepcopy(DEFAULTS)
    if raw is not None:
        if not isinstance(raw, dict):
            raise ConfigError("", "top level must be a JSON object")
        _merge(resolved, raw)
    for text in overrides:
        key, value = parse_override(text)
        _apply_override(resolved, key, value)
    if seed is not None:
        resolved["base_seed"] = seed
    if out is not None:
        resolved["output_dir"] = str(out)
    if workers is not None:
        resolved["workers"] = workers
    _validate(resolved)
    return ExperimentConfig(resolved)


def load_config(path, overrides=(), seed=None, out=None, workers=None):
    """Read a JSON config file and resolve it; parse errors carry the file name."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("", f"config file {path!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return resolve_config(raw, overrides=overrides, seed=seed, out=out,
                          workers=workers)


def default_config_json():
    """The fully materialized default config (what runs when no file is given)."""
    return resolve_config().to_json()
