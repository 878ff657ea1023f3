"""Experiment configuration: a versioned JSON document.

Noise bounds may be written as numbers or as ``"a/255"`` strings. Any
purification field given as a list is expanded into a grid (cartesian
product). See ``DEFAULTS`` for the full schema; ``load_config`` deep-merges
a file over the defaults and validates the result.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import replace
from fractions import Fraction
from itertools import product
from pathlib import Path

from .data import DEFAULT_MIX
from .purify import PurifyConfig

CONFIG_VERSION = 1
OUTPUT_ROOT_ENV = "F3LAB_OUTPUT_ROOT"

DEFAULTS = {
    "version": CONFIG_VERSION,
    "name": "experiment",
    "seed": 0,
    "workers": 1,
    "chunk_size": 25,
    "output_dir": "runs/experiment",
    "data": {
        "train": {"n": 2000, "seed": 0, "mix": list(DEFAULT_MIX)},
        "eval": {"n": 200, "seed": 0, "mix": list(DEFAULT_MIX)},
    },
    "model": {
        "checkpoint": None,
        "config": {},
        "train": {"epochs": 60, "learning_rate": 0.03, "momentum": 0.9,
                  "noise": "32/255", "batch_size": 32, "seed": 1},
    },
    "attack": {"method": "pgd", "steps": 20, "step_size": "2/255", "eps_inf": "8/255",
               "c": 0.005, "seed": 0},
    "purify": [],
    "clean_impact": None,
    "multistep": None,
    "adaptive": None,
    "heatmaps": {"samples": [0], "conditions": ["clean", "adversarial"]},
}

# Keys that never influence results and are left out of the config hash.
_RUNTIME_KEYS = ("workers", "output_dir")
_PURIFY_FIELDS = ("variant", "alpha_inf", "beta_inf", "gamma_inf", "K", "eps_inf_total",
                  "distance")
_BOUND_KEYS = {"alpha_inf", "beta_inf", "gamma_inf", "eps_inf_total", "step_size",
               "eps_inf", "noise", "beta_step"}


class ConfigError(ValueError):
    pass


def parse_value(v):
    """Numbers pass through; ``"a/b"`` strings become floats."""
    if isinstance(v, str):
        try:
            return float(Fraction(v.strip()))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"cannot parse numeric value {v!r}") from None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}")
    return v


def _parse_bounds(obj):
    if isinstance(obj, dict):
        return {k: (_parse_list(v) if k in _BOUND_KEYS else _parse_bounds(v))
                for k, v in obj.items()}
    if isinstance(obj, list):
        return [_parse_bounds(v) for v in obj]
    return obj


def _parse_list(v):
    return [parse_value(x) for x in v] if isinstance(v, list) else parse_value(v)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg, assignment):
    """Apply ``dotted.key=json_value``; the value is parsed as JSON when it can be."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if isinstance(node, list):
            node = node[int(p)]
        else:
            node = node.setdefault(p, {})
            if node is None:
                raise ConfigError(f"cannot override inside null section {p!r}")
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
    return cfg


def make_config(raw=None, overrides=()):
    raw = copy.deepcopy(raw or {})
    version = raw.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
    cfg = _merge(DEFAULTS, raw)
    for o in overrides:
        apply_override(cfg, o)
    cfg = _parse_bounds(cfg)
    validate(cfg)
    return cfg


def load_config(path, overrides=()):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if "version" not in raw:
        raise ConfigError(f"{path}: missing 'version' field")
    return make_config(raw, overrides)


def validate(cfg):
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if cfg["workers"] < 1 or cfg["chunk_size"] < 1:
        raise ConfigError("workers and chunk_size must be >= 1")
    for split in ("train", "eval"):
        if cfg["data"][split]["n"] < 1:
            raise ConfigError(f"data.{split}.n must be >= 1")
    if not isinstance(cfg["purify"], list):
        raise ConfigError("purify must be a list of grid entries")
    try:
        expand_grid(cfg["purify"])
        for section in ("clean_impact", "adaptive"):
            if cfg[section] is not None:
                expand_grid([cfg[section]["purify"]])
        if cfg["multistep"] is not None:
            multistep_configs(cfg["multistep"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad purification settings: {exc}") from None


def expand_grid(entries):
    """Expand grid entries into ``[(PurifyConfig, seeds)]``, one per distinct
    condition label, in first-seen order. Seeds of repeated labels are merged."""
    found = {}
    for entry in entries:
        entry = dict(entry)
        seeds = entry.pop("seeds", [0])
        unknown = set(entry) - set(_PURIFY_FIELDS)
        if unknown:
            raise ValueError(f"unknown purify fields {sorted(unknown)}")
        keys = [k for k in _PURIFY_FIELDS if k in entry]
        values = [entry[k] if isinstance(entry[k], list) else [entry[k]] for k in keys]
        for combo in product(*values):
            pc = PurifyConfig(**dict(zip(keys, combo)))
            label = pc.label()
            if label in found:
                found[label] = (found[label][0], sorted(set(found[label][1]) | set(seeds)))
            else:
                found[label] = (pc, sorted(set(seeds)))
    return list(found.values())


def multistep_configs(ms):
    """The K-step purifier and the single-step template used for l1 matching."""
    multi = PurifyConfig(variant="v3_multistep", alpha_inf=ms["alpha_inf"],
                         beta_inf=ms["beta_step"], K=int(ms["K"]),
                         eps_inf_total=ms["eps_inf_total"], distance=ms.get("distance", "mse"))
    single = replace(multi, variant="v3", K=1, beta_inf=ms["eps_inf_total"])
    return multi, single


def provenance_view(cfg):
    return {k: v for k, v in cfg.items() if k not in _RUNTIME_KEYS}


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return hashlib.sha256(canonical_json(provenance_view(cfg)).encode()).hexdigest()


def resolve_output_dir(cfg):
    out = Path(cfg["output_dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out
