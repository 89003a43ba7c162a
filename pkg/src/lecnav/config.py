"""Experiment configuration: JSON schema, loading, hashing and scenario
construction."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from . import scenarios
from .channel import LinkBudget, synth_map
from .ec import TrainConfig
from .env import T_MAX, ConfigError, GridWorld, Scenario
from .lec import KdConfig

_CELL = {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2}
_POS = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["world", "link"],
    "properties": {
        "scheme": {"enum": ["ec", "lec", "teacher-gen", "eval", "gen-map"]},
        "world": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "map": {"type": "string"},
                "preset": {"enum": ["desk", "grid20"]},
                "synth": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["width", "height", "bs"],
                    "properties": {
                        "width": {"type": "integer", "minimum": 1},
                        "height": {"type": "integer", "minimum": 1},
                        "bs": _CELL,
                        "buildings": {"type": "array", "items": _CELL},
                        "pathloss_exponent": _POS,
                        "shadowing_std_db": {"type": "number", "minimum": 0},
                        "seed": {"type": "integer"},
                        "k0": _POS,
                        "blockage": _POS,
                    },
                },
            },
            "oneOf": [{"required": ["map"]}, {"required": ["preset"]}, {"required": ["synth"]}],
        },
        "link": {
            "type": "object",
            "additionalProperties": False,
            "required": ["p_th"],
            "properties": {
                "p_r": _POS,
                "sigma2": {"type": "number", "minimum": 0},
                "p_th": _POS,
                "snr_db": {"type": "number"},
            },
            "oneOf": [{"required": ["p_r", "sigma2"]}, {"required": ["snr_db"]}],
        },
        "ues": {
            "type": "object",
            "additionalProperties": False,
            "required": ["starts", "dests"],
            "properties": {"starts": {"type": "array", "items": _CELL, "minItems": 1},
                           "dests": {"type": "array", "items": _CELL, "minItems": 1}},
        },
        "t_max": {"type": "integer", "minimum": 1},
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "episodes": {"type": "integer", "minimum": 0},
                "lr": _POS,
                "gamma": {"type": "number", "minimum": 0, "maximum": 1},
                "eps0": {"type": "number", "minimum": 0, "maximum": 1},
                "eps_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "msg_len": {"type": "integer", "minimum": 1},
                "target_sync_interval": {"type": "integer", "minimum": 1},
                "batch_episodes": {"type": "integer", "minimum": 1},
                "hidden_dim": {"type": "integer", "minimum": 1},
                "enc_width": {"type": "integer", "minimum": 1},
                "bs_hidden": {"type": "integer", "minimum": 1},
                "use_dest_delta": {"type": "boolean"},
                "train_noise": {"type": "boolean"},
            },
        },
        "kd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda": {"type": "number", "minimum": 0},
                "smoothing_eps": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.125},
                "bonus": {"type": "number"},
            },
        },
        "teacher": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["planner", "llm"]},
                "n": {"type": "integer", "minimum": 1},
                "l": {"type": "integer", "minimum": 1},
                "temperature": {"type": "number", "minimum": 0},
                "endpoint": {"type": "string"},
                "k": {"type": "integer", "minimum": 0},
                "shots_file": {"type": "string"},
                "snr_db": {"type": "number"},
                "max_tokens": {"type": "integer", "minimum": 1},
                "timeout": _POS,
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "episodes": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "top_k": {"type": "integer", "minimum": 1},
                "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "poly_order": {"type": "integer", "minimum": 0},
                "window": {"type": "integer", "minimum": 1},
            },
        },
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "out": {"type": "string"},
    },
}

TEACHER_DEFAULTS = {"source": "planner", "n": 50, "l": 5, "temperature": 0.2, "k": 0,
                    "snr_db": 20.0, "max_tokens": 256, "timeout": 60.0}
EVAL_DEFAULTS = {"episodes": 20, "seed": 12345, "top_k": 8, "fraction": 0.8, "poly_order": 3}


def validate(cfg):
    """Raise ConfigError naming the offending field."""
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.path) or "<root>"
        msg = e.message
        if e.validator == "oneOf":
            options = [" + ".join(o.get("required", [])) for o in e.validator_value]
            msg = "give exactly one of: " + "; ".join(options)
        raise ConfigError(f"config field {where}: {msg}")
    ues = cfg.get("ues")
    if ues and len(ues["starts"]) != len(ues["dests"]):
        raise ConfigError("config field ues: starts and dests differ in length")
    if "ues" not in cfg and "preset" not in cfg["world"]:
        raise ConfigError("config field ues: required unless world.preset is used")


def load(path):
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    validate(cfg)
    if "map" in cfg["world"]:
        # resolve relative map paths against the config file
        p = Path(cfg["world"]["map"])
        if not p.is_absolute():
            cfg = copy.deepcopy(cfg)
            cfg["world"]["map"] = str((path.parent / p).resolve())
    return cfg


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def world_key(cfg):
    """Hash of the parts that define the task (map, link, roster)."""
    return config_hash({k: cfg.get(k) for k in ("world", "link", "ues", "t_max")})


def build_scenario(cfg) -> Scenario:
    w = cfg["world"]
    preset = None
    if "preset" in w:
        preset = scenarios.desk_scenario() if w["preset"] == "desk" else scenarios.grid20_scenario()
        world = preset.world
    elif "map" in w:
        try:
            world = GridWorld.load(w["map"])
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(f"config field world/map: {e}") from e
    else:
        s = w["synth"]
        import numpy as np
        b = np.zeros((s["width"], s["height"]), dtype=bool)
        for x, y in s.get("buildings", []):
            if not (0 <= x < s["width"] and 0 <= y < s["height"]):
                raise ConfigError(f"config field world/synth/buildings: {[x, y]} outside the grid")
            b[x, y] = True
        kw = {k: s[k] for k in ("pathloss_exponent", "shadowing_std_db", "seed", "k0", "blockage")
              if k in s}
        world = GridWorld(s["width"], s["height"], b, tuple(s["bs"]),
                          synth_map(s["width"], s["height"], tuple(s["bs"]), b, **kw))
    link = cfg["link"]
    if "snr_db" in link:
        budget = LinkBudget.from_snr_db(link["snr_db"], p_th=link["p_th"], p_r=link.get("p_r", 1.0))
    else:
        budget = LinkBudget(p_r=link["p_r"], sigma2=link["sigma2"], p_th=link["p_th"])
    if "ues" in cfg:
        starts = [tuple(c) for c in cfg["ues"]["starts"]]
        dests = [tuple(c) for c in cfg["ues"]["dests"]]
    else:
        starts, dests = preset.starts, preset.dests
    return Scenario(world, starts, dests, budget, cfg.get("t_max", T_MAX))


def train_config(cfg, seed) -> TrainConfig:
    return TrainConfig(**cfg.get("train", {}), seed=seed)


def kd_config(cfg, seed) -> KdConfig:
    kd = cfg.get("kd", {})
    return KdConfig(lam=kd.get("lambda", 1.0), smoothing_eps=kd.get("smoothing_eps", 1e-3),
                    bonus=kd.get("bonus", 0.1), train=train_config(cfg, seed))


def teacher_config(cfg):
    return {**TEACHER_DEFAULTS, **cfg.get("teacher", {})}


def eval_config(cfg):
    return {**EVAL_DEFAULTS, **cfg.get("eval", {})}
