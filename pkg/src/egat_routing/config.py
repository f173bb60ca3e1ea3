"""Run configuration: nested JSON dicts, presets, overrides and hashing."""
from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import asdict, fields
from pathlib import Path

from .decoding import DEFAULT_SAMPLES
from .env import CVRP, TSP
from .model import ModelConfig
from .training import PPOConfig, RolloutConfig

TRAINERS = ("ppo", "rollout")
SWEEP_AXES = ("node_dim", "edge_dim", "n_layers")
# keys excluded from the hash: where things go does not change what is computed
_UNHASHED = ("output",)

# per training size: (batch size, ppo steps/epoch, rollout steps/epoch, ppo lr, rollout lr)
_FULL_SCALE = {
    20: (512, 800, 1600, 3e-4, 1e-3),
    50: (128, 3000, 6000, 1e-4, 3e-4),
    100: (128, 3000, 6000, 1e-4, 3e-4),
}


def default_config(problem=TSP, size=20, trainer="ppo"):
    """Full-size settings for a standard problem size (needs an accelerator to finish)."""
    if size not in _FULL_SCALE:
        raise ValueError(f"no full-scale settings for size {size}; choose 20, 50 or 100")
    batch, ppo_steps, rollout_steps, ppo_lr, rollout_lr = _FULL_SCALE[size]
    ppo = asdict(PPOConfig(batch_size=batch, steps_per_epoch=ppo_steps, lr=ppo_lr))
    rollout = asdict(RolloutConfig(batch_size=batch, steps_per_epoch=rollout_steps, lr=rollout_lr))
    return {
        "problem": problem,
        "size": size,
        "capacity": None,
        "seed": 0,
        "trainer": trainer,
        "model": ModelConfig(problem).to_dict(),
        "ppo": ppo,
        "rollout": rollout,
        "decode": {"mode": "greedy", "temperature": None, "samples": DEFAULT_SAMPLES},
        "sweep": {"node_dim": [64, 128], "edge_dim": [8, 16, 64], "n_layers": [3, 4, 5, 6]},
        "output": None,
    }


def desk_config(problem=TSP, size=10, trainer="rollout"):
    """Small TSP10-style run that finishes in minutes on one CPU core."""
    cfg = default_config(problem, 20, trainer)
    cfg["size"] = size
    if problem == CVRP:
        cfg["capacity"] = 3.0
    cfg["model"].update(node_dim=64, edge_dim=16, n_layers=2, n_heads=8)
    cfg["rollout"].update(epochs=8, steps_per_epoch=200, batch_size=128, eval_size=2000, val_size=1000,
                          max_grad_norm=2.0)
    cfg["ppo"].update(epochs=8, steps_per_epoch=100, batch_size=128, val_size=1000)
    cfg["sweep"] = {"node_dim": [32, 64], "n_layers": [2, 3]}
    return cfg


def tiny_config(problem=TSP, size=6, trainer="rollout"):
    """Seconds-long run for smoke tests."""
    cfg = desk_config(problem, size, trainer)
    cfg["model"].update(node_dim=16, edge_dim=4, n_layers=1, n_heads=2)
    cfg["rollout"].update(epochs=2, steps_per_epoch=3, batch_size=16, eval_size=64, val_size=32)
    cfg["ppo"].update(epochs=2, steps_per_epoch=3, batch_size=16, val_size=32)
    cfg["sweep"] = {"node_dim": [8, 16], "n_layers": [1, 2]}
    return cfg


def ablation_config(residual=True):
    """Four-layer TSP10 run with or without the skip connections, equal budget either way."""
    cfg = desk_config(TSP, 10, "rollout")
    cfg["model"].update(n_layers=4, residual=residual)
    cfg["rollout"].update(epochs=2, steps_per_epoch=200, lr=3e-4,
                          eval_size=1000, val_size=1000)
    return cfg


PRESETS = {
    "full-tsp20": lambda: default_config(TSP, 20, "ppo"),
    "full-tsp50": lambda: default_config(TSP, 50, "ppo"),
    "full-tsp100": lambda: default_config(TSP, 100, "ppo"),
    "full-cvrp20": lambda: default_config(CVRP, 20, "ppo"),
    "full-cvrp50": lambda: default_config(CVRP, 50, "ppo"),
    "full-cvrp100": lambda: default_config(CVRP, 100, "ppo"),
    "desk-tsp10": lambda: desk_config(TSP, 10, "rollout"),
    "desk-tsp10-ppo": lambda: desk_config(TSP, 10, "ppo"),
    "desk-cvrp10": lambda: desk_config(CVRP, 10, "rollout"),
    "ablation-residual": lambda: ablation_config(True),
    "ablation-plain": lambda: ablation_config(False),
    "tiny": lambda: tiny_config(),
}


def preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def merge(base, update):
    """Recursive dict merge; ``update`` wins."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, assignment):
    """Apply ``"a.b=value"``; the value is read as JSON when it parses, else as a string."""
    key, sep, value = assignment.partition("=")
    if not sep or not key:
        raise ValueError(f"override {assignment!r} must look like key.path=value")
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ValueError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ValueError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(value)
    return cfg


def _check_keys(section, values, cls):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {section} keys: {sorted(unknown)}")


def validate(cfg):
    """Raise ValueError on inconsistent settings; returns cfg."""
    for key in ("problem", "size", "seed", "trainer", "model", "ppo", "rollout", "decode"):
        if key not in cfg:
            raise ValueError(f"config is missing {key!r}")
    if cfg["problem"] not in (TSP, CVRP):
        raise ValueError(f"unknown problem {cfg['problem']!r}")
    if cfg["trainer"] not in TRAINERS:
        raise ValueError(f"unknown trainer {cfg['trainer']!r}")
    if cfg["model"].get("problem", cfg["problem"]) != cfg["problem"]:
        raise ValueError("model.problem must match problem")
    if not isinstance(cfg["size"], int) or cfg["size"] < 2:
        raise ValueError("size must be an integer >= 2")
    _check_keys("model", cfg["model"], ModelConfig)
    _check_keys("ppo", cfg["ppo"], PPOConfig)
    _check_keys("rollout", cfg["rollout"], RolloutConfig)
    model_config(cfg), trainer_config(cfg)
    for axis in cfg.get("sweep", {}):
        if axis not in SWEEP_AXES:
            raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    return cfg


def model_config(cfg):
    return ModelConfig.from_dict({**cfg["model"], "problem": cfg["problem"]})


def trainer_config(cfg):
    if cfg["trainer"] == "ppo":
        return PPOConfig(**cfg["ppo"])
    return RolloutConfig(**cfg["rollout"])


def config_hash(cfg):
    """sha256 over the canonical JSON of everything that affects results."""
    body = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def load_config(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from None


def write_config(cfg, directory, name="config.json"):
    path = Path(directory) / name
    payload = dict(cfg, config_hash=config_hash(cfg))
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def strip_hash(cfg):
    return {k: v for k, v in cfg.items() if k != "config_hash"}


def sweep_cells(cfg, axes=None):
    """Cartesian product of the sweep axes; one merged config per cell."""
    axes = cfg.get("sweep", {}) if axes is None else axes
    names = [a for a in SWEEP_AXES if a in axes]
    cells = []
    for values in itertools.product(*(axes[a] for a in names)):
        cell = copy.deepcopy(cfg)
        cell["sweep"] = {}
        for a, v in zip(names, values):
            cell["model"][a] = v
        cells.append((dict(zip(names, values)), cell))
    return cells
