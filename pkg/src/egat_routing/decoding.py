"""Solution construction with a trained model: greedy, best-of-k sampling, ensembles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .env import CVRP, TSP, InstanceBatch, check_solution, tour_length

DEFAULT_SAMPLES = 1280
DEFAULT_TEMPERATURE = {
    TSP: {20: 2.0, 50: 2.5, 100: 1.5},
    CVRP: {20: 2.5, 50: 1.8, 100: 1.2},
}


@dataclass
class Trajectory:
    sequence: list
    step_log_probs: list
    length: float

    @property
    def log_prob(self):
        return float(sum(self.step_log_probs))


@dataclass(frozen=True)
class DecodePolicy:
    mode: str = "greedy"
    temperature: float = 1.0
    samples: int = DEFAULT_SAMPLES

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.samples < 1:
            raise ValueError("sample count must be at least 1")


def default_temperature(kind, n_customers):
    """Tuned temperature of the nearest standard problem size."""
    table = DEFAULT_TEMPERATURE[kind]
    size = min(table, key=lambda s: (abs(s - n_customers), s))
    return table[size]


def _trajectories(instance, roll):
    out = []
    for seq, steps in zip(roll.sequences(), roll.step_log_prob.tolist()):
        check_solution(instance, seq)
        # report at 64-bit from the sequence itself, not the model's float32 sum
        out.append(Trajectory(seq, steps[:len(seq)], tour_length(instance, seq)))
    return out


@torch.no_grad()
def greedy_decode(model, instance):
    """Most probable node at every step; ties go to the lowest index."""
    model.eval()
    roll = model.rollout(InstanceBatch.from_instances([instance]), decode="greedy")
    return _trajectories(instance, roll)[0]


def instance_uniforms(seed, index, k, n_steps):
    """(k, n_steps) uniforms for one instance.

    Rows are drawn in order from a stream keyed on (seed, index), so the
    first k rows never depend on how many samples are requested in total.
    """
    rng = np.random.default_rng([seed, index])
    return torch.from_numpy(rng.random((k, n_steps)))


@torch.no_grad()
def sample_all(model, instance, temperature, k, seed=0, index=0, chunk=256):
    """All k sampled trajectories, in stream order."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if k < 1:
        raise ValueError("k must be at least 1")
    model.eval()
    base = InstanceBatch.from_instances([instance])
    u = instance_uniforms(seed, index, k, base.max_steps())
    out = []
    for s in range(0, k, chunk):
        rows = u[s:s + chunk]
        roll = model.rollout(base.repeat(len(rows)), decode="sample",
                             temperature=temperature, uniforms=rows)
        out.extend(_trajectories(instance, roll))
    return out


def sample_decode(model, instance, temperature=None, k=DEFAULT_SAMPLES, seed=0, index=0, chunk=256):
    """Shortest of k trajectories sampled with logits divided by ``temperature``.

    Ties keep the earliest sample.
    """
    if temperature is None:
        temperature = default_temperature(instance.kind, instance.n_customers)
    trajs = sample_all(model, instance, temperature, k, seed, index, chunk)
    return min(trajs, key=lambda tr: tr.length)


def decode(model, instance, policy: DecodePolicy, seed=0, index=0):
    if policy.mode == "greedy":
        return greedy_decode(model, instance)
    return sample_decode(model, instance, policy.temperature, policy.samples, seed, index)


class Ensemble:
    """Greedy decoding under several checkpoints of one architecture; keeps the shortest tour."""

    def __init__(self, checkpoints):
        checkpoints = list(checkpoints)
        if not checkpoints:
            raise ValueError("ensemble needs at least one checkpoint")
        cfg = checkpoints[0].config
        for i, cp in enumerate(checkpoints[1:], 1):
            if cp.config != cfg:
                raise ValueError(f"checkpoint {i} has a different model config than checkpoint 0")
        self.checkpoints = checkpoints
        self.config = cfg
        self._models = None

    def __len__(self):
        return len(self.checkpoints)

    @property
    def models(self):
        if self._models is None:
            self._models = [cp.build_model() for cp in self.checkpoints]
        return self._models

    def solve(self, instance):
        best = None
        for model in self.models:
            tr = greedy_decode(model, instance)
            if best is None or tr.length < best.length:
                best = tr
        return best


def ensemble_solve(ensemble, instance):
    if not isinstance(ensemble, Ensemble):
        ensemble = Ensemble(ensemble)
    return ensemble.solve(instance)
