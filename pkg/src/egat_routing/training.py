"""PPO and rollout-baseline REINFORCE trainers."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from scipy import stats

from . import baselines
from .autodiff import (
    NonFiniteError, check_finite, clip_global_norm, global_norm, make_adam, set_lr,
)
from .env import TSP, InstanceBatch, opt_gap, random_batch, unstack_instances
from .model import EGATModel, init_parameters

log = logging.getLogger(__name__)

DIVERGENCE_PATIENCE = 10


@dataclass
class PPOConfig:
    epochs: int = 100
    steps_per_epoch: int = 800
    batch_size: int = 512
    ppo_epochs: int = 3
    ppo_steps: int = 1
    clip_eps: float = 0.2
    c_p: float = 1.0
    c_v: float = 0.5
    c_e: float = 0.01
    lr: float = 3e-4
    lr_decay: float = 0.96
    max_grad_norm: float = 2.0
    val_size: int = 10000

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "batch_size", "ppo_epochs", "ppo_steps", "val_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.lr <= 0 or self.lr_decay <= 0 or self.max_grad_norm <= 0:
            raise ValueError("lr, lr_decay and max_grad_norm must be positive")


@dataclass
class RolloutConfig:
    epochs: int = 100
    steps_per_epoch: int = 1600
    batch_size: int = 512
    alpha: float = 0.05
    eval_size: int = 10000
    lr: float = 1e-3
    lr_decay: float = 0.96
    max_grad_norm: float | None = None
    val_size: int = 10000

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "eval_size", "val_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ValueError("reward normalisation needs batch_size >= 2")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


def normalize_rewards(x, eps=1e-8):
    """Standardise a batch of tour lengths (population std, guarded)."""
    if x.numel() < 2:
        raise ValueError("reward normalisation needs at least 2 samples")
    return (x - x.mean()) / (x.std(unbiased=False) + eps)


def lr_schedule(epoch, l0, beta):
    """Learning rate for ``epoch`` (0-based): l0 * beta**epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return l0 * beta ** epoch


def clipped_surrogate(ratio, adv, eps):
    """Per-sample min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    return torch.min(ratio * adv, ratio.clamp(1 - eps, 1 + eps) * adv)


class PPOLoss(NamedTuple):
    total: torch.Tensor
    clip: torch.Tensor
    mse: torch.Tensor
    entropy: torch.Tensor
    ratio: torch.Tensor


def compute_ppo_loss(model, batch, actions, lengths, old_log_prob, cfg: PPOConfig):
    """Joint actor-critic loss for stored trajectories re-scored under the current policy."""
    r = model.rollout(batch, actions=actions)
    value = model.value(r.encoding)
    target = normalize_rewards(lengths)
    adv = (target - value).detach()
    ratio = torch.exp(r.log_prob - old_log_prob)
    l_clip = clipped_surrogate(ratio, adv, cfg.clip_eps).mean()
    l_mse = ((target - value) ** 2).mean()
    l_ent = r.entropy.mean()
    total = cfg.c_p * l_clip + cfg.c_v * l_mse - cfg.c_e * l_ent
    check_finite(total, "ppo loss")
    return PPOLoss(total, l_clip, l_mse, l_ent, ratio)


def paired_t_test(candidate, baseline, alpha=0.05):
    """One-sided paired t-test: is the candidate's mean cost significantly lower?"""
    candidate = np.asarray(candidate, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if candidate.shape != baseline.shape or candidate.size < 2:
        raise ValueError("paired samples of equal length >= 2 required")
    if alpha <= 0:
        return False
    diff = candidate - baseline
    if np.all(diff == diff[0]):
        # degenerate variance: only a strict uniform improvement counts
        return bool(diff[0] < 0)
    p = stats.ttest_rel(candidate, baseline, alternative="less").pvalue
    return bool(np.isfinite(p) and p < alpha)


def greedy_lengths(model, batch, chunk=2000):
    """Greedy tour lengths in eval mode, as a float64 numpy array."""
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for s in range(0, batch.batch_size, chunk):
            out.append(model.rollout(batch.index(slice(s, s + chunk)), "greedy").lengths)
    model.train(was_training)
    return torch.cat(out).double().numpy()


def reference_lengths(kind, coords, demands=None, capacity=None):
    """Reference costs used for validation gaps, with the method name.

    Exact Held-Karp for TSP up to 12 nodes, otherwise the best of farthest
    insertion + 2-opt; the greedy nearest-feasible heuristic for CVRP.
    """
    if kind == TSP and coords.shape[1] <= 12:
        return baselines.held_karp_lengths(coords), "held_karp"
    insts = unstack_instances(kind, coords, demands, capacity)
    method = "farthest_insertion+2opt" if kind == TSP else "cvrp_greedy"
    return np.array([baselines.solve(i, method).length for i in insts]), method


class ValidationSet:
    def __init__(self, kind, size, n_instances, seed, capacity=None):
        arrays = random_batch(kind, n_instances, size, np.random.default_rng(seed), capacity)
        self.batch = InstanceBatch.from_arrays(kind, *arrays)
        self.refs, self.reference = reference_lengths(kind, *arrays)

    def evaluate(self, model):
        lengths = greedy_lengths(model, self.batch)
        return float(lengths.mean()), opt_gap(lengths, self.refs)


def default_sampler(kind, size, capacity=None):
    def sample(rng, batch_size):
        return InstanceBatch.from_arrays(kind, *random_batch(kind, batch_size, size, rng, capacity))
    return sample


@dataclass
class EpochResult:
    epoch: int
    metrics: dict = field(default_factory=dict)


class _Trainer:
    name = ""
    init_scheme = ""

    def __init__(self, model: EGATModel, cfg, size, seed=0, capacity=None, sampler=None,
                 init=True):
        self.model = model
        self.cfg = cfg
        self.kind = model.cfg.problem
        self.size = size
        self.seed = seed
        self.capacity = capacity
        self.sampler = sampler or default_sampler(self.kind, size, capacity)
        if init:
            init_parameters(model, self.init_scheme, seed)
        self.optimizer = make_adam(self._trainable(), cfg.lr)
        self.val = ValidationSet(self.kind, size, cfg.val_size, seed + 7919, capacity)
        self.epoch = 0
        self._worse_streak = 0
        self.history = []

    def _trainable(self):
        return list(self.model.parameters())

    def _rngs(self, epoch):
        rng = np.random.default_rng([self.seed, epoch])
        gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
        return rng, gen

    def _watchdog(self, gap):
        prev = self.history[-1]["val_gap"] if self.history else math.inf
        self._worse_streak = self._worse_streak + 1 if gap > prev else 0
        if self._worse_streak >= DIVERGENCE_PATIENCE:
            log.warning("validation gap worsened %d epochs in a row", self._worse_streak)

    def train(self, epochs=None):
        """Run epochs, yielding an ``EpochResult`` after each one."""
        last = self.cfg.epochs if epochs is None else self.epoch + epochs
        while self.epoch < last:
            set_lr(self.optimizer, lr_schedule(self.epoch, self.cfg.lr, self.cfg.lr_decay))
            metrics = {"epoch": self.epoch, "lr": self.optimizer.param_groups[0]["lr"]}
            metrics.update(self._run_epoch(self.epoch))
            metrics["val_length"], metrics["val_gap"] = self.val.evaluate(self.model)
            metrics["val_reference"] = self.val.reference
            self._watchdog(metrics["val_gap"])
            self.history.append(metrics)
            log.info("%s epoch %d: val gap %.4f", self.name, self.epoch, metrics["val_gap"])
            self.epoch += 1
            yield EpochResult(self.epoch - 1, metrics)

    def _update(self, loss, params):
        self.optimizer.zero_grad()
        loss.backward()
        pre = post = global_norm(p.grad for p in params)
        if self.cfg.max_grad_norm is not None:
            clip_global_norm(params, self.cfg.max_grad_norm)
            post = global_norm(p.grad for p in params)
        self.optimizer.step()
        return pre, post

    # -- trainer state for exact resumption -------------------------------
    def state_tensors(self):
        out = {}
        opt = self.optimizer.state_dict()
        for idx, st in opt["state"].items():
            for key, val in st.items():
                out[f"optim.{idx}.{key}"] = torch.as_tensor(val).clone()
        return out

    def state_meta(self):
        return {
            "trainer": self.name,
            "epoch": self.epoch,
            "seed": self.seed,
            "history": self.history,
            "worse_streak": self._worse_streak,
        }

    def load_state(self, tensors, meta):
        state = {}
        for name, val in tensors.items():
            if not name.startswith("optim."):
                continue
            _, idx, key = name.split(".", 2)
            state.setdefault(int(idx), {})[key] = val.clone()
        opt = self.optimizer.state_dict()
        opt["state"] = state
        self.optimizer.load_state_dict(opt)
        self.epoch = meta["epoch"]
        self.history = list(meta.get("history", []))
        self._worse_streak = meta.get("worse_streak", 0)


class RolloutTrainer(_Trainer):
    """REINFORCE against a frozen greedy baseline policy refreshed by a paired t-test."""

    name = "rollout"
    init_scheme = "xavier"

    def __init__(self, model, cfg: RolloutConfig, size, seed=0, capacity=None, sampler=None,
                 init=True):
        super().__init__(model, cfg, size, seed, capacity, sampler, init)
        self.baseline = copy.deepcopy(model)
        arrays = random_batch(self.kind, cfg.eval_size, size, np.random.default_rng(seed + 104729), capacity)
        self.eval_batch = InstanceBatch.from_arrays(self.kind, *arrays)
        self.baseline_costs = greedy_lengths(self.baseline, self.eval_batch)

    def _trainable(self):
        return self.model.actor_parameters()

    def step(self, batch, gen):
        self.model.train()
        r = self.model.rollout(batch, "sample", generator=gen)
        with torch.no_grad():
            self.baseline.eval()
            bl = self.baseline.rollout(batch, "greedy")
        adv = normalize_rewards(r.lengths.detach()) - normalize_rewards(bl.lengths)
        loss = (adv * r.log_prob).mean()
        check_finite(loss, "reinforce loss")
        pre, post = self._update(loss, self._trainable())
        return {"loss": loss.item(), "length": r.lengths.mean().item(),
                "grad_norm": pre, "grad_norm_clipped": post}

    def _run_epoch(self, epoch):
        rng, gen = self._rngs(epoch)
        acc = _Accumulator()
        for _ in range(self.cfg.steps_per_epoch):
            batch = self.sampler(rng, self.cfg.batch_size)
            try:
                acc.add(self.step(batch, gen))
            except NonFiniteError as exc:
                log.warning("skipping batch: %s", exc)
                acc.skipped += 1
        out = acc.summary()
        candidate = greedy_lengths(self.model, self.eval_batch)
        updated = paired_t_test(candidate, self.baseline_costs, self.cfg.alpha)
        if updated:
            self.baseline.load_state_dict(self.model.state_dict())
            self.baseline_costs = candidate
        out["baseline_updated"] = updated
        return out

    def state_tensors(self):
        out = super().state_tensors()
        for name, val in self.baseline.state_dict().items():
            out[f"baseline.{name}"] = val.clone()
        return out

    def load_state(self, tensors, meta):
        super().load_state(tensors, meta)
        sd = {k[len("baseline."):]: v for k, v in tensors.items() if k.startswith("baseline.")}
        if sd:
            self.baseline.load_state_dict(sd)
            self.baseline_costs = greedy_lengths(self.baseline, self.eval_batch)


class PPOTrainer(_Trainer):
    """Clipped-surrogate actor-critic with a memory buffer of sampled trajectories."""

    name = "ppo"
    init_scheme = "orthogonal"

    def __init__(self, model, cfg: PPOConfig, size, seed=0, capacity=None, sampler=None,
                 init=True):
        super().__init__(model, cfg, size, seed, capacity, sampler, init)
        self.buffer = []

    def collect(self, batch, gen):
        self.model.train()
        with torch.no_grad():
            r = self.model.rollout(batch, "sample", generator=gen)
        self.buffer.append((batch, r.actions, r.lengths, r.log_prob))
        return r.lengths.mean().item()

    def update(self):
        """Run the PPO epochs over the buffer, then sync the behaviour policy."""
        params = list(self.model.parameters())
        records = []
        for _ in range(self.cfg.ppo_epochs):
            for batch, actions, lengths, old_logp in self.buffer:
                loss = compute_ppo_loss(self.model, batch, actions, lengths, old_logp, self.cfg)
                pre, post = self._update(loss.total, params)
                records.append({
                    "loss": loss.total.item(), "clip": loss.clip.item(),
                    "mse": loss.mse.item(), "entropy": loss.entropy.item(),
                    "grad_norm": pre, "grad_norm_clipped": post,
                    "ratio_dev": float((loss.ratio.detach() - 1).abs().max()),
                })
        # the stored log-probs came from the policy at sampling time, i.e. theta_old;
        # dropping the buffer makes the next samples come from the updated theta
        self.buffer.clear()
        return records

    def _run_epoch(self, epoch):
        rng, gen = self._rngs(epoch)
        acc = _Accumulator()
        sync_dev = 0.0
        for step in range(1, self.cfg.steps_per_epoch + 1):
            batch = self.sampler(rng, self.cfg.batch_size)
            try:
                length = self.collect(batch, gen)
                if step % self.cfg.ppo_steps == 0:
                    records = self.update()
                    # first re-score after a sync compares theta with itself
                    sync_dev = max(sync_dev, records[0]["ratio_dev"])
                    for rec in records:
                        rec["length"] = length
                        acc.add(rec)
            except NonFiniteError as exc:
                log.warning("skipping batch: %s", exc)
                self.buffer.clear()
                acc.skipped += 1
        out = acc.summary()
        out["sync_ratio_dev"] = sync_dev
        return out


class _Accumulator:
    def __init__(self):
        self.rows = []
        self.skipped = 0

    def add(self, row):
        self.rows.append(row)

    def summary(self):
        out = {"skipped": self.skipped, "updates": len(self.rows)}
        if not self.rows:
            return out
        keys = [k for k in self.rows[0] if k not in ("ratio_dev",)]
        for k in keys:
            out[k] = float(np.mean([r[k] for r in self.rows]))
        if "grad_norm_clipped" in self.rows[0]:
            out["max_grad_norm_clipped"] = float(max(r["grad_norm_clipped"] for r in self.rows))
        return out

