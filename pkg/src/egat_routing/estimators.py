"""scikit-learn style wrappers: X is a list of instances, y is never needed."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import baselines
from .decoding import default_temperature, greedy_decode, sample_decode
from .env import CVRP, TSP, Instance, InstanceBatch, cvrp_capacity
from .model import EGATModel, ModelConfig
from .training import PPOConfig, PPOTrainer, RolloutConfig, RolloutTrainer


def check_instances(X, kind=None):
    """Coerce X into a non-empty list of Instances.

    Accepts an Instance, a sequence of Instances, or a (N, n, 2) coordinate
    array (read as TSP instances).
    """
    if isinstance(X, Instance):
        X = [X]
    elif isinstance(X, np.ndarray) or (isinstance(X, (list, tuple)) and X
                                        and not isinstance(X[0], Instance)):
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[-1] != 2:
            raise ValueError(f"coordinate input must have shape (N, n, 2), got {arr.shape}")
        X = [Instance(TSP, c) for c in arr]
    X = list(X)
    if not X:
        raise ValueError("no instances given")
    for i, inst in enumerate(X):
        if not isinstance(inst, Instance):
            raise TypeError(f"item {i} is {type(inst).__name__}, expected Instance")
        if kind is not None and inst.kind != kind:
            raise ValueError(f"item {i} is a {inst.kind} instance, expected {kind}")
    return X


class EGATRouter(BaseEstimator):
    """Trains a residual edge-attention policy on random instances and decodes with it.

    ``fit`` draws its own training data; an X passed to it only fixes the
    problem size when ``size`` is None.
    """

    def __init__(self, problem=TSP, size=None, capacity=None, node_dim=64, edge_dim=16,
                 n_layers=2, n_heads=8, residual=True, trainer="rollout", epochs=5,
                 steps_per_epoch=100, batch_size=128, lr=None, val_size=1000, eval_size=1000,
                 decode="greedy", temperature=None, n_samples=1280, random_state=0):
        self.problem = problem
        self.size = size
        self.capacity = capacity
        self.node_dim = node_dim
        self.edge_dim = edge_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.residual = residual
        self.trainer = trainer
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.val_size = val_size
        self.eval_size = eval_size
        self.decode = decode
        self.temperature = temperature
        self.n_samples = n_samples
        self.random_state = random_state

    def _model_config(self):
        return ModelConfig(self.problem, self.node_dim, self.edge_dim, self.n_layers,
                           self.n_heads, residual=self.residual)

    def _trainer(self, model, size):
        seed = int(self.random_state or 0)
        common = dict(epochs=self.epochs, steps_per_epoch=self.steps_per_epoch,
                      batch_size=self.batch_size, val_size=self.val_size)
        if self.lr is not None:
            common["lr"] = self.lr
        if self.trainer == "rollout":
            return RolloutTrainer(model, RolloutConfig(eval_size=self.eval_size, **common),
                                  size, seed, self.capacity)
        if self.trainer == "ppo":
            return PPOTrainer(model, PPOConfig(**common), size, seed, self.capacity)
        raise ValueError(f"unknown trainer {self.trainer!r}")

    def fit(self, X=None, y=None):
        size = self.size
        if size is None:
            if X is None:
                raise ValueError("pass size or example instances to fit")
            size = check_instances(X, self.problem)[0].n_customers
        if self.problem == CVRP:
            cvrp_capacity(size, self.capacity)  # fail early on non-standard sizes
        torch.manual_seed(int(self.random_state or 0))
        self.model_ = EGATModel(self._model_config())
        trainer = self._trainer(self.model_, size)
        self.history_ = [r.metrics for r in trainer.train()]
        self.size_ = size
        self.model_.eval()
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("EGATRouter is not fitted yet; call fit first")

    def solve(self, X):
        """One Trajectory per instance."""
        self._check_fitted()
        X = check_instances(X, self.problem)
        if self.decode == "greedy":
            return [greedy_decode(self.model_, inst) for inst in X]
        if self.decode != "sample":
            raise ValueError(f"unknown decode mode {self.decode!r}")
        out = []
        for i, inst in enumerate(X):
            lam = self.temperature or default_temperature(inst.kind, inst.n_customers)
            out.append(sample_decode(self.model_, inst, lam, self.n_samples,
                                     seed=int(self.random_state or 0), index=i))
        return out

    def predict(self, X):
        return [tr.sequence for tr in self.solve(X)]

    def predict_lengths(self, X):
        return np.array([tr.length for tr in self.solve(X)])

    @torch.no_grad()
    def transform(self, X):
        """Graph embeddings (mean of final node embeddings), shape (N, node_dim)."""
        self._check_fitted()
        X = check_instances(X, self.problem)
        out = []
        for inst in X:  # instances may differ in size
            enc = self.model_.encode(InstanceBatch.from_instances([inst]))
            out.append(enc.graph[0].double().numpy())
        return np.stack(out)

    def score(self, X, y=None):
        """Negative mean tour length, so larger is better."""
        return -float(self.predict_lengths(X).mean())


class HeuristicRouter(BaseEstimator):
    """A classical construction heuristic (optionally followed by 2-opt) behind the same API."""

    def __init__(self, method="farthest_insertion", random_state=0):
        self.method = method
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.method not in baselines.CVRP_METHODS:
            baselines.tsp_method(self.method)  # raises on unknown names
        self.fitted_ = True
        return self

    def solve(self, X):
        if not hasattr(self, "fitted_"):
            raise NotFittedError("HeuristicRouter is not fitted yet; call fit first")
        return [baselines.solve(inst, self.method, self.random_state) for inst in check_instances(X)]

    def predict(self, X):
        return [r.tour for r in self.solve(X)]

    def predict_lengths(self, X):
        return np.array([r.length for r in self.solve(X)])

    def score(self, X, y=None):
        return -float(self.predict_lengths(X).mean())
