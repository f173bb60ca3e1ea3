"""Finite-difference verification of every gradient path the model trains through."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.func import functional_call

from .autodiff import PRIMITIVES, corrupt_tanh, grad_check
from .env import InstanceBatch, random_batch
from .model import EGATLayer, EGATModel, ModelConfig, init_parameters

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    expect_fail: bool = False

    @property
    def passed(self):
        ok = self.error < self.tol
        return not ok if self.expect_fail else ok


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def primitive_cases(gen):
    """name -> (f, x): a scalar function exercising one primitive and its input."""
    w = _rand(gen, 4, 3)
    a = _rand(gen, 3, 4)
    idx = torch.randint(0, 4, (3, 2), generator=gen)
    mask = torch.tensor([[True, False, True, True]] * 3)
    bn_w, bn_b = _rand(gen, 4), _rand(gen, 4)
    P = PRIMITIVES
    # every head is a random linear readout so no gradient is trivially zero
    r = _rand(gen, 3, 4)
    r3 = _rand(gen, 3, 3)
    return {
        "matmul": (lambda x: (P["matmul"](x, w) * r3).sum(), a),
        "add": (lambda x: (P["add"](x, w.T) * r).sum() ** 2, a),
        "concat": (lambda x: (P["concat"](x, x ** 2) * torch.cat([r, r], -1)).sum(), a),
        "mean": (lambda x: (P["mean"](x) ** 2 * r[0]).sum(), a),
        "softmax": (lambda x: (P["softmax"](x) * r).sum(), a),
        "leaky_relu": (lambda x: (P["leaky_relu"](x) * r).sum(), a + 0.05),
        "tanh": (lambda x: (P["tanh"](x) * r).sum(), a),
        "exp": (lambda x: (P["exp"](x) * r).sum(), a * 0.5),
        "log": (lambda x: (P["log"](x) * r).sum(), a.abs() + 0.5),
        "batch_norm": (lambda x: (P["batch_norm"](x, bn_w, bn_b) * r).sum(), a),
        "masked_fill": (lambda x: (P["masked_fill"](x, ~mask) * r).sum() ** 2, a),
        "masked_softmax": (lambda x: (P["masked_softmax"](x, mask) * r).sum(), a),
        "gather": (lambda x: (P["gather"](x, idx) ** 2).sum(), a),
    }


def composite_case(gen):
    """Five chained primitives: matmul, leaky_relu, softmax, log, mean."""
    w = _rand(gen, 4, 4)
    P = PRIMITIVES

    def f(x):
        h = P["leaky_relu"](P["matmul"](x, w))
        return P["mean"](P["log"](P["softmax"](h)), dim=0).sum()

    return f, _rand(gen, 3, 4)


def _param_check(module, names, f_of_params, gen, per_tensor):
    """Worst error over a random coordinate subset of each named parameter."""
    base = {k: v.detach().clone() for k, v in module.named_parameters()}
    worst = 0.0
    for name in names:
        p = base[name]
        k = min(per_tensor, p.numel())
        idx = torch.randperm(p.numel(), generator=gen)[:k].tolist()

        def f(t, name=name):
            params = dict(base)
            params[name] = t
            return f_of_params(params)

        worst = max(worst, grad_check(f, p, indices=idx))
    return worst


def encoder_layer_check(seed=0, n_nodes=5, node_dim=8, edge_dim=4, per_tensor=6):
    """Encoder layer with a random scalar readout, w.r.t. node inputs and weights."""
    gen = torch.Generator().manual_seed(seed)
    layer = EGATLayer(node_dim, edge_dim).double()
    init_parameters(layer, "xavier", seed)
    x = _rand(gen, 2, n_nodes, node_dim)
    e = _rand(gen, 2, n_nodes, n_nodes, edge_dim)
    r = _rand(gen, 2, n_nodes, node_dim)

    def head(params, x=x, e=e):
        return (functional_call(layer, params, (x, e)) * r).sum()

    err_x = grad_check(lambda t: head(dict(layer.named_parameters()), x=t), x)
    err_e = grad_check(lambda t: head(dict(layer.named_parameters()), e=t), e,
                       indices=torch.randperm(e.numel(), generator=gen)[:20].tolist())
    err_p = _param_check(layer, [n for n, _ in layer.named_parameters()], head, gen, per_tensor)
    return max(err_x, err_e, err_p)


def tour_log_prob_check(seed=0, problem="tsp", n=5, batch=3, per_tensor=3):
    """Sum of fixed-trajectory log-probabilities w.r.t. a subset of every weight."""
    gen = torch.Generator().manual_seed(seed)
    cfg = ModelConfig(problem, node_dim=8, edge_dim=4, n_layers=2, n_heads=2)
    model = EGATModel(cfg).double()
    init_parameters(model, "xavier", seed)
    rng = np.random.default_rng(seed)
    arrays = random_batch(problem, batch, n, rng, capacity=2.0)
    ib = InstanceBatch.from_arrays(problem, *arrays, dtype=torch.float64)
    with torch.no_grad():
        actions = model.rollout(ib, decode="sample", generator=gen).actions
    names = [k for k, _ in model.named_parameters() if not k.startswith("critic.")]

    # functional_call only reroutes forward(), so rollout gets the weights swapped in
    def f_of_params(params):
        saved = {}
        for k, v in params.items():
            mod_name, _, attr = k.rpartition(".")
            mod = model.get_submodule(mod_name) if mod_name else model
            saved[k] = mod._parameters[attr]
            mod._parameters[attr] = v
        try:
            return model.rollout(ib, actions=actions).log_prob.sum()
        finally:
            for k, v in saved.items():
                mod_name, _, attr = k.rpartition(".")
                (model.get_submodule(mod_name) if mod_name else model)._parameters[attr] = v

    return _param_check(model, names, f_of_params, gen, per_tensor)


def negative_control(seed=0):
    """A tanh with a wrong backward rule; the checker must flag it."""
    gen = torch.Generator().manual_seed(seed)
    r = _rand(gen, 3, 4)
    return grad_check(lambda x: (corrupt_tanh(x) * r).sum(), _rand(gen, 3, 4))


def run_suite(seed=0):
    """All checks as CheckResults; the negative control passes when it fails."""
    gen = torch.Generator().manual_seed(seed)
    results = [CheckResult(f"primitive:{name}", grad_check(f, x), PRIMITIVE_TOL)
               for name, (f, x) in primitive_cases(gen).items()]
    f, x = composite_case(gen)
    results.append(CheckResult("composite:5-op", grad_check(f, x), PRIMITIVE_TOL))
    results.append(CheckResult("encoder_layer", encoder_layer_check(seed), MODEL_TOL))
    results.append(CheckResult("tour_log_prob:tsp", tour_log_prob_check(seed, "tsp"), MODEL_TOL))
    results.append(CheckResult("tour_log_prob:cvrp", tour_log_prob_check(seed, "cvrp"), MODEL_TOL))
    results.append(CheckResult("negative_control:corrupt_tanh", negative_control(seed),
                               PRIMITIVE_TOL, expect_fail=True))
    return results
