"""Residual edge-graph-attention encoder, attention pointer decoder and critic."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .autodiff import LEAKY_SLOPE, check_finite, masked_softmax, orthogonal_, xavier_
from .env import CVRP, TSP, BatchState, InfeasibleActionError, batch_tour_lengths


@dataclass
class ModelConfig:
    problem: str = TSP
    node_dim: int = 128
    edge_dim: int = 64
    n_layers: int = 4
    n_heads: int = 8
    logit_clip: float = 10.0
    residual: bool = True

    def __post_init__(self):
        if self.problem not in (TSP, CVRP):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.n_layers < 1:
            raise ValueError("at least one encoder layer is required")
        if self.node_dim % self.n_heads:
            raise ValueError("node_dim must be divisible by n_heads")
        if self.logit_clip <= 0:
            raise ValueError("logit_clip must be positive")
        if self.edge_dim < 1:
            raise ValueError("edge_dim must be positive")

    @property
    def head_dim(self):
        return self.node_dim // self.n_heads

    @property
    def input_dim(self):
        return 2 if self.problem == TSP else 3

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Encoding(NamedTuple):
    nodes: torch.Tensor  # (B, m, d_x)
    graph: torch.Tensor  # (B, d_x), mean over nodes
    edges: torch.Tensor  # (B, m, m, d_e)


class Rollout(NamedTuple):
    actions: torch.Tensor  # (B, T) padded; CVRP padding is the depot
    log_prob: torch.Tensor  # (B,) sum of per-step log-probabilities
    entropy: torch.Tensor  # (B,) sum of per-step entropies
    lengths: torch.Tensor  # (B,) tour cost
    n_steps: torch.Tensor  # (B,) number of real (unpadded) decisions
    encoding: Encoding
    step_log_prob: torch.Tensor  # (B, T) per-step log-probabilities, 0 on padding

    def sequences(self):
        return [row[:k] for row, k in zip(self.actions.tolist(), self.n_steps.tolist())]


class EGATLayer(nn.Module):
    """One residual E-GAT layer.

    The pair score is leaky_relu(g . W [x_i ; x_j ; e_ij]), normalised with a
    softmax over all j (self included). Since g and W act linearly before the
    activation, the three blocks of W are contracted with g first, which keeps
    the cost at O(m^2 d_e) instead of O(m^2 d_x).
    """

    def __init__(self, node_dim, edge_dim, residual=True):
        super().__init__()
        self.node_dim, self.edge_dim = node_dim, edge_dim
        self.residual = residual
        self.W = nn.Linear(2 * node_dim + edge_dim, node_dim, bias=False)
        self.g = nn.Parameter(torch.empty(node_dim))
        self.W1 = nn.Linear(node_dim, node_dim, bias=False)
        nn.init.uniform_(self.g, -1 / math.sqrt(node_dim), 1 / math.sqrt(node_dim))

    def attention(self, x, e):
        w_i, w_j, w_e = self.W.weight.split([self.node_dim, self.node_dim, self.edge_dim], dim=1)
        s_i = x @ (self.g @ w_i)
        s_j = x @ (self.g @ w_j)
        s_e = e @ (self.g @ w_e)
        scores = F.leaky_relu(s_i.unsqueeze(2) + s_j.unsqueeze(1) + s_e, LEAKY_SLOPE)
        return torch.softmax(scores, dim=-1)

    def forward(self, x, e):
        update = self.attention(x, e) @ self.W1(x)
        return update + x if self.residual else update


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.A0 = nn.Linear(cfg.input_dim, cfg.node_dim)
        self.node_bn = nn.BatchNorm1d(cfg.node_dim)
        self.A1 = nn.Linear(1, cfg.edge_dim)
        self.edge_bn = nn.BatchNorm1d(cfg.edge_dim)
        self.layers = nn.ModuleList(
            EGATLayer(cfg.node_dim, cfg.edge_dim, cfg.residual) for _ in range(cfg.n_layers)
        )
        self.input_dim = cfg.input_dim

    def embed(self, batch):
        feats = batch.node_features()
        if feats.shape[-1] != self.input_dim:
            raise ValueError(
                f"expected {self.input_dim} node features, got {feats.shape[-1]}"
            )
        x = self.A0(feats)
        x = self.node_bn(x.reshape(-1, x.shape[-1])).reshape(x.shape)
        e = self.A1(batch.distances().unsqueeze(-1))
        e = self.edge_bn(e.reshape(-1, e.shape[-1])).reshape(e.shape)
        return x, e

    def forward(self, batch):
        x, e = self.embed(batch)
        for layer in self.layers:
            x = layer(x, e)
        check_finite(x, "encoder")
        return Encoding(x, x.mean(dim=1), e)


class Decoder(nn.Module):
    """Context -> multi-head glimpse -> single-head clipped pointer logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.node_dim
        self.problem = cfg.problem
        self.n_heads, self.head_dim = cfg.n_heads, cfg.head_dim
        self.clip = cfg.logit_clip
        self.v_first = nn.Parameter(torch.empty(d))
        ctx_in = 2 * d if cfg.problem == TSP else d + 1
        self.Wx = nn.Linear(ctx_in, d, bias=False)
        self.Wq = nn.Linear(d, d, bias=False)
        self.Wk = nn.Linear(d, d, bias=False)
        self.Wv = nn.Linear(d, d, bias=False)
        self.Wf = nn.Linear(d, d, bias=False)
        self.Wk_out = nn.Linear(d, d, bias=False)
        nn.init.uniform_(self.v_first, -1 / math.sqrt(d), 1 / math.sqrt(d))

    def precompute(self, enc: Encoding):
        B, m, d = enc.nodes.shape
        split = lambda t: t.view(B, m, self.n_heads, self.head_dim).transpose(1, 2)
        return split(self.Wk(enc.nodes)), split(self.Wv(enc.nodes)), self.Wk_out(enc.nodes)

    def context(self, state: BatchState, enc: Encoding):
        nodes = enc.nodes
        rows = torch.arange(nodes.shape[0])
        if self.problem == TSP:
            if state.t == 1:
                return enc.graph + self.v_first
            pair = torch.cat([nodes[rows, state.first], nodes[rows, state.last]], dim=-1)
            return enc.graph + self.Wx(pair)
        # CVRP: last node (the depot at t=1) with the remaining capacity
        last = torch.cat([nodes[rows, state.last], state.remaining.unsqueeze(-1).to(nodes.dtype)], -1)
        return enc.graph + self.Wx(last)

    def logits(self, cache, context, mask):
        """Clipped pointer scores with -inf on infeasible nodes, shape (B, m)."""
        keys, values, out_keys = cache
        B = context.shape[0]
        q = self.Wq(context).view(B, self.n_heads, 1, self.head_dim)
        compat = (q @ keys.transpose(-1, -2)).squeeze(2) / math.sqrt(self.head_dim)
        attn = masked_softmax(compat, mask.unsqueeze(1))
        glimpse = (attn.unsqueeze(2) @ values).squeeze(2).reshape(B, -1)
        c1 = self.Wf(glimpse)
        score = (out_keys @ c1.unsqueeze(-1)).squeeze(-1) / math.sqrt(out_keys.shape[-1])
        u = self.clip * torch.tanh(score)
        return u.masked_fill(~mask, float("-inf"))

    def forward(self, cache, context, mask, temperature=1.0):
        """Log-probabilities over nodes for one decoding step."""
        if not mask.any(dim=-1).all():
            raise InfeasibleActionError("empty feasible set")
        return torch.log_softmax(self.logits(cache, context, mask) / temperature, dim=-1)


class Critic(nn.Module):
    """Two kernel-1 convolutions over node embeddings, mean-pool, linear head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.node_dim
        self.conv1 = nn.Conv1d(d, d, kernel_size=1)
        self.conv2 = nn.Conv1d(d, d, kernel_size=1)
        self.head = nn.Linear(d, 1)

    def forward(self, nodes):
        h = F.relu(self.conv1(nodes.transpose(1, 2)))
        h = F.relu(self.conv2(h))
        return self.head(h.mean(dim=-1)).squeeze(-1)


def _sample(probs, u, mask):
    # inverse-CDF draw; one pre-drawn uniform per row keeps streams batch-size independent
    cdf = probs.cumsum(-1)
    idx = torch.searchsorted(cdf, u.unsqueeze(-1).to(cdf.dtype).contiguous(), right=True).squeeze(-1)
    idx = idx.clamp_max(probs.shape[-1] - 1)
    bad = ~mask.gather(1, idx.unsqueeze(1)).squeeze(1)
    if bad.any():
        # u landed past the float cumsum; fall back to the last feasible node
        last_feasible = mask.shape[-1] - 1 - mask.flip(-1).int().argmax(-1)
        idx = torch.where(bad, last_feasible, idx)
    return idx


class EGATModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, **kwargs):
        super().__init__()
        self.cfg = cfg if cfg is not None else ModelConfig(**kwargs)
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        self.critic = Critic(self.cfg)

    def encode(self, batch):
        if batch.kind != self.cfg.problem:
            raise ValueError(f"model built for {self.cfg.problem}, got {batch.kind} batch")
        return self.encoder(batch)

    def value(self, enc: Encoding):
        return self.critic(enc.nodes)

    def actor_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("critic.")]

    def rollout(self, batch, decode="sample", temperature=1.0, actions=None,
                uniforms=None, generator=None, step_hook=None):
        """Construct one solution per batch row.

        ``decode`` is "greedy" or "sample"; passing ``actions`` replays a
        given padded action tensor instead (used to re-score stored
        trajectories). ``step_hook(log_probs, mask)`` sees every decoding step.
        """
        if decode not in ("greedy", "sample"):
            raise ValueError(f"unknown decode mode {decode!r}")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        enc = self.encode(batch)
        cache = self.decoder.precompute(enc)
        state = BatchState(batch)
        B, T = batch.batch_size, batch.max_steps()
        dtype = enc.nodes.dtype
        if decode == "sample" and actions is None and uniforms is None:
            uniforms = torch.rand(B, T, generator=generator, dtype=torch.float64)

        log_prob = torch.zeros(B, dtype=dtype)
        entropy = torch.zeros(B, dtype=dtype)
        n_steps = torch.zeros(B, dtype=torch.long)
        chosen, steps = [], []
        t = 0
        while not state.all_done():
            if t >= T:
                raise RuntimeError("decoder exceeded the maximum number of steps")
            mask = state.feasible_mask()
            active = ~state.done()
            logp = self.decoder(cache, self.decoder.context(state, enc), mask, temperature)
            if step_hook is not None:
                step_hook(logp, mask)
            if actions is not None:
                a = actions[:, t]
                if not mask.gather(1, a.unsqueeze(1)).all():
                    raise InfeasibleActionError(f"replayed action infeasible at step {t + 1}")
            elif decode == "greedy":
                a = logp.argmax(dim=-1)
            else:
                a = _sample(logp.exp(), uniforms[:, t], mask)
            step_logp = logp.gather(1, a.unsqueeze(1)).squeeze(1)
            p = logp.exp()
            # fill before multiplying: where() would still backprop 0 * -inf = nan
            step_ent = -(p * logp.masked_fill(~mask, 0.0)).sum(-1)
            step_logp = torch.where(active, step_logp, torch.zeros_like(step_logp))
            steps.append(step_logp)
            log_prob = log_prob + step_logp
            entropy = entropy + torch.where(active, step_ent, torch.zeros_like(step_ent))
            n_steps += active.long()
            state.step(a)
            chosen.append(a)
            t += 1
        actions_out = torch.stack(chosen, dim=1)
        lengths = batch_tour_lengths(batch, actions_out)
        check_finite(log_prob, "rollout log-probability")
        return Rollout(actions_out, log_prob, entropy, lengths, n_steps, enc, torch.stack(steps, dim=1))


def init_parameters(model, scheme="orthogonal", seed=0):
    """Re-initialise every weight matrix (orthogonal or xavier); biases to zero."""
    gen = torch.Generator().manual_seed(seed)
    for name, p in model.named_parameters():
        if "_bn." in name:
            continue
        if p.dim() >= 2:
            if scheme == "orthogonal":
                orthogonal_(p.data, 1.0, gen)
            elif scheme == "xavier":
                xavier_(p.data, gen)
            else:
                raise ValueError(f"unknown init scheme {scheme!r}")
        elif name.endswith("bias"):
            nn.init.zeros_(p)
        else:
            bound = 1 / math.sqrt(p.numel())
            p.data.uniform_(-bound, bound, generator=gen)
    return model
