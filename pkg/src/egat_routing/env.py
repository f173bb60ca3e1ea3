"""Routing instances, tour costs, decode states and feasibility masks.

Two flavours of state live here. ``DecodeState`` is a small immutable value
used by the classical solvers and by the feasibility checkers; ``BatchState``
holds the same information as torch tensors for a whole batch and is what the
neural decoder steps through. Both follow the same masking rules, and the test
suite checks they agree.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

TSP = "tsp"
CVRP = "cvrp"

# pre-normalisation capacities for the standard sizes; demands are divided by 10
CVRP_CAPACITY = {20: 30, 50: 40, 100: 50}
DEMAND_SCALE = 10.0
CAPACITY_EPS = 1e-9


class InvalidTourError(ValueError):
    pass


class InfeasibleActionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Instance:
    """A single TSP or CVRP instance.

    For CVRP the depot is node 0, ``demands[0] == 0`` and demands/capacity are
    in normalised units (capacity 3, 4 or 5 for the standard sizes).
    ``meta`` carries anything a parser wants to keep, e.g. the original
    capacity of a benchmark file.
    """

    kind: str
    coords: np.ndarray
    demands: np.ndarray | None = None
    capacity: float | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (TSP, CVRP):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (n, 2), got {coords.shape}")
        object.__setattr__(self, "coords", coords)
        if self.kind == CVRP:
            if self.demands is None or self.capacity is None:
                raise ValueError("CVRP instance needs demands and capacity")
            demands = np.asarray(self.demands, dtype=np.float64)
            if demands.shape != (len(coords),):
                raise ValueError("one demand per node (depot included) is required")
            if demands[0] != 0:
                raise ValueError("depot demand must be 0")
            if np.any(demands[1:] <= 0) or np.any(demands[1:] > self.capacity):
                raise ValueError("customer demands must lie in (0, capacity]")
            object.__setattr__(self, "demands", demands)
            object.__setattr__(self, "capacity", float(self.capacity))

    @property
    def n_nodes(self):
        return len(self.coords)

    @property
    def n_customers(self):
        return self.n_nodes - 1 if self.kind == CVRP else self.n_nodes

    def distance_matrix(self):
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        same_demands = (self.demands is None and other.demands is None) or (
            self.demands is not None
            and other.demands is not None
            and np.array_equal(self.demands, other.demands)
        )
        return (
            self.kind == other.kind
            and self.name == other.name
            and self.capacity == other.capacity
            and np.array_equal(self.coords, other.coords)
            and same_demands
        )

    __hash__ = None


def generate_tsp(m, seed=None, rng=None):
    """``m`` i.i.d. uniform points in the unit square."""
    if m < 2:
        raise ValueError("a TSP instance needs at least 2 nodes")
    rng = np.random.default_rng(seed) if rng is None else rng
    return Instance(TSP, rng.random((m, 2)))


def cvrp_capacity(m, capacity=None):
    """Normalised capacity for ``m`` customers."""
    if capacity is not None:
        return float(capacity)
    if m not in CVRP_CAPACITY:
        raise ValueError(
            f"no standard capacity for {m} customers; pass capacity explicitly"
        )
    return CVRP_CAPACITY[m] / DEMAND_SCALE


def generate_cvrp(m, seed=None, rng=None, capacity=None):
    """Depot plus ``m`` customers with integer demands 1..9 scaled by 1/10."""
    cap = cvrp_capacity(m, capacity)
    rng = np.random.default_rng(seed) if rng is None else rng
    coords = rng.random((m + 1, 2))
    demands = np.zeros(m + 1)
    demands[1:] = rng.integers(1, 10, size=m) / DEMAND_SCALE
    return Instance(CVRP, coords, demands, cap)


def random_batch(kind, batch_size, m, rng, capacity=None):
    """Arrays for ``batch_size`` random instances: (coords, demands, capacity).

    Cheaper than building ``Instance`` objects inside training loops.
    """
    if kind == TSP:
        return rng.random((batch_size, m, 2)), None, None
    cap = cvrp_capacity(m, capacity)
    coords = rng.random((batch_size, m + 1, 2))
    demands = np.zeros((batch_size, m + 1))
    demands[:, 1:] = rng.integers(1, 10, size=(batch_size, m)) / DEMAND_SCALE
    return coords, demands, np.full(batch_size, cap)


def stack_instances(instances):
    """Inverse of ``unstack_instances`` for a homogeneous list."""
    kinds = {inst.kind for inst in instances}
    sizes = {inst.n_nodes for inst in instances}
    if len(kinds) != 1 or len(sizes) != 1:
        raise ValueError("instances in a batch must share kind and size")
    coords = np.stack([inst.coords for inst in instances])
    if instances[0].kind == TSP:
        return coords, None, None
    demands = np.stack([inst.demands for inst in instances])
    capacity = np.array([inst.capacity for inst in instances])
    return coords, demands, capacity


def unstack_instances(kind, coords, demands=None, capacity=None):
    if kind == TSP:
        return [Instance(TSP, c) for c in coords]
    return [Instance(CVRP, c, d, q) for c, d, q in zip(coords, demands, capacity)]


# -- tour cost ---------------------------------------------------------------

def _leg_lengths(coords, seq, metric):
    pts = coords[seq]
    d = np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(-1))
    if metric == "tsplib":
        d = np.floor(d + 0.5)
    elif metric != "euclidean":
        raise ValueError(f"unknown metric {metric!r}")
    return d


def closed_sequence(instance, seq):
    """Node sequence with the closing edge made explicit."""
    seq = [int(s) for s in seq]
    if instance.kind == TSP:
        return seq + seq[:1]
    return [0] + seq + [0]


def tour_length(instance, seq, metric="euclidean", check=True):
    """Total cost of ``seq``.

    TSP: a permutation, closing edge included. CVRP: visits excluding the
    initial depot; every depot leg (including the final return) is counted.
    ``metric="tsplib"`` rounds each edge to the nearest integer as TSPLIB's
    EUC_2D does.
    """
    if check:
        check_solution(instance, seq)
    full = closed_sequence(instance, seq)
    return float(_leg_lengths(instance.coords, np.asarray(full), metric).sum())


def split_routes(seq):
    """CVRP visit sequence -> list of customer lists, one per vehicle route."""
    routes, cur = [], []
    for node in seq:
        if node == 0:
            if cur:
                routes.append(cur)
            cur = []
        else:
            cur.append(int(node))
    if cur:
        routes.append(cur)
    return routes


def check_solution(instance, seq):
    """Raise ``InvalidTourError`` unless ``seq`` is feasible for the instance."""
    seq = [int(s) for s in seq]
    n = instance.n_nodes
    if any(s < 0 or s >= n for s in seq):
        raise InvalidTourError("node index out of range")
    if instance.kind == TSP:
        if sorted(seq) != list(range(n)):
            raise InvalidTourError("TSP tour must visit every node exactly once")
        return
    customers = [s for s in seq if s != 0]
    if sorted(customers) != list(range(1, n)):
        raise InvalidTourError("every customer must be served exactly once")
    if seq and seq[0] == 0:
        raise InvalidTourError("the route cannot start by revisiting the depot")
    if any(a == 0 and b == 0 for a, b in zip(seq, seq[1:])):
        raise InvalidTourError("depot visited twice in a row")
    for route in split_routes(seq):
        if instance.demands[route].sum() > instance.capacity + CAPACITY_EPS:
            raise InvalidTourError("route exceeds vehicle capacity")


def opt_gap(lengths, refs):
    """Mean relative excess of ``lengths`` over reference lengths."""
    lengths = np.asarray(lengths, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if lengths.shape != refs.shape:
        raise ValueError("lengths and references differ in size")
    if lengths.size == 0:
        raise ValueError("no instances")
    if np.any(refs <= 0):
        raise ValueError("reference lengths must be positive")
    return float(np.mean((lengths - refs) / refs))


# -- single-instance decode state --------------------------------------------

@dataclass(frozen=True)
class DecodeState:
    visited: tuple
    first_node: int | None
    last_node: int | None
    remaining: float | None
    t: int

    @property
    def n_visited(self):
        return sum(self.visited)


def initial_state(instance):
    n = instance.n_nodes
    if instance.kind == TSP:
        return DecodeState((False,) * n, None, None, None, 1)
    # vehicle starts loaded at the depot
    return DecodeState((False,) * n, None, 0, instance.capacity, 1)


def is_terminal(state, instance):
    if instance.kind == TSP:
        return all(state.visited)
    return all(state.visited[1:])


def feasible_mask(state, instance):
    """Boolean array, True where the node may be chosen next."""
    visited = np.array(state.visited)
    if instance.kind == TSP:
        return ~visited
    mask = ~visited & (instance.demands <= state.remaining + CAPACITY_EPS)
    mask[0] = not (state.t == 1 or state.last_node == 0)
    return mask


def step(state, action, instance):
    action = int(action)
    if not feasible_mask(state, instance)[action]:
        raise InfeasibleActionError(f"node {action} is not feasible at step {state.t}")
    visited = list(state.visited)
    if instance.kind == TSP:
        visited[action] = True
        first = action if state.first_node is None else state.first_node
        return DecodeState(tuple(visited), first, action, None, state.t + 1)
    if action == 0:
        remaining = instance.capacity
    else:
        visited[action] = True
        remaining = state.remaining - instance.demands[action]
    first = action if state.first_node is None else state.first_node
    return DecodeState(tuple(visited), first, action, remaining, state.t + 1)


def replay(instance, seq):
    """Step through ``seq`` from the initial state, raising on any infeasible move."""
    state = initial_state(instance)
    states = [state]
    for a in seq:
        state = step(state, a, instance)
        states.append(state)
    if not is_terminal(state, instance):
        raise InvalidTourError("sequence ends before all nodes are served")
    return states


# -- batched torch state -----------------------------------------------------

@dataclass
class InstanceBatch:
    """Torch view of a homogeneous batch of instances."""

    kind: str
    coords: torch.Tensor  # (B, n, 2)
    demands: torch.Tensor | None = None  # (B, n)
    capacity: torch.Tensor | None = None  # (B,)

    @classmethod
    def from_arrays(cls, kind, coords, demands=None, capacity=None, dtype=torch.float32):
        t = lambda a: None if a is None else torch.as_tensor(np.asarray(a), dtype=dtype)
        return cls(kind, t(coords), t(demands), t(capacity))

    @classmethod
    def from_instances(cls, instances, dtype=torch.float32):
        return cls.from_arrays(instances[0].kind, *stack_instances(instances), dtype=dtype)

    @property
    def batch_size(self):
        return self.coords.shape[0]

    @property
    def n_nodes(self):
        return self.coords.shape[1]

    def max_steps(self):
        # a CVRP solution never needs more than one depot visit per customer
        return self.n_nodes if self.kind == TSP else 2 * (self.n_nodes - 1)

    def repeat(self, k):
        rep = lambda x: None if x is None else x.repeat_interleave(k, dim=0)
        return InstanceBatch(self.kind, rep(self.coords), rep(self.demands), rep(self.capacity))

    def index(self, idx):
        sel = lambda x: None if x is None else x[idx]
        return InstanceBatch(self.kind, sel(self.coords), sel(self.demands), sel(self.capacity))

    def to(self, dtype):
        cast = lambda x: None if x is None else x.to(dtype)
        return InstanceBatch(self.kind, cast(self.coords), cast(self.demands), cast(self.capacity))

    def node_features(self):
        """Model input: coordinates, with the normalised demand appended for CVRP."""
        if self.kind == TSP:
            return self.coords
        return torch.cat([self.coords, self.demands.unsqueeze(-1)], dim=-1)

    def distances(self):
        diff = self.coords[:, :, None, :] - self.coords[:, None, :, :]
        # sqrt has an infinite derivative at 0; the diagonal is exactly zero anyway
        sq = (diff ** 2).sum(-1)
        return torch.where(sq > 0, sq.clamp_min(1e-30).sqrt(), torch.zeros_like(sq))


class BatchState:
    """Decode state for a batch; mirrors ``DecodeState``/``feasible_mask``/``step``."""

    def __init__(self, batch: InstanceBatch):
        self.batch = batch
        B, n = batch.batch_size, batch.n_nodes
        self.kind = batch.kind
        self.visited = torch.zeros(B, n, dtype=torch.bool)
        self.first = torch.zeros(B, dtype=torch.long)
        self.last = torch.zeros(B, dtype=torch.long)
        self.t = 1
        if self.kind == CVRP:
            self.remaining = batch.capacity.clone()

    def done(self):
        if self.kind == TSP:
            return self.visited.all(dim=1)
        return self.visited[:, 1:].all(dim=1)

    def all_done(self):
        return bool(self.done().all())

    def feasible_mask(self):
        if self.kind == TSP:
            return ~self.visited
        fits = self.batch.demands <= self.remaining.unsqueeze(1) + CAPACITY_EPS
        mask = ~self.visited & fits
        depot_ok = (self.last != 0) & (self.t > 1)
        mask[:, 0] = depot_ok
        done = self.done()
        if done.any():
            # finished rows idle at the depot; these padding steps are dropped later
            mask[done] = False
            mask[done, 0] = True
        return mask

    def step(self, action):
        rows = torch.arange(action.shape[0])
        if self.kind == TSP:
            self.visited[rows, action] = True
            if self.t == 1:
                self.first = action.clone()
        else:
            at_depot = action == 0
            served = self.batch.demands[rows, action]
            self.remaining = torch.where(
                at_depot, self.batch.capacity, self.remaining - served
            )
            self.visited[rows, action] |= ~at_depot
            if self.t == 1:
                self.first = action.clone()
        self.last = action.clone()
        self.t += 1


def trim_actions(kind, actions, n_steps):
    """Per-row python lists from a padded (B, T) action tensor."""
    out = []
    for row, k in zip(actions.tolist(), n_steps.tolist()):
        out.append(row[:k])
    return out


def batch_tour_lengths(batch: InstanceBatch, actions: torch.Tensor):
    """Tour cost for padded action tensors (padding must be depot visits for CVRP)."""
    coords = batch.coords
    B = coords.shape[0]
    idx = actions
    if batch.kind == CVRP:
        zeros = torch.zeros(B, 1, dtype=actions.dtype)
        idx = torch.cat([zeros, actions, zeros], dim=1)
    else:
        idx = torch.cat([actions, actions[:, :1]], dim=1)
    pts = coords.gather(1, idx.unsqueeze(-1).expand(-1, -1, 2))
    return (pts[:, 1:] - pts[:, :-1]).norm(dim=-1).sum(-1)

