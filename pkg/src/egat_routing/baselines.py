"""Non-learned reference solvers: construction heuristics, 2-opt, Held-Karp."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .env import CAPACITY_EPS, CVRP, TSP, tour_length

HELD_KARP_MAX_NODES = 14
IMPROVE_EPS = 1e-12


@dataclass
class BaselineResult:
    method: str
    tour: list
    length: float
    seconds: float


def _require(instance, kind):
    if instance.kind != kind:
        raise ValueError(f"{kind.upper()} instance required, got {instance.kind}")


def nearest_neighbor(instance, start=0):
    """Greedy tour: always move to the closest unvisited node (lowest index on ties)."""
    _require(instance, TSP)
    D = instance.distance_matrix()
    n = len(D)
    visited = np.zeros(n, dtype=bool)
    tour = [start]
    visited[start] = True
    for _ in range(n - 1):
        d = np.where(visited, np.inf, D[tour[-1]])
        nxt = int(np.argmin(d))
        tour.append(nxt)
        visited[nxt] = True
    return tour


def nearest_neighbor_best(instance):
    """Best nearest-neighbour tour over every start node."""
    tours = [nearest_neighbor(instance, s) for s in range(instance.n_nodes)]
    return min(tours, key=lambda t: tour_length(instance, t, check=False))


def insertion_cost(tour, node, D):
    """Length increase for inserting ``node`` after each position of ``tour``."""
    a = np.asarray(tour)
    b = np.roll(a, -1)
    return D[a, node] + D[node, b] - D[a, b]


def best_insertion(tour, node, D):
    """Position (insert after tour[pos]) with the smallest length increase."""
    return int(np.argmin(insertion_cost(tour, node, D)))


def insertion(instance, rule="farthest", seed=None):
    """Insertion heuristic.

    The cycle starts at node 0. ``rule`` picks the next node: "nearest" /
    "farthest" by its distance to the closest cycle node, "random" by a
    seeded permutation. Each node goes where it lengthens the cycle least.
    """
    _require(instance, TSP)
    if rule not in ("nearest", "farthest", "random"):
        raise ValueError(f"unknown insertion rule {rule!r}")
    D = instance.distance_matrix()
    n = len(D)
    tour = [0]
    in_tour = np.zeros(n, dtype=bool)
    in_tour[0] = True
    order = iter(np.random.default_rng(seed).permutation(np.arange(1, n))) if rule == "random" else None
    dist_to_tour = D[0].copy()
    for _ in range(n - 1):
        if rule == "random":
            node = int(next(order))
        else:
            cand = np.where(in_tour, np.inf if rule == "nearest" else -np.inf, dist_to_tour)
            node = int(np.argmin(cand) if rule == "nearest" else np.argmax(cand))
        if len(tour) == 1:
            tour.append(node)
        else:
            tour.insert(best_insertion(tour, node, D) + 1, node)
        in_tour[node] = True
        dist_to_tour = np.minimum(dist_to_tour, D[node])
    return tour


def two_opt(tour, instance, max_passes=1000):
    """First-improvement 2-opt; stops when a full pass finds nothing or at ``max_passes``."""
    _require(instance, TSP)
    D = instance.distance_matrix()
    tour = list(tour)
    n = len(tour)
    if n < 4:
        return tour
    for _ in range(max_passes):
        improved = False
        for i in range(n - 2):
            a, b = tour[i], tour[i + 1]
            # j ranges over edges (tour[j], tour[j+1]) not adjacent to edge i
            js = np.arange(i + 2, n if i > 0 else n - 1)
            if len(js) == 0:
                continue
            t = np.asarray(tour)
            c, d = t[js], t[(js + 1) % n]
            delta = D[a, c] + D[b, d] - D[a, b] - D[c, d]
            hit = np.flatnonzero(delta < -IMPROVE_EPS)
            if len(hit):
                j = int(js[hit[0]])
                tour[i + 1:j + 1] = tour[i + 1:j + 1][::-1]
                improved = True
        if not improved:
            break
    return tour


def is_two_opt_local(tour, instance):
    """True if no single 2-opt swap shortens ``tour`` (exhaustive scan)."""
    D = instance.distance_matrix()
    n = len(tour)
    for i in range(n - 2):
        for j in range(i + 2, n if i > 0 else n - 1):
            a, b, c, d = tour[i], tour[i + 1], tour[j], tour[(j + 1) % n]
            if D[a, c] + D[b, d] - D[a, b] - D[c, d] < -IMPROVE_EPS:
                return False
    return True


def _popcount_layers(k):
    masks = np.arange(1 << k)
    counts = np.zeros(1 << k, dtype=np.int64)
    for j in range(k):
        counts += (masks >> j) & 1
    return [masks[counts == s] for s in range(k + 1)]


def held_karp(instance):
    """Optimal TSP tour by dynamic programming over subsets. Returns (length, tour)."""
    _require(instance, TSP)
    n = instance.n_nodes
    if n > HELD_KARP_MAX_NODES:
        raise ValueError(f"held_karp supports at most {HELD_KARP_MAX_NODES} nodes, got {n}")
    if n <= 3:
        tour = list(range(n))
        return tour_length(instance, tour), tour
    D = instance.distance_matrix()
    k = n - 1  # node 0 is fixed as the start; bit j stands for node j + 1
    inner = D[1:, 1:]
    dp = np.full((1 << k, k), np.inf)
    parent = np.full((1 << k, k), -1, dtype=np.int64)
    for j in range(k):
        dp[1 << j, j] = D[0, j + 1]
    layers = _popcount_layers(k)
    for size in range(2, k + 1):
        M = layers[size]
        for j in range(k):
            Mj = M[(M >> j) & 1 == 1]
            prev = Mj ^ (1 << j)
            cand = dp[prev] + inner[:, j][None, :]
            best = np.argmin(cand, axis=1)
            parent[Mj, j] = best
            dp[Mj, j] = cand[np.arange(len(Mj)), best]
    full = (1 << k) - 1
    last = int(np.argmin(dp[full] + D[1:, 0]))
    order = []
    mask = full
    while last >= 0:
        order.append(last + 1)
        nxt = int(parent[mask, last])
        mask ^= 1 << last
        last = nxt
    tour = [0] + order[::-1]
    return tour_length(instance, tour), tour


def held_karp_lengths(coords, chunk=None):
    """Optimal tour lengths for a stack of same-size TSP instances (N, n, 2)."""
    coords = np.asarray(coords, dtype=np.float64)
    N, n, _ = coords.shape
    if n > HELD_KARP_MAX_NODES:
        raise ValueError(f"held_karp supports at most {HELD_KARP_MAX_NODES} nodes, got {n}")
    D = np.sqrt(((coords[:, :, None] - coords[:, None]) ** 2).sum(-1))
    if n <= 3:
        idx = np.arange(n)
        return D[:, idx, np.roll(idx, -1)].sum(-1)
    k = n - 1
    chunk = chunk or max(1, int(2e7 // ((1 << k) * k)))
    layers = _popcount_layers(k)
    out = np.empty(N)
    for s in range(0, N, chunk):
        Dc = D[s:s + chunk]
        B = len(Dc)
        inner = Dc[:, 1:, 1:]
        dp = np.full((B, 1 << k, k), np.inf)
        for j in range(k):
            dp[:, 1 << j, j] = Dc[:, 0, j + 1]
        for size in range(2, k + 1):
            M = layers[size]
            for j in range(k):
                Mj = M[(M >> j) & 1 == 1]
                prev = Mj ^ (1 << j)
                dp[:, Mj, j] = (dp[:, prev, :] + inner[:, None, :, j]).min(-1)
        out[s:s + chunk] = (dp[:, (1 << k) - 1, :] + Dc[:, 1:, 0]).min(-1)
    return out


def cvrp_greedy_reference(instance):
    """Nearest feasible customer each time; back to the depot when nothing fits."""
    _require(instance, CVRP)
    D = instance.distance_matrix()
    n = instance.n_nodes
    served = np.zeros(n, dtype=bool)
    served[0] = True
    pos, remaining, seq = 0, instance.capacity, []
    while not served.all():
        ok = ~served & (instance.demands <= remaining + CAPACITY_EPS)
        if not ok.any():
            seq.append(0)
            pos, remaining = 0, instance.capacity
            continue
        nxt = int(np.argmin(np.where(ok, D[pos], np.inf)))
        seq.append(nxt)
        served[nxt] = True
        remaining -= instance.demands[nxt]
        pos = nxt
    return seq


def tsp_method(name):
    """Solver callable ``(instance, seed) -> tour`` for a TSP method name."""
    base, _, post = name.partition("+")
    builders = {
        "nearest_neighbor": lambda inst, seed: nearest_neighbor(inst),
        "nearest_neighbor_best": lambda inst, seed: nearest_neighbor_best(inst),
        "nearest_insertion": lambda inst, seed: insertion(inst, "nearest"),
        "farthest_insertion": lambda inst, seed: insertion(inst, "farthest"),
        "random_insertion": lambda inst, seed: insertion(inst, "random", seed),
        "held_karp": lambda inst, seed: held_karp(inst)[1],
    }
    if base not in builders or post not in ("", "2opt"):
        raise ValueError(f"unknown method {name!r}")
    build = builders[base]
    if post:
        return lambda inst, seed: two_opt(build(inst, seed), inst)
    return build


TSP_METHODS = (
    "nearest_neighbor",
    "nearest_insertion",
    "random_insertion",
    "farthest_insertion",
    "nearest_neighbor+2opt",
    "farthest_insertion+2opt",
    "held_karp",
)
CVRP_METHODS = ("cvrp_greedy",)


def solve(instance, method, seed=0):
    """Run a named baseline and time it.

    TSP methods accept a ``+2opt`` suffix, e.g. ``"nearest_neighbor+2opt"``.
    """
    start = time.perf_counter()
    if instance.kind == CVRP:
        if method != "cvrp_greedy":
            raise ValueError(f"unknown CVRP method {method!r}")
        tour = cvrp_greedy_reference(instance)
    else:
        tour = tsp_method(method)(instance, seed)
    seconds = time.perf_counter() - start
    return BaselineResult(method, tour, tour_length(instance, tour), seconds)
