import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egat_routing import baselines as B
from egat_routing.env import CVRP, TSP, Instance, check_solution, generate_cvrp, generate_tsp, tour_length


def brute_force(inst):
    """Exhaustive enumeration with node 0 fixed first."""
    best, best_tour = np.inf, None
    for perm in itertools.permutations(range(1, inst.n_nodes)):
        tour = [0, *perm]
        L = tour_length(inst, tour, check=False)
        if L < best:
            best, best_tour = L, tour
    return best, best_tour


def edges(tour):
    return {frozenset(e) for e in zip(tour, tour[1:] + tour[:1])}


@pytest.mark.parametrize("seed", range(10))
def test_held_karp_equals_enumeration(seed):
    inst = generate_tsp(8, seed=seed)
    L, tour = B.held_karp(inst)
    ref, ref_tour = brute_force(inst)
    assert edges(tour) == edges(ref_tour)
    assert L == pytest.approx(ref, abs=1e-12)


def test_held_karp_batched_matches_single():
    insts = [generate_tsp(9, seed=s) for s in range(12)]
    batch = B.held_karp_lengths(np.stack([i.coords for i in insts]), chunk=5)
    single = [B.held_karp(i)[0] for i in insts]
    assert np.allclose(batch, single, atol=1e-12)


def test_held_karp_small_and_guard():
    assert B.held_karp(generate_tsp(2, seed=0))[1] == [0, 1]
    assert B.held_karp(generate_tsp(3, seed=0))[0] > 0
    with pytest.raises(ValueError):
        B.held_karp(generate_tsp(B.HELD_KARP_MAX_NODES + 1, seed=0))
    with pytest.raises(ValueError):
        B.held_karp_lengths(np.zeros((1, 15, 2)))


def test_nearest_neighbor_on_a_line():
    inst = Instance(TSP, [[0, 0], [3, 0], [1, 0], [2, 0], [10, 0]])
    assert B.nearest_neighbor(inst) == [0, 2, 3, 1, 4]
    assert B.nearest_neighbor(inst, start=4) == [4, 1, 3, 2, 0]


def test_nearest_neighbor_tie_lowest_index():
    inst = Instance(TSP, [[0, 0], [1, 0], [-1, 0]])
    assert B.nearest_neighbor(inst) == [0, 1, 2]


def test_insertion_cost_oracle():
    inst = Instance(TSP, [[0, 0], [2, 0], [1, 1]])
    D = inst.distance_matrix()
    cost = B.insertion_cost([0, 1], 2, D)
    assert np.allclose(cost, [2 * np.sqrt(2) - 2] * 2)
    assert B.best_insertion([0, 1], 2, D) == 0


def test_insertion_rules_differ_and_are_tours():
    inst = generate_tsp(30, seed=1)
    tours = {r: B.insertion(inst, r, seed=0) for r in ("nearest", "farthest", "random")}
    for t in tours.values():
        check_solution(inst, t)
    assert len({tuple(t) for t in tours.values()}) == 3
    assert B.insertion(inst, "random", seed=5) == B.insertion(inst, "random", seed=5)
    with pytest.raises(ValueError):
        B.insertion(inst, "cheapest")


def test_farthest_beats_nearest_insertion_on_average():
    rng = np.random.default_rng(0)
    near, far = [], []
    for _ in range(100):
        inst = generate_tsp(50, rng=rng)
        near.append(tour_length(inst, B.insertion(inst, "nearest")))
        far.append(tour_length(inst, B.insertion(inst, "farthest")))
    assert np.mean(far) < np.mean(near)


def test_two_opt_uncrosses():
    inst = Instance(TSP, [[0, 0], [1, 0], [1, 1], [0, 1]])
    assert tour_length(inst, B.two_opt([0, 2, 1, 3], inst)) == pytest.approx(4.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 25))
def test_two_opt_is_local_optimum_and_never_worse(seed, n):
    inst = generate_tsp(n, seed=seed)
    start = list(np.random.default_rng(seed).permutation(n))
    out = B.two_opt(start, inst)
    check_solution(inst, out)
    assert B.is_two_opt_local(out, inst)
    assert tour_length(inst, out) <= tour_length(inst, start) + 1e-12


def test_two_opt_max_passes_bounds_work():
    inst = generate_tsp(40, seed=0)
    start = list(range(40))
    one = B.two_opt(start, inst, max_passes=1)
    assert tour_length(inst, one) <= tour_length(inst, start)


def test_cvrp_greedy_feasible():
    for seed in range(5):
        inst = generate_cvrp(20, seed=seed)
        check_solution(inst, B.cvrp_greedy_reference(inst))


def test_solve_dispatch():
    inst = generate_tsp(9, seed=0)
    opt = B.solve(inst, "held_karp").length
    for m in B.TSP_METHODS + ("nearest_neighbor_best", "random_insertion+2opt"):
        r = B.solve(inst, m)
        assert r.length >= opt - 1e-12
        assert r.seconds >= 0
    assert B.solve(inst, "farthest_insertion+2opt").length <= B.solve(inst, "farthest_insertion").length
    with pytest.raises(ValueError):
        B.solve(inst, "nearest_neighbor+3opt")
    with pytest.raises(ValueError):
        B.solve(generate_cvrp(20, seed=0), "two_opt")
    with pytest.raises(ValueError):
        B.nearest_neighbor(generate_cvrp(20, seed=0))
    assert B.solve(generate_cvrp(20, seed=0), "cvrp_greedy").length > 0


def test_nearest_neighbor_gap_on_random_tsp10():
    # the harness figure the desk-scale learning bar is compared with
    rng = np.random.default_rng(123)
    coords = rng.random((300, 10, 2))
    opt = B.held_karp_lengths(coords)
    nn = [tour_length(Instance(TSP, c), B.nearest_neighbor(Instance(TSP, c))) for c in coords]
    gap = np.mean((np.array(nn) - opt) / opt)
    assert 0.05 < gap < 0.2
