import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from egat_routing.env import (
    CVRP, TSP, BatchState, InfeasibleActionError, Instance, InstanceBatch, InvalidTourError,
    batch_tour_lengths, check_solution, cvrp_capacity, feasible_mask, generate_cvrp,
    generate_tsp, initial_state, is_terminal, opt_gap, random_batch, replay, split_routes,
    stack_instances, step, tour_length, unstack_instances,
)

SQUARE = Instance(TSP, [[0, 0], [1, 0], [1, 1], [0, 1]])


def random_feasible(instance, rng):
    """Uniformly random feasible completion, using only the single-instance API."""
    state, seq = initial_state(instance), []
    while not is_terminal(state, instance):
        choices = np.flatnonzero(feasible_mask(state, instance))
        a = int(rng.choice(choices))
        seq.append(a)
        state = step(state, a, instance)
    return seq


def test_generate_tsp_deterministic_and_in_unit_square():
    a, b = generate_tsp(20, seed=3), generate_tsp(20, seed=3)
    assert a == b
    assert a.coords.shape == (20, 2)
    assert np.all((a.coords >= 0) & (a.coords < 1))
    assert generate_tsp(20, seed=4) != a


def test_generate_cvrp_demands_and_capacity():
    for m, cap in ((20, 3.0), (50, 4.0), (100, 5.0)):
        inst = generate_cvrp(m, seed=0)
        assert inst.capacity == cap
        assert inst.n_nodes == m + 1 and inst.demands[0] == 0
        raw = inst.demands[1:] * 10
        assert np.allclose(raw, np.round(raw)) and raw.min() >= 1 and raw.max() <= 9


def test_capacity_requires_standard_size():
    with pytest.raises(ValueError):
        cvrp_capacity(7)
    assert cvrp_capacity(7, 2.5) == 2.5


@pytest.mark.parametrize("kwargs", [
    dict(kind="vrp", coords=[[0, 0]]),
    dict(kind=TSP, coords=[[0, 0, 0]]),
    dict(kind=CVRP, coords=[[0, 0], [1, 1]]),
    dict(kind=CVRP, coords=[[0, 0], [1, 1]], demands=[0.1, 0.5], capacity=1.0),
    dict(kind=CVRP, coords=[[0, 0], [1, 1]], demands=[0, 1.5], capacity=1.0),
    dict(kind=CVRP, coords=[[0, 0], [1, 1]], demands=[0, 0], capacity=1.0),
])
def test_instance_validation(kwargs):
    with pytest.raises(ValueError):
        Instance(**kwargs)


def test_square_tour_length():
    assert tour_length(SQUARE, [0, 1, 2, 3]) == pytest.approx(4.0)
    assert tour_length(SQUARE, [0, 2, 1, 3]) == pytest.approx(2 + 2 * np.sqrt(2))


def test_tsplib_metric_rounds_each_edge():
    inst = Instance(TSP, [[0, 0], [1.4, 0], [1.4, 1.6]])
    # edges 1.4 -> 1, 1.6 -> 2, sqrt(1.96 + 2.56) = 2.126 -> 2
    assert tour_length(inst, [0, 1, 2], metric="tsplib") == 5.0
    with pytest.raises(ValueError):
        tour_length(inst, [0, 1, 2], metric="manhattan")


def test_cvrp_length_counts_depot_legs():
    inst = Instance(CVRP, [[0, 0], [1, 0], [0, 1]], [0, 0.5, 0.5], 0.5)
    assert tour_length(inst, [1, 0, 2]) == pytest.approx(4.0)


@pytest.mark.parametrize("seq", [[0, 1, 2], [0, 1, 2, 3, 3], [0, 1, 2, 4]])
def test_invalid_tsp_tours(seq):
    with pytest.raises(InvalidTourError):
        check_solution(SQUARE, seq)


@pytest.mark.parametrize("seq,msg", [
    ([0, 1, 2], "start"),
    ([1, 0, 0, 2], "twice"),
    ([1, 2], "capacity"),
    ([1, 0, 1, 0, 2], "exactly once"),
])
def test_invalid_cvrp_solutions(seq, msg):
    inst = Instance(CVRP, [[0, 0], [1, 0], [0, 1]], [0, 0.5, 0.5], 0.5)
    with pytest.raises(InvalidTourError, match=msg):
        check_solution(inst, seq)


def test_split_routes():
    assert split_routes([3, 1, 0, 2, 0, 4]) == [[3, 1], [2], [4]]


def test_opt_gap():
    assert opt_gap([11, 12], [10, 10]) == pytest.approx(0.15)
    with pytest.raises(ValueError):
        opt_gap([1], [0])
    with pytest.raises(ValueError):
        opt_gap([1, 2], [1])


def test_depot_masked_at_start_and_after_depot():
    inst = generate_cvrp(20, seed=1)
    s = initial_state(inst)
    assert not feasible_mask(s, inst)[0]
    s = step(s, 5, inst)
    assert feasible_mask(s, inst)[0]
    s = step(s, 0, inst)
    assert not feasible_mask(s, inst)[0]
    assert s.remaining == inst.capacity
    with pytest.raises(InfeasibleActionError):
        step(s, 0, inst)


def test_replay_rejects_incomplete_sequence():
    with pytest.raises(InvalidTourError):
        replay(SQUARE, [0, 1])


def test_stack_roundtrip():
    insts = [generate_cvrp(20, seed=s) for s in range(3)]
    assert unstack_instances(CVRP, *stack_instances(insts)) == insts


def _batch_replay(instances, seqs):
    """Drive BatchState with the given sequences, checking masks against the scalar API."""
    batch = InstanceBatch.from_instances(instances, dtype=torch.float64)
    state = BatchState(batch)
    singles = [initial_state(i) for i in instances]
    T = max(len(s) for s in seqs)
    for t in range(T):
        mask = state.feasible_mask()
        acts = []
        for b, (inst, seq) in enumerate(zip(instances, seqs)):
            if t < len(seq):
                assert np.array_equal(mask[b].numpy(), feasible_mask(singles[b], inst))
                singles[b] = step(singles[b], seq[t], inst)
                acts.append(seq[t])
            else:
                assert mask[b].tolist() == [True] + [False] * (inst.n_nodes - 1)
                acts.append(0)
        state.step(torch.tensor(acts))
    assert state.all_done()
    return batch, state


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_batch_state_matches_scalar_state_cvrp(seed):
    rng = np.random.default_rng(seed)
    insts = [generate_cvrp(20, rng=rng) for _ in range(4)]
    seqs = [random_feasible(i, rng) for i in insts]
    batch, _ = _batch_replay(insts, seqs)
    T = max(len(s) for s in seqs)
    padded = torch.tensor([s + [0] * (T - len(s)) for s in seqs])
    lengths = batch_tour_lengths(batch, padded)
    for inst, seq, L in zip(insts, seqs, lengths):
        check_solution(inst, seq)
        assert L.item() == pytest.approx(tour_length(inst, seq), abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_batch_state_matches_scalar_state_tsp(seed, n):
    rng = np.random.default_rng(seed)
    insts = [generate_tsp(n, rng=rng) for _ in range(3)]
    seqs = [random_feasible(i, rng) for i in insts]
    batch, _ = _batch_replay(insts, seqs)
    lengths = batch_tour_lengths(batch, torch.tensor(seqs))
    for inst, seq, L in zip(insts, seqs, lengths):
        assert sorted(seq) == list(range(n))
        assert L.item() == pytest.approx(tour_length(inst, seq), abs=1e-9)


def test_random_batch_shapes():
    coords, dem, cap = random_batch(CVRP, 5, 20, np.random.default_rng(0))
    assert coords.shape == (5, 21, 2) and dem.shape == (5, 21) and np.all(cap == 3.0)
    coords, dem, cap = random_batch(TSP, 5, 7, np.random.default_rng(0))
    assert coords.shape == (5, 7, 2) and dem is None and cap is None


def test_batch_max_steps_and_distances():
    b = InstanceBatch.from_instances([generate_cvrp(20, seed=0)])
    assert b.max_steps() == 40
    d = b.distances()[0].numpy()
    assert np.allclose(d, generate_cvrp(20, seed=0).distance_matrix(), atol=1e-6)
    assert np.all(np.diag(d) == 0)
