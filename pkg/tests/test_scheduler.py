from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gere.scheduler import Source, parse_ratio, plan_bi, plan_task_only, plan_vanilla_mix, replay_count


def test_replay_count_examples():
    assert replay_count(4 / 64, 64) == 4
    assert replay_count(0.25, 16) == 4
    assert replay_count(4 / 64, 8) == 1
    with pytest.raises(ValueError):
        replay_count(0.0, 64)
    with pytest.raises(ValueError):
        replay_count(0.5, 0)


def test_parse_ratio():
    assert parse_ratio("4/64") == 0.0625
    assert parse_ratio("0.0625") == 0.0625
    for bad in ("1/0", "abc", "1", "0", "3/2"):
        with pytest.raises(ValueError):
            parse_ratio(bad)


def test_vanilla_mix_counts_and_determinism():
    plan = plan_vanilla_mix(300, 50, 64, seed=1, epochs=2)
    entries = [e for b in plan.batches for e in b]
    assert len(entries) == 2 * 350
    assert plan == plan_vanilla_mix(300, 50, 64, seed=1, epochs=2)
    assert plan != plan_vanilla_mix(300, 50, 64, seed=2, epochs=2)


def test_vanilla_mix_has_replay_free_batches():
    # task 10^4, pool 10^2, B=64: some batch lacks replay for every seed tried
    for seed in range(5):
        plan = plan_vanilla_mix(10_000, 100, 64, seed=seed)
        assert any(not plan.replay_indices(b) for b in range(len(plan)))


def test_bi_reference_contract():
    plan = plan_bi(task_size=60 * 500, pool_size=1000, batch_size=64, ratio=4 / 64, seed=0)
    assert len(plan) == 500
    for b in range(len(plan)):
        assert len(plan.replay_indices(b)) == 4
        assert len(plan.batches[b]) == 64
    for start in (0, 250):
        window = [i for b in range(start, start + 250) for i in plan.replay_indices(b)]
        assert sorted(window) == list(range(1000))


def test_bi_ragged_last_batch_keeps_replay():
    plan = plan_bi(task_size=130, pool_size=20, batch_size=64, ratio=4 / 64, seed=3)
    assert [len(plan.task_indices(b)) for b in range(len(plan))] == [60, 60, 10]
    assert all(len(plan.replay_indices(b)) == 4 for b in range(len(plan)))


def test_bi_errors_and_determinism():
    with pytest.raises(ValueError):
        plan_bi(100, 3, 64, 4 / 64, seed=0)
    assert plan_bi(100, 10, 16, 0.25, seed=4) == plan_bi(100, 10, 16, 0.25, seed=4)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 400),
    st.integers(1, 60),
    st.integers(2, 64),
    st.floats(0.01, 0.9),
    st.integers(0, 10_000),
    st.integers(1, 3),
)
def test_bi_coverage_and_task_multiset(task_size, pool_size, batch, ratio, seed, epochs):
    r = replay_count(ratio, batch)
    if r > pool_size:
        with pytest.raises(ValueError):
            plan_bi(task_size, pool_size, batch, ratio, seed, epochs)
        return
    plan = plan_bi(task_size, pool_size, batch, ratio, seed, epochs)
    replay = [i for b in range(len(plan)) for i in plan.replay_indices(b)]
    assert all(len(plan.replay_indices(b)) == r for b in range(len(plan)))
    # consumed in whole permutations: each full block of pool_size is a permutation
    for start in range(0, len(replay) - pool_size + 1, pool_size):
        assert sorted(replay[start : start + pool_size]) == list(range(pool_size))
    per_epoch = Counter(i for b in range(len(plan)) for i in plan.task_indices(b))
    assert per_epoch == Counter({i: epochs for i in range(task_size)})


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.integers(0, 80), st.integers(1, 64), st.integers(0, 10_000))
def test_vanilla_task_multiset(task_size, pool_size, batch, seed):
    plan = plan_vanilla_mix(task_size, pool_size, batch, seed)
    tasks = sorted(i for b in range(len(plan)) for i in plan.task_indices(b))
    replay = sorted(i for b in range(len(plan)) for i in plan.replay_indices(b))
    assert tasks == list(range(task_size))
    assert replay == list(range(pool_size))
    assert all(len(b) <= batch for b in plan.batches)


def test_task_only_plan_has_no_replay():
    plan = plan_task_only(100, 16, seed=0, epochs=2)
    assert all(s == Source.TASK for b in plan.batches for s, _ in b)
    assert len(plan) == 14
