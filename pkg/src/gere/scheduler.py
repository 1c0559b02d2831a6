"""Batch plans mixing task samples with general replay samples.

Two planners:

* ``plan_vanilla_mix`` appends the whole replay pool to the task data and
  shuffles, so a batch may end up with no replay sample at all.
* ``plan_bi`` (Batch Insertion) puts exactly ``replay_count(ratio, B)`` replay
  samples in every batch, drawing them from a seeded permutation of the pool
  that is consumed without repetition and re-drawn once exhausted.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


class Source(enum.IntEnum):
    TASK = 0
    REPLAY = 1


Entry = tuple[Source, int]


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[tuple[Entry, ...], ...]
    batch_size: int
    ratio: float | None = None

    def __len__(self) -> int:
        return len(self.batches)

    def replay_indices(self, b: int) -> list[int]:
        return [i for s, i in self.batches[b] if s == Source.REPLAY]

    def task_indices(self, b: int) -> list[int]:
        return [i for s, i in self.batches[b] if s == Source.TASK]


def parse_ratio(text: str) -> float:
    """``"4/64"`` or ``"0.0625"``."""
    try:
        value = float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"bad ratio {text!r}") from None
    if not 0.0 < value < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {text}")
    return value


def replay_count(ratio: float, batch_size: int) -> int:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    # never silently drop replay on small batches
    return max(1, int(round(ratio * batch_size)))


def plan_vanilla_mix(task_size: int, pool_size: int, batch_size: int, seed: int, epochs: int = 1) -> BatchPlan:
    if task_size < 1 or pool_size < 0 or batch_size < 1:
        raise ValueError("task_size and batch_size must be >= 1")
    rng = np.random.default_rng([seed, 0x5A1])
    entries = [(Source.TASK, i) for i in range(task_size)] + [(Source.REPLAY, i) for i in range(pool_size)]
    batches = []
    for _ in range(epochs):
        order = rng.permutation(len(entries))
        for start in range(0, len(order), batch_size):
            batches.append(tuple(entries[j] for j in order[start : start + batch_size]))
    return BatchPlan(tuple(batches), batch_size)


def plan_task_only(task_size: int, batch_size: int, seed: int, epochs: int = 1) -> BatchPlan:
    return plan_vanilla_mix(task_size, 0, batch_size, seed, epochs)


def plan_bi(task_size: int, pool_size: int, batch_size: int, ratio: float, seed: int, epochs: int = 1) -> BatchPlan:
    r = replay_count(ratio, batch_size)
    if r > pool_size:
        raise ValueError(f"{r} replay samples per batch exceed the pool size {pool_size}")
    if task_size < 1:
        raise ValueError("task_size must be >= 1")
    n_task = max(1, batch_size - r)
    rng = np.random.default_rng([seed, 0xB1])
    replay_order = rng.permutation(pool_size)
    cursor = 0
    batches = []
    for _ in range(epochs):
        task_order = rng.permutation(task_size)
        for start in range(0, task_size, n_task):
            chunk = [(Source.TASK, int(i)) for i in task_order[start : start + n_task]]
            replay = []
            for _ in range(r):
                if cursor == pool_size:
                    replay_order = rng.permutation(pool_size)
                    cursor = 0
                replay.append((Source.REPLAY, int(replay_order[cursor])))
                cursor += 1
            batches.append(tuple(chunk + replay))
    return BatchPlan(tuple(batches), batch_size, ratio)
