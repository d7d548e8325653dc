"""Shared fixtures: tiny graph tasks and policies used across the suite."""
from __future__ import annotations

import numpy as np
import pytest

from squeezelab.policy import PolicyTable, Vocab
from squeezelab.tasks import PathTaskSpec, TaskInstance


@pytest.fixture
def diamond_task() -> TaskInstance:
    """start -> {mid1, mid2} -> target, two length-2 solutions, vocab 4."""
    spec = PathTaskSpec(
        node_count=4,
        edges=((0, 1, 0), (0, 2, 1), (1, 3, 0), (2, 3, 0)),
        start=0,
        target=3,
        max_len=2,
        vocab_size=4,
    )
    return TaskInstance(prompt_id=0, label=3, spec=spec)


@pytest.fixture
def ladder_task() -> TaskInstance:
    """10 parallel 2-edge routes from start to target."""
    edges = []
    for i in range(10):
        edges.append((0, 1 + i, i))
        edges.append((1 + i, 11, 0))
    spec = PathTaskSpec(
        node_count=12,
        edges=tuple(edges),
        start=0,
        target=11,
        max_len=2,
        vocab_size=11,
    )
    return TaskInstance(prompt_id=0, label=11, spec=spec)


@pytest.fixture
def uniform_policy_v4() -> PolicyTable:
    return PolicyTable(Vocab(4), max_len=2)


def random_policy(vocab_size: int, max_len: int, rng: np.random.Generator,
                  prompt_ids=(0,), scale: float = 1.0) -> PolicyTable:
    """Policy with random logits stored at every prefix of every prompt."""
    policy = PolicyTable(Vocab(vocab_size), max_len)
    for pid in prompt_ids:
        stack = [()]
        while stack:
            prefix = stack.pop()
            policy.set_logits(pid, prefix, scale * rng.normal(size=vocab_size))
            if len(prefix) + 1 < max_len:
                for tok in range(vocab_size - 1):
                    stack.append(prefix + (tok,))
    return policy


def finite_difference_blocks(value_fn, policy, keys, h=1e-5):
    """Central finite differences of value_fn(policy) per logit coordinate."""
    out = {}
    size = policy.vocab.size
    for key in keys:
        fd = np.zeros(size)
        for v in range(size):
            plus = policy.copy()
            vec = plus.logit_vector(*key).copy()
            vec[v] += h
            plus.set_logits(key[0], key[1], vec)
            minus = policy.copy()
            vec = minus.logit_vector(*key).copy()
            vec[v] -= h
            minus.set_logits(key[0], key[1], vec)
            fd[v] = (value_fn(plus) - value_fn(minus)) / (2 * h)
        out[key] = fd
    return out
