"""Token-labeled graph path tasks with exact rule-based validation.

A task asks the policy to walk a small directed graph from a start node to a
target node by emitting edge tokens. Validation replays the walk: each token
must name an outgoing edge of the current node, the terminator ends the walk
early, and the reward is 1 exactly when the walk stops on the target. Because
the graphs are tiny the full set of correct trajectories is enumerable, which
turns exploration into a measurable quantity instead of a proxy.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import GenerationFailed, SpaceTooLarge
from .policy import PolicyTable, Vocab, derive_rng

MAX_NODE_COUNT = 64
ENUMERATION_BOUND = 1_000_000


@dataclass(frozen=True)
class PathTaskSpec:
    """A deterministic token-labeled graph: at most one edge per (node, token)."""

    node_count: int
    edges: tuple[tuple[int, int, int], ...]  # (from_node, to_node, token_id)
    start: int
    target: int
    max_len: int
    vocab_size: int

    def __post_init__(self):
        if not 1 <= self.node_count <= MAX_NODE_COUNT:
            raise ValueError(f"node_count must be in [1, {MAX_NODE_COUNT}]")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        object.__setattr__(self, "edges", tuple((int(u), int(v), int(t)) for u, v, t in self.edges))
        terminator = self.vocab_size - 1
        seen: set[tuple[int, int]] = set()
        for u, v, t in self.edges:
            if not (0 <= u < self.node_count and 0 <= v < self.node_count):
                raise ValueError(f"edge ({u},{v},{t}) references unknown node")
            if not 0 <= t < self.vocab_size:
                raise ValueError(f"edge token {t} outside vocab of size {self.vocab_size}")
            if t == terminator:
                raise ValueError("the terminator token cannot label an edge")
            if (u, t) in seen:
                raise ValueError(f"duplicate edge for (node {u}, token {t})")
            seen.add((u, t))
        if not 0 <= self.start < self.node_count:
            raise ValueError("start node out of range")
        if not 0 <= self.target < self.node_count:
            raise ValueError("target node out of range")

    @property
    def terminator(self) -> int:
        return self.vocab_size - 1

    def edge_map(self) -> dict[tuple[int, int], int]:
        return {(u, t): v for u, v, t in self.edges}


@dataclass(frozen=True)
class TaskInstance:
    """A prompt: reach `label` from the spec's start node."""

    prompt_id: int
    label: int
    spec: PathTaskSpec

    def __post_init__(self):
        if self.spec.start == self.label:
            raise GenerationFailed(
                f"task {self.prompt_id}: start equals target (trivial task)")
        if not _reachable_within(self.spec, self.label):
            raise GenerationFailed(
                f"task {self.prompt_id}: target {self.label} unreachable "
                f"within {self.spec.max_len} steps")


@dataclass(frozen=True)
class ValidatorResult:
    reward: int
    extracted: int | None


def _reachable_within(spec: PathTaskSpec, target: int) -> bool:
    frontier = {spec.start}
    seen = set(frontier)
    # One edge per step; reaching the target at step max_len leaves no room
    # for the terminator but still counts as a complete trajectory.
    for _ in range(spec.max_len):
        nxt = {v for u, v, _t in spec.edges if u in frontier}
        if target in nxt:
            return True
        nxt -= seen
        if not nxt:
            return False
        seen |= nxt
        frontier = nxt
    return False


def validate(task: TaskInstance, tokens) -> ValidatorResult:
    """Replay the walk; reward 1 iff it stops on the labelled node.

    An undefined edge fails extraction (reward 0, extracted None). The first
    terminator ends the walk; anything after it is ignored.
    """
    spec = task.spec
    edge_map = spec.edge_map()
    node = spec.start
    for tok in tokens:
        tok = int(tok)
        if tok == spec.terminator:
            break
        nxt = edge_map.get((node, tok))
        if nxt is None:
            return ValidatorResult(reward=0, extracted=None)
        node = nxt
    return ValidatorResult(reward=1 if node == task.label else 0, extracted=node)


def enumerate_correct(task: TaskInstance) -> set[tuple[int, ...]]:
    """Exact set of complete trajectories with reward 1.

    A complete trajectory either ends with the terminator before max_len or
    runs edge tokens to exactly max_len. Enumeration walks the graph
    depth-first with the length bound, so cycles are safe.
    """
    spec = task.spec
    edge_map = spec.edge_map()
    by_node: dict[int, list[tuple[int, int]]] = {}
    for (u, t), v in edge_map.items():
        by_node.setdefault(u, []).append((t, v))
    for lst in by_node.values():
        lst.sort()
    correct: set[tuple[int, ...]] = set()
    visited_walks = 0
    stack: list[tuple[int, tuple[int, ...]]] = [(spec.start, ())]
    while stack:
        node, walk = stack.pop()
        visited_walks += 1
        if visited_walks > ENUMERATION_BOUND:
            raise SpaceTooLarge(
                f"more than {ENUMERATION_BOUND} walks within length {spec.max_len}")
        if node == task.label:
            if len(walk) < spec.max_len:
                correct.add(walk + (spec.terminator,))
            else:
                correct.add(walk)
        if len(walk) < spec.max_len:
            for t, v in by_node.get(node, ()):
                stack.append((v, walk + (t,)))
    return correct


@dataclass(frozen=True)
class FamilyParams:
    """Knobs for the layered-graph task generator."""

    count: int = 32
    vocab_size: int = 4
    max_len: int = 4
    min_solutions: int = 10
    mid_layers: int = 2
    layer_width: int = 3
    edge_density: float = 0.95
    decoy_count: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.vocab_size < 3:
            raise ValueError("need at least two edge tokens plus the terminator")
        if not 0.0 < self.edge_density <= 1.0:
            raise ValueError("edge_density must be in (0, 1]")


def _generate_task(prompt_id: int, params: FamilyParams,
                   rng: np.random.Generator) -> TaskInstance | None:
    edge_tokens = params.vocab_size - 1
    width = params.layer_width
    layers: list[list[int]] = [[0]]
    next_id = 1
    for _ in range(params.mid_layers):
        layers.append(list(range(next_id, next_id + width)))
        next_id += width
    target = next_id
    final_layer = [target] + list(range(next_id + 1, next_id + 1 + params.decoy_count))
    next_id += 1 + params.decoy_count
    layers.append(final_layer)
    if next_id > MAX_NODE_COUNT:
        raise GenerationFailed(
            f"family params need {next_id} nodes, limit is {MAX_NODE_COUNT}")

    edges = []
    for layer, nxt_layer in zip(layers[:-1], layers[1:]):
        for node in layer:
            for tok in range(edge_tokens):
                if rng.random() < params.edge_density:
                    edges.append((node, nxt_layer[int(rng.integers(len(nxt_layer)))], tok))
    spec = PathTaskSpec(
        node_count=next_id,
        edges=tuple(edges),
        start=0,
        target=target,
        max_len=params.max_len,
        vocab_size=params.vocab_size,
    )
    try:
        task = TaskInstance(prompt_id=prompt_id, label=target, spec=spec)
    except GenerationFailed:
        return None
    try:
        solutions = enumerate_correct(task)
    except SpaceTooLarge:
        return None
    if len(solutions) < params.min_solutions:
        return None
    return task


def make_benchmark_suite(seed: int, params: FamilyParams) -> list[TaskInstance]:
    """Deterministically generate `params.count` tasks, each with enough solutions."""
    tasks = []
    for prompt_id in range(params.count):
        task = None
        for attempt in range(1000):
            rng = derive_rng(seed, prompt_id, attempt)
            task = _generate_task(prompt_id, params, rng)
            if task is not None:
                break
        if task is None:
            raise GenerationFailed(
                f"no valid task for prompt {prompt_id} after 1000 attempts "
                f"(min_solutions={params.min_solutions})")
        tasks.append(task)
    return tasks


def skewed_base_policy(task: TaskInstance, skew: float, seed: int) -> PolicyTable:
    """Uniform policy with one random correct trajectory boosted by +skew per step."""
    if skew < 0:
        raise ValueError(f"skew must be >= 0, got {skew}")
    spec = task.spec
    policy = PolicyTable(Vocab(spec.vocab_size), spec.max_len)
    if skew == 0:
        return policy
    solutions = sorted(enumerate_correct(task))
    rng = derive_rng(seed, task.prompt_id)
    chosen = solutions[int(rng.integers(len(solutions)))]
    for t, tok in enumerate(chosen):
        vec = policy.logit_vector(task.prompt_id, chosen[:t]).copy()
        vec[tok] += skew
        policy.set_logits(task.prompt_id, chosen[:t], vec)
    return policy


def build_suite_policy(tasks, skew: float, seed: int) -> PolicyTable:
    """One policy table covering a whole suite, skewed per task."""
    if not tasks:
        raise ValueError("empty task suite")
    first = tasks[0].spec
    policy = PolicyTable(Vocab(first.vocab_size), first.max_len)
    for task in tasks:
        if task.spec.vocab_size != first.vocab_size or task.spec.max_len != first.max_len:
            raise ValueError("suite tasks must share vocab_size and max_len")
        if skew == 0:
            continue
        single = skewed_base_policy(task, skew, seed)
        for key, vec in single.stored_items():
            policy.set_logits(key[0], key[1], vec)
    return policy


def save_suite(tasks, path) -> None:
    """Write a task suite as a JSON array."""
    payload = [
        {
            "prompt_id": task.prompt_id,
            "label": task.label,
            "nodes": task.spec.node_count,
            "edges": [[u, v, t] for u, v, t in task.spec.edges],
            "start": task.spec.start,
            "max_len": task.spec.max_len,
        }
        for task in tasks
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_suite(path, vocab_size: int | None = None) -> list[TaskInstance]:
    """Read a suite written by save_suite.

    The on-disk schema does not carry the vocab size; pass it explicitly
    (e.g. from a checkpoint header) or let it default to the highest edge
    token plus the terminator.
    """
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    tasks = []
    for obj in payload:
        edges = tuple((int(u), int(v), int(t)) for u, v, t in obj["edges"])
        size = vocab_size
        if size is None:
            max_tok = max((t for _u, _v, t in edges), default=0)
            size = max_tok + 2
        spec = PathTaskSpec(
            node_count=int(obj["nodes"]),
            edges=edges,
            start=int(obj["start"]),
            target=int(obj["label"]),
            max_len=int(obj["max_len"]),
            vocab_size=size,
        )
        tasks.append(TaskInstance(prompt_id=int(obj["prompt_id"]),
                                  label=int(obj["label"]), spec=spec))
    return tasks
