"""Causal DAG representation and intervention schedules.

The graph is time-invariant: an edge p -> c means the value of node p at
step t-1 influences node c at step t (lag-1 convention). All iteration over
nodes elsewhere in the package follows the canonical topological order
computed here.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .errors import (
    CycleDetectedError,
    IndexOutOfRangeError,
    ScheduleOutOfWindowError,
)


@dataclass(frozen=True)
class CausalDag:
    """Validated DAG over nodes 0..node_count-1.

    parents[i] is the sorted tuple of direct parents of node i; topo_order
    is the canonical (min-index Kahn) topological ordering, so identical
    edge sets always produce identical iteration order.
    """

    node_count: int
    parents: tuple[tuple[int, ...], ...]
    topo_order: tuple[int, ...]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(p, c) for c in range(self.node_count) for p in self.parents[c]]

    @property
    def roots(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.node_count) if not self.parents[i])

    def children(self, node: int) -> list[int]:
        _check_node(self, node)
        return [c for c in range(self.node_count) if node in self.parents[c]]


def _check_node(dag: CausalDag, node: int) -> None:
    if not 0 <= node < dag.node_count:
        raise IndexOutOfRangeError(
            f"node {node} out of range for {dag.node_count}-node graph"
        )


def build_dag(node_count: int, edges: list[tuple[int, int]]) -> CausalDag:
    """Build and validate a CausalDag from (parent, child) pairs.

    Raises CycleDetectedError if the edges contain a cycle (self-loops
    included) and IndexOutOfRangeError for node indices outside
    0..node_count-1. Duplicate edges are rejected.
    """
    if node_count < 1:
        raise IndexOutOfRangeError(f"node_count must be positive, got {node_count}")
    seen: set[tuple[int, int]] = set()
    parent_sets: list[set[int]] = [set() for _ in range(node_count)]
    for p, c in edges:
        if not (0 <= p < node_count and 0 <= c < node_count):
            raise IndexOutOfRangeError(f"edge ({p}, {c}) out of range")
        if p == c:
            raise CycleDetectedError(f"self-loop on node {p}")
        if (p, c) in seen:
            raise ValueError(f"duplicate edge ({p}, {c})")
        seen.add((p, c))
        parent_sets[c].add(p)

    # Kahn's algorithm with a min-heap frontier for a canonical order.
    indegree = [len(ps) for ps in parent_sets]
    children: list[list[int]] = [[] for _ in range(node_count)]
    for p, c in seen:
        children[p].append(c)
    frontier = [i for i in range(node_count) if indegree[i] == 0]
    heapq.heapify(frontier)
    order: list[int] = []
    while frontier:
        node = heapq.heappop(frontier)
        order.append(node)
        for c in children[node]:
            indegree[c] -= 1
            if indegree[c] == 0:
                heapq.heappush(frontier, c)
    if len(order) != node_count:
        stuck = sorted(i for i in range(node_count) if indegree[i] > 0)
        raise CycleDetectedError(f"cycle through nodes {stuck}")

    return CausalDag(
        node_count=node_count,
        parents=tuple(tuple(sorted(ps)) for ps in parent_sets),
        topo_order=tuple(order),
    )


def parents_of(dag: CausalDag, node: int) -> list[int]:
    """Direct parents of a node, empty for roots."""
    _check_node(dag, node)
    return list(dag.parents[node])


@dataclass
class InterventionSchedule:
    """Sparse clamp map (node, time) -> value over one forecast window.

    Time indices are 0-based positions inside the window, so legal values
    lie in [context_len, total_len). Absent keys mean "not intervened";
    value_at returns None for them rather than any default.
    """

    context_len: int
    total_len: int
    entries: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 < self.context_len < self.total_len:
            raise ScheduleOutOfWindowError(
                f"bad window: context_len={self.context_len} total_len={self.total_len}"
            )
        for (node, t), value in self.entries.items():
            if not self.context_len <= t < self.total_len:
                raise ScheduleOutOfWindowError(
                    f"schedule time {t} outside forecast window "
                    f"[{self.context_len}, {self.total_len})"
                )
            self.entries[(node, t)] = float(value)

    @property
    def horizon(self) -> int:
        return self.total_len - self.context_len

    @property
    def is_empty(self) -> bool:
        return not self.entries

    def value_at(self, node: int, t: int) -> float | None:
        return self.entries.get((node, t))

    def nodes(self) -> set[int]:
        return {node for node, _ in self.entries}

    def clamp_arrays(self, node_count: int):
        """Dense (mask, values) arrays of shape [node_count, horizon]."""
        import numpy as np

        mask = np.zeros((node_count, self.horizon), dtype=bool)
        values = np.zeros((node_count, self.horizon))
        for (node, t), value in self.entries.items():
            if not 0 <= node < node_count:
                raise IndexOutOfRangeError(f"scheduled node {node} out of range")
            mask[node, t - self.context_len] = True
            values[node, t - self.context_len] = value
        return mask, values


def empty_schedule(context_len: int, total_len: int) -> InterventionSchedule:
    return InterventionSchedule(context_len=context_len, total_len=total_len)
