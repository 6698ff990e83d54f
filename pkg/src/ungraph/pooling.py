"""Pooling oracle: eligible pair sets, pooling, and the unpooling plans that invert them.

Everything here is structure-only. A plan records, for each pooled graph,
the unpooling decisions that rebuild the graph it was pooled from; replaying
a chain of plans from a 3-node graph reconstructs the original exactly.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import FeaturedGraph, GraphError, connected_components, is_connected
from .unpool import BOTH, FIRST, SECOND, UnpoolDecisions, forced_unpool

Pair = tuple[int, int]

# Edge sets between pair r = (i_r, j_r) and pair s = (i_s, j_s), written as
# (slot in r, slot in s) with slot 0 = first member, 1 = second member.
# Value: (child set of r, child set of s, additional edge?, child pick).
PAIR_PAIR_TABLE: dict[frozenset, tuple[int, int, bool, int]] = {
    frozenset({(0, 0)}): (FIRST, FIRST, False, 0),
    frozenset({(0, 1)}): (FIRST, SECOND, False, 0),
    frozenset({(1, 0)}): (SECOND, FIRST, False, 0),
    frozenset({(1, 1)}): (SECOND, SECOND, False, 0),
    frozenset({(0, 0), (0, 1)}): (FIRST, BOTH, False, 0),
    frozenset({(1, 0), (1, 1)}): (SECOND, BOTH, False, 0),
    frozenset({(0, 0), (1, 0)}): (BOTH, FIRST, False, 0),
    frozenset({(0, 1), (1, 1)}): (BOTH, SECOND, False, 0),
    frozenset({(0, 0), (1, 1)}): (FIRST, FIRST, True, 0),
    frozenset({(0, 1), (1, 0)}): (FIRST, SECOND, True, 0),
    frozenset({(0, 0), (0, 1), (1, 0)}): (BOTH, FIRST, True, 1),
    frozenset({(0, 0), (1, 0), (1, 1)}): (BOTH, FIRST, True, 2),
    frozenset({(0, 0), (0, 1), (1, 1)}): (BOTH, SECOND, True, 1),
    frozenset({(0, 1), (1, 0), (1, 1)}): (BOTH, SECOND, True, 2),
    frozenset({(0, 0), (0, 1), (1, 0), (1, 1)}): (BOTH, BOTH, False, 0),
}


def _distances_upto2(g: FeaturedGraph, a: int) -> set[int]:
    near = set(g.neighbors(a))
    for v in list(near):
        near.update(g.neighbors(v))
    near.discard(a)
    return near


def is_eligible(g: FeaturedGraph, pairs: Sequence[Pair]) -> bool:
    """Disjoint pairs whose members are at distance one or two in ``g``."""
    used = [v for p in pairs for v in p]
    if len(set(used)) != len(used) or any(not 0 <= v < g.n for v in used):
        return False
    return all(b in _distances_upto2(g, a) for a, b in pairs)


class _Pairer:
    """Perfect eligible pairing of an even connected node set (recursive construction)."""

    def __init__(self, g: FeaturedGraph):
        self.g = g
        self.pairs: list[Pair] = []

    def comps(self, nodes: set[int]) -> list[list[int]]:
        return connected_components(self.g, nodes)

    def touches(self, comp: Sequence[int], hub: int) -> bool:
        return any(self.g.has_edge(hub, v) for v in comp)

    def pair_even(self, nodes: set[int]) -> None:
        if not nodes:
            return
        if len(nodes) == 2:
            a, b = sorted(nodes)
            self.pairs.append((a, b))
            return
        g = self.g
        deg = {v: sum(1 for u in g.neighbors(v) if u in nodes) for v in nodes}
        leaves = sorted(v for v in nodes if deg[v] == 1)
        if leaves:
            j = leaves[0]
            k = next(u for u in g.neighbors(j) if u in nodes)
            self.pairs.append((min(j, k), max(j, k)))
            self.cover(k, self.comps(nodes - {j, k}))
            return
        j = min(nodes)
        k = min(u for u in g.neighbors(j) if u in nodes)
        rest = self.comps(nodes - {j, k})
        side_j = [c for c in rest if not self.touches(c, k)]
        if sum(len(c) for c in side_j) % 2 == 0:
            self.pairs.append((j, k))
            self.cover(j, side_j)
            self.cover(k, [c for c in rest if self.touches(c, k)])
            return
        odd = next(c for c in side_j if len(c) % 2 == 1)
        l = min(v for v in odd if g.has_edge(j, v))
        rest = self.comps(nodes - {j, l})
        side_l = [c for c in rest if self.touches(c, l)]
        side_j = [c for c in rest if not self.touches(c, l)]
        assert sum(len(c) for c in side_j) % 2 == 0
        self.pairs.append((j, l))
        self.cover(j, side_j)
        self.cover(l, side_l)

    def cover(self, hub: int, comps: list[list[int]]) -> None:
        """Pair every node of ``comps``; each component touches ``hub``."""
        odd_reps = []
        for c in comps:
            if len(c) % 2 == 0:
                self.pair_even(set(c))
            else:
                odd_reps.append((min(v for v in c if self.g.has_edge(hub, v)), c))
        assert len(odd_reps) % 2 == 0
        for (a, _), (b, _) in zip(odd_reps[::2], odd_reps[1::2]):
            self.pairs.append((min(a, b), max(a, b)))
        for rep, c in odd_reps:
            self.cover(rep, self.comps(set(c) - {rep}))


def _spanning_leaf(g: FeaturedGraph) -> int:
    """Lowest-index leaf of the BFS spanning tree rooted at node 0."""
    parent = {0: -1}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in g.neighbors(u):
            if v not in parent:
                parent[v] = u
                queue.append(v)
    has_child = set(parent.values())
    return min(v for v in parent if v not in has_child)


def find_eligible_set(g: FeaturedGraph) -> list[Pair]:
    """An eligible set of floor(n/2) pairs for a connected graph."""
    if g.n < 2:
        raise GraphError("an eligible set needs at least two nodes")
    if not is_connected(g):
        raise GraphError("eligible sets are constructed for connected graphs only")
    nodes = set(range(g.n))
    if g.n % 2:
        nodes.discard(_spanning_leaf(g))
    pairer = _Pairer(g)
    pairer.pair_even(nodes)
    pairs = sorted(pairer.pairs)
    if len(pairs) != g.n // 2 or not is_eligible(g, pairs):
        raise AssertionError("eligible-set construction failed")
    return pairs


def pool(g: FeaturedGraph, pairs: Sequence[Pair]) -> tuple[FeaturedGraph, list[tuple[int, ...]]]:
    """Merge each pair into one node; pooled nodes are ordered by smallest member.

    ``merge_map[p]`` lists the original nodes of pooled node ``p``; for a
    pair the first entry corresponds to the first child on unpooling.
    """
    if not is_eligible(g, pairs):
        raise GraphError("pair set is not eligible for this graph")
    groups: list[tuple[int, ...]] = [tuple(p) for p in pairs]
    paired = {v for p in pairs for v in p}
    groups += [(v,) for v in range(g.n) if v not in paired]
    groups.sort(key=min)
    owner = np.empty(g.n, dtype=np.int64)
    for p, grp in enumerate(groups):
        owner[list(grp)] = p
    e = owner[g.edges] if g.m else np.zeros((0, 2), dtype=np.int64)
    e = [(a, b) for a, b in e.tolist() if a != b]
    return FeaturedGraph.from_edges(len(groups), e), groups


@dataclass
class PoolingPlan:
    source_n: int
    pooled: FeaturedGraph
    merge_map: list[tuple[int, ...]]
    decisions: UnpoolDecisions

    def to_dict(self) -> dict:
        return {
            "source_n": self.source_n,
            "pooled": json.loads(self.pooled.to_json()),
            "merge_map": [list(t) for t in self.merge_map],
            "decisions": self.decisions.to_dict(),
        }

    @classmethod
    def from_dict(cls, rec: dict) -> "PoolingPlan":
        return cls(
            int(rec["source_n"]),
            FeaturedGraph.from_json(rec["pooled"]),
            [tuple(t) for t in rec["merge_map"]],
            UnpoolDecisions.from_dict(rec["decisions"]),
        )

    def output_to_source(self) -> list[int]:
        """Index map from forced-unpool output nodes to source nodes."""
        out = []
        for grp in self.merge_map:
            out.extend(grp)
        return out

    def reconstruct(self, pooled: FeaturedGraph | None = None) -> FeaturedGraph:
        """Forced unpooling of the pooled graph, relabelled to source indices."""
        base = self.pooled if pooled is None else pooled
        out, _ = forced_unpool(base, self.decisions)
        return out.relabel(self.output_to_source())


def derive_unpool_plan(g: FeaturedGraph, pairs: Sequence[Pair]) -> PoolingPlan:
    """Decisions under which unpooling the pooled graph gives back ``g``."""
    pooled, groups = pool(g, pairs)
    split = np.array([len(grp) == 2 for grp in groups])
    intra = np.array([len(grp) == 2 and g.has_edge(*grp) for grp in groups])
    nsets = np.zeros((pooled.m, 2), dtype=np.int64)
    extra = np.zeros(pooled.m, dtype=bool)
    r_choice = np.zeros(pooled.m, dtype=np.int64)
    for k, (p, q) in enumerate(pooled.edges.tolist()):
        links = {(s, t) for s, a in enumerate(groups[p]) for t, b in enumerate(groups[q]) if g.has_edge(a, b)}
        if split[p] and split[q]:
            nsets[k, 0], nsets[k, 1], extra[k], r_choice[k] = PAIR_PAIR_TABLE[frozenset(links)]
        elif split[p]:
            nsets[k, 0] = sum(1 << s for s in {s for s, _ in links})
        elif split[q]:
            nsets[k, 1] = sum(1 << t for t in {t for _, t in links})
    anchor = np.full(pooled.n, -1, dtype=np.int64)
    for k, (p, q) in enumerate(pooled.edges.tolist()):
        for side, (v, other) in enumerate(((p, q), (q, p))):
            if split[v] and not intra[v] and nsets[k, side] == BOTH and anchor[v] < 0:
                anchor[v] = other
    dec = UnpoolDecisions(split, intra, anchor, nsets, extra, r_choice)
    return PoolingPlan(g.n, pooled, groups, dec)


def chain_length_bound(n: int) -> int:
    return 0 if n <= 3 else math.ceil(math.log2(n / 3))


def pooling_chain(g: FeaturedGraph) -> list[tuple[FeaturedGraph, PoolingPlan]]:
    """Pool repeatedly down to three nodes.

    Halves the graph while it has more than six nodes, then pools the first
    ``n - 3`` pairs of an eligible set to land on exactly three nodes.
    """
    if g.n < 3:
        raise GraphError("a pooling chain needs at least three nodes")
    if not is_connected(g):
        raise GraphError("a pooling chain needs a connected graph")
    steps = []
    cur = g.structure()
    while cur.n > 3:
        pairs = find_eligible_set(cur)
        if cur.n <= 6:
            pairs = pairs[: cur.n - 3]
        plan = derive_unpool_plan(cur, pairs)
        steps.append((cur, plan))
        cur = plan.pooled
    return steps


def replay_chain(steps: Sequence[tuple[FeaturedGraph, PoolingPlan]]) -> FeaturedGraph | None:
    """Run the forced unpoolings forward from the smallest graph."""
    if not steps:
        return None
    cur = steps[-1][1].pooled
    for _, plan in reversed(steps):
        cur = plan.reconstruct(cur)
    return cur
