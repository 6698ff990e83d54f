"""Featured undirected graphs and the structural statistics used for evaluation."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised for malformed graphs or inputs outside an operation's domain."""


@dataclass(frozen=True, eq=False)
class FeaturedGraph:
    """Undirected simple graph with dense node and edge features.

    Edges are stored canonically as ``(i, j)`` with ``i < j`` and sorted
    lexicographically; ``w[k]`` is the feature row of ``edges[k]``.
    """

    n: int
    edges: np.ndarray
    x: np.ndarray
    w: np.ndarray
    _adj: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise GraphError("a graph needs at least one node")
        e = self.edges
        if e.ndim != 2 or e.shape[1] != 2:
            raise GraphError("edges must have shape (M, 2)")
        if len(e):
            if (e[:, 0] >= e[:, 1]).any():
                raise GraphError("edges must be canonical (i < j) without self-loops")
            if e.min() < 0 or e.max() >= self.n:
                raise GraphError("edge endpoint out of range")
            keys = e[:, 0] * self.n + e[:, 1]
            if (np.diff(keys) <= 0).any():
                raise GraphError("edges must be sorted and unique")
        if self.x.ndim != 2 or self.x.shape[0] != self.n:
            raise GraphError("node features must have exactly n rows")
        if self.w.ndim != 2 or self.w.shape[0] != len(e):
            raise GraphError("edge features must be aligned with the edge array")
        adj = [[] for _ in range(self.n)]
        for i, j in e.tolist():
            adj[i].append(j)
            adj[j].append(i)
        for row in adj:
            row.sort()
        object.__setattr__(self, "_adj", adj)

    @classmethod
    def from_edges(
        cls,
        n: int,
        edges: Iterable[Sequence[int]],
        x: np.ndarray | None = None,
        w: np.ndarray | None = None,
    ) -> "FeaturedGraph":
        """Build a graph from unordered pairs, canonicalizing and dropping repeats.

        When a pair occurs more than once its first feature row is kept.
        """
        pairs = [tuple(int(v) for v in p) for p in edges]
        w_rows = None
        if w is not None:
            w_rows = np.asarray(w, dtype=np.float64)
            if w_rows.ndim != 2:
                w_rows = w_rows.reshape(len(pairs), -1) if len(pairs) else w_rows.reshape(0, 0)
            if len(w_rows) != len(pairs):
                raise GraphError("edge features must have one row per edge")
        seen: dict[tuple[int, int], int] = {}
        for k, (i, j) in enumerate(pairs):
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            key = (i, j) if i < j else (j, i)
            seen.setdefault(key, k)
        keys = sorted(seen)
        e = np.array(keys, dtype=np.int64).reshape(-1, 2)
        if w_rows is None:
            w_arr = np.zeros((len(keys), 0))
        else:
            w_arr = w_rows[[seen[k] for k in keys]] if keys else np.zeros((0, w_rows.shape[1]))
        x_arr = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=np.float64).reshape(n, -1)
        return cls(n, e, x_arr, w_arr)

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_w(self) -> int:
        return self.w.shape[1]

    def neighbors(self, i: int) -> list[int]:
        return self._adj[i]

    def degree(self, i: int) -> int:
        return len(self._adj[i])

    def edge_set(self) -> frozenset[tuple[int, int]]:
        return frozenset(map(tuple, self.edges.tolist()))

    def has_edge(self, i: int, j: int) -> bool:
        return j in self._adj[i]

    def structure(self) -> "FeaturedGraph":
        """Same graph with features stripped."""
        return FeaturedGraph(self.n, self.edges, np.zeros((self.n, 0)), np.zeros((self.m, 0)))

    def relabel(self, mapping: Sequence[int]) -> "FeaturedGraph":
        """Move node ``i`` to position ``mapping[i]`` (a permutation)."""
        mapping = np.asarray(mapping, dtype=np.int64)
        if sorted(mapping.tolist()) != list(range(self.n)):
            raise GraphError("relabel mapping must be a permutation")
        x = np.empty_like(self.x)
        x[mapping] = self.x
        return FeaturedGraph.from_edges(self.n, mapping[self.edges].tolist(), x, self.w)

    def subgraph(self, nodes: Sequence[int]) -> "FeaturedGraph":
        """Induced subgraph on ``nodes``, relabelled in the given order."""
        index = {v: k for k, v in enumerate(nodes)}
        keep = [k for k, (i, j) in enumerate(self.edges.tolist()) if i in index and j in index]
        pairs = [(index[i], index[j]) for i, j in self.edges[keep].tolist()]
        return FeaturedGraph.from_edges(len(nodes), pairs, self.x[list(nodes)], self.w[keep])

    def to_json(self) -> str:
        rec = {"n": self.n, "edges": self.edges.tolist(), "x": self.x.tolist()}
        if self.d_w:
            rec["w"] = self.w.tolist()
        return json.dumps(rec)

    @classmethod
    def from_json(cls, line: str | Mapping) -> "FeaturedGraph":
        rec = json.loads(line) if isinstance(line, str) else line
        n = int(rec["n"])
        edges = rec.get("edges", [])
        x = np.asarray(rec.get("x", [[] for _ in range(n)]), dtype=np.float64).reshape(n, -1)
        w = rec.get("w")
        if w is not None:
            w = np.asarray(w, dtype=np.float64).reshape(len(edges), -1)
        g = cls.from_edges(n, edges, x, w)
        if g.m != len(edges):
            raise GraphError("duplicate edges in serialized graph")
        return g


@dataclass(frozen=True)
class NodeMap:
    """Where each input node of an unpooling step ends up in the output."""

    static_map: Mapping[int, int]
    split_map: Mapping[int, tuple[int, int]]

    def __post_init__(self):
        if set(self.static_map) & set(self.split_map):
            raise GraphError("a node cannot be both static and split")
        images = list(self.static_map.values())
        for a, b in self.split_map.values():
            images += [a, b]
        if len(set(images)) != len(images):
            raise GraphError("node map images must be distinct")
        if sorted(images) != list(range(len(images))):
            raise GraphError("node map images must cover the output nodes")

    @property
    def n_in(self) -> int:
        return len(self.static_map) + len(self.split_map)

    @property
    def n_out(self) -> int:
        return len(self.static_map) + 2 * len(self.split_map)

    def images(self, i: int) -> tuple[int, ...]:
        if i in self.static_map:
            return (self.static_map[i],)
        return tuple(self.split_map[i])

    def parent(self) -> dict[int, int]:
        """Output node -> input node."""
        out = {v: k for k, v in self.static_map.items()}
        for k, (a, b) in self.split_map.items():
            out[a] = k
            out[b] = k
        return out


def read_jsonl(path) -> list[FeaturedGraph]:
    with open(path) as fh:
        return [FeaturedGraph.from_json(line) for line in fh if line.strip()]


def write_jsonl(path, graphs: Iterable[FeaturedGraph]) -> None:
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(g.to_json() + "\n")


def connected_components(g: FeaturedGraph, nodes: Iterable[int] | None = None) -> list[list[int]]:
    """Components of the subgraph induced on ``nodes`` (all nodes by default).

    Each component is sorted; components are ordered by their smallest node.
    """
    allowed = set(range(g.n)) if nodes is None else set(nodes)
    seen: set[int] = set()
    comps = []
    for s in sorted(allowed):
        if s in seen:
            continue
        comp = [s]
        seen.add(s)
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in g.neighbors(u):
                if v in allowed and v not in seen:
                    seen.add(v)
                    comp.append(v)
                    queue.append(v)
        comps.append(sorted(comp))
    return comps


def is_connected(g: FeaturedGraph) -> bool:
    return len(connected_components(g)) == 1


def largest_component(g: FeaturedGraph) -> FeaturedGraph:
    """Largest connected component; ties go to the one holding the smallest node."""
    comps = connected_components(g)
    best = max(comps, key=len)
    return g.subgraph(best)


def edge_density(g: FeaturedGraph) -> float:
    if g.n < 2:
        raise GraphError("edge density needs at least two nodes")
    return g.m / (g.n * (g.n - 1) / 2)


def clustering(g: FeaturedGraph) -> np.ndarray:
    """Local clustering coefficient per node; degree < 2 gives 0."""
    nbrs = [set(g.neighbors(i)) for i in range(g.n)]
    out = np.zeros(g.n)
    for i in range(g.n):
        k = len(nbrs[i])
        if k < 2:
            continue
        tri = sum(len(nbrs[i] & nbrs[j]) for j in nbrs[i]) / 2
        out[i] = tri / (k * (k - 1) / 2)
    return out


def avg_clustering(g: FeaturedGraph) -> float:
    return float(clustering(g).mean())


def local_node_connectivity(g: FeaturedGraph, s: int, t: int) -> int:
    """Maximum number of internally vertex-disjoint s-t paths.

    Unit-capacity max-flow on the split-node digraph: node ``v`` becomes
    ``2v -> 2v+1`` with capacity 1, every edge ``{u, v}`` becomes ``2u+1 -> 2v``
    and ``2v+1 -> 2u``. Flow runs from ``2s+1`` to ``2t``.
    """
    if s == t:
        raise GraphError("connectivity is defined for distinct nodes")
    size = 2 * g.n
    cap: list[dict[int, int]] = [dict() for _ in range(size)]

    def arc(a: int, b: int) -> None:
        cap[a][b] = cap[a].get(b, 0) + 1
        cap[b].setdefault(a, 0)

    for v in range(g.n):
        if v != s and v != t:
            arc(2 * v, 2 * v + 1)
    for u, v in g.edges.tolist():
        arc(2 * u + 1, 2 * v)
        arc(2 * v + 1, 2 * u)

    source, sink = 2 * s + 1, 2 * t
    flow = 0
    while True:
        prev = {source: source}
        queue = deque([source])
        while queue and sink not in prev:
            a = queue.popleft()
            for b, c in cap[a].items():
                if c > 0 and b not in prev:
                    prev[b] = a
                    queue.append(b)
        if sink not in prev:
            return flow
        b = sink
        while b != source:
            a = prev[b]
            cap[a][b] -= 1
            cap[b][a] += 1
            b = a
        flow += 1


def avg_node_connectivity(g: FeaturedGraph) -> float:
    """Mean local vertex connectivity over all unordered node pairs.

    Only defined for connected graphs with at least two nodes.
    """
    if g.n < 2:
        raise GraphError("average node connectivity needs at least two nodes")
    if not is_connected(g):
        raise GraphError("average node connectivity is only defined for connected graphs")
    total = sum(local_node_connectivity(g, s, t) for s, t in combinations(range(g.n), 2))
    return total / (g.n * (g.n - 1) / 2)


def equal_under_map(g1: FeaturedGraph, g2: FeaturedGraph, mapping: Mapping[int, int] | Sequence[int]) -> bool:
    """True iff ``mapping`` carries the edge set of ``g1`` onto that of ``g2``."""
    if isinstance(mapping, Mapping):
        items = dict(mapping)
    else:
        items = dict(enumerate(mapping))
    if sorted(items) != list(range(g1.n)) or sorted(items.values()) != list(range(g2.n)):
        raise GraphError("mapping must be a bijection between the node sets")
    mapped = {tuple(sorted((items[i], items[j]))) for i, j in g1.edges.tolist()}
    return mapped == set(g2.edge_set())


def random_connected_graph(n: int, rng: np.random.Generator, p_extra: float = 0.3, d_x: int = 0, d_w: int = 0) -> FeaturedGraph:
    """Uniform random recursive tree plus each remaining pair with probability ``p_extra``."""
    if n < 1:
        raise GraphError("a graph needs at least one node")
    perm = rng.permutation(n)
    pairs = {tuple(sorted((int(perm[k]), int(perm[rng.integers(0, k)])))) for k in range(1, n)}
    if p_extra > 0:
        for i, j in combinations(range(n), 2):
            if rng.random() < p_extra:
                pairs.add((i, j))
    pairs = sorted(pairs)
    x = rng.standard_normal((n, d_x))
    w = rng.standard_normal((len(pairs), d_w))
    return FeaturedGraph.from_edges(n, pairs, x, w)
