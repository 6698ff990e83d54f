"""Disjoint-union batches of featured graphs with features held as torch tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .graph import FeaturedGraph, GraphError
from .nn import DTYPE, as_tensor, segment_sum


@dataclass
class GraphBatch:
    """Graphs stacked node-wise; ``edges`` hold global node indices.

    Graph ``g`` owns nodes ``offsets[g] .. offsets[g+1]-1`` and its edges
    form a contiguous, canonically sorted block of ``edges``.
    """

    sizes: np.ndarray
    edges: np.ndarray
    x: Tensor
    w: Tensor

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.node_graph = np.repeat(np.arange(len(self.sizes)), self.sizes)
        self.local = np.arange(self.n_nodes) - self.offsets[self.node_graph]
        self.edge_graph = self.node_graph[self.edges[:, 0]] if len(self.edges) else np.zeros(0, dtype=np.int64)
        if self.x.shape[0] != self.n_nodes:
            raise GraphError("node feature rows do not match the batch size")
        if self.w.shape[0] != len(self.edges):
            raise GraphError("edge feature rows do not match the edge count")

    @property
    def n_graphs(self) -> int:
        return len(self.sizes)

    @property
    def n_nodes(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_w(self) -> int:
        return self.w.shape[1]

    @classmethod
    def from_graphs(cls, graphs: Sequence[FeaturedGraph]) -> "GraphBatch":
        if not graphs:
            raise GraphError("cannot batch an empty list of graphs")
        sizes = [g.n for g in graphs]
        shift = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        edges = np.concatenate([g.edges + s for g, s in zip(graphs, shift)]) if graphs else np.zeros((0, 2))
        x = as_tensor(np.concatenate([g.x for g in graphs]))
        w = as_tensor(np.concatenate([g.w for g in graphs]))
        return cls(np.array(sizes), edges, x, w)

    def to_graphs(self) -> list[FeaturedGraph]:
        x = self.x.detach().numpy()
        w = self.w.detach().numpy()
        out = []
        bounds = np.searchsorted(self.edge_graph, np.arange(self.n_graphs + 1)) if self.n_edges else np.zeros(self.n_graphs + 1, dtype=np.int64)
        for g in range(self.n_graphs):
            lo, hi = self.offsets[g], self.offsets[g + 1]
            e0, e1 = bounds[g], bounds[g + 1]
            out.append(FeaturedGraph(int(hi - lo), self.edges[e0:e1] - lo, x[lo:hi].copy(), w[e0:e1].copy()))
        return out

    def with_features(self, x: Tensor | None = None, w: Tensor | None = None) -> "GraphBatch":
        return GraphBatch(self.sizes, self.edges, self.x if x is None else x, self.w if w is None else w)

    def graph_sum(self, values: Tensor) -> Tensor:
        """Sum per-node rows into one row per graph."""
        return segment_sum(values, self.node_graph, self.n_graphs)


def empty_features(n: int, d: int) -> Tensor:
    return torch.zeros((n, d), dtype=DTYPE)
