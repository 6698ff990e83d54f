"""Graph critic (GAN discriminator) and graph encoder (VAE), plus soft-graph interpolation.

Both networks accept optional per-edge existence weights ``a`` and per-node
weights ``m``. A hard graph has all weights 1; an interpolated graph used by
the gradient penalty has weights in [0, 1] on the union of two edge sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .batch import GraphBatch
from .layers import Mpnn
from .nn import DTYPE, leaky_relu, segment_sum


@dataclass
class SoftGraph:
    """A batch plus continuous existence weights for its edges and nodes."""

    batch: GraphBatch
    edge_weight: Tensor | None = None
    node_weight: Tensor | None = None


class GraphTrunk(nn.Module):
    """MPNN stack, gated-sum readout and dense layers shared by critic and encoder."""

    def __init__(self, d_x: int, d_w: int, mpnn_widths=(64, 128), gate_width: int = 128, dense_widths=(128, 256), norm: bool = False):
        super().__init__()
        mp = []
        width = d_x
        for k in mpnn_widths:
            mp.append(Mpnn(width, d_w, k, norm=norm))
            width = k
        self.mpnns = nn.ModuleList(mp)
        self.gate = nn.Linear(width, gate_width, dtype=DTYPE)
        self.value = nn.Linear(width, gate_width, dtype=DTYPE)
        dense = []
        width = gate_width
        for k in dense_widths:
            dense.append(nn.Linear(width, k, dtype=DTYPE))
            width = k
        self.dense = nn.ModuleList(dense)
        self.out_width = width

    def forward(self, sg: SoftGraph) -> Tensor:
        g = sg.batch
        for mp in self.mpnns:
            g = g.with_features(x=mp(g, sg.edge_weight, sg.node_weight))
        h = torch.sigmoid(self.gate(g.x)) * torch.tanh(self.value(g.x))
        if sg.node_weight is not None:
            h = h * sg.node_weight[:, None]
        h = segment_sum(h, g.node_graph, g.n_graphs)
        for lin in self.dense:
            h = leaky_relu(lin(h))
        return h


class Discriminator(nn.Module):
    def __init__(self, d_x: int, d_w: int, head: str = "tanh", norm: bool = False, **trunk):
        super().__init__()
        if head not in ("tanh", "sigmoid", "linear"):
            raise ValueError(f"unknown critic head {head!r}")
        self.trunk = GraphTrunk(d_x, d_w, norm=norm, **trunk)
        self.out = nn.Linear(self.trunk.out_width, 1, dtype=DTYPE)
        self.head = head

    def forward(self, sg: SoftGraph | GraphBatch) -> Tensor:
        if isinstance(sg, GraphBatch):
            sg = SoftGraph(sg)
        s = self.out(self.trunk(sg))[:, 0]
        if self.head == "tanh":
            return torch.tanh(s)
        if self.head == "sigmoid":
            return torch.sigmoid(s)
        return s


class Encoder(nn.Module):
    """Graph to (mu, log-variance) of a diagonal Gaussian latent."""

    def __init__(self, d_x: int, d_w: int, d_z: int, norm: bool = False, **trunk):
        super().__init__()
        self.trunk = GraphTrunk(d_x, d_w, norm=norm, **trunk)
        self.out = nn.Linear(self.trunk.out_width, 2 * d_z, dtype=DTYPE)
        self.d_z = d_z

    def forward(self, sg: SoftGraph | GraphBatch) -> tuple[Tensor, Tensor]:
        if isinstance(sg, GraphBatch):
            sg = SoftGraph(sg)
        h = self.out(self.trunk(sg))
        return h[:, : self.d_z], h[:, self.d_z :]


def _union_layout(a: GraphBatch, b: GraphBatch):
    """Shared node slots and the union edge set of paired graphs a[k], b[k]."""
    sizes = np.maximum(a.sizes, b.sizes)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def place(g: GraphBatch):
        node_pos = offsets[g.node_graph] + g.local
        return node_pos, node_pos[g.edges] if g.n_edges else np.zeros((0, 2), dtype=np.int64)

    na, ea = place(a)
    nb, eb = place(b)
    total = int(offsets[-1])
    keys = np.unique(np.concatenate([ea[:, 0] * total + ea[:, 1], eb[:, 0] * total + eb[:, 1]]))
    edges = np.stack([keys // total, keys % total], axis=1) if len(keys) else np.zeros((0, 2), dtype=np.int64)
    pos_a = np.searchsorted(keys, ea[:, 0] * total + ea[:, 1])
    pos_b = np.searchsorted(keys, eb[:, 0] * total + eb[:, 1])
    return sizes, edges, (na, pos_a), (nb, pos_b)


def _spread(values: Tensor, index: np.ndarray, rows: int) -> Tensor:
    out = torch.zeros((rows,) + tuple(values.shape[1:]), dtype=DTYPE)
    if len(index) == 0:
        return out
    return out.index_copy(0, torch.as_tensor(index), values)


def _weights(sg: SoftGraph) -> tuple[Tensor, Tensor]:
    g = sg.batch
    a = sg.edge_weight if sg.edge_weight is not None else torch.ones(g.n_edges, dtype=DTYPE)
    m = sg.node_weight if sg.node_weight is not None else torch.ones(g.n_nodes, dtype=DTYPE)
    return a, m


def interpolate(real: SoftGraph, fake: SoftGraph, eps: np.ndarray) -> tuple[SoftGraph, list[Tensor]]:
    """Per-pair convex mix ``eps * real + (1 - eps) * fake`` on the union graph.

    Absent nodes and edges enter with zero features and zero weight. Returns
    the soft graph and its leaf input tensors (x, w, a, m) for the penalty.
    """
    ra, fb = real.batch, fake.batch
    if ra.n_graphs != fake.batch.n_graphs:
        raise ValueError("real and fake batches must pair up")
    sizes, edges, (na, pa), (nb, pb) = _union_layout(ra, fb)
    n_tot, m_tot = int(sizes.sum()), len(edges)
    node_graph = np.repeat(np.arange(len(sizes)), sizes)
    edge_graph = node_graph[edges[:, 0]] if m_tot else np.zeros(0, dtype=np.int64)
    e = torch.as_tensor(np.asarray(eps, dtype=np.float64))
    en, ee = e[node_graph][:, None], e[edge_graph][:, None]
    a_r, m_r = _weights(real)
    a_f, m_f = _weights(fake)
    x = en * _spread(ra.x.detach(), na, n_tot) + (1 - en) * _spread(fb.x.detach(), nb, n_tot)
    w = ee * _spread(ra.w.detach(), pa, m_tot) + (1 - ee) * _spread(fb.w.detach(), pb, m_tot)
    a = ee[:, 0] * _spread(a_r.detach(), pa, m_tot) + (1 - ee[:, 0]) * _spread(a_f.detach(), pb, m_tot)
    m = en[:, 0] * _spread(m_r.detach(), na, n_tot) + (1 - en[:, 0]) * _spread(m_f.detach(), nb, n_tot)
    leaves = [t.detach().requires_grad_(True) for t in (x, w, a, m)]
    batch = GraphBatch(sizes, edges, leaves[0], leaves[1])
    return SoftGraph(batch, leaves[2], leaves[3]), leaves


def gradient_penalty(critic: nn.Module, real: SoftGraph, fake: SoftGraph, rng: np.random.Generator) -> Tensor:
    """Mean over pairs of ``(||grad D(interp)|| - 1)^2``."""
    eps = rng.random(real.batch.n_graphs)
    sg, leaves = interpolate(real, fake, eps)
    score = critic(sg)
    grads = torch.autograd.grad(score.sum(), leaves, create_graph=True, allow_unused=True)
    g = sg.batch
    norm2 = torch.zeros(g.n_graphs, dtype=DTYPE)
    owners = (g.node_graph, g.edge_graph, g.edge_graph, g.node_graph)
    for grad, owner in zip(grads, owners):
        if grad is None or grad.numel() == 0:
            continue
        sq = grad.reshape(len(owner), -1).pow(2).sum(1)
        norm2 = norm2 + segment_sum(sq, owner, g.n_graphs)
    return ((torch.sqrt(norm2 + 1e-12) - 1) ** 2).mean()


def wgan_gp_loss(critic: nn.Module, real: SoftGraph, fake: SoftGraph, lam: float, rng: np.random.Generator):
    """Critic objective ``E D(fake) - E D(real) + lam * penalty``.

    Returns (d_loss, g_term, penalty) where ``g_term = -E D(fake)``.
    """
    if real.batch.n_graphs == 0 or fake.batch.n_graphs == 0:
        raise ValueError("WGAN-GP needs nonempty batches")
    d_real = critic(real)
    d_fake = critic(fake)
    penalty = gradient_penalty(critic, real, fake, rng) if lam > 0 else torch.zeros((), dtype=DTYPE)
    d_loss = d_fake.mean() - d_real.mean() + lam * penalty
    return d_loss, -d_fake.mean(), penalty
