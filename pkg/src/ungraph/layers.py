"""Generator and critic building blocks that keep graph structure fixed."""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn

from .batch import GraphBatch
from .graph import GraphError
from .nn import DTYPE, BatchNorm, Mlp, agg, hard_gumbel_softmax, leaky_relu

# The four connected edge sets on three nodes, in sampling order.
INITIAL_EDGE_SETS = (
    ((0, 1), (0, 2)),
    ((0, 1), (1, 2)),
    ((0, 2), (1, 2)),
    ((0, 1), (0, 2), (1, 2)),
)


class InitialLayer(nn.Module):
    """Latent vector to a featured 3-node graph plus the log-probability of its edge set."""

    def __init__(self, d_in: int, d_x: int, d_w: int):
        super().__init__()
        self.d_in, self.d_x, self.d_w = d_in, d_x, d_w
        self.mlp_v = Mlp([d_in, 6 * d_x, 3 * d_x])
        self.mlp_e = Mlp([3 * d_x, 16, 4])
        self.mlp_w = Mlp([d_x, d_w, d_w])
        self.bn_w = BatchNorm(d_w)

    def structure_parameters(self) -> list[Tensor]:
        return list(self.mlp_e.parameters())

    def feature_parameters(self) -> list[Tensor]:
        return [*self.mlp_v.parameters(), *self.mlp_w.parameters(), *self.bn_w.parameters()]

    def edge_set_probs(self, x: Tensor) -> Tensor:
        return torch.softmax(self.mlp_e(x.reshape(-1, 3 * self.d_x)), dim=1)

    def forward(self, z: Tensor, rng: np.random.Generator | None = None, choice: np.ndarray | None = None):
        if z.shape[-1] != self.d_in:
            raise GraphError(f"latent width {z.shape[-1]} != {self.d_in}")
        b = z.shape[0]
        x = self.mlp_v(z).reshape(b, 3, self.d_x)
        logits = self.mlp_e(x.reshape(b, 3 * self.d_x))
        logp_all = torch.log_softmax(logits, dim=1)
        if choice is None:
            p = logp_all.detach().exp().numpy()
            u = rng.random(b)
            cum = np.cumsum(p, axis=1)
            choice = np.minimum((u[:, None] >= cum[:, :3]).sum(1), 3)
        choice = np.asarray(choice, dtype=np.int64)
        logp = logp_all[torch.arange(b), torch.as_tensor(choice)]
        edges = np.concatenate([np.array(INITIAL_EDGE_SETS[c]) + 3 * k for k, c in enumerate(choice)])
        xf = x.reshape(3 * b, self.d_x)
        w = leaky_relu(self.bn_w(self.mlp_w(agg(xf[edges[:, 0]], xf[edges[:, 1]]))))
        return GraphBatch(np.full(b, 3), edges, xf, w), logp, choice


class Mpnn(nn.Module):
    """Edge-conditioned message passing: ``act(BN(x_j Θ + Σ_i a_ij x_i H(w_ij)))``.

    ``H`` is linear from edge features to a ``d_x × d_y`` matrix. Optional
    per-edge weights ``a`` and per-node weights ``m`` support soft (interpolated)
    graphs; BN statistics are weighted by ``m``.
    """

    def __init__(self, d_x: int, d_w: int, d_y: int, norm: bool = True, act: bool = True):
        super().__init__()
        self.d_x, self.d_w, self.d_y = d_x, d_w, d_y
        self.theta = nn.Linear(d_x, d_y, bias=False, dtype=DTYPE)
        self.h = nn.Linear(max(d_w, 1), d_x * d_y, dtype=DTYPE)
        if d_w == 0:
            with torch.no_grad():
                self.h.weight.zero_()
            self.h.weight.requires_grad_(False)
        self.bn = BatchNorm(d_y) if norm else None
        self.act = act

    def messages(self, x_src: Tensor, w: Tensor) -> Tensor:
        d_x, d_y, d_w = self.d_x, self.d_y, self.d_w
        out = x_src @ self.h.bias.view(d_x, d_y)
        if d_w:
            mat = self.h.weight.view(d_x, d_y, d_w).permute(0, 2, 1).reshape(d_x * d_w, d_y)
            outer = (x_src[:, :, None] * w[:, None, :]).reshape(len(x_src), d_x * d_w)
            out = out + outer @ mat
        return out

    def forward(self, g: GraphBatch, edge_weight: Tensor | None = None, node_weight: Tensor | None = None) -> Tensor:
        x, e = g.x, g.edges
        y = self.theta(x)
        if len(e):
            src = np.concatenate([e[:, 0], e[:, 1]])
            dst = np.concatenate([e[:, 1], e[:, 0]])
            w2 = torch.cat([g.w, g.w], 0)
            msg = self.messages(x[src], w2)
            if edge_weight is not None:
                msg = msg * torch.cat([edge_weight, edge_weight])[:, None]
            y = y.index_add(0, torch.as_tensor(dst), msg)
        if self.bn is not None:
            y = self.bn(y, node_weight)
        return leaky_relu(y) if self.act else y


class SkipConnection(nn.Module):
    """Latent-conditioned per-node features appended after an unpooling layer."""

    def __init__(self, d_z: int, n_z: int, d_y: int, n_max: int):
        super().__init__()
        self.d_y, self.n_max = d_y, n_max
        self.mlp = Mlp([d_z, n_z * d_y, n_max * d_y])
        self.bn = BatchNorm(n_max * d_y)

    def forward(self, z: Tensor, g: GraphBatch) -> Tensor:
        if (g.sizes > self.n_max).any():
            raise GraphError(f"skip connection holds {self.n_max} rows but a graph has {g.sizes.max()} nodes")
        block = leaky_relu(self.bn(self.mlp(z))).reshape(len(z), self.n_max, self.d_y)
        # first n rows of each graph's block
        return block[torch.as_tensor(g.node_graph), torch.as_tensor(g.local)]


class FinalEdgeLayer(nn.Module):
    """Output edge features from the incoming edge feature and both endpoint features."""

    def __init__(self, d_x: int, d_w: int, d_u: int):
        super().__init__()
        self.inner = Mlp([d_x, d_w, d_w])
        self.outer = Mlp([d_x + 2 * d_w, d_u])

    def forward(self, g: GraphBatch) -> Tensor:
        e = g.edges
        a = agg(g.x[e[:, 0]], g.x[e[:, 1]])
        return self.outer(torch.cat([g.w, self.inner(a), a], 1))


class OutputHead(nn.Module):
    """Per-row MLP; in categorical mode rows become hard one-hot samples."""

    def __init__(self, widths, categorical: bool = False):
        super().__init__()
        self.mlp = Mlp(widths)
        self.categorical = categorical

    def forward(self, h: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        out = self.mlp(h)
        if self.categorical:
            out = hard_gumbel_softmax(out, rng)
        return out
