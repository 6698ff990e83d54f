"""Finite-difference checks of every differentiable block, and the structure/feature gradient split."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from .batch import GraphBatch
from .critic import Discriminator, Encoder, SoftGraph
from .generator import Generator, GeneratorSpec
from .graph import random_connected_graph
from .layers import Mpnn
from .nn import DTYPE, finite_difference_check
from .unpool import UnpoolHyper, UnpoolLayer

TOLERANCE = 1e-4
STEP = 1e-4
UNPOOL_MLPS = ("mlp_r", "mlp_y", "mlp_ia", "mlp_ie1", "mlp_ie2", "mlp_iea", "mlp_u")


@dataclass(frozen=True)
class CheckRow:
    config: int
    component: str
    group: str
    error: float
    tolerance: float = TOLERANCE
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def random_batch(rng: np.random.Generator, d_x: int, d_w: int, n_graphs: int = 3, n_range=(3, 7)) -> GraphBatch:
    graphs = [
        random_connected_graph(int(rng.integers(*n_range)), rng, p_extra=0.3, d_x=d_x, d_w=d_w) for _ in range(n_graphs)
    ]
    return GraphBatch.from_graphs(graphs)


def _named(module: nn.Module) -> dict[str, Tensor]:
    return {name: p for name, p in module.named_parameters() if p.requires_grad}


def _corrupted(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], scale: float = 1e-2) -> Callable[[], Tensor]:
    """Same loss value, but every autograd gradient is shifted by ``scale``."""

    def wrapped():
        extra = sum((p.sum() - p.sum().detach()) for p in params.values())
        return loss_fn() + scale * extra

    return wrapped


def _check(rows, config, component, group, loss_fn, params, corrupt):
    fn = _corrupted(loss_fn, params) if corrupt else loss_fn
    res = finite_difference_check(fn, params, h=STEP).values()
    error = max((r.error for r in res), default=0.0)
    rows.append(CheckRow(config, component, group, error, TOLERANCE, sum(r.checked for r in res), sum(r.skipped for r in res)))


def _config_dims(config: int) -> dict:
    rng = np.random.default_rng(1000 + config)
    return {
        "d_x": int(rng.choice([4, 6, 8])),
        "d_w": int(rng.choice([0, 2, 3])),
        "d_y": int(rng.integers(3, 6)),
        "d_u": int(rng.integers(2, 4)),
    }


def check_unpool(config: int, corrupt: bool = False) -> list[CheckRow]:
    """All seven unpooling MLPs: feature path for MLP-y/MLP-u, replayed log-probability for the rest."""
    dims = _config_dims(config)
    rng = np.random.default_rng(config)
    torch.manual_seed(config)
    batch = random_batch(rng, dims["d_x"], dims["d_w"])
    batch = batch.with_features(x=torch.as_tensor(batch.x, dtype=DTYPE))
    prob = tuple(range(0, 7, 2))
    layer = UnpoolLayer(UnpoolHyper(**dims, probabilistic=prob, k_v=5, k_ia=5, k_ie=5, k_w=5))
    layer.train()
    dec = layer(batch, rng=np.random.default_rng(config)).decisions
    rx = torch.as_tensor(rng.standard_normal((batch.n_nodes + int(dec.split.sum()), dims["d_y"])), dtype=DTYPE)

    def feature_loss():
        out = layer(batch, decisions=dec).output
        ru = torch.as_tensor(np.cos(np.arange(out.w.numel())).reshape(out.w.shape), dtype=DTYPE)
        return (out.x * rx).sum() + (out.w * ru).sum()

    def structure_loss():
        return layer(batch, decisions=dec).logp_total.sum()

    rows: list[CheckRow] = []
    for name in UNPOOL_MLPS:
        params = {f"{name}.{k}": p for k, p in getattr(layer, name).named_parameters()}
        loss = feature_loss if name in ("mlp_y", "mlp_u") else structure_loss
        _check(rows, config, "unpool", name, loss, params, corrupt)
    grads = torch.autograd.grad(feature_loss(), layer.structure_parameters(), allow_unused=True)
    leak = max((float(g.abs().max()) for g in grads if g is not None), default=0.0)
    rows.append(CheckRow(config, "unpool", "structure<-feature", leak, 0.0))
    return rows


def check_mpnn(config: int, corrupt: bool = False) -> list[CheckRow]:
    dims = _config_dims(config)
    rng = np.random.default_rng(config)
    torch.manual_seed(config)
    batch = random_batch(rng, dims["d_x"], dims["d_w"])
    layer = Mpnn(dims["d_x"], dims["d_w"], dims["d_y"])
    a = torch.as_tensor(rng.random(batch.n_edges), dtype=DTYPE)
    r = torch.as_tensor(rng.standard_normal((batch.n_nodes, dims["d_y"])), dtype=DTYPE)
    rows: list[CheckRow] = []
    _check(rows, config, "mpnn", "all", lambda: (layer(batch, a) * r).sum(), _named(layer), corrupt)
    return rows


def _trunk_kw():
    return dict(mpnn_widths=(4, 5), gate_width=4, dense_widths=(5, 4))


def check_critics(config: int, corrupt: bool = False) -> list[CheckRow]:
    dims = _config_dims(config)
    rng = np.random.default_rng(config)
    torch.manual_seed(config)
    batch = random_batch(rng, dims["d_x"], dims["d_w"], n_graphs=4)
    sg = SoftGraph(
        batch,
        torch.as_tensor(rng.random(batch.n_edges), dtype=DTYPE),
        torch.as_tensor(rng.random(batch.n_nodes), dtype=DTYPE),
    )
    rows: list[CheckRow] = []
    disc = Discriminator(dims["d_x"], dims["d_w"], head="tanh", **_trunk_kw())
    r = torch.as_tensor(rng.standard_normal(batch.n_graphs), dtype=DTYPE)
    _check(rows, config, "discriminator", "all", lambda: (disc(sg) * r).sum(), _named(disc), corrupt)
    enc = Encoder(dims["d_x"], dims["d_w"], 3, **_trunk_kw())
    r2 = torch.as_tensor(rng.standard_normal((batch.n_graphs, 3)), dtype=DTYPE)

    def enc_loss():
        mu, logvar = enc(sg)
        return (mu * r2).sum() + (logvar.exp() * r2).sum()

    _check(rows, config, "encoder", "all", enc_loss, _named(enc), corrupt)
    return rows


def tiny_generator_spec() -> GeneratorSpec:
    return GeneratorSpec.from_dict(
        {
            "name": "tiny",
            "d_in": 6,
            "initial": {"d_x": 4, "d_w": 2},
            "layers": [
                {"kind": "unpool", "probabilistic": [0, 1, 2], "d_y": 5, "d_u": 2, "k": 4},
                {"kind": "skip", "n_z": 2, "d_y": 3, "n_max": 6},
                {"kind": "mpnn", "d_out": 4},
                {"kind": "node_head", "widths": [2]},
                {"kind": "edge_head", "d_u": 2},
            ],
        }
    )


def check_generator_split(config: int) -> list[CheckRow]:
    """Largest |gradient| that a whole-generator feature loss sends into structure parameters."""
    torch.manual_seed(config)
    gen = Generator(tiny_generator_spec())
    rng = np.random.default_rng(config)
    z = torch.as_tensor(rng.standard_normal((5, 6)), dtype=DTYPE)
    res = gen(z, rng)
    loss = (res.graphs.x**2).sum() + res.graphs.w.sum()
    grads = torch.autograd.grad(loss, gen.structure_parameters(), allow_unused=True)
    leak = max((float(g.abs().max()) for g in grads if g is not None), default=0.0)
    return [CheckRow(config, "generator", "structure<-feature", leak, 0.0)]


def run_gradchecks(configs: int = 5, corrupt: bool = False) -> list[CheckRow]:
    rows: list[CheckRow] = []
    for c in range(configs):
        rows += check_unpool(c, corrupt)
        rows += check_mpnn(c, corrupt)
        rows += check_critics(c, corrupt)
        rows += check_generator_split(c)
    return rows


def format_rows(rows: list[CheckRow]) -> str:
    lines = [f"{'config':>6}  {'component':<14}{'group':<20}{'error':>12}{'entries':>9}{'kinks':>7}  result"]
    for r in rows:
        lines.append(
            f"{r.config:>6}  {r.component:<14}{r.group:<20}{r.error:>12.3e}{r.checked:>9}{r.skipped:>7}  {'pass' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
