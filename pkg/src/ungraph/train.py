"""Losses, the REINFORCE update, VAE reconstruction, the adjacency baseline and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from itertools import permutations
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor, nn

from .batch import GraphBatch
from .critic import Discriminator, Encoder, SoftGraph, wgan_gp_loss
from .generator import ConfigError, Generator, GeneratorSpec, load_spec
from .graph import FeaturedGraph, connected_components
from .metrics import MetricsReport, evaluate, graph_properties
from .nn import (
    DTYPE,
    BatchNorm,
    adam_step,
    hard_gumbel_softmax,
    leaky_relu,
    load_checkpoint,
    make_adam,
    module_state,
    optimizer_state,
    restore_optimizer,
    save_checkpoint,
)

log = logging.getLogger(__name__)

EXHAUSTIVE_MATCH_MAX = 7


class NumericalError(RuntimeError):
    """Raised when a loss or parameter becomes non-finite."""


# -- policy gradient


def reinforce_update(
    logp: Tensor,
    rewards,
    params: Sequence[Tensor],
    alpha: float,
    standardize: bool = False,
    clip: float | None = None,
    reduction: str = "sum",
) -> float:
    """``θ += α ∇ Σ_i logp_i (r_i - mean r)``; returns the gradient norm.

    Equal rewards leave every parameter bit-identical. ``standardize`` also
    divides the advantages by their standard deviation, for unbounded rewards;
    ``clip`` rescales the gradient to at most that norm; ``reduction="mean"``
    averages over the batch instead of summing.
    """
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    r = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if len(r) < 2:
        raise ConfigError("a mean-reward baseline needs a batch of at least two samples")
    if len(r) != logp.shape[0]:
        raise ValueError("one reward per log-probability is required")
    if not np.isfinite(r).all():
        raise NumericalError("non-finite reward")
    if np.all(r == r[0]):
        return 0.0
    adv = r - r.mean()
    if standardize:
        adv = adv / max(float(adv.std()), 1e-12)
    if reduction == "mean":
        adv = adv / len(r)
    adv = torch.as_tensor(adv, dtype=DTYPE)
    params = [p for p in params if p.requires_grad]
    grads = torch.autograd.grad((logp * adv).sum(), params, allow_unused=True, retain_graph=True)
    norm = math.sqrt(sum(float(g.pow(2).sum()) for g in grads if g is not None))
    if not math.isfinite(norm):
        raise NumericalError("non-finite policy gradient")
    step = alpha if clip is None or norm <= clip else alpha * clip / norm
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is not None:
                p.add_(step * g)
    return norm


# -- VAE reconstruction


def _dense(n_max: int, x: Tensor, edges: np.ndarray, w: Tensor, n: int):
    d = x.shape[1]
    X = torch.zeros((n_max, d + 1), dtype=DTYPE)
    X = X.index_copy(0, torch.arange(n), torch.cat([x, torch.zeros((n, 1), dtype=DTYPE)], 1))
    X[n:, d] = 1.0
    A = torch.zeros((n_max, n_max), dtype=DTYPE)
    W = torch.zeros((n_max, n_max, w.shape[1]), dtype=DTYPE)
    if len(edges):
        i, j = torch.as_tensor(edges[:, 0]), torch.as_tensor(edges[:, 1])
        A[i, j] = 1.0
        A[j, i] = 1.0
        W = W.index_put((i, j), w).index_put((j, i), w)
    return X, A, W


_PERMS: dict[int, np.ndarray] = {}


def _all_perms(n: int) -> np.ndarray:
    if n not in _PERMS:
        _PERMS[n] = np.array(list(permutations(range(n))), dtype=np.int64)
    return _PERMS[n]


def best_permutation(Xa, Aa, Wa, Xb, Ab, Wb) -> np.ndarray:
    """Node order of graph b that best matches graph a.

    Exhaustive for up to seven (padded) nodes; above that a min-cost
    assignment on node features, the artificial flag and degree.
    """
    n = Xa.shape[0]
    if n <= EXHAUSTIVE_MATCH_MAX:
        P = _all_perms(n)
        cx = ((Xa[None] - Xb[P]) ** 2).sum((1, 2))
        Ap = Ab[P[:, :, None], P[:, None, :]]
        ca = ((Aa[None] - Ap) ** 2).sum((1, 2))
        cw = ((Wa[None] - Wb[P[:, :, None], P[:, None, :]]) ** 2).sum((1, 2, 3)) if Wa.shape[2] else 0.0
        return P[int(np.argmin(cx + ca + cw))]
    cost = ((Xa[:, None, :] - Xb[None, :, :]) ** 2).sum(2)
    cost = cost + (Aa.sum(1)[:, None] - Ab.sum(1)[None, :]) ** 2
    _, col = linear_sum_assignment(cost)
    return col


def recon_distance(xa: Tensor, ea: np.ndarray, wa: Tensor, xb: Tensor, eb: np.ndarray, wb: Tensor) -> Tensor:
    """Matched squared distance between two featured graphs, padded to equal size."""
    n_max = max(len(xa), len(xb))
    Xa, Aa, Wa = _dense(n_max, xa, ea, wa, len(xa))
    Xb, Ab, Wb = _dense(n_max, xb, eb, wb, len(xb))
    perm = best_permutation(*(t.detach().numpy() for t in (Xa, Aa, Wa, Xb, Ab, Wb)))
    p = torch.as_tensor(perm)
    cost = ((Xa - Xb[p]) ** 2).sum() + ((Aa - Ab[p][:, p]) ** 2).sum()
    if Wa.shape[2]:
        cost = cost + ((Wa - Wb[p][:, p]) ** 2).sum()
    return cost


def _split_batch(g: GraphBatch):
    bounds = np.searchsorted(g.edge_graph, np.arange(g.n_graphs + 1)) if g.n_edges else np.zeros(g.n_graphs + 1, dtype=np.int64)
    for k in range(g.n_graphs):
        lo, hi = g.offsets[k], g.offsets[k + 1]
        e0, e1 = bounds[k], bounds[k + 1]
        yield g.x[lo:hi], g.edges[e0:e1] - lo, g.w[e0:e1]


def batch_recon(real: GraphBatch, fake: GraphBatch) -> Tensor:
    return torch.stack([recon_distance(*a, *b) for a, b in zip(_split_batch(real), _split_batch(fake))])


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL of N(mu, exp(logvar)) from N(0, I), per row."""
    return 0.5 * (logvar.exp() + mu**2 - 1 - logvar).sum(1)


# -- adjacency-matrix baseline


class AdjGenerator(nn.Module):
    """Dense baseline: latent to node features, node existence and symmetric edge indicators."""

    def __init__(self, d_in: int, n_max: int, d_x: int, widths=(128, 256, 256, 512)):
        super().__init__()
        self.d_in, self.n_max, self.d_x = d_in, n_max, d_x
        lins, norms = [], []
        width = d_in
        for k in widths:
            lins.append(nn.Linear(width, k, dtype=DTYPE))
            norms.append(BatchNorm(k))
            width = k
        self.lins, self.norms = nn.ModuleList(lins), nn.ModuleList(norms)
        self.node_head = nn.Linear(width, n_max * d_x, dtype=DTYPE)
        self.exist_head = nn.Linear(width, n_max * 2, dtype=DTYPE)
        self.edge_head = nn.Linear(width, n_max * n_max * 2, dtype=DTYPE)
        self.iu, self.ju = np.triu_indices(n_max, 1)

    def forward(self, z: Tensor, rng: np.random.Generator) -> SoftGraph:
        b, n = z.shape[0], self.n_max
        h = z
        for lin, bn in zip(self.lins, self.norms):
            h = leaky_relu(bn(lin(h)))
        x = self.node_head(h).reshape(b * n, self.d_x)
        exist = hard_gumbel_softmax(self.exist_head(h).reshape(b, n, 2), rng)[..., 1]
        logits = self.edge_head(h).reshape(b, n, n, 2)
        logits = (logits + logits.transpose(1, 2)) / 2
        pair = hard_gumbel_softmax(logits[:, self.iu, self.ju], rng)[..., 1]
        a = pair * exist[:, self.iu] * exist[:, self.ju]
        shift = (np.arange(b) * n)[:, None]
        edges = np.stack([(self.iu[None] + shift).reshape(-1), (self.ju[None] + shift).reshape(-1)], 1)
        batch = GraphBatch(np.full(b, n), edges, x, torch.zeros((len(edges), 0), dtype=DTYPE))
        return SoftGraph(batch, a.reshape(-1), exist.reshape(-1))

    @staticmethod
    def to_graphs(sg: SoftGraph) -> list[FeaturedGraph]:
        """Existing nodes and edges, reduced to the largest component; graphs under two nodes are dropped."""
        out = []
        g = sg.batch
        m = sg.node_weight.detach().numpy() > 0.5
        a = sg.edge_weight.detach().numpy() > 0.5
        full = FeaturedGraph(g.n_nodes, g.edges[a], g.x.detach().numpy(), np.zeros((int(a.sum()), 0)))
        for k in range(g.n_graphs):
            nodes = [v for v in range(g.offsets[k], g.offsets[k + 1]) if m[v]]
            if len(nodes) < 2:
                continue
            comp = max(connected_components(full, nodes), key=len)
            if len(comp) >= 2:
                out.append(full.subgraph(comp))
        return out

    def sample(self, n: int, rng: np.random.Generator) -> list[FeaturedGraph]:
        was = self.training
        self.eval()
        with torch.no_grad():
            sg = self(torch.as_tensor(rng.standard_normal((n, self.d_in)), dtype=DTYPE), rng)
        self.train(was)
        return self.to_graphs(sg)


# -- structure signatures for the collapse proxy


def structure_signature(g: FeaturedGraph, rounds: int = 3) -> tuple:
    """Colour-refinement signature: equal for isomorphic graphs."""
    colors = [g.degree(v) for v in range(g.n)]
    for _ in range(rounds):
        colors = [hash((colors[v], tuple(sorted(colors[u] for u in g.neighbors(v))))) for v in range(g.n)]
    return (g.n, g.m, tuple(sorted(colors)))


def unique_rate(graphs: Sequence[FeaturedGraph]) -> float:
    if not graphs:
        return 0.0
    return len({structure_signature(g) for g in graphs}) / len(graphs)


# -- training loop


@dataclass
class TrainConfig:
    mode: str = "gan"
    preset: str = "waxman"
    spec_path: str | None = None
    batch_size: int = 64
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    alpha: float = 5e-2
    gp_lambda: float = 10.0
    iters: int = 5000
    eval_interval: int = 500
    eval_count: int = 256
    seed: int = 0
    reinforce_scope: str = "structure"
    reinforce_clip: float | None = None
    reinforce_reduction: str = "sum"
    critic_head: str = "tanh"
    critic_norm: bool = False
    critic_mpnn: tuple = (64, 128)
    critic_gate: int = 128
    critic_dense: tuple = (128, 256)
    collapse_stop: bool = False
    collapse_ratio: float = 0.1
    adj_n_max: int = 12
    adj_widths: tuple = (128, 256, 256, 512)
    lr_decay_to: float = 1.0
    select_on: tuple = ("wd_edge_density", "wd_clustering", "wd_connectivity", "wd_node_features")

    def __post_init__(self):
        if self.mode not in ("gan", "vae", "adj"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2 for the mean-reward baseline")
        if min(self.lr_g, self.lr_d, self.alpha) <= 0 or self.gp_lambda < 0:
            raise ConfigError("learning rates must be positive and the penalty weight nonnegative")
        if self.iters < 0 or self.eval_interval < 1:
            raise ConfigError("iteration counts must be nonnegative and the eval interval positive")
        if not 0 < self.lr_decay_to <= 1:
            raise ConfigError("lr_decay_to must lie in (0, 1]")
        if self.reinforce_scope not in ("structure", "all"):
            raise ConfigError(f"unknown reinforce scope {self.reinforce_scope!r}")
        self.critic_mpnn = tuple(self.critic_mpnn)
        self.critic_dense = tuple(self.critic_dense)
        self.adj_widths = tuple(self.adj_widths)
        self.select_on = tuple(self.select_on)
        unknown = set(self.select_on) - set(MetricsReport.names())
        if not self.select_on or unknown:
            raise ConfigError(f"select_on needs metric column names, got {sorted(unknown) or 'nothing'}")

    @classmethod
    def from_dict(cls, rec: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(rec) - known
        if extra:
            raise ConfigError(f"unknown training options {sorted(extra)}")
        return cls(**rec)


def selection_score(report: MetricsReport, columns: Sequence[str]) -> float:
    """Checkpoint-selection criterion: mean of the chosen metric columns (lower is better)."""
    return float(np.mean([getattr(report, c) for c in columns]))


METRIC_COLUMNS = ["iteration", "d_loss", "g_loss", "logp_mean", "reward_mean", *MetricsReport.names()]


class Trainer:
    """Owns models, optimizers and the random stream of one training run."""

    def __init__(
        self,
        cfg: TrainConfig,
        data: Sequence[FeaturedGraph],
        reference: Sequence[FeaturedGraph] | None = None,
        feature_dims: tuple[int, int] | None = None,
    ):
        self.cfg = cfg
        self.data = list(data)
        if feature_dims is None:
            if not self.data:
                raise ValueError("training needs a nonempty dataset")
            feature_dims = (self.data[0].d_x, self.data[0].d_w)
        self.feature_dims = (int(feature_dims[0]), int(feature_dims[1]))
        self.reference = list(reference) if reference is not None else None
        self.ref_props = graph_properties(self.reference) if self.reference else None
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        d_x, d_w = self.feature_dims
        self.spec: GeneratorSpec = load_spec(cfg.preset, cfg.spec_path)
        if cfg.mode == "adj":
            self.gen = AdjGenerator(self.spec.d_in, cfg.adj_n_max, d_x, cfg.adj_widths)
        else:
            self.gen = Generator(self.spec)
            if self.gen.out_d_x != d_x:
                raise ConfigError(f"generator emits {self.gen.out_d_x}-wide node features, data has {d_x}")
        trunk = dict(mpnn_widths=cfg.critic_mpnn, gate_width=cfg.critic_gate, dense_widths=cfg.critic_dense)
        if cfg.mode == "vae":
            self.critic = Encoder(d_x, d_w, self.spec.d_in, norm=cfg.critic_norm, **trunk)
        else:
            self.critic = Discriminator(d_x, d_w, head=cfg.critic_head, norm=cfg.critic_norm, **trunk)
        self.feature_params, self.structure_params = self._param_groups()
        self.critic_params = [p for p in self.critic.parameters() if p.requires_grad]
        self.g_params = self.feature_params + (self.critic_params if cfg.mode == "vae" else [])
        self.opt_g = make_adam(self.g_params, cfg.lr_g)
        self.opt_d = make_adam(self.critic_params, cfg.lr_d) if cfg.mode != "vae" else None
        self.iteration = 0
        self.peak_unique = 0.0
        self.stopped = False
        self.best_score = math.inf
        self.best_iteration = -1
        self.best_state: dict[str, Tensor] | None = None

    def _param_groups(self):
        if self.cfg.mode == "adj":
            return [p for p in self.gen.parameters() if p.requires_grad], []
        structure = self.gen.structure_parameters()
        if self.cfg.reinforce_scope == "all":
            structure = [p for p in self.gen.parameters() if p.requires_grad]
        return self.gen.feature_parameters(), structure

    def real_batch(self) -> GraphBatch:
        if not self.data:
            raise ValueError("this trainer was loaded without training data")
        idx = self.rng.integers(0, len(self.data), self.cfg.batch_size)
        return GraphBatch.from_graphs([self.data[i] for i in idx])

    def latent(self, n: int) -> Tensor:
        return torch.as_tensor(self.rng.standard_normal((n, self.spec.d_in)), dtype=DTYPE)

    def _apply(self, opt, params, loss: Tensor) -> None:
        adam_step(params, torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True), opt)

    def schedule(self) -> float:
        """Step-size multiplier: linear from 1 down to ``lr_decay_to`` at ``cfg.iters``."""
        if self.cfg.iters == 0:
            return 1.0
        frac = min(self.iteration / self.cfg.iters, 1.0)
        return 1.0 - (1.0 - self.cfg.lr_decay_to) * frac

    def step(self) -> dict:
        """One training iteration; returns the logged scalars."""
        cfg = self.cfg
        scale = self.schedule()
        alpha = cfg.alpha * scale
        for opt, lr in ((self.opt_g, cfg.lr_g), (self.opt_d, cfg.lr_d)):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr * scale
        self.gen.train()
        self.critic.train()
        real = SoftGraph(self.real_batch())
        if cfg.mode == "vae":
            mu, logvar = self.critic(real)
            eps = torch.as_tensor(self.rng.standard_normal(mu.shape), dtype=DTYPE)
            res = self.gen(mu + torch.exp(logvar / 2) * eps, self.rng)
            recon = batch_recon(real.batch, res.graphs)
            kl = gaussian_kl(mu, logvar)
            loss = (recon + kl).mean()
            rewards = -recon.detach().numpy()
            reinforce_update(res.logp, rewards, self.structure_params, alpha, standardize=True, clip=cfg.reinforce_clip, reduction=cfg.reinforce_reduction)
            self._apply(self.opt_g, self.g_params, loss)
            out = {
                "d_loss": float(kl.detach().mean()),
                "g_loss": float(loss.detach()),
                "logp_mean": float(res.logp.detach().mean()),
                "reward_mean": float(rewards.mean()),
            }
        else:
            z = self.latent(cfg.batch_size)
            if cfg.mode == "adj":
                fake = self.gen(z, self.rng)
                logp = None
            else:
                res = self.gen(z, self.rng)
                fake = SoftGraph(res.graphs)
                logp = res.logp
            frozen = SoftGraph(
                fake.batch.with_features(fake.batch.x.detach(), fake.batch.w.detach()),
                None if fake.edge_weight is None else fake.edge_weight.detach(),
                None if fake.node_weight is None else fake.node_weight.detach(),
            )
            d_loss, _, _ = wgan_gp_loss(self.critic, real, frozen, cfg.gp_lambda, self.rng)
            self._apply(self.opt_d, self.critic_params, d_loss)
            scores = self.critic(fake)
            g_loss = -scores.mean()
            rewards = scores.detach().numpy()
            if logp is not None:
                reinforce_update(logp, rewards, self.structure_params, alpha, clip=cfg.reinforce_clip, reduction=cfg.reinforce_reduction)
            self._apply(self.opt_g, self.feature_params, g_loss)
            out = {
                "d_loss": float(d_loss.detach()),
                "g_loss": float(g_loss.detach()),
                "logp_mean": float(logp.detach().mean()) if logp is not None else 0.0,
                "reward_mean": float(rewards.mean()),
            }
        if not all(math.isfinite(v) for v in out.values()):
            raise NumericalError(f"non-finite training scalars at iteration {self.iteration}: {out}")
        self.iteration += 1
        return out

    def sample(self, n: int, rng: np.random.Generator | None = None) -> list[FeaturedGraph]:
        rng = rng if rng is not None else np.random.default_rng(self.cfg.seed + 7919 * (self.iteration + 1))
        if self.cfg.mode == "adj":
            return self.gen.sample(n, rng)
        return self.gen.sample(n, rng)[0]

    def evaluate(self) -> MetricsReport:
        graphs = self.sample(self.cfg.eval_count)
        if graphs:
            report = evaluate(graphs, self.reference, self.ref_props)
        else:
            # nothing to compare: worst possible score, never selected as best
            log.warning("iteration %d: the generator produced no usable graphs", self.iteration)
            report = MetricsReport(*[math.inf] * len(MetricsReport.names()))
        rate = unique_rate(graphs)
        self.peak_unique = max(self.peak_unique, rate)
        if self.cfg.collapse_stop and rate < self.cfg.collapse_ratio * self.peak_unique:
            self.stopped = True
            return report
        score = selection_score(report, self.cfg.select_on)
        if score < self.best_score:
            self.best_score = score
            self.best_iteration = self.iteration
            self.best_state = {k: v.detach().clone() for k, v in self.gen.state_dict().items()}
        return report

    def use_best(self) -> None:
        """Load the generator weights of the best evaluation so far (no-op before any)."""
        if self.best_state is not None:
            self.gen.load_state_dict(self.best_state)

    # -- persistence
    def _optimizers(self):
        yield "opt_g", self.opt_g, self.g_params
        if self.opt_d is not None:
            yield "opt_d", self.opt_d, self.critic_params

    def state_tensors(self) -> dict[str, Tensor]:
        out = module_state(self.gen, "gen.")
        out.update(module_state(self.critic, "critic."))
        for name, opt, params in self._optimizers():
            out.update(optimizer_state(opt, params, f"{name}."))
        if self.best_state is not None:
            out.update({f"best.{k}": v for k, v in self.best_state.items()})
        return out

    def save(self, path) -> None:
        meta = {
            "config": asdict(self.cfg),
            "iteration": self.iteration,
            "rng": self.rng.bit_generator.state,
            "peak_unique": self.peak_unique,
            "feature_dims": list(self.feature_dims),
            "best_score": self.best_score if math.isfinite(self.best_score) else None,
            "best_iteration": self.best_iteration,
        }
        save_checkpoint(path, self.state_tensors(), meta)

    @classmethod
    def load(cls, path, data=(), reference=None) -> "Trainer":
        """Restore a run; without ``data`` the trainer can sample but not train."""
        tensors, meta = load_checkpoint(path)
        tr = cls(TrainConfig.from_dict(meta["config"]), data, reference, tuple(meta["feature_dims"]))
        tr.gen.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("gen.")})
        tr.critic.load_state_dict({k[7:]: v for k, v in tensors.items() if k.startswith("critic.")})
        for name, opt, params in tr._optimizers():
            restore_optimizer(opt, params, tensors, f"{name}.")
        tr.iteration = int(meta["iteration"])
        tr.peak_unique = float(meta.get("peak_unique", 0.0))
        if meta.get("best_score") is not None:
            tr.best_score = float(meta["best_score"])
            tr.best_iteration = int(meta["best_iteration"])
            tr.best_state = {k[5:]: v for k, v in tensors.items() if k.startswith("best.")}
        tr.rng.bit_generator.state = meta["rng"]
        return tr


def train(trainer: Trainer, iters: int, out_dir=None, log_every: int = 100) -> list[dict]:
    """Run ``iters`` iterations, evaluating every ``eval_interval``; rows are also appended to metrics.csv."""
    cfg = trainer.cfg
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    csv_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "metrics.csv"
        if not csv_path.exists():
            with open(csv_path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)
        if trainer.iteration == 0:
            trainer.save(out / "checkpoint_0.json")
    for _ in range(iters):
        scalars = trainer.step()
        if trainer.iteration % log_every == 0:
            log.info("iter %d %s", trainer.iteration, json.dumps(scalars))
        if trainer.iteration % cfg.eval_interval == 0 and trainer.reference:
            report = trainer.evaluate()
            row = {"iteration": trainer.iteration, **scalars, **report.as_dict()}
            rows.append(row)
            if csv_path is not None:
                with open(csv_path, "a", newline="") as fh:
                    csv.writer(fh).writerow([row[c] for c in METRIC_COLUMNS])
            if trainer.stopped:
                log.info("stopping at iteration %d: unique-structure rate collapsed", trainer.iteration)
                break
    if out is not None:
        trainer.save(out / "checkpoint.json")
    return rows
