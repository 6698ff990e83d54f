"""The stochastic unpooling layer.

A layer enlarges every graph in a batch: chosen nodes split into two
children, then intra-links, anchors, inter-links and additional child-child
edges are sampled. Every probability lives on the autograd tape while every
structural choice is drawn with a numpy generator, so the log-probability of
the realized decisions is differentiable and the decisions themselves are not.

Uniform draws happen in a fixed order: split candidates (node order),
intra-links (split nodes in order), anchors (split nodes without intra-link,
in order), inter-link child sets (edge order, first endpoint then second,
skipping anchor-forced entries), additional-edge coins over edges whose two
ends split, then the child choice for selected edges with one single-child
and one two-child endpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .batch import GraphBatch
from .graph import FeaturedGraph, GraphError, NodeMap
from .nn import DTYPE, BatchNorm, Mlp, agg, leaky_relu, segment_log_softmax, segment_sum

# child-set codes for one (edge, endpoint) entry
STATIC, FIRST, SECOND, BOTH = 0, 1, 2, 3


@dataclass(frozen=True)
class UnpoolHyper:
    d_x: int
    d_w: int
    d_y: int
    d_u: int
    fixed_static: tuple[int, ...] = ()
    probabilistic: tuple[int, ...] = ()
    k_v: int = 0
    k_ia: int = 0
    k_ie: int = 0
    k_w: int = 0
    enforce_min_growth: bool = True
    inter_mode: str = "preference"
    edge_post_act: bool = True

    def __post_init__(self):
        for name in ("k_v", "k_ia", "k_ie", "k_w"):
            if getattr(self, name) == 0:
                object.__setattr__(self, name, self.d_x if name != "k_w" else max(self.d_y, self.d_u))
        object.__setattr__(self, "fixed_static", tuple(sorted(set(int(i) for i in self.fixed_static))))
        object.__setattr__(self, "probabilistic", tuple(sorted(set(int(i) for i in self.probabilistic))))
        if set(self.fixed_static) & set(self.probabilistic):
            raise ValueError("fixed-static and probabilistic node sets overlap")
        if self.d_x < 4:
            raise ValueError("unpooling needs d_x >= 4 so both projections are nonempty")
        if min(self.d_y, self.d_u, self.k_v, self.k_ia, self.k_ie, self.k_w) < 1 or self.d_w < 0:
            raise ValueError("unpooling dimensions must be positive")
        if self.inter_mode not in ("preference", "softmax"):
            raise ValueError(f"unknown inter-link mode {self.inter_mode!r}")


@dataclass
class UnpoolDecisions:
    """Every structural choice of one call, indexed by global batch node/edge.

    ``anchor[j]`` is the chosen neighbor of split node ``j`` without an
    intra-link (-1 elsewhere). ``nsets[k, s]`` is the child-set code of the
    ``s``-th endpoint of edge ``k`` (0 for static endpoints). ``r_choice[k]``
    is 1 or 2 when a selected additional edge needed a child pick, else 0.
    """

    split: np.ndarray
    intra: np.ndarray
    anchor: np.ndarray
    nsets: np.ndarray
    extra: np.ndarray
    r_choice: np.ndarray

    def __post_init__(self):
        self.split = np.asarray(self.split, dtype=bool)
        self.intra = np.asarray(self.intra, dtype=bool)
        self.anchor = np.asarray(self.anchor, dtype=np.int64)
        self.nsets = np.asarray(self.nsets, dtype=np.int64).reshape(-1, 2)
        self.extra = np.asarray(self.extra, dtype=bool)
        self.r_choice = np.asarray(self.r_choice, dtype=np.int64)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("split", "intra", "anchor", "nsets", "extra", "r_choice")}

    @classmethod
    def from_dict(cls, rec: dict) -> "UnpoolDecisions":
        return cls(**{k: np.asarray(rec[k]) for k in ("split", "intra", "anchor", "nsets", "extra", "r_choice")})


def child_indices(split: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Output positions: static nodes take one slot, split nodes two consecutive ones."""
    size = 1 + split.astype(np.int64)
    f1 = np.cumsum(size) - size
    return f1, f1 + split.astype(np.int64)


def _popcount(code: np.ndarray) -> np.ndarray:
    return (code & 1) + ((code >> 1) & 1)


def assemble_edges(edges: np.ndarray, dec: UnpoolDecisions) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Output edge array (canonical, sorted, unique) plus the child maps f1, f2."""
    split = dec.split
    f1, f2 = child_indices(split)
    img = np.stack([f1, f2], axis=1)
    parts = [np.stack([f1[dec.intra & split], f2[dec.intra & split]], axis=1)]
    if len(edges):
        a, b = edges[:, 0], edges[:, 1]
        ca = np.where(split[a], dec.nsets[:, 0], FIRST)
        cb = np.where(split[b], dec.nsets[:, 1], FIRST)
        if ((ca < 1) | (ca > 3) | (cb < 1) | (cb > 3)).any():
            raise GraphError("every split endpoint needs a nonempty child set")
        for s in (0, 1):
            for t in (0, 1):
                m = ((ca >> s) & 1).astype(bool) & ((cb >> t) & 1).astype(bool)
                parts.append(np.stack([img[a[m], s], img[b[m], t]], axis=1))
        sel = dec.extra & split[a] & split[b]
        if (dec.extra & ~(split[a] & split[b])).any():
            raise GraphError("additional edges need both endpoints split")
        sa, sb = _popcount(ca), _popcount(cb)
        # complement child of a single-child set: code 1 -> slot 1, code 2 -> slot 0
        oa, ob = (ca == FIRST).astype(np.int64), (cb == FIRST).astype(np.int64)
        m = sel & (sa == 1) & (sb == 1)
        parts.append(np.stack([img[a[m], oa[m]], img[b[m], ob[m]]], axis=1))
        for single, double in ((0, 1), (1, 0)):
            ss, sd = (sa, sb) if single == 0 else (sb, sa)
            m = sel & (ss == 1) & (sd == 2)
            if not m.any():
                continue
            r = dec.r_choice[m]
            if ((r < 1) | (r > 2)).any():
                raise GraphError("additional edge with a two-child endpoint needs a child choice of 1 or 2")
            o = oa if single == 0 else ob
            u = edges[m, single]
            v = edges[m, double]
            parts.append(np.stack([img[u, o[m]], img[v, r - 1]], axis=1))
    out = np.concatenate(parts).astype(np.int64).reshape(-1, 2)
    out = np.sort(out, axis=1)
    if len(out):
        out = np.unique(out, axis=0)
    return out, f1, f2


def forced_unpool(g: FeaturedGraph, dec: UnpoolDecisions) -> tuple[FeaturedGraph, NodeMap]:
    """Apply dictated decisions to the structure of ``g`` (features are zero)."""
    if len(dec.split) != g.n or len(dec.nsets) != g.m:
        raise GraphError("decision record does not match the graph")
    if not dec.split.any():
        raise GraphError("forced unpooling needs at least one split node")
    edges, f1, f2 = assemble_edges(g.edges, dec)
    n_out = g.n + int(dec.split.sum())
    out = FeaturedGraph(n_out, edges, np.zeros((n_out, 0)), np.zeros((len(edges), 0)))
    static = {i: int(f1[i]) for i in range(g.n) if not dec.split[i]}
    splits = {i: (int(f1[i]), int(f2[i])) for i in range(g.n) if dec.split[i]}
    return out, NodeMap(static, splits)


def _log_bernoulli(logit: Tensor, taken: np.ndarray) -> Tensor:
    sign = torch.as_tensor(np.where(taken, 1.0, -1.0), dtype=DTYPE)
    return torch.nn.functional.logsigmoid(sign * logit)


def _numpy(t: Tensor) -> np.ndarray:
    return t.detach().numpy().copy()


@dataclass
class UnpoolOutcome:
    """Result of one unpooling call on a batch.

    ``logp_*`` are per-graph tensors on the tape; ``probs`` holds detached
    copies of every probability the sampler consulted, keyed by stage.
    """

    output: GraphBatch
    decisions: UnpoolDecisions
    f1: np.ndarray
    f2: np.ndarray
    logp_r: Tensor
    logp_ia: Tensor
    logp_c: Tensor
    logp_ie: Tensor
    logp_a: Tensor
    probs: dict = field(default_factory=dict)
    input_sizes: np.ndarray | None = None

    @property
    def logp_total(self) -> Tensor:
        return self.logp_r + self.logp_ia + self.logp_c + self.logp_ie + self.logp_a

    def node_map(self, graph: int = 0) -> NodeMap:
        sizes = self.input_sizes
        lo = int(sizes[:graph].sum())
        hi = lo + int(sizes[graph])
        base = int(self.f1[lo])
        split = self.decisions.split
        static = {i - lo: int(self.f1[i]) - base for i in range(lo, hi) if not split[i]}
        splits = {i - lo: (int(self.f1[i]) - base, int(self.f2[i]) - base) for i in range(lo, hi) if split[i]}
        return NodeMap(static, splits)

    def graphs(self) -> list[FeaturedGraph]:
        return self.output.to_graphs()

    def trace(self) -> dict:
        """JSON-ready record of decisions and ledger terms for replay."""
        return {
            "decisions": self.decisions.to_dict(),
            "logp": {
                name: getattr(self, name).detach().tolist()
                for name in ("logp_r", "logp_ia", "logp_c", "logp_ie", "logp_a")
            },
            "logp_total": self.logp_total.detach().tolist(),
        }

    def trace_json(self) -> str:
        return json.dumps(self.trace())


class UnpoolLayer(nn.Module):
    """Parameters of one unpooling layer and its sampling procedure."""

    def __init__(self, hyper: UnpoolHyper):
        super().__init__()
        h = hyper
        self.hyper = h
        self.d_s = h.d_x // 2
        self.d_half = h.d_x // 4
        pair_in = h.d_y + h.d_w + h.d_x
        self.mlp_r = Mlp([h.d_x, h.d_x // 2, 1])
        self.mlp_y = Mlp([self.d_s + self.d_half, h.k_v, h.d_y])
        self.mlp_ia = Mlp([h.d_y, h.k_ia, 1])
        self.mlp_ie1 = Mlp([pair_in, h.k_ie, 1])
        self.mlp_ie2 = Mlp([pair_in, h.k_ie, 1])
        self.mlp_iea = Mlp([h.d_x + h.d_w, h.k_ie, 1])
        self.mlp_u = Mlp([h.d_y, h.k_w, h.d_u])
        self.bn_u = BatchNorm(h.d_u)
        self.zero_s = Mlp([h.d_y, 2 * h.d_y, 1])
        self.zero_b = Mlp([h.d_x, 2 * h.d_x, 1])

    STRUCTURE_GROUPS = ("mlp_r", "mlp_ia", "mlp_ie1", "mlp_ie2", "mlp_iea", "zero_s", "zero_b")
    FEATURE_GROUPS = ("mlp_y", "mlp_u", "bn_u")

    def structure_parameters(self) -> list[Tensor]:
        return [p for name in self.STRUCTURE_GROUPS for p in getattr(self, name).parameters()]

    def feature_parameters(self) -> list[Tensor]:
        return [p for name in self.FEATURE_GROUPS for p in getattr(self, name).parameters()]

    # -- step 1: which nodes split, and child features
    def sample_split_set(self, batch: GraphBatch, rng, given: np.ndarray | None = None):
        h = self.hyper
        local = batch.local
        fixed = np.isin(local, h.fixed_static)
        cand = np.isin(local, h.probabilistic)
        split = ~fixed & ~cand
        r_idx = np.nonzero(cand)[0]
        pr_full = np.full(batch.n_nodes, np.nan)
        logp = torch.zeros(batch.n_graphs, dtype=DTYPE)
        if not len(r_idx):
            if given is not None and not np.array_equal(given, split):
                raise GraphError("given split set contradicts the fixed node sets")
            return split, logp, pr_full
        logit = self.mlp_r(batch.x[r_idx])[:, 0]
        pr = torch.sigmoid(logit).detach().numpy()
        pr_full[r_idx] = pr
        if given is None:
            split[r_idx] = rng.random(len(r_idx)) < pr
            if h.enforce_min_growth:
                grown = np.bincount(batch.node_graph[split], minlength=batch.n_graphs) > 0
                for g in np.nonzero(~grown)[0]:
                    mine = r_idx[batch.node_graph[r_idx] == g]
                    if len(mine):
                        split[mine[np.argmax(pr_full[mine])]] = True
        else:
            if (given[fixed]).any() or not given[~fixed & ~cand].all():
                raise GraphError("given split set contradicts the fixed node sets")
            split = given.copy()
        terms = _log_bernoulli(logit, split[r_idx])
        logp = segment_sum(terms, batch.node_graph[r_idx], batch.n_graphs)
        return split, logp, pr_full

    def child_features(self, x: Tensor, split: np.ndarray) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Rows of Y in output order: static nodes use the first projection."""
        ds, dh = self.d_s, self.d_half
        p1 = x[:, : ds + dh]
        s_idx = np.nonzero(split)[0]
        p2 = torch.cat([x[s_idx, :ds], x[s_idx, ds + dh : ds + 2 * dh]], dim=1)
        f1, f2 = child_indices(split)
        order = np.empty(len(split) + len(s_idx), dtype=np.int64)
        order[f1] = np.arange(len(split))
        order[f2[s_idx]] = len(split) + np.arange(len(s_idx))
        rows = torch.cat([p1, p2], dim=0)[order]
        return self.mlp_y(rows), f1, f2

    # -- step 2
    def sample_intra_links(self, y, f1, f2, split, node_graph, n_graphs, rng, given=None):
        s_idx = np.nonzero(split)[0]
        intra = np.zeros(len(split), dtype=bool)
        pc_full = np.full(len(split), np.nan)
        if not len(s_idx):
            return intra, torch.zeros(n_graphs, dtype=DTYPE), pc_full
        logit = self.mlp_ia(agg(y[f1[s_idx]], y[f2[s_idx]]))[:, 0]
        pc = torch.sigmoid(logit).detach().numpy()
        pc_full[s_idx] = pc
        if given is None:
            intra[s_idx] = rng.random(len(s_idx)) < pc
        else:
            if (given & ~split).any():
                raise GraphError("intra-link on a node that did not split")
            intra = given.copy()
        terms = _log_bernoulli(logit, intra[s_idx])
        return intra, segment_sum(terms, node_graph[s_idx], n_graphs), pc_full

    def inter_link_scores(self, batch: GraphBatch, y, f1, f2, split):
        """Scores for every (edge, endpoint) entry whose endpoint split.

        Entries follow edge order, first endpoint before second; within one
        endpoint they are therefore sorted by neighbor index.
        """
        e = batch.edges
        m = len(e)
        end = e.reshape(-1)
        other = e[:, ::-1].reshape(-1)
        eid = np.repeat(np.arange(m), 2)
        keep = split[end] if m else np.zeros(0, dtype=bool)
        ent = {"end": end[keep], "other": other[keep], "eid": eid[keep], "side": np.tile([0, 1], m)[keep]}
        k = len(ent["end"])
        if k == 0:
            return ent, None
        j, i = ent["end"], ent["other"]
        wv = batch.w[ent["eid"]]
        xo = batch.x[i]
        y1, y2 = y[f1[j]], y[f2[j]]
        hs = self.mlp_ie1(torch.cat([torch.cat([y1, wv, xo], 1), torch.cat([y2, wv, xo], 1)], 0))[:, 0]
        hs1, hs2 = hs[:k], hs[k:]
        hb = self.mlp_ie2(torch.cat([agg(y1, y2), wv, xo], 1))[:, 0]
        scores = {"hs1": hs1, "hs2": hs2, "hb": hb}
        return ent, scores

    def inter_link_probs(self, batch, y, f1, f2, split, ent, scores):
        j = ent["end"]
        k = len(j)
        hs1, hs2, hb = scores["hs1"], scores["hs2"], scores["hb"]
        if self.hyper.inter_mode == "softmax":
            lp = torch.log_softmax(torch.stack([hs1, hs2, hb], 1), dim=1)
            return lp[:, 0], lp[:, 1], lp[:, 2]
        s_idx = np.nonzero(split)[0]
        slot = np.full(len(split), -1)
        slot[s_idx] = np.arange(len(s_idx))
        n_s = len(s_idx)
        z_s = self.zero_s(torch.cat([y[f1[s_idx]], y[f2[s_idx]]], 0))[:, 0]
        z_b = self.zero_b(batch.x[s_idx])[:, 0]
        grp = torch.as_tensor(np.concatenate([slot[j], np.arange(n_s)]))
        la = segment_log_softmax(torch.cat([hs1, z_s[:n_s]]), grp, n_s)[:k]
        lb = segment_log_softmax(torch.cat([hs2, z_s[n_s:]]), grp, n_s)[:k]
        lc = segment_log_softmax(torch.cat([hb, z_b]), grp, n_s)[:k]
        lz = torch.logsumexp(torch.stack([la, lb, lc], 1), dim=1)
        return la - lz, lb - lz, lc - lz

    def choose_anchors(self, split, intra, ent, scores, node_graph, n_graphs, rng, given=None):
        anchor = np.full(len(split), -1, dtype=np.int64)
        logp = torch.zeros(n_graphs, dtype=DTYPE)
        need = np.nonzero(split & ~intra)[0]
        pb_np = np.zeros(0)
        if not len(need):
            if given is not None and (given >= 0).any():
                raise GraphError("anchor given for a node that needs none")
            return anchor, logp, np.zeros(len(ent["end"]), dtype=bool), pb_np
        j = ent["end"]
        if scores is None or not np.isin(need, j).all():
            raise GraphError("a split node without intra-link has no incident edge to anchor on")
        log_pb = segment_log_softmax(scores["hb"], torch.as_tensor(j), len(split))
        pb_np = np.exp(log_pb.detach().numpy())
        # entries of one endpoint, in edge order, are already sorted by neighbor
        order = np.argsort(j, kind="stable")
        first = np.searchsorted(j[order], need, side="left")
        last = np.searchsorted(j[order], need, side="right")
        picked = np.empty(len(need), dtype=np.int64)
        if given is None:
            u = rng.random(len(need))
            for t, (lo, hi) in enumerate(zip(first, last)):
                cum = np.cumsum(pb_np[order[lo:hi]])
                pos = int(np.searchsorted(cum, u[t], side="right"))
                picked[t] = order[lo + min(pos, hi - lo - 1)]
        else:
            if (given[~(split & ~intra)] >= 0).any():
                raise GraphError("anchor given for a node that needs none")
            for t, (lo, hi) in enumerate(zip(first, last)):
                hits = np.nonzero(ent["other"][order[lo:hi]] == given[need[t]])[0]
                if not len(hits):
                    raise GraphError(f"anchor of node {need[t]} is not a neighbor")
                picked[t] = order[lo + hits[0]]
        anchor[need] = ent["other"][picked]
        forced = np.zeros(len(j), dtype=bool)
        forced[picked] = True
        logp = segment_sum(log_pb[picked], node_graph[need], n_graphs)
        return anchor, logp, forced, pb_np

    def sample_inter_links(self, m, ent, probs, forced, node_graph, n_graphs, rng, given=None):
        nsets = np.zeros((m, 2), dtype=np.int64)
        k = len(ent["end"])
        if k == 0:
            return nsets, torch.zeros(n_graphs, dtype=DTYPE)
        l1, l2, lboth = probs
        codes = np.full(k, BOTH, dtype=np.int64)
        free = np.nonzero(~forced)[0]
        if given is None:
            u = rng.random(len(free))
            a = np.exp(l1.detach().numpy()[free])
            b = np.exp(l2.detach().numpy()[free])
            codes[free] = np.where(u < a, FIRST, np.where(u >= a + b, BOTH, SECOND))
        else:
            codes = given[ent["eid"], ent["side"]].copy()
            if (codes[forced] != BOTH).any():
                raise GraphError("anchor-forced child sets must contain both children")
            if ((codes < 1) | (codes > 3)).any():
                raise GraphError("split endpoints need a nonempty child set")
        nsets[ent["eid"], ent["side"]] = codes
        table = torch.stack([l1, l2, lboth], 1)
        chosen = table[torch.as_tensor(free), torch.as_tensor(codes[free] - 1)]
        logp = segment_sum(chosen, node_graph[ent["end"][free]], n_graphs)
        return nsets, logp

    def sample_additional_edges(self, batch, split, nsets, ent, probs, rng, given=None):
        e = batch.edges
        m = len(e)
        extra = np.zeros(m, dtype=bool)
        r_choice = np.zeros(m, dtype=np.int64)
        logp = torch.zeros(batch.n_graphs, dtype=DTYPE)
        pa_full = np.full(m, np.nan)
        if not m:
            return extra, r_choice, logp, pa_full
        u_idx = np.nonzero(split[e[:, 0]] & split[e[:, 1]])[0]
        if not len(u_idx):
            if given is not None and (given[0].any() or given[1].any()):
                raise GraphError("additional edges need both endpoints split")
            return extra, r_choice, logp, pa_full
        xa, xb = batch.x[e[u_idx, 0]], batch.x[e[u_idx, 1]]
        logit = self.mlp_iea(torch.cat([agg(xa, xb), batch.w[u_idx]], 1))[:, 0]
        pa = torch.sigmoid(logit).detach().numpy()
        pa_full[u_idx] = pa
        if given is None:
            extra[u_idx] = rng.random(len(u_idx)) < pa
        else:
            extra = given[0].copy()
            if (extra & ~(split[e[:, 0]] & split[e[:, 1]])).any():
                raise GraphError("additional edges need both endpoints split")
        terms = [_log_bernoulli(logit, extra[u_idx])]
        groups = [batch.edge_graph[u_idx]]
        size = _popcount(nsets)
        mixed = np.nonzero(extra & (size.sum(1) == 3))[0]
        if len(mixed):
            pos = np.full(2 * m, -1)
            pos[2 * ent["eid"] + ent["side"]] = np.arange(len(ent["end"]))
            double_side = np.where(size[mixed, 0] == 2, 0, 1)
            rows = torch.as_tensor(pos[2 * mixed + double_side])
            l1, l2 = probs[0][rows], probs[1][rows]
            l12 = torch.logaddexp(l1, l2)
            q1 = torch.exp(l1 - l12).detach().numpy()
            if given is None:
                r_choice[mixed] = np.where(rng.random(len(mixed)) < q1, 1, 2)
            else:
                r_choice = given[1].copy()
                if ((r_choice[mixed] < 1) | (r_choice[mixed] > 2)).any():
                    raise GraphError("child choice for an additional edge must be 1 or 2")
            num = torch.where(torch.as_tensor(r_choice[mixed] == 1), l1, l2)
            terms.append(num - l12)
            groups.append(batch.edge_graph[mixed])
        logp = segment_sum(torch.cat(terms), np.concatenate(groups), batch.n_graphs)
        return extra, r_choice, logp, pa_full

    def edge_features(self, y: Tensor, edges: np.ndarray) -> Tensor:
        if not len(edges):
            return torch.zeros((0, self.hyper.d_u), dtype=DTYPE)
        u = self.mlp_u(agg(y[edges[:, 0]], y[edges[:, 1]]))
        if self.hyper.edge_post_act:
            u = leaky_relu(self.bn_u(u))
        return u

    def forward(self, batch: GraphBatch, rng: np.random.Generator | None = None, decisions: UnpoolDecisions | None = None) -> UnpoolOutcome:
        """Sample (or, with ``decisions``, replay and score) one unpooling step."""
        h = self.hyper
        if batch.d_x != h.d_x or batch.d_w != h.d_w:
            raise GraphError(f"layer expects features ({h.d_x}, {h.d_w}), got ({batch.d_x}, {batch.d_w})")
        if decisions is None and rng is None:
            raise ValueError("sampling needs a random generator")
        ng, B = batch.node_graph, batch.n_graphs
        d = decisions
        split, logp_r, pr = self.sample_split_set(batch, rng, None if d is None else d.split)
        y, f1, f2 = self.child_features(batch.x, split)
        intra, logp_ia, pc = self.sample_intra_links(y, f1, f2, split, ng, B, rng, None if d is None else d.intra)
        ent, scores = self.inter_link_scores(batch, y, f1, f2, split)
        anchor, logp_c, forced, pb = self.choose_anchors(split, intra, ent, scores, ng, B, rng, None if d is None else d.anchor)
        if scores is not None:
            probs = self.inter_link_probs(batch, y, f1, f2, split, ent, scores)
        else:
            probs = None
        nsets, logp_ie = self.sample_inter_links(batch.n_edges, ent, probs, forced, ng, B, rng, None if d is None else d.nsets)
        extra, r_choice, logp_a, pa = self.sample_additional_edges(
            batch, split, nsets, ent, probs, rng, None if d is None else (d.extra, d.r_choice)
        )
        dec = UnpoolDecisions(split, intra, anchor, nsets, extra, r_choice)
        out_edges, f1, f2 = assemble_edges(batch.edges, dec)
        u = self.edge_features(y, out_edges)
        out = GraphBatch(batch.sizes + np.bincount(ng[split], minlength=B), out_edges, y, u)
        detail = {"p_r": pr, "p_c": pc, "p_b": pb, "entries": ent, "p_a": pa, "anchor_forced": forced}
        if probs is not None:
            detail.update(p_1=np.exp(_numpy(probs[0])), p_2=np.exp(_numpy(probs[1])), p_both=np.exp(_numpy(probs[2])))
        return UnpoolOutcome(out, dec, f1, f2, logp_r, logp_ia, logp_c, logp_ie, logp_a, detail, batch.sizes.copy())


def unpool(g: FeaturedGraph, layer: UnpoolLayer, rng: np.random.Generator) -> UnpoolOutcome:
    """Unpool a single connected graph."""
    from .graph import is_connected

    if g.n < 2 or not is_connected(g):
        raise GraphError("unpooling needs a connected graph with at least two nodes")
    return layer(GraphBatch.from_graphs([g]), rng)
