import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ungraph.batch import GraphBatch
from ungraph.graph import FeaturedGraph, GraphError, is_connected, random_connected_graph
from ungraph.nn import DTYPE, leaky_relu
from ungraph.pooling import derive_unpool_plan, find_eligible_set
from ungraph.unpool import BOTH, FIRST, SECOND, STATIC, UnpoolDecisions, UnpoolHyper, UnpoolLayer, assemble_edges, forced_unpool, unpool

from .conftest import complete, cycle, path

BIG = 60.0


def const(mlp, value: float) -> None:
    """Make an MLP output ``value`` for every input."""
    with torch.no_grad():
        for lin in mlp.linears:
            lin.weight.zero_()
            lin.bias.zero_()
        mlp.linears[-1].bias.fill_(value)


def layer_for(d_x=4, d_w=0, d_y=4, d_u=2, **kw) -> UnpoolLayer:
    torch.manual_seed(0)
    return UnpoolLayer(UnpoolHyper(d_x=d_x, d_w=d_w, d_y=d_y, d_u=d_u, **kw))


def featured(g: FeaturedGraph, d_x=4, d_w=0, seed=0) -> GraphBatch:
    rng = np.random.default_rng(seed)
    h = FeaturedGraph(g.n, g.edges, rng.standard_normal((g.n, d_x)), rng.standard_normal((g.m, d_w)))
    return GraphBatch.from_graphs([h])


def check_simple(out: GraphBatch) -> None:
    for g in out.to_graphs():
        e = g.edges
        assert (e[:, 0] < e[:, 1]).all()
        assert len({tuple(r) for r in e.tolist()}) == len(e)


# -- split set


def test_no_probabilistic_nodes_splits_all_free_nodes():
    layer = layer_for(fixed_static=(1,))
    out = layer(featured(path(3)), np.random.default_rng(0))
    assert out.decisions.split.tolist() == [True, False, True]
    assert out.logp_r.item() == 0.0


def test_saturated_split_probability():
    layer = layer_for(probabilistic=(0, 1, 2))
    const(layer.mlp_r, BIG)
    out = layer(featured(path(3)), np.random.default_rng(0))
    assert out.decisions.split.all()
    assert out.logp_r.item() == pytest.approx(0.0, abs=1e-20)


def test_split_draws_replay_the_rng_stream():
    layer = layer_for(probabilistic=(0, 1, 2, 3), enforce_min_growth=False)
    const(layer.mlp_r, 0.0)
    for seed in range(20):
        batch = featured(path(4))
        split, logp, pr = layer.sample_split_set(batch, np.random.default_rng(seed))
        expect = np.random.default_rng(seed).random(4) < 0.5
        assert split.tolist() == expect.tolist()
        assert logp.item() == pytest.approx(4 * math.log(0.5))
        np.testing.assert_allclose(pr, 0.5)


def test_min_growth_splits_the_likeliest_candidate():
    layer = layer_for(probabilistic=(0, 1, 2))
    with torch.no_grad():
        const(layer.mlp_r, -BIG)
        layer.mlp_r.linears[-1].weight[0, 0] = 1.0
    batch = featured(path(3))
    layer.eval()
    split, _, pr = layer.sample_split_set(batch, np.random.default_rng(0))
    assert split.sum() == 1 and split[np.nanargmax(pr)]


# -- child features


def test_projections_for_eight_wide_features():
    layer = layer_for(d_x=8, d_y=8)
    layer.mlp_y = torch.nn.Identity()
    x = torch.arange(1.0, 9.0, dtype=DTYPE)[None, :]
    y, f1, f2 = layer.child_features(x, np.array([True]))
    assert y[f1[0]].tolist() == [1, 2, 3, 4, 5, 6]
    assert y[f2[0]].tolist() == [1, 2, 3, 4, 7, 8]


def test_projections_for_four_wide_features():
    layer = layer_for(d_x=4, d_y=3)
    assert (layer.d_s, layer.d_half) == (2, 1)
    layer.mlp_y = torch.nn.Identity()
    x = torch.tensor([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]], dtype=DTYPE)
    y, f1, f2 = layer.child_features(x, np.array([False, True]))
    assert y.tolist() == [[1, 2, 3], [5, 6, 7], [5, 6, 8]]
    assert f1.tolist() == [0, 1] and f2.tolist() == [0, 2]


# -- intra-links


def test_intra_links_saturated_and_half():
    layer = layer_for()
    batch = featured(path(3))
    const(layer.mlp_ia, BIG)
    out = layer(batch, np.random.default_rng(0))
    assert out.decisions.intra.all() and out.logp_ia.item() == pytest.approx(0.0, abs=1e-20)
    const(layer.mlp_ia, 0.0)
    out = layer(batch, np.random.default_rng(0))
    assert out.logp_ia.item() == pytest.approx(3 * math.log(0.5))


def test_intra_links_without_split_nodes():
    layer = layer_for()
    y = torch.zeros((3, 4), dtype=DTYPE)
    intra, logp, _ = layer.sample_intra_links(y, np.arange(3), np.arange(3), np.zeros(3, bool), np.zeros(3, int), 1, np.random.default_rng(0))
    assert not intra.any() and logp.item() == 0.0


# -- anchors


def test_degree_one_node_anchors_on_its_neighbor():
    layer = layer_for(fixed_static=(1,))
    const(layer.mlp_ia, -BIG)
    out = layer(featured(path(2)), np.random.default_rng(0))
    assert out.decisions.anchor.tolist() == [1, -1]
    assert out.logp_c.item() == 0.0
    assert out.decisions.nsets[0].tolist() == [BOTH, STATIC]


def test_equal_scores_give_uniform_anchor():
    star = FeaturedGraph.from_edges(4, [(0, 1), (0, 2), (0, 3)])
    layer = layer_for(fixed_static=(1, 2, 3))
    const(layer.mlp_ia, -BIG)
    const(layer.mlp_ie2, 0.3)
    seen = set()
    for seed in range(40):
        out = layer(featured(star), np.random.default_rng(seed))
        assert out.logp_c.item() == pytest.approx(math.log(1 / 3))
        seen.add(int(out.decisions.anchor[0]))
    assert seen == {1, 2, 3}


def test_intra_linked_nodes_need_no_anchor():
    layer = layer_for()
    const(layer.mlp_ia, BIG)
    out = layer(featured(cycle(4)), np.random.default_rng(0))
    assert (out.decisions.anchor == -1).all() and out.logp_c.item() == 0.0


# -- inter-links


def test_static_static_edges_are_copied():
    layer = layer_for(fixed_static=(1, 2))
    out = layer(featured(path(4)), np.random.default_rng(3))
    f1 = out.f1
    assert (f1[1], f1[2]) in out.output.to_graphs()[0].edge_set()
    assert out.decisions.nsets[1].tolist() == [STATIC, STATIC]


def test_symmetric_scores_give_thirds():
    layer = layer_for(fixed_static=(1,))
    const(layer.mlp_ia, BIG)
    const(layer.mlp_ie1, 0.7)
    const(layer.mlp_ie2, 0.7)
    const(layer.zero_s, -BIG)
    const(layer.zero_b, -BIG)
    out = layer(featured(path(2)), np.random.default_rng(0))
    for key in ("p_1", "p_2", "p_both"):
        np.testing.assert_allclose(out.probs[key], 1 / 3, atol=1e-12)
    assert out.logp_ie.item() == pytest.approx(math.log(1 / 3))


def test_softmax_mode_gives_thirds_for_equal_scores():
    layer = layer_for(fixed_static=(1,), inter_mode="softmax")
    const(layer.mlp_ia, BIG)
    const(layer.mlp_ie1, -0.2)
    const(layer.mlp_ie2, -0.2)
    out = layer(featured(path(2)), np.random.default_rng(0))
    np.testing.assert_allclose(out.probs["p_both"], 1 / 3)


def split_split_decisions(code_a, code_b, extra=False, r=0):
    return UnpoolDecisions([True, True], [False, False], [-1, -1], [[code_a, code_b]], [extra], [r])


def test_cross_product_rule():
    edges, f1, f2 = assemble_edges(np.array([[0, 1]]), split_split_decisions(FIRST, BOTH))
    assert {tuple(e) for e in edges.tolist()} == {(f1[0], f1[1]), (f1[0], f2[1])}


def test_additional_edge_rules():
    e = np.array([[0, 1]])
    both, f1, f2 = assemble_edges(e, split_split_decisions(BOTH, BOTH, extra=True))
    assert len(both) == 4
    out, f1, f2 = assemble_edges(e, split_split_decisions(FIRST, FIRST, extra=True))
    assert {tuple(x) for x in out.tolist()} == {(f1[0], f1[1]), (f2[0], f2[1])}
    out, f1, f2 = assemble_edges(e, split_split_decisions(SECOND, FIRST, extra=True))
    assert {tuple(x) for x in out.tolist()} == {(f2[0], f1[1]), (f1[0], f2[1])}
    out, f1, f2 = assemble_edges(e, split_split_decisions(FIRST, BOTH, extra=True, r=2))
    assert (f2[0], f2[1]) in {tuple(x) for x in out.tolist()}
    with pytest.raises(GraphError):
        assemble_edges(e, split_split_decisions(FIRST, BOTH, extra=True, r=0))


def test_zero_additional_probability():
    layer = layer_for()
    const(layer.mlp_iea, -BIG)
    out = layer(featured(complete(4)), np.random.default_rng(1))
    assert not out.decisions.extra.any()
    assert out.logp_a.item() == pytest.approx(0.0, abs=1e-20)


# -- edge features


def test_edge_features_symmetric_and_zero():
    layer = layer_for(d_y=3, d_u=2)
    layer.eval()
    y = torch.as_tensor(np.random.default_rng(0).standard_normal((3, 3)), dtype=DTYPE)
    a = layer.edge_features(y, np.array([[0, 1], [1, 2]]))
    b = layer.edge_features(y, np.array([[1, 0], [2, 1]]))
    assert torch.equal(a, b)
    const(layer.mlp_u, 0.0)
    z = layer.edge_features(torch.zeros((2, 3), dtype=DTYPE), np.array([[0, 1]]))
    assert torch.equal(z, torch.zeros((1, 2), dtype=DTYPE))


def test_identity_edge_mlp():
    layer = UnpoolLayer(UnpoolHyper(d_x=4, d_w=0, d_y=3, d_u=3, edge_post_act=False))
    layer.mlp_u = torch.nn.Identity()
    y = torch.tensor([[1.0, -2.0, 0.5], [-3.0, 1.0, 0.5]], dtype=DTYPE)
    u = layer.edge_features(y, np.array([[0, 1]]))
    assert torch.equal(u[0], leaky_relu(y[0] + y[1]))


# -- whole layer


def test_duplicated_path():
    g = path(5)
    layer = layer_for()
    const(layer.mlp_ia, BIG)
    const(layer.zero_s, BIG)
    const(layer.zero_b, -BIG)
    const(layer.mlp_iea, -BIG)
    out = layer(featured(g), np.random.default_rng(0))
    expected = {(2 * i, 2 * i + 1) for i in range(5)}
    for i in range(4):
        expected |= {(2 * i + a, 2 * (i + 1) + b) for a in (0, 1) for b in (0, 1)}
    assert out.output.to_graphs()[0].edge_set() == expected
    assert out.logp_total.item() == pytest.approx(0.0, abs=1e-12)


def test_replay_reproduces_logp_and_output():
    rng = np.random.default_rng(4)
    graphs = [random_connected_graph(n, rng, 0.4, d_x=6, d_w=2) for n in (3, 5, 8)]
    batch = GraphBatch.from_graphs(graphs)
    layer = layer_for(d_x=6, d_w=2, d_y=5, d_u=3, probabilistic=(0, 2, 4, 6))
    layer.eval()
    out = layer(batch, np.random.default_rng(11))
    again = layer(batch, decisions=out.decisions)
    torch.testing.assert_close(again.logp_total, out.logp_total, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(again.output.edges, out.output.edges)
    same_seed = layer(batch, np.random.default_rng(11))
    assert torch.equal(same_seed.logp_total, out.logp_total)


def ledger_from_probs(out) -> float:
    """Recompute the single-graph log-probability from the stored probabilities."""
    d, p = out.decisions, out.probs
    total = 0.0
    for v in np.nonzero(~np.isnan(p["p_r"]))[0]:
        total += math.log(p["p_r"][v] if d.split[v] else 1 - p["p_r"][v])
    for v in np.nonzero(d.split)[0]:
        total += math.log(p["p_c"][v] if d.intra[v] else 1 - p["p_c"][v])
    ent = p["entries"]
    for k in np.nonzero(p["anchor_forced"])[0]:
        total += math.log(p["p_b"][k])
    for k in range(len(ent["end"])):
        if p["anchor_forced"][k]:
            continue
        code = d.nsets[ent["eid"][k], ent["side"][k]]
        total += math.log((p["p_1"], p["p_2"], p["p_both"])[code - 1][k])
    for k in np.nonzero(~np.isnan(p["p_a"]))[0]:
        total += math.log(p["p_a"][k] if d.extra[k] else 1 - p["p_a"][k])
        if d.r_choice[k]:
            double = 0 if d.nsets[k, 0] == BOTH else 1
            row = np.nonzero((ent["eid"] == k) & (ent["side"] == double))[0][0]
            a, b = p["p_1"][row], p["p_2"][row]
            total += math.log((a if d.r_choice[k] == 1 else b) / (a + b))
    return total


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 9), st.integers(0, 10_000))
def test_logp_ledger_matches_stored_probabilities(n, seed):
    rng = np.random.default_rng(seed)
    g = random_connected_graph(n, rng, 0.4, d_x=4)
    layer = layer_for(probabilistic=tuple(range(0, n, 2)))
    out = layer(GraphBatch.from_graphs([g]), rng)
    assert out.logp_total.item() == pytest.approx(ledger_from_probs(out), rel=1e-9, abs=1e-9)


def test_triangle_outputs_are_connected():
    layer = layer_for(probabilistic=(0, 1, 2))
    batch = featured(complete(3))
    rng = np.random.default_rng(0)
    for _ in range(300):
        out = layer(batch, rng)
        g = out.output.to_graphs()[0]
        assert is_connected(g) and g.n > 3
        check_simple(out.output)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 14), st.integers(0, 100_000), st.floats(0.0, 0.7))
def test_connectivity_property(n, seed, p):
    rng = np.random.default_rng(seed)
    graphs = [random_connected_graph(n, rng, p, d_x=4, d_w=1) for _ in range(3)]
    torch.manual_seed(seed)
    layer = UnpoolLayer(UnpoolHyper(d_x=4, d_w=1, d_y=4, d_u=2, probabilistic=tuple(range(0, n, 2)), fixed_static=(1,)))
    out = layer(GraphBatch.from_graphs(graphs), rng)
    check_simple(out.output)
    for k, g in enumerate(out.output.to_graphs()):
        assert is_connected(g)
        nm = out.node_map(k)
        assert nm.n_out == g.n and nm.n_in == n


def test_unpool_preconditions():
    layer = layer_for()
    with pytest.raises(GraphError):
        unpool(FeaturedGraph.from_edges(4, [(0, 1), (2, 3)], x=np.zeros((4, 4))), layer, np.random.default_rng(0))
    with pytest.raises(GraphError):
        layer(featured(path(3), d_x=6), np.random.default_rng(0))
    with pytest.raises(ValueError):
        layer(featured(path(3)))
    with pytest.raises(ValueError):
        UnpoolHyper(d_x=3, d_w=0, d_y=2, d_u=2)
    with pytest.raises(ValueError):
        UnpoolHyper(d_x=4, d_w=0, d_y=2, d_u=2, fixed_static=(0,), probabilistic=(0,))


def test_forced_unpool_round_trip_and_rejection():
    tri = complete(3)
    plan = derive_unpool_plan(tri, [(0, 1)])
    assert plan.reconstruct().edge_set() == tri.edge_set()
    empty = UnpoolDecisions(np.zeros(2, bool), np.zeros(2, bool), [-1, -1], [[0, 0]], [False], [0])
    with pytest.raises(GraphError):
        forced_unpool(path(2), empty)


def test_forced_plan_extra_edge_between_second_children():
    # pair-pair links {i_r, i_s} and {j_r, j_s}: first children link, plus second-second edge
    g = FeaturedGraph.from_edges(4, [(0, 1), (2, 3), (0, 2), (1, 3)])
    plan = derive_unpool_plan(g, [(0, 1), (2, 3)])
    assert plan.decisions.nsets[0].tolist() == [FIRST, FIRST] and plan.decisions.extra[0]
    out, nmap = forced_unpool(plan.pooled, plan.decisions)
    (r1, r2), (s1, s2) = nmap.images(0), nmap.images(1)
    assert {(r1, s1), (r2, s2)} <= out.edge_set()


def test_layer_scores_pooling_plans():
    rng = np.random.default_rng(8)
    g = random_connected_graph(10, rng, 0.3)
    plan = derive_unpool_plan(g, find_eligible_set(g))
    pooled = plan.pooled
    x = rng.standard_normal((pooled.n, 4))
    batch = GraphBatch.from_graphs([FeaturedGraph(pooled.n, pooled.edges, x, np.zeros((pooled.m, 0)))])
    layer = layer_for(probabilistic=tuple(range(pooled.n)))
    out = layer(batch, decisions=plan.decisions)
    assert torch.isfinite(out.logp_total).all()
    rebuilt = out.output.to_graphs()[0].relabel(plan.output_to_source())
    assert rebuilt.edge_set() == g.edge_set()


def test_trace_is_json():
    import json

    layer = layer_for()
    out = layer(featured(cycle(4)), np.random.default_rng(0))
    rec = json.loads(out.trace_json())
    assert set(rec) == {"decisions", "logp", "logp_total"}
    back = UnpoolDecisions.from_dict(rec["decisions"])
    assert np.array_equal(back.nsets, out.decisions.nsets)
