import math

import numpy as np
import pytest
import torch

from ungraph.batch import GraphBatch
from ungraph.gradcheck import check_generator_split, tiny_generator_spec
from ungraph.generator import ConfigError, Generator, GeneratorSpec, load_spec
from ungraph.graph import FeaturedGraph, GraphError, is_connected, random_connected_graph
from ungraph.layers import INITIAL_EDGE_SETS, FinalEdgeLayer, InitialLayer, Mpnn, OutputHead, SkipConnection
from ungraph.nn import DTYPE, leaky_relu

from .test_unpool import BIG, const


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE)


def test_initial_edge_sets_are_connected():
    for edges in INITIAL_EDGE_SETS:
        assert is_connected(FeaturedGraph.from_edges(3, edges))
    assert len(set(INITIAL_EDGE_SETS)) == 4


def test_initial_layer_equal_logits():
    layer = InitialLayer(5, 4, 2)
    const(layer.mlp_e, 0.0)
    z = t(np.random.default_rng(0).standard_normal((4000, 5)))
    g, logp, choice = layer(z, np.random.default_rng(1))
    np.testing.assert_allclose(logp.detach().numpy(), math.log(0.25))
    freq = np.bincount(choice, minlength=4) / len(choice)
    assert np.all(np.abs(freq - 0.25) < 0.03)
    assert g.n_graphs == 4000 and (g.sizes == 3).all()


def test_initial_layer_saturated_triangle():
    layer = InitialLayer(5, 4, 2)
    const(layer.mlp_e, 0.0)
    with torch.no_grad():
        layer.mlp_e.linears[-1].bias.copy_(t([-BIG, -BIG, -BIG, BIG]))
    g, logp, choice = layer(t(np.ones((3, 5))), np.random.default_rng(0))
    assert (choice == 3).all()
    assert g.to_graphs()[0].edge_set() == {(0, 1), (0, 2), (1, 2)}
    with pytest.raises(GraphError):
        layer(t(np.ones((3, 4))), np.random.default_rng(0))


def identity_bn(bn):
    bn.eval()
    with torch.no_grad():
        bn.running_mean.zero_()
        bn.running_var.fill_(1.0)
        bn.weight.fill_(1.0)
        bn.bias.zero_()


def test_mpnn_identity_self_term():
    layer = Mpnn(3, 2, 3)
    with torch.no_grad():
        layer.theta.weight.copy_(torch.eye(3, dtype=DTYPE))
        layer.h.weight.zero_()
        layer.h.bias.zero_()
    identity_bn(layer.bn)
    g = random_connected_graph(5, np.random.default_rng(0), d_x=3, d_w=2)
    batch = GraphBatch.from_graphs([g])
    y = layer(batch)
    expected = leaky_relu(batch.x / math.sqrt(1 + layer.bn.eps))
    torch.testing.assert_close(y, expected)


def test_mpnn_isolated_node_uses_self_term_only():
    layer = Mpnn(3, 0, 4, norm=False)
    g = FeaturedGraph.from_edges(3, [(0, 1)], x=np.random.default_rng(1).standard_normal((3, 3)))
    y = layer(GraphBatch.from_graphs([g]))
    torch.testing.assert_close(y[2], leaky_relu(layer.theta(t(g.x[2]))))


def test_mpnn_message_matches_explicit_matrix():
    layer = Mpnn(3, 2, 4, norm=False, act=False)
    rng = np.random.default_rng(2)
    x, w = t(rng.standard_normal((5, 3))), t(rng.standard_normal((5, 2)))
    mats = (layer.h(w)).reshape(5, 3, 4)
    expected = torch.einsum("nd,nde->ne", x, mats)
    torch.testing.assert_close(layer.messages(x, w), expected)


def test_mpnn_permutation_equivariance():
    rng = np.random.default_rng(3)
    g = random_connected_graph(7, rng, 0.4, d_x=3, d_w=2)
    layer = Mpnn(3, 2, 4)
    layer.eval()
    perm = rng.permutation(7)
    y = layer(GraphBatch.from_graphs([g]))
    y_perm = layer(GraphBatch.from_graphs([g.relabel(perm)]))
    torch.testing.assert_close(y_perm[torch.as_tensor(perm)], y)


def test_skip_connection_rows():
    skip = SkipConnection(4, 2, 3, n_max=5)
    skip.eval()
    z = t(np.random.default_rng(0).standard_normal((2, 4)))
    block = leaky_relu(skip.bn(skip.mlp(z))).reshape(2, 5, 3)
    batch = GraphBatch(np.array([5, 2]), np.zeros((0, 2)), torch.zeros(7, 1, dtype=DTYPE), torch.zeros(0, 0, dtype=DTYPE))
    out = skip(z, batch)
    torch.testing.assert_close(out[:5], block[0])
    torch.testing.assert_close(out[5:], block[1, :2])
    too_big = GraphBatch(np.array([6, 2]), np.zeros((0, 2)), torch.zeros(8, 1, dtype=DTYPE), torch.zeros(0, 0, dtype=DTYPE))
    with pytest.raises(GraphError):
        skip(z, too_big)


def test_skip_connection_zero_weights():
    skip = SkipConnection(4, 2, 3, n_max=5)
    const(skip.mlp, 0.0)
    skip.eval()
    batch = GraphBatch(np.array([3]), np.zeros((0, 2)), torch.zeros(3, 1, dtype=DTYPE), torch.zeros(0, 0, dtype=DTYPE))
    assert torch.equal(skip(t(np.ones((1, 4))), batch), torch.zeros(3, 3, dtype=DTYPE))


def test_final_edge_layer():
    rng = np.random.default_rng(0)
    g = random_connected_graph(5, rng, d_x=3, d_w=2)
    batch = GraphBatch.from_graphs([g])
    layer = FinalEdgeLayer(3, 2, 4)
    assert layer.outer.in_width == 3 + 2 * 2
    swapped = GraphBatch(batch.sizes, batch.edges[:, ::-1].copy(), batch.x, batch.w)
    torch.testing.assert_close(layer(batch), layer(swapped))
    with torch.no_grad():
        lin = layer.outer.linears[0]
        lin.weight.zero_()
        lin.bias.zero_()
        lin.weight[:2, :2] = torch.eye(2, dtype=DTYPE)
    torch.testing.assert_close(layer(batch)[:, :2], batch.w)
    const(layer.outer, 0.0)
    assert torch.equal(layer(batch), torch.zeros(g.m, 4, dtype=DTYPE))


def test_categorical_head_is_one_hot():
    head = OutputHead([4, 6, 3], categorical=True)
    out = head(t(np.random.default_rng(0).standard_normal((10, 4))), np.random.default_rng(1))
    assert torch.equal(out.sum(1), torch.ones(10, dtype=DTYPE))
    assert set(out.detach().unique().tolist()) <= {0.0, 1.0}


def test_waxman_preset_output_range():
    spec = load_spec("waxman")
    assert spec.node_range() == (5, 12)
    gen = Generator(spec)
    graphs, logp = gen.sample(300, np.random.default_rng(0))
    assert all(5 <= g.n <= 12 and g.d_x == 2 and is_connected(g) for g in graphs)
    assert np.isfinite(logp).all() and (logp <= 0).all()


def test_desk_preset_generations_are_connected():
    gen = Generator(load_spec("waxman-desk"))
    rng = np.random.default_rng(1)
    for _ in range(5):
        graphs, _ = gen.sample(400, rng)
        assert all(is_connected(g) for g in graphs)


def deterministic_generator():
    spec = GeneratorSpec.from_dict(
        {
            "d_in": 4,
            "initial": {"d_x": 4, "d_w": 2},
            "layers": [
                {"kind": "unpool", "d_y": 4, "d_u": 2, "k": 4},
                {"kind": "node_head", "widths": [2]},
            ],
        }
    )
    gen = Generator(spec)
    const(gen.initial.mlp_e, 0.0)
    with torch.no_grad():
        gen.initial.mlp_e.linears[-1].bias.copy_(t([-BIG, -BIG, -BIG, BIG]))
    layer = gen.unpool_layers()[0]
    const(layer.mlp_ia, BIG)
    const(layer.zero_s, BIG)
    const(layer.zero_b, -BIG)
    const(layer.mlp_iea, -BIG)
    return gen


def test_forced_generator_has_zero_logp():
    gen = deterministic_generator()
    res = gen(t(np.random.default_rng(0).standard_normal((6, 4))), np.random.default_rng(0))
    np.testing.assert_allclose(res.logp.detach().numpy(), 0.0, atol=1e-12)
    for g in res.graphs.to_graphs():
        assert g.n == 6 and g.m == 3 + 12


def test_feature_loss_never_reaches_structure_parameters():
    for config in range(3):
        (row,) = check_generator_split(config)
        assert row.error == 0.0


def test_structure_and_feature_groups_partition_parameters():
    gen = Generator(tiny_generator_spec())
    s = {id(p) for p in gen.structure_parameters()}
    f = {id(p) for p in gen.feature_parameters()}
    trainable = {id(p) for p in gen.parameters() if p.requires_grad}
    assert not s & f and s | f == trainable


def test_spec_validation(tmp_path):
    with pytest.raises(ConfigError):
        GeneratorSpec.from_dict({"d_in": 4, "initial": {"d_x": 4, "d_w": 0}, "layers": [{"kind": "mpnn", "d_out": 4}]})
    with pytest.raises(ConfigError):
        GeneratorSpec.from_dict({"d_in": 4, "initial": {"d_x": 4, "d_w": 0}, "layers": [{"kind": "warp"}]})
    with pytest.raises(ConfigError):
        GeneratorSpec.from_dict({"initial": {}})
    with pytest.raises(ConfigError):
        GeneratorSpec.preset("nope")
    path = tmp_path / "g.toml"
    path.write_text('d_in = 4\n[initial]\nd_x = 4\nd_w = 0\n[[layers]]\nkind = "unpool"\nd_y = 4\nd_u = 2\n')
    assert load_spec(path=path).node_range() == (6, 6)


@pytest.mark.parametrize("name", ["protein", "qm9", "zinc"])
def test_other_presets_build_and_sample(name):
    gen = Generator(load_spec(name))
    graphs, logp = gen.sample(8, np.random.default_rng(0))
    lo, hi = gen.spec.node_range()
    assert all(lo <= g.n <= hi and is_connected(g) for g in graphs)
