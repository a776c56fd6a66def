"""
Tests for the supernet, the discretisation and the discrete network.
"""

import numpy as np
import pytest

from lightdarts.exceptions import NonFiniteError, ShapeError
from lightdarts.genotype import Genotype
from lightdarts.operations import OP_NAMES, apply
from lightdarts.search import Supernet, _loss_and_grads
from lightdarts.supernet import (
    DARTS_PRIMITIVES,
    LIGHT_PRIMITIVES,
    ArchParams,
    MixedEdge,
    SearchCell,
    SearchNetwork,
    canonical_primitives,
    cell_forward,
    count_parameters,
    derive_genotype,
    discrete_ops,
    edge_count,
    edge_index,
    instantiate_discrete,
    mixed_forward,
    network_forward,
    one_hot_arch,
    reduction_indices,
)
from lightdarts.tensor import Tensor

FEATURE_DIM = 8


@pytest.fixture
def features():
    return np.random.default_rng(5).standard_normal((3, 8, FEATURE_DIM))


@pytest.fixture
def genotype():
    return Genotype(
        normal=[
            ("sep_conv_3x3", 1),
            ("skip_connect", 0),
            ("dil_conv_3x3", 0),
            ("max_feature_map", 2),
            ("avg_pool_3x3", 3),
            ("skip_connect", 1),
            ("sep_conv_5x5", 2),
            ("max_pool_3x3", 4),
        ],
        reduce=[
            ("max_pool_3x3", 0),
            ("max_feature_map", 1),
            ("dil_conv_5x5", 1),
            ("skip_connect", 2),
            ("sep_conv_3x3", 3),
            ("avg_pool_3x3", 0),
            ("skip_connect", 2),
            ("max_feature_map", 4),
        ],
        concat=[2, 3, 4, 5],
    )


def _oracle(logits: np.ndarray, primitives, nodes: int):
    weights = np.exp(logits - logits.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    usable = np.array([name != "zero" for name in primitives])
    pairs = []
    for node in range(nodes):
        ranked = []
        for source in range(node + 2):
            row = edge_index(node, source)
            best = int(np.argmax(np.where(usable, logits[row], -np.inf)))
            ranked.append((-weights[row, best], best, source))
        pairs.extend((primitives[k], source) for _, k, source in sorted(ranked)[:2])
    return pairs


def test_edge_layout():
    """Test E = 14 for four nodes and the node-major edge order."""
    assert edge_count(4) == 14
    assert edge_index(0, 0) == 0
    assert edge_index(1, 0) == 2
    assert edge_index(3, 4) == 13


def test_reduction_positions():
    """Test reductions at one and two thirds of the depth."""
    assert reduction_indices(8) == {2, 5}
    assert reduction_indices(3) == {1, 2}
    assert reduction_indices(1) == {0}
    assert reduction_indices(2) == {0, 1}


def test_canonical_primitives():
    """Test canonical ordering and rejection of bad candidate sets."""
    assert canonical_primitives(["zero", "sep_conv_3x3"]) == ("sep_conv_3x3", "zero")
    assert "max_feature_map" not in DARTS_PRIMITIVES
    assert LIGHT_PRIMITIVES == OP_NAMES
    with pytest.raises(ValueError):
        canonical_primitives([])
    with pytest.raises(ValueError, match="duplicate"):
        canonical_primitives(["zero", "zero"])
    with pytest.raises(ValueError, match="unknown"):
        canonical_primitives(["conv_9x9"])


def test_initial_arch_params_are_small():
    """Test the initial logits scale and shape."""
    arch = ArchParams.initial(4, LIGHT_PRIMITIVES, seed=1)
    assert arch.alpha_normal.shape == (14, 9)
    assert np.abs(arch.alpha_normal.data).max() < 1e-2
    assert arch.nodes == 4
    assert arch.entropy(False) == pytest.approx(np.log(9), abs=1e-4)


def test_mixed_edge_uniform_alpha_is_mean():
    """Test that equal logits average the candidate outputs."""
    edge = MixedEdge(4, 1, LIGHT_PRIMITIVES, (0, 2, 0, 2, 0))
    x = Tensor(np.random.default_rng(2).standard_normal((2, 4, 5, 5)))
    mixed = mixed_forward(edge, x, Tensor(np.full(9, 0.3)))
    expected = np.mean([apply(op, x).data for op in edge.ops], axis=0)
    np.testing.assert_allclose(mixed.data, expected, atol=1e-12)


def test_mixed_edge_rejects_non_finite_logits():
    """Test NaN logits on a mixed edge."""
    edge = MixedEdge(2, 1, ("skip_connect", "zero"), (0,))
    with pytest.raises(NonFiniteError):
        mixed_forward(edge, Tensor(np.ones((1, 2, 3, 3))), Tensor(np.array([np.nan, 0.0])))


def test_supernet_forward_shapes(features):
    """Test logits and embedding shapes and channel doubling."""
    net = SearchNetwork(FEATURE_DIM, channels=4, cells=3, seed=0)
    out = network_forward(net, features, net.new_arch_params())
    assert out.logits.shape == (3, 2)
    # two reductions double C twice; the output concatenates four nodes
    assert out.embedding.shape == (3, 4 * 16)


def test_supernet_needs_arch_and_matching_features(features):
    """Test the supernet input checks."""
    net = SearchNetwork(FEATURE_DIM, channels=4, cells=1, seed=0)
    with pytest.raises(ValueError):
        network_forward(net, features)
    with pytest.raises(ShapeError):
        network_forward(net, np.ones((2, 8, 12)), net.new_arch_params())


def test_forward_is_invariant_to_row_shifts(features):
    """Test that adding a constant per edge row leaves the output unchanged."""
    net = SearchNetwork(FEATURE_DIM, channels=4, cells=1, seed=0)
    arch = net.new_arch_params()
    shifts = np.random.default_rng(3).standard_normal((14, 1)) * 5
    shifted = ArchParams.from_arrays(
        arch.alpha_normal.data + shifts, arch.alpha_reduce.data + shifts, arch.primitives
    )
    base = network_forward(net, features, arch).logits.data
    moved = network_forward(net, features, shifted).logits.data
    np.testing.assert_allclose(moved, base, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_derive_matches_oracle(seed):
    """Test derivation against a direct ranking on random logits."""
    rng = np.random.default_rng(seed)
    normal = rng.standard_normal((14, 9))
    reduce = rng.standard_normal((14, 9))
    normal[rng.integers(14), 7] = 50.0  # zero may dominate an edge; it is never picked
    arch = ArchParams.from_arrays(normal, reduce)
    genotype = derive_genotype(arch)
    assert genotype.normal == _oracle(normal, LIGHT_PRIMITIVES, 4)
    assert genotype.reduce == _oracle(reduce, LIGHT_PRIMITIVES, 4)
    assert genotype.concat == [2, 3, 4, 5]


def test_derive_breaks_ties_by_index_then_source():
    """Test that all-equal logits pick op 0 on sources 0 and 1."""
    arch = ArchParams.from_arrays(np.zeros((14, 9)), np.zeros((14, 9)))
    genotype = derive_genotype(arch)
    assert genotype.normal == [("sep_conv_3x3", 0), ("sep_conv_3x3", 1)] * 4


def test_derive_ranks_edges_by_softmax_weight():
    """Test that an edge with a confident choice outranks a larger raw logit."""
    normal = np.zeros((14, 9))
    normal[edge_index(1, 2), 0] = 3.0
    normal[edge_index(1, 1), :] = 4.0
    normal[edge_index(1, 1), 6] = 4.5
    arch = ArchParams.from_arrays(normal, np.zeros((14, 9)))
    pairs = derive_genotype(arch).normal[2:4]
    assert pairs == [("sep_conv_3x3", 2), ("skip_connect", 1)]


def test_derive_rejects_non_finite():
    """Test that NaN logits cannot be discretised."""
    normal = np.zeros((14, 9))
    normal[0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        derive_genotype(ArchParams.from_arrays(normal, np.zeros((14, 9))))


def test_one_hot_supernet_equals_discrete_network(genotype, features):
    """Test that one-hot logits reproduce the discrete network exactly."""
    supernet = SearchNetwork(FEATURE_DIM, channels=4, cells=3, seed=7)
    discrete = instantiate_discrete(genotype, cells=3, channels=4, feature_dim=FEATURE_DIM, seed=7)
    arch = one_hot_arch(genotype)
    assert derive_genotype(arch) == genotype

    expected = network_forward(discrete, features).logits.data
    actual = network_forward(supernet, features, arch).logits.data
    np.testing.assert_allclose(actual, expected, atol=1e-10, rtol=0)


def test_one_hot_needs_zero(genotype):
    """Test that dropped edges need the zero op."""
    with pytest.raises(ValueError):
        one_hot_arch(genotype, ("sep_conv_3x3", "skip_connect"))


def test_discrete_network_structure(genotype):
    """Test op count and that the discrete net is smaller than the supernet."""
    discrete = instantiate_discrete(genotype, cells=3, channels=4, feature_dim=FEATURE_DIM)
    supernet = SearchNetwork(FEATURE_DIM, channels=4, cells=3)
    assert len(discrete_ops(discrete)) == 3 * 8
    assert 0 < count_parameters(discrete) < count_parameters(supernet)


def test_frozen_statistics_make_scores_batch_independent(genotype, features):
    """Test that frozen norms score each sample as if alone."""
    net = instantiate_discrete(genotype, cells=3, channels=4, feature_dim=FEATURE_DIM)
    assert not net.frozen
    net.freeze_norm_statistics([features[:2], features[2:]])
    assert net.frozen
    batch = network_forward(net, features).logits.data
    single = network_forward(net, features[1:2]).logits.data
    np.testing.assert_allclose(batch[1:2], single, atol=1e-12)
    net.unfreeze_norm_statistics()
    assert not net.frozen


def test_derive_matches_oracle_on_many_draws():
    """Test a hundred random draws, including coarse logits with ties."""
    rng = np.random.default_rng(100)
    for _ in range(100):
        normal = np.round(rng.standard_normal((14, 9)), 0)
        reduce = rng.standard_normal((14, 9))
        genotype = derive_genotype(ArchParams.from_arrays(normal, reduce))
        assert genotype.normal == _oracle(normal, LIGHT_PRIMITIVES, 4)
        assert genotype.reduce == _oracle(reduce, LIGHT_PRIMITIVES, 4)


def test_op_choice_is_invariant_under_monotone_maps():
    """Test that cubing the logits keeps every edge's chosen operation."""
    rng = np.random.default_rng(8)
    for _ in range(20):
        logits = rng.standard_normal((2, 9))
        plain = derive_genotype(ArchParams.from_arrays(logits, logits))
        cubed = derive_genotype(ArchParams.from_arrays(logits**3, logits**3))
        assert set(plain.normal) == set(cubed.normal)


def test_derive_with_darts_space():
    """Test derivation over the eight-op space without max_feature_map."""
    normal = np.zeros((14, 8))
    normal[:, DARTS_PRIMITIVES.index("skip_connect")] = 1.0
    genotype = derive_genotype(ArchParams.from_arrays(normal, normal, DARTS_PRIMITIVES))
    assert {op for op, _ in genotype.normal} == {"skip_connect"}


def test_reduction_cell_halves_and_concatenates():
    """Test a two-node reduction cell on 6x6 inputs."""
    cell = SearchCell(
        LIGHT_PRIMITIVES,
        nodes=2,
        c_prev_prev=4,
        c_prev=4,
        channels=2,
        reduction=True,
        reduction_prev=False,
        seed=0,
        index=0,
    )
    rng = np.random.default_rng(4)
    s0 = Tensor(rng.standard_normal((1, 4, 6, 6)))
    s1 = Tensor(rng.standard_normal((1, 4, 6, 6)))
    out = cell_forward(cell, s0, s1, Tensor(np.zeros((edge_count(2), 9))))
    assert out.shape == (1, 4, 3, 3)
    with pytest.raises(ValueError):
        cell_forward(cell, s0, s1)


def test_mixed_edge_is_convex_combination():
    """Test that the mixed output lies between the smallest and largest op output."""
    edge = MixedEdge(4, 1, LIGHT_PRIMITIVES, (0, 2, 0, 2, 1))
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((2, 4, 5, 5)))
    outputs = np.stack([apply(op, x).data for op in edge.ops])
    low, high = outputs.min(axis=0), outputs.max(axis=0)
    for _ in range(20):
        mixed = mixed_forward(edge, x, Tensor(rng.standard_normal(9) * 3)).data
        assert np.all(mixed >= low - 1e-12)
        assert np.all(mixed <= high + 1e-12)


def test_single_node_cell_matches_manual_composition():
    """Test a one-node cell against preprocessing plus two mixed edges by hand."""
    cell = SearchCell(
        LIGHT_PRIMITIVES,
        nodes=1,
        c_prev_prev=4,
        c_prev=4,
        channels=4,
        reduction=False,
        reduction_prev=False,
        seed=3,
        index=1,
    )
    rng = np.random.default_rng(9)
    s0 = Tensor(rng.standard_normal((2, 4, 5, 5)))
    s1 = Tensor(rng.standard_normal((2, 4, 5, 5)))
    alpha = rng.standard_normal((edge_count(1), 9))

    h0 = cell.preprocess0(s0)
    h1 = cell.preprocess1(s1)
    node = mixed_forward(cell.edges[0], h0, Tensor(alpha[0])).data
    node = node + mixed_forward(cell.edges[1], h1, Tensor(alpha[1])).data

    out = cell_forward(cell, s0, s1, Tensor(alpha))
    np.testing.assert_allclose(out.data, node, atol=1e-12, rtol=0)


def test_every_alpha_entry_receives_gradient():
    """Test that one backward pass reaches every logit of both alpha matrices."""
    net = SearchNetwork(FEATURE_DIM, channels=4, cells=3, seed=2)
    arch = net.new_arch_params()
    batch = (np.random.default_rng(1).standard_normal((4, 8, FEATURE_DIM)), np.array([0, 1, 0, 1]))
    _, _, grads = _loss_and_grads(Supernet(net, arch), arch.tensors(), batch, batch_id=0)
    assert len(grads) == 2
    for grad in grads:
        assert grad.shape == (14, 9)
        assert (grad != 0).all()
